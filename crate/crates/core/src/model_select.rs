//! Choice of the number of missing actors by V-fold cross-validated
//! pairwise composite likelihood (PCL).
//!
//! Each fold refits the whole pipeline on the training sites, draws trees
//! from the fitted prior `p_β` with a rejection sampler, and scores the
//! held-out sites by bivariate PLN densities of every species pair under
//! the tree-induced marginal covariance.

use std::collections::HashMap;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::CountDataset;
use crate::error::{Error, Result};
use crate::init::{candidate_cliques, default_cardinality, init_params, InitState};
use crate::pln::{bivariate_pln_logpdf, fit_pln, PlnFit};
use crate::tree_algebra::{
    edge_marginals, log_partition, ordered, Edge, EdgeWeightMatrix,
};
use crate::vem::{observed_only_init, run_candidates, run_vem, OmegaUpdate, VemConfig, VemState};

/// Forced-graph draws used to estimate `E[1/|T(G)| | G ∋ T]`.
pub const FORCED_GRAPH_DRAWS: usize = 64;
/// Retries for drawing a connected proposal graph.
pub const CONNECTIVITY_RETRIES: usize = 1000;
const PILOT_PROPOSALS: usize = 50;
const PILOT_GRAPHS: usize = 200;
/// Connectivity rate the proposal scale must reach unless capped.
const TARGET_CONNECTIVITY: f64 = 0.5;
const TUNING_WINDOW: usize = 200;
const MIN_ACCEPTANCE: f64 = 0.01;
const MAX_RESTARTS: usize = 50;
const LN_10: f64 = std::f64::consts::LN_10;

/// A spanning tree drawn from `p_β`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TreeSample {
    /// `q − 1` edges `(j, k)` with `j < k`, sorted.
    pub edges: Vec<Edge>,
    /// Proposals drawn until this tree was accepted.
    pub proposals: usize,
}

/// Counters of one sampling batch.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SamplerStats {
    pub proposals: usize,
    pub accepted: usize,
    pub restarts: usize,
    /// Final `log M`.
    pub log_bound: f64,
    /// `log p^{p−2}/m_β`.
    pub log_mst_bound: f64,
    /// Proposal scale `c` in `Q = min(1, c P)`: doubled from `1/max P`
    /// until half the pilot graphs are connected, and never above the
    /// scale giving mean degree `2 log q`.
    pub scale: f64,
}

/// Rejection sampler for `p_β(T) ∝ Π_{jk∈T} β_jk`.
pub struct TreeSampler {
    log_beta: DMatrix<f64>,
    log_b: f64,
    /// Proposal edge probabilities, zero on structural zeros.
    prop: DMatrix<f64>,
    log_mst_bound: f64,
    scale: f64,
    forced_draws: usize,
    rng: ChaCha8Rng,
}

/// Smallest `c` with mean degree of `min(1, cP)` at least `target`.
fn proposal_scale(p: &DMatrix<f64>, target: f64) -> f64 {
    let q = p.nrows();
    let degree = |c: f64| {
        let mut s = 0.0;
        for j in 0..q {
            for k in (j + 1)..q {
                s += (c * p[(j, k)]).min(1.0);
            }
        }
        2.0 * s / q as f64
    };
    let positive: Vec<f64> = (0..q)
        .flat_map(|j| ((j + 1)..q).map(move |k| (j, k)))
        .map(|(j, k)| p[(j, k)])
        .filter(|&v| v > 0.0)
        .collect();
    let pmin = positive.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (1.0, 1.0 / pmin);
    if degree(lo) >= target {
        return lo;
    }
    if degree(hi) < target {
        return hi;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if degree(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo < 1.0 + 1e-9 {
            break;
        }
    }
    hi
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet((0..n).collect())
    }
    fn find(&mut self, a: usize) -> usize {
        let mut r = a;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut a = a;
        while self.0[a] != r {
            let next = self.0[a];
            self.0[a] = r;
            a = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra] = rb;
        true
    }
}

/// Minimum spanning tree of `cost` over the edges where it is finite.
fn minimum_spanning_tree(cost: &DMatrix<f64>) -> Option<(f64, Vec<Edge>)> {
    let q = cost.nrows();
    let mut edges: Vec<(f64, Edge)> = Vec::new();
    for j in 0..q {
        for k in (j + 1)..q {
            if cost[(j, k)].is_finite() {
                edges.push((cost[(j, k)], (j, k)));
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ds = DisjointSet::new(q);
    let mut total = 0.0;
    let mut tree = Vec::with_capacity(q - 1);
    for (c, (j, k)) in edges {
        if ds.union(j, k) {
            total += c;
            tree.push((j, k));
        }
    }
    (tree.len() + 1 == q).then_some((total, tree))
}

/// `log |T(G)|` by Cholesky of a reduced Laplacian.
fn log_tree_count(adj: &[Vec<bool>]) -> Result<f64> {
    let q = adj.len();
    let mut lap: DMatrix<f64> = DMatrix::zeros(q - 1, q - 1);
    for j in 1..q {
        let mut deg = 0.0;
        for k in 0..q {
            if k != j && adj[j][k] {
                deg += 1.0;
                if k > 0 {
                    lap[(j - 1, k - 1)] = -1.0;
                }
            }
        }
        lap[(j - 1, j - 1)] = deg;
    }
    if let Some(ch) = lap.clone().cholesky() {
        return Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>());
    }
    let lw = DMatrix::from_fn(q, q, |j, k| if j != k && adj[j][k] { 0.0 } else { f64::NEG_INFINITY });
    log_partition(&EdgeWeightMatrix::from_masked_log_weights(&lw)?)
}

fn is_connected(adj: &[Vec<bool>]) -> bool {
    let q = adj.len();
    let mut seen = vec![false; q];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for v in 0..q {
            if adj[u][v] && !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == q
}

/// Graph with independent edges of probability `prop`, plus `forced`.
fn draw_graph(prop: &DMatrix<f64>, forced: Option<&[Edge]>, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    let q = prop.nrows();
    let mut adj = vec![vec![false; q]; q];
    for j in 0..q {
        for k in (j + 1)..q {
            let on = rng.random::<f64>() < prop[(j, k)];
            adj[j][k] = on;
            adj[k][j] = on;
        }
    }
    if let Some(t) = forced {
        for &(j, k) in t {
            adj[j][k] = true;
            adj[k][j] = true;
        }
    }
    adj
}

/// Uniform spanning tree of a connected graph by Wilson's loop-erased walks.
fn wilson(adj: &[Vec<bool>], rng: &mut impl Rng) -> Vec<Edge> {
    let q = adj.len();
    let neighbours: Vec<Vec<usize>> = (0..q).map(|u| (0..q).filter(|&v| adj[u][v]).collect()).collect();
    let mut in_tree = vec![false; q];
    let mut next = vec![usize::MAX; q];
    let root = rng.random_range(0..q);
    in_tree[root] = true;
    for start in 0..q {
        let mut u = start;
        while !in_tree[u] {
            let nb = &neighbours[u];
            next[u] = nb[rng.random_range(0..nb.len())];
            u = next[u];
        }
        let mut u = start;
        while !in_tree[u] {
            in_tree[u] = true;
            u = next[u];
        }
    }
    let mut edges: Vec<Edge> = (0..q).filter(|&u| u != root).map(|u| ordered(u, next[u])).collect();
    edges.sort_unstable();
    edges
}

impl TreeSampler {
    pub fn new(beta: &EdgeWeightMatrix, seed: u64) -> Result<Self> {
        Self::with_forced_draws(beta, seed, FORCED_GRAPH_DRAWS)
    }

    pub fn with_forced_draws(beta: &EdgeWeightMatrix, seed: u64, forced_draws: usize) -> Result<Self> {
        let q = beta.dim();
        if q < 2 || forced_draws == 0 {
            return Err(Error::InvalidInput("sampler needs q >= 2 and at least one forced draw".into()));
        }
        let beta = beta.renormalized();
        let p = edge_marginals(&beta)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = proposal_scale(p.matrix(), 2.0 * (q as f64).ln());
        let pmax = p.matrix().max();
        let mut scale = (1.0 / pmax).min(cap);
        let mut prop = p.matrix().map(|v| (scale * v).min(1.0));
        while scale < cap {
            let connected = (0..PILOT_GRAPHS).filter(|_| is_connected(&draw_graph(&prop, None, &mut rng))).count();
            if connected as f64 >= TARGET_CONNECTIVITY * PILOT_GRAPHS as f64 {
                break;
            }
            scale = (2.0 * scale).min(cap);
            prop = p.matrix().map(|v| (scale * v).min(1.0));
        }
        let log_b = log_partition(&beta)?;
        let log_beta = beta.log_weights().clone();
        let cost = DMatrix::from_fn(q, q, |j, k| {
            if j != k && prop[(j, k)] > 0.0 && log_beta[(j, k)].is_finite() {
                prop[(j, k)].ln() - log_beta[(j, k)]
            } else {
                f64::INFINITY
            }
        });
        let (mst, _) = minimum_spanning_tree(&cost)
            .ok_or_else(|| Error::Sampler("proposal graph support is disconnected".into()))?;
        let log_m = mst + log_b;
        let log_mst_bound = (q as f64 - 2.0) * (q as f64).ln() - log_m;
        Ok(TreeSampler {
            log_beta,
            log_b,
            prop,
            log_mst_bound,
            scale,
            forced_draws,
            rng,
        })
    }

    pub fn proposal_probabilities(&self) -> &DMatrix<f64> {
        &self.prop
    }

    pub fn log_mst_bound(&self) -> f64 {
        self.log_mst_bound
    }

    fn draw_graph(&mut self, forced: Option<&[Edge]>) -> Vec<Vec<bool>> {
        draw_graph(&self.prop, forced, &mut self.rng)
    }

    fn propose(&mut self) -> Result<Vec<Edge>> {
        for _ in 0..CONNECTIVITY_RETRIES {
            let g = self.draw_graph(None);
            if is_connected(&g) {
                return Ok(wilson(&g, &mut self.rng));
            }
        }
        Err(Error::Sampler(format!("no connected proposal graph in {CONNECTIVITY_RETRIES} attempts")))
    }

    /// `log p_β(T)`.
    pub fn log_target(&self, tree: &[Edge]) -> f64 {
        tree.iter().map(|&(j, k)| self.log_beta[(j, k)]).sum::<f64>() - self.log_b
    }

    /// Monte-Carlo estimate of `log q(T)` up to the connectivity constant.
    fn log_proposal(&mut self, tree: &[Edge]) -> Result<f64> {
        let log_pr: f64 = tree.iter().map(|&(j, k)| self.prop[(j, k)].ln()).sum();
        let mut inv = Vec::with_capacity(self.forced_draws);
        for _ in 0..self.forced_draws {
            let g = self.draw_graph(Some(tree));
            inv.push(-log_tree_count(&g)?);
        }
        let lse = crate::tree_algebra::log_sum_exp(&inv);
        Ok(log_pr + lse - (self.forced_draws as f64).ln())
    }

    fn log_ratio(&mut self, tree: &[Edge]) -> Result<f64> {
        Ok(self.log_target(tree) - self.log_proposal(tree)?)
    }

    /// Draws `count` independent trees. Any change of the bound `M`
    /// discards the batch and starts over, so that every returned tree
    /// was accepted under the same `M`.
    pub fn sample(&mut self, count: usize) -> Result<(Vec<TreeSample>, SamplerStats)> {
        let mut stats = SamplerStats { log_mst_bound: self.log_mst_bound, scale: self.scale, ..Default::default() };
        let mut max_seen = f64::NEG_INFINITY;
        for _ in 0..PILOT_PROPOSALS {
            let t = self.propose()?;
            max_seen = max_seen.max(self.log_ratio(&t)?);
            stats.proposals += 1;
        }
        let mut log_m = self.log_mst_bound.min(max_seen + 6.0 * LN_10).max(max_seen);
        'batch: loop {
            let mut out = Vec::with_capacity(count);
            let mut window = (0usize, 0usize);
            let mut since_last = 0usize;
            while out.len() < count {
                let t = self.propose()?;
                stats.proposals += 1;
                since_last += 1;
                window.0 += 1;
                let lr = self.log_ratio(&t)?;
                max_seen = max_seen.max(lr);
                if lr > log_m {
                    stats.restarts += 1;
                    if stats.restarts > MAX_RESTARTS {
                        return Err(Error::Sampler(format!(
                            "acceptance ratio exp({:.3}) > 1 for tree {t:?} after {MAX_RESTARTS} restarts",
                            lr - log_m
                        )));
                    }
                    log_m = lr + LN_10.min(self.log_mst_bound - lr).max(0.0);
                    continue 'batch;
                }
                if self.rng.random::<f64>().ln() < lr - log_m {
                    out.push(TreeSample { edges: t, proposals: since_last });
                    stats.accepted += 1;
                    window.1 += 1;
                    since_last = 0;
                }
                if window.0 >= TUNING_WINDOW {
                    let rate = window.1 as f64 / window.0 as f64;
                    window = (0, 0);
                    if rate < MIN_ACCEPTANCE && log_m - LN_10 >= max_seen {
                        log_m -= LN_10;
                        stats.restarts += 1;
                        if stats.restarts > MAX_RESTARTS {
                            break 'batch;
                        }
                        continue 'batch;
                    }
                }
            }
            stats.log_bound = log_m;
            return Ok((out, stats));
        }
        Err(Error::Sampler(format!("sampler failed to settle on a bound after {MAX_RESTARTS} restarts")))
    }
}

/// One tree from `p_β`.
pub fn sample_tree(beta: &EdgeWeightMatrix, seed: u64) -> Result<TreeSample> {
    let (mut v, _) = TreeSampler::new(beta, seed)?.sample(1)?;
    Ok(v.pop().expect("one tree requested"))
}

/// `count` trees from `p_β`.
pub fn sample_trees(beta: &EdgeWeightMatrix, count: usize, seed: u64) -> Result<(Vec<TreeSample>, SamplerStats)> {
    TreeSampler::new(beta, seed)?.sample(count)
}

/// Marginal correlation matrix of the first `p` nodes under the unit-variance
/// Gaussian tree with edge correlations `rho`: the product of correlations
/// along the path joining two nodes.
pub fn tree_marginal_correlation(rho: &DMatrix<f64>, tree: &[Edge], p: usize) -> DMatrix<f64> {
    let q = rho.nrows();
    let mut nb: Vec<Vec<usize>> = vec![Vec::new(); q];
    for &(j, k) in tree {
        nb[j].push(k);
        nb[k].push(j);
    }
    let mut out = DMatrix::identity(p, p);
    let mut corr = vec![0.0; q];
    let mut seen = vec![false; q];
    for s in 0..p {
        seen.iter_mut().for_each(|v| *v = false);
        corr[s] = 1.0;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &v in &nb[u] {
                if !seen[v] {
                    seen[v] = true;
                    corr[v] = corr[u] * rho[(u, v)];
                    stack.push(v);
                }
            }
        }
        for t in 0..p {
            out[(s, t)] = corr[t];
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossValConfig {
    pub r_grid: Vec<usize>,
    pub folds: usize,
    pub trees: usize,
    pub seed: u64,
    pub vem: VemConfig,
    /// sPCA cardinality; `max(3, ⌈p/3⌉)` when absent.
    pub cardinality: Option<usize>,
    pub pln_max_iter: usize,
    pub pln_tol: f64,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        CrossValConfig {
            r_grid: vec![0, 1, 2, 3],
            folds: 10,
            trees: 100,
            seed: 1,
            vem: VemConfig::default(),
            cardinality: None,
            pln_max_iter: 300,
            pln_tol: 1e-8,
        }
    }
}

/// Random fold labels with sizes differing by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("need 2 <= folds <= n, got {folds} folds for {n} sites")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in idx.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^ (x >> 33)
}

/// Fits `r` missing actors on `data`: one VEM per sPCA candidate, best bound kept.
pub fn fit_network(
    data: &CountDataset,
    r: usize,
    vem: &VemConfig,
    cardinality: Option<usize>,
    pln_max_iter: usize,
    pln_tol: f64,
) -> Result<(PlnFit, VemState)> {
    let fit = fit_pln(data, pln_max_iter, pln_tol)?;
    let state = fit_network_from_pln(&fit, r, vem, cardinality)?;
    Ok((fit, state))
}

pub fn fit_network_from_pln(
    fit: &PlnFit,
    r: usize,
    vem: &VemConfig,
    cardinality: Option<usize>,
) -> Result<VemState> {
    if r == 0 {
        return run_vem(fit, &observed_only_init(fit.n(), fit.p())?, vem);
    }
    let card = cardinality.unwrap_or_else(|| default_cardinality(fit.p()));
    let inits: Vec<InitState> = candidate_cliques(&fit.m_obs, r, card)?
        .iter()
        .map(|c| init_params(&fit.m_obs, c))
        .collect::<Result<_>>()?;
    let (mut runs, best) = run_candidates(fit, &inits, vem);
    match best {
        Some(b) => Ok(std::mem::replace(&mut runs[b].result, Err(Error::Degenerate(String::new())))?),
        None => {
            let reason = runs
                .into_iter()
                .find_map(|c| c.result.err())
                .map(|e| e.to_string())
                .unwrap_or_else(|| "all candidates ended in degenerate solutions".into());
            Err(Error::Degenerate(format!("no usable VEM run with r = {r}: {reason}")))
        }
    }
}

/// Average over sampled trees of the per-site pairwise composite
/// log-likelihood of `test` under a fitted model.
pub fn fold_pcl(
    fit: &PlnFit,
    state: &VemState,
    test: &CountDataset,
    trees: &[TreeSample],
) -> Result<f64> {
    let p = fit.p();
    let mu = fit.linear_predictor(test);
    let y = test.counts();
    let m = test.n();
    let omega: &OmegaUpdate = &state.omega;
    let mut cache: HashMap<(usize, usize, u64), f64> = HashMap::new();
    let mut total = 0.0;
    for t in trees {
        let c = tree_marginal_correlation(&omega.rho, &t.edges, p);
        let mut s = 0.0;
        for j in 0..p {
            for k in (j + 1)..p {
                let s12 = fit.sigma[j] * fit.sigma[k] * c[(j, k)];
                let key_c = c[(j, k)].to_bits();
                for i in 0..m {
                    let key = (i * p + j, k, key_c);
                    let v = match cache.get(&key) {
                        Some(&v) => v,
                        None => {
                            let v = bivariate_pln_logpdf(
                                y[(i, j)] as u64,
                                y[(i, k)] as u64,
                                mu[(i, j)],
                                mu[(i, k)],
                                fit.sigma[j] * fit.sigma[j],
                                fit.sigma[k] * fit.sigma[k],
                                s12,
                            )?;
                            cache.insert(key, v);
                            v
                        }
                    };
                    s += v;
                }
            }
        }
        total += s / m as f64;
    }
    Ok(total / trees.len() as f64)
}

/// Cross-validated PCL for one `r`, with per-fold scores (`None` for dropped folds).
pub fn pcl_folds(data: &CountDataset, r: usize, config: &CrossValConfig) -> Result<Vec<Option<f64>>> {
    if config.trees == 0 {
        return Err(Error::Config("at least one tree per fold is required".into()));
    }
    let folds = fold_assignment(data.n(), config.folds, config.seed)?;
    let scores: Vec<Option<f64>> = folds
        .par_iter()
        .enumerate()
        .map(|(v, test_idx)| {
            let train_idx: Vec<usize> = (0..data.n()).filter(|i| test_idx.binary_search(i).is_err()).collect();
            let run = || -> Result<f64> {
                let train = data.select_rows(&train_idx)?;
                let test = data.select_rows(test_idx)?;
                let (fit, state) =
                    fit_network(&train, r, &config.vem, config.cardinality, config.pln_max_iter, config.pln_tol)?;
                let (trees, _) = sample_trees(&state.beta, config.trees, mix_seed(config.seed, r as u64, v as u64))?;
                fold_pcl(&fit, &state, &test, &trees)
            };
            match run() {
                Ok(s) => Some(s),
                Err(e) => {
                    warn!("fold {} dropped for r = {r}: {e}", v + 1);
                    None
                }
            }
        })
        .collect();
    let dropped = scores.iter().filter(|s| s.is_none()).count();
    if 2 * dropped >= scores.len() {
        return Err(Error::Selection(format!("{dropped} of {} folds failed for r = {r}", scores.len())));
    }
    Ok(scores)
}

fn mean_of(scores: &[Option<f64>]) -> f64 {
    let kept: Vec<f64> = scores.iter().flatten().copied().collect();
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn pcl_score(data: &CountDataset, r: usize, config: &CrossValConfig) -> Result<f64> {
    Ok(mean_of(&pcl_folds(data, r, config)?))
}

#[derive(Clone, Debug, Serialize)]
pub struct PclRow {
    pub r: usize,
    pub mean: f64,
    pub folds: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionTable {
    pub best_r: usize,
    pub rows: Vec<PclRow>,
}

pub fn select_r(data: &CountDataset, config: &CrossValConfig) -> Result<SelectionTable> {
    if config.r_grid.is_empty() {
        return Err(Error::Config("empty r grid".into()));
    }
    let rows: Vec<PclRow> = config
        .r_grid
        .iter()
        .map(|&r| {
            let folds = pcl_folds(data, r, config)?;
            let mean = mean_of(&folds);
            info!("r = {r}: PCL = {mean:.4}");
            Ok(PclRow { r, mean, folds })
        })
        .collect::<Result<_>>()?;
    let best_r = rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).map(|r| r.r).expect("non-empty grid");
    Ok(SelectionTable { best_r, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_replicate, SimConfig};
    use crate::tree_algebra::{enumerate_trees, is_spanning_tree};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Uniform};

    fn random_beta(q: usize, spread: f64, seed: u64) -> EdgeWeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(-spread, spread).unwrap();
        let mut lw = DMatrix::zeros(q, q);
        for j in 0..q {
            for k in (j + 1)..q {
                let v = u.sample(&mut rng);
                lw[(j, k)] = v;
                lw[(k, j)] = v;
            }
        }
        EdgeWeightMatrix::from_log_weights(&lw).unwrap()
    }

    fn total_variation(beta: &EdgeWeightMatrix, samples: &[TreeSample]) -> f64 {
        let q = beta.dim();
        let lz = beta.log_partition().unwrap();
        let mut counts: HashMap<Vec<Edge>, usize> = HashMap::new();
        for s in samples {
            *counts.entry(s.edges.clone()).or_default() += 1;
        }
        let n = samples.len() as f64;
        let mut tv = 0.0;
        for t in enumerate_trees(q).unwrap() {
            let exact = (beta.tree_log_weight(&t) - lz).exp();
            let emp = *counts.get(&t).unwrap_or(&0) as f64 / n;
            tv += (exact - emp).abs();
        }
        0.5 * tv
    }

    #[test]
    fn uniform_three_nodes() {
        let beta = EdgeWeightMatrix::uniform(3).unwrap();
        let (s, _) = sample_trees(&beta, 10_000, 4).unwrap();
        assert!(total_variation(&beta, &s) <= 0.03);
    }

    #[test]
    fn five_nodes_matches_enumeration() {
        for seed in 0..1 {
            let beta = random_beta(5, 1.5, 100 + seed);
            let (s, stats) = sample_trees(&beta, 20_000, seed).unwrap();
            assert!(s.iter().all(|t| is_spanning_tree(&t.edges, 5)));
            let tv = total_variation(&beta, &s);
            assert!(tv <= 0.05, "seed {seed}: TV = {tv}, stats {stats:?}");
        }
    }

    #[test]
    fn dominant_edge_frequency() {
        let mut lw = DMatrix::zeros(5, 5);
        lw[(1, 3)] = 3.0;
        lw[(3, 1)] = 3.0;
        let beta = EdgeWeightMatrix::from_log_weights(&lw).unwrap();
        let exact = beta.edge_marginals().unwrap().get(1, 3);
        let (s, _) = sample_trees(&beta, 5000, 9).unwrap();
        let freq = s.iter().filter(|t| t.edges.contains(&(1, 3))).count() as f64 / 5000.0;
        assert!(freq >= exact - 0.02, "{freq} vs {exact}");
    }

    #[test]
    fn structural_zeros_never_sampled() {
        let beta = EdgeWeightMatrix::uniform(6).unwrap().without_edges(|j, k| j >= 4 && k >= 4);
        let (s, _) = sample_trees(&beta, 500, 2).unwrap();
        assert!(s.iter().all(|t| !t.edges.contains(&(4, 5)) && is_spanning_tree(&t.edges, 6)));
    }

    #[test]
    fn mst_bound_dominates_ratios() {
        let beta = random_beta(5, 1.0, 3);
        let mut sm = TreeSampler::new(&beta, 1).unwrap();
        for t in enumerate_trees(5).unwrap() {
            // Pr{G ∋ T} alone must satisfy the bound, the 1/|T(G)| term adds at least q^{-(q-2)}.
            let lr = sm.log_ratio(&t).unwrap();
            assert!(lr <= sm.log_mst_bound() + 1e-9);
        }
    }

    #[test]
    fn tree_count_matches_partition() {
        let q = 6;
        let adj: Vec<Vec<bool>> =
            (0..q).map(|j| (0..q).map(|k| j != k && !(j == 0 && k == 1) && !(j == 1 && k == 0)).collect()).collect();
        let lw = DMatrix::from_fn(q, q, |j, k| if adj[j][k] { 0.0 } else { f64::NEG_INFINITY });
        let exact = log_partition(&EdgeWeightMatrix::from_masked_log_weights(&lw).unwrap()).unwrap();
        assert_relative_eq!(log_tree_count(&adj).unwrap(), exact, epsilon = 1e-10);
        // K_6 minus an edge: 6^4 (1 - 2/6) = 864.
        assert_relative_eq!(exact.exp(), 864.0, epsilon = 1e-8);
    }

    #[test]
    fn marginal_correlation_matches_schur_complement() {
        let q = 7;
        let p = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tree = wilson(&vec![vec![true; q]; q].iter().enumerate().map(|(j, r)| {
            r.iter().enumerate().map(|(k, _)| j != k).collect()
        }).collect::<Vec<Vec<bool>>>(), &mut rng);
        let rho = DMatrix::from_fn(q, q, |j, k| if j == k { 1.0 } else { 0.8 * (((j + k) as f64) * 1.3).sin() });
        let om = OmegaUpdate {
            omega: rho.map(|r| -r / (1.0 - r * r)),
            rho: rho.clone(),
            log_det_r: rho.map(|r| (1.0 - r * r).ln()),
        };
        let prec = om.tree_precision(&tree);
        let oo = prec.view((0, 0), (p, p)).into_owned();
        let oh = prec.view((0, p), (p, q - p)).into_owned();
        let hh = prec.view((p, p), (q - p, q - p)).into_owned();
        let schur = &oo - &oh * hh.try_inverse().unwrap() * oh.transpose();
        let cov = schur.try_inverse().unwrap();
        let c = tree_marginal_correlation(&rho, &tree, p);
        assert!((cov - c).amax() < 1e-10);
    }

    #[test]
    fn folds_balanced() {
        let f = fold_assignment(23, 5, 1).unwrap();
        let sizes: Vec<usize> = f.iter().map(|v| v.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(fold_assignment(5, 6, 1).is_err());
    }

    fn small_data(seed: u64) -> CountDataset {
        let cfg = SimConfig { p: 6, n: 40, ..SimConfig::default() };
        simulate_replicate(&cfg, seed).unwrap().dataset().unwrap()
    }

    #[test]
    fn single_grid_value_and_determinism() {
        let data = small_data(2);
        let cfg = CrossValConfig { r_grid: vec![0], folds: 3, trees: 5, ..CrossValConfig::default() };
        let a = select_r(&data, &cfg).unwrap();
        assert_eq!(a.best_r, 0);
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].folds.len(), 3);
        let b = select_r(&data, &cfg).unwrap();
        assert_eq!(a.rows[0].mean.to_bits(), b.rows[0].mean.to_bits());
    }

    #[test]
    fn pcl_with_hidden_actor_runs() {
        let data = small_data(3);
        let cfg = CrossValConfig { r_grid: vec![0, 1], folds: 3, trees: 5, ..CrossValConfig::default() };
        let t = select_r(&data, &cfg).unwrap();
        assert!(t.rows.iter().all(|r| r.mean.is_finite() && r.mean < 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn samples_are_spanning_trees(q in 3usize..9, seed in 0u64..1000, spread in 0.1f64..3.0) {
            let beta = random_beta(q, spread, seed);
            let (s, _) = sample_trees(&beta, 20, seed).unwrap();
            for t in &s {
                prop_assert!(is_spanning_tree(&t.edges, q));
                prop_assert!(t.edges.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
