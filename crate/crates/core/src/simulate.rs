//! Synthetic replicates with a known dependency graph and one withheld node.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::Serialize;

use crate::data::CountDataset;
use crate::error::{Error, Result};

/// Largest admissible log-rate; larger values are clipped.
pub const MAX_LOG_RATE: f64 = 20.0;

/// Degree-based influence of the withheld node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum InfluenceClass {
    Minor,
    Medium,
    Major,
}

impl InfluenceClass {
    pub fn from_degree(degree: usize) -> Self {
        match degree {
            0..=5 => InfluenceClass::Minor,
            6..=7 => InfluenceClass::Medium,
            _ => InfluenceClass::Major,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InfluenceClass::Minor => "Minor",
            InfluenceClass::Medium => "Medium",
            InfluenceClass::Major => "Major",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimConfig {
    /// Observed species; the graph has `p + 1` nodes.
    pub p: usize,
    pub n: usize,
    /// Intercept shared by all species.
    pub intercept: f64,
    /// Latent scale shared by all species.
    pub sigma: f64,
    /// Smallest eigenvalue allowed for the true precision matrix.
    pub min_eigenvalue: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { p: 14, n: 100, intercept: 2f64.ln(), sigma: 1.0, min_eigenvalue: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct SimReplicate {
    /// `(p+1) × (p+1)` 0/1 adjacency in original node order.
    pub adjacency: DMatrix<u8>,
    pub hidden_index: usize,
    pub omega_true: DMatrix<f64>,
    pub r_true: DMatrix<f64>,
    pub sigma_true: DVector<f64>,
    /// `n × (p+1)` latent draws in original node order.
    pub u: DMatrix<f64>,
    /// `n × p` counts without the hidden node.
    pub y: DMatrix<f64>,
    pub influence_class: InfluenceClass,
    pub seed: u64,
}

impl SimReplicate {
    pub fn q(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn hidden_degree(&self) -> usize {
        degree(&self.adjacency, self.hidden_index)
    }

    /// Original indices of the observed nodes, in column order of `y`.
    pub fn observed_nodes(&self) -> Vec<usize> {
        (0..self.q()).filter(|&v| v != self.hidden_index).collect()
    }

    /// Adjacency with observed nodes first (in `y` column order) and the
    /// hidden node last, matching the node layout used by inference.
    pub fn inference_adjacency(&self) -> DMatrix<u8> {
        let mut order = self.observed_nodes();
        order.push(self.hidden_index);
        let q = self.q();
        DMatrix::from_fn(q, q, |a, b| self.adjacency[(order[a], order[b])])
    }

    /// Observed-column indices of the hidden node's neighbours.
    pub fn true_clique(&self) -> Vec<usize> {
        self.observed_nodes()
            .iter()
            .enumerate()
            .filter(|(_, &v)| self.adjacency[(v, self.hidden_index)] == 1)
            .map(|(col, _)| col)
            .collect()
    }

    pub fn hidden_latent(&self) -> DVector<f64> {
        self.u.column(self.hidden_index).into_owned()
    }

    pub fn dataset(&self) -> Result<CountDataset> {
        CountDataset::from_counts(self.y.clone())
    }
}

fn degree(adj: &DMatrix<u8>, v: usize) -> usize {
    adj.row(v).iter().map(|&a| a as usize).sum()
}

/// Preferential attachment: each new node links to one existing node chosen
/// with probability proportional to its degree. The result is a tree.
pub fn scale_free_graph(q: usize, seed: u64) -> Result<DMatrix<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scale_free_graph_with(q, &mut rng)
}

fn scale_free_graph_with(q: usize, rng: &mut impl Rng) -> Result<DMatrix<u8>> {
    if q < 5 {
        return Err(Error::InvalidInput(format!("scale-free graph needs q >= 5, got {q}")));
    }
    let mut adj = DMatrix::zeros(q, q);
    adj[(0, 1)] = 1;
    adj[(1, 0)] = 1;
    // Every edge endpoint appears once, so a uniform pick is degree-weighted.
    let mut ends = vec![0usize, 1];
    for v in 2..q {
        let u = ends[rng.random_range(0..ends.len())];
        adj[(u, v)] = 1;
        adj[(v, u)] = 1;
        ends.push(u);
        ends.push(v);
    }
    Ok(adj)
}

/// `Ω = I + δ·(S ⊙ A)` with random symmetric signs `S` and the largest
/// `δ ≤ 1` keeping `λ_min(Ω) ≥ min_eig`; `R` is `Ω^{-1}` scaled to unit
/// diagonal.
pub fn precision_from_graph(
    adjacency: &DMatrix<u8>,
    min_eig: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    precision_from_graph_with(adjacency, min_eig, &mut rng)
}

fn precision_from_graph_with(
    adjacency: &DMatrix<u8>,
    min_eig: f64,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(0.0..1.0).contains(&min_eig) {
        return Err(Error::InvalidInput(format!("min eigenvalue must be in [0, 1), got {min_eig}")));
    }
    let q = adjacency.nrows();
    let mut signed: DMatrix<f64> = DMatrix::zeros(q, q);
    for j in 0..q {
        for k in (j + 1)..q {
            if adjacency[(j, k)] == 1 {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                signed[(j, k)] = s;
                signed[(k, j)] = s;
            }
        }
    }
    let lmin = signed.clone().symmetric_eigenvalues().min();
    let delta = if lmin < 0.0 { (1.0f64).min((1.0 - min_eig) / -lmin) } else { 1.0 };
    let omega = DMatrix::identity(q, q) + signed * delta;
    let cov = omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Degenerate("simulated precision is not positive definite".into()))?
        .inverse();
    let d = cov.diagonal().map(|v| 1.0 / v.sqrt());
    let r = DMatrix::from_fn(q, q, |j, k| if j == k { 1.0 } else { cov[(j, k)] * d[j] * d[k] });
    Ok((omega, r))
}

/// Draws `U_i ~ N(0, R)` and `Y_ij ~ Poisson(exp(o_ij + θ_j + σ_j U_ij))`.
///
/// Returns all columns; withholding is the caller's concern.
pub fn simulate_counts(
    r: &DMatrix<f64>,
    theta: &DVector<f64>,
    sigma: &DVector<f64>,
    offsets: Option<&DMatrix<f64>>,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_counts_with(r, theta, sigma, offsets, n, &mut rng)
}

fn simulate_counts_with(
    r: &DMatrix<f64>,
    theta: &DVector<f64>,
    sigma: &DVector<f64>,
    offsets: Option<&DMatrix<f64>>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = r.nrows();
    if theta.len() != q || sigma.len() != q {
        return Err(Error::InvalidInput("theta and sigma must have one entry per node".into()));
    }
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidInput("latent scales must be non-negative".into()));
    }
    if let Some(o) = offsets {
        if o.shape() != (n, q) {
            return Err(Error::InvalidInput("offsets must be n x q".into()));
        }
    }
    let l = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("correlation matrix is not positive definite".into()))?
        .unpack();
    let eps: DMatrix<f64> = DMatrix::from_fn(n, q, |_, _| StandardNormal.sample(rng));
    let u = eps * l.transpose();
    let mut y = DMatrix::zeros(n, q);
    let mut clipped = 0usize;
    for i in 0..n {
        for j in 0..q {
            let o = offsets.map_or(0.0, |o| o[(i, j)]);
            let mut eta = o + theta[j] + sigma[j] * u[(i, j)];
            if eta > MAX_LOG_RATE {
                eta = MAX_LOG_RATE;
                clipped += 1;
            }
            let rate = eta.exp();
            y[(i, j)] = if rate > 0.0 {
                Poisson::new(rate).map_err(|e| Error::Degenerate(e.to_string()))?.sample(rng)
            } else {
                0.0
            };
        }
    }
    if clipped > 0 {
        warn!("{clipped} simulated log-rates clipped at {MAX_LOG_RATE}");
    }
    Ok((u, y))
}

/// One complete replicate; bit-reproducible from `seed`.
pub fn simulate_replicate(config: &SimConfig, seed: u64) -> Result<SimReplicate> {
    let q = config.p + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adjacency = scale_free_graph_with(q, &mut rng)?;
    let (omega_true, r_true) = precision_from_graph_with(&adjacency, config.min_eigenvalue, &mut rng)?;
    let theta = DVector::from_element(q, config.intercept);
    let sigma_true = DVector::from_element(q, config.sigma);
    let (u, y_full) = simulate_counts_with(&r_true, &theta, &sigma_true, None, config.n, &mut rng)?;

    let degrees: Vec<usize> = (0..q).map(|v| degree(&adjacency, v)).collect();
    let max_deg = *degrees.iter().max().expect("non-empty graph");
    let hidden_index = degrees.iter().position(|&d| d == max_deg).expect("max degree exists");
    let observed: Vec<usize> = (0..q).filter(|&v| v != hidden_index).collect();
    let y = y_full.select_columns(observed.iter());
    Ok(SimReplicate {
        adjacency,
        hidden_index,
        omega_true,
        r_true,
        sigma_true,
        u,
        y,
        influence_class: InfluenceClass::from_degree(max_deg),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree_algebra::{is_spanning_tree, Edge};
    use std::collections::HashMap;

    fn edges(adj: &DMatrix<u8>) -> Vec<Edge> {
        let q = adj.nrows();
        let mut out = Vec::new();
        for j in 0..q {
            for k in (j + 1)..q {
                if adj[(j, k)] == 1 {
                    out.push((j, k));
                }
            }
        }
        out
    }

    #[test]
    fn scale_free_graph_is_connected_tree() {
        for seed in 0..20 {
            let adj = scale_free_graph(15, seed).unwrap();
            assert!(is_spanning_tree(&edges(&adj), 15));
            assert_eq!(adj.transpose(), adj);
        }
        assert!(scale_free_graph(4, 0).is_err());
    }

    #[test]
    fn influence_classes_span_expected_split() {
        let mut counts: HashMap<InfluenceClass, usize> = HashMap::new();
        let mut heavy = 0;
        for seed in 0..300 {
            let adj = scale_free_graph(15, seed).unwrap();
            let mut deg: Vec<usize> = (0..15).map(|v| degree(&adj, v)).collect();
            let max = *deg.iter().max().unwrap();
            *counts.entry(InfluenceClass::from_degree(max)).or_default() += 1;
            deg.sort_unstable();
            if max >= 2 * deg[7] {
                heavy += 1;
            }
        }
        // Reference split 100 / 132 / 68.
        for (class, lo, hi) in [
            (InfluenceClass::Minor, 50, 200),
            (InfluenceClass::Medium, 66, 264),
            (InfluenceClass::Major, 34, 136),
        ] {
            let c = counts.get(&class).copied().unwrap_or(0);
            assert!((lo..=hi).contains(&c), "{class:?}: {c}");
        }
        assert!(heavy >= 270);
    }

    #[test]
    fn empty_graph_gives_identity() {
        let (omega, r) = precision_from_graph(&DMatrix::zeros(5, 5), 0.1, 1).unwrap();
        assert_eq!(omega, DMatrix::identity(5, 5));
        assert_eq!(r, DMatrix::identity(5, 5));
    }

    #[test]
    fn single_edge_correlation_sign_opposes_precision() {
        let mut adj = DMatrix::zeros(3, 3);
        adj[(0, 1)] = 1;
        adj[(1, 0)] = 1;
        for seed in 0..10 {
            let (omega, r) = precision_from_graph(&adj, 0.1, seed).unwrap();
            assert!(omega[(0, 1)] != 0.0);
            assert!(r[(0, 1)] * omega[(0, 1)] < 0.0);
            assert_eq!(r[(0, 2)], 0.0);
        }
    }

    #[test]
    fn precision_constraints_hold() {
        for seed in 0..30 {
            let adj = scale_free_graph(15, seed).unwrap();
            let (omega, r) = precision_from_graph(&adj, 0.1, seed + 100).unwrap();
            assert!(omega.clone().symmetric_eigenvalues().min() >= 0.1 - 1e-12);
            for j in 0..15 {
                assert!((r[(j, j)] - 1.0).abs() < 1e-12);
                for k in 0..15 {
                    if j != k {
                        assert_eq!(omega[(j, k)] != 0.0, adj[(j, k)] == 1);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_scale_gives_plain_poisson() {
        let r = DMatrix::identity(3, 3);
        let theta = DVector::from_element(3, 1.5);
        let (_, y) = simulate_counts(&r, &theta, &DVector::zeros(3), None, 4000, 3).unwrap();
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() as f64 - 1.0);
        let rate = 1.5f64.exp();
        assert!((mean - rate).abs() < 4.0 * (rate / y.len() as f64).sqrt());
        assert!((var / mean - 1.0).abs() < 0.08);
    }

    #[test]
    fn identity_correlation_gives_uncorrelated_latents() {
        let n = 2000;
        let (u, _) = simulate_counts(
            &DMatrix::identity(4, 4),
            &DVector::zeros(4),
            &DVector::from_element(4, 1.0),
            None,
            n,
            8,
        )
        .unwrap();
        for j in 0..4 {
            for k in (j + 1)..4 {
                let rho = pearson(&u.column(j).into_owned(), &u.column(k).into_owned());
                assert!(rho.abs() <= 3.0 / (n as f64).sqrt(), "rho {rho}");
            }
        }
    }

    fn pearson(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let (ma, mb) = (a.mean(), b.mean());
        let ca = a.add_scalar(-ma);
        let cb = b.add_scalar(-mb);
        ca.dot(&cb) / (ca.norm() * cb.norm())
    }

    #[test]
    fn positive_latent_correlation_shows_in_counts() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 0.7, 1.0]);
        let theta = DVector::from_element(2, 2f64.ln());
        let sigma = DVector::from_element(2, 1.0);
        let mut positive = 0;
        for seed in 0..100 {
            let (_, y) = simulate_counts(&r, &theta, &sigma, None, 100, seed).unwrap();
            if pearson(&y.column(0).into_owned(), &y.column(1).into_owned()) > 0.0 {
                positive += 1;
            }
        }
        assert!(positive >= 95, "{positive}");
    }

    #[test]
    fn empirical_covariance_converges() {
        // E‖Ŝ − R‖_F² ≈ (q² + tr R²)/n, so the 5/√n bound is a small-q property.
        let n = 400;
        let mut adj = DMatrix::zeros(3, 3);
        for (j, k) in [(0, 1), (1, 2)] {
            adj[(j, k)] = 1;
            adj[(k, j)] = 1;
        }
        let mut total = 0.0;
        for seed in 0..20 {
            let (_, r) = precision_from_graph(&adj, 0.1, seed).unwrap();
            let (u, _) =
                simulate_counts(&r, &DVector::zeros(3), &DVector::from_element(3, 1.0), None, n, seed).unwrap();
            let emp = u.transpose() * &u / n as f64;
            total += (emp - &r).norm();
        }
        assert!(total / 20.0 <= 5.0 / (n as f64).sqrt());
    }

    #[test]
    fn replicate_is_reproducible_and_withholds_hub() {
        let cfg = SimConfig::default();
        let a = simulate_replicate(&cfg, 77).unwrap();
        let b = simulate_replicate(&cfg, 77).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.u, b.u);
        assert_eq!(a.y.ncols(), 14);
        let degs: Vec<usize> = (0..15).map(|v| degree(&a.adjacency, v)).collect();
        let max = *degs.iter().max().unwrap();
        assert_eq!(a.hidden_index, degs.iter().position(|&d| d == max).unwrap());
        assert_eq!(a.influence_class, InfluenceClass::from_degree(max));
        assert_eq!(a.true_clique().len(), max);
        assert!(!a.observed_nodes().contains(&a.hidden_index));
        let adj = a.inference_adjacency();
        assert_eq!(adj.row(14).iter().map(|&v| v as usize).sum::<usize>(), max);
    }

    #[test]
    fn influence_class_boundaries() {
        assert_eq!(InfluenceClass::from_degree(5), InfluenceClass::Minor);
        assert_eq!(InfluenceClass::from_degree(6), InfluenceClass::Medium);
        assert_eq!(InfluenceClass::from_degree(7), InfluenceClass::Medium);
        assert_eq!(InfluenceClass::from_degree(8), InfluenceClass::Major);
    }
}
