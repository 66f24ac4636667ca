//! Starting points for the missing actors: candidate neighbour cliques from
//! sparse PCA of the observed latent means, and initial hidden means.

use std::collections::BTreeSet;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tree_algebra::EdgeWeightMatrix;

const POWER_ITERS: usize = 500;

/// Default sPCA cardinality, `max(3, ceil(p/3))`, capped at `p`.
pub fn default_cardinality(p: usize) -> usize {
    3usize.max(p.div_ceil(3)).min(p)
}

/// Cliques and loadings for one initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// One sorted set of observed indices per missing actor.
    pub cliques: Vec<Vec<usize>>,
    /// Unit-norm loading per clique, zero outside it.
    pub loadings: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct InitState {
    pub cliques: Vec<Vec<usize>>,
    /// `n × r` initial hidden means with unit mean square per column.
    pub m_hidden0: DMatrix<f64>,
    pub beta0: EdgeWeightMatrix,
    /// Correlation of `[M_O, M_H⁰]`.
    pub r0: DMatrix<f64>,
}

impl InitState {
    pub fn r(&self) -> usize {
        self.cliques.len()
    }
}

fn covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.transpose() * &c / (n.max(2) - 1) as f64
}

fn leading_eigenvector(c: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(c.clone());
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    (val, eig.eigenvectors.column(idx).into_owned())
}

/// Keeps the `card` largest entries in magnitude; ties break to the lower index.
fn truncate(v: &DVector<f64>, card: usize) -> DVector<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = DVector::zeros(v.len());
    for &i in idx.iter().take(card) {
        out[i] = v[i];
    }
    out
}

/// Sparse loadings by truncated power iteration on the covariance of
/// `m_obs`, with projection deflation between components.
///
/// Returns fewer than `k` vectors if the deflated covariance vanishes.
pub fn spca_components(m_obs: &DMatrix<f64>, k: usize, card: usize) -> Result<Vec<DVector<f64>>> {
    let p = m_obs.ncols();
    if card == 0 || card > p {
        return Err(Error::InvalidInput(format!("cardinality must be in 1..={p}, got {card}")));
    }
    if k > p.min(m_obs.nrows()) {
        return Err(Error::InvalidInput(format!("cannot extract {k} components from {p} columns")));
    }
    let mut c = covariance(m_obs);
    let scale = c.trace().max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(k);
    for comp in 0..k {
        let (val, v0) = leading_eigenvector(&c);
        if val <= 1e-12 * scale {
            warn!("sparse PCA stopped after {comp} of {k} components: covariance is rank deficient");
            break;
        }
        let mut x = truncate(&v0, card).normalize();
        for _ in 0..POWER_ITERS {
            let cx = &c * &x;
            if cx.norm() <= 1e-14 * scale {
                break;
            }
            let mut next = truncate(&cx, card).normalize();
            if next.dot(&x) < 0.0 {
                next = -next;
            }
            let diff = (&next - &x).amax();
            x = next;
            if diff < 1e-12 {
                break;
            }
        }
        // Fix the sign so the largest entry is positive.
        let imax = x.iamax();
        if x[imax] < 0.0 {
            x = -x;
        }
        let proj = DMatrix::identity(p, p) - &x * x.transpose();
        c = &proj * c * &proj;
        out.push(x);
    }
    Ok(out)
}

fn support(v: &DVector<f64>) -> Vec<usize> {
    (0..v.len()).filter(|&i| v[i] != 0.0).collect()
}

fn complement(set: &[usize], p: usize) -> Vec<usize> {
    (0..p).filter(|i| !set.contains(i)).collect()
}

/// Unit-norm leading eigenvector of the covariance restricted to `clique`,
/// embedded in `p` coordinates.
pub fn clique_loading(m_obs: &DMatrix<f64>, clique: &[usize]) -> Result<DVector<f64>> {
    let p = m_obs.ncols();
    if clique.is_empty() || clique.iter().any(|&j| j >= p) {
        return Err(Error::InvalidInput(format!("clique {clique:?} is not a non-empty subset of 0..{p}")));
    }
    let sub = m_obs.select_columns(clique.iter());
    let (_, v) = leading_eigenvector(&covariance(&sub));
    let mut out = DVector::zeros(p);
    for (a, &j) in clique.iter().enumerate() {
        out[j] = v[a];
    }
    if out.sum() < 0.0 {
        out = -out;
    }
    Ok(out)
}

/// Builds candidates from component supports: for one actor the supports
/// of the first two components and their complements; for several actors,
/// the per-component supports plus one complement alternate per actor.
fn candidates_from_components(
    m_obs: &DMatrix<f64>,
    comps: &[DVector<f64>],
    r: usize,
) -> Result<Vec<Candidate>> {
    let p = m_obs.ncols();
    let mut out: Vec<Candidate> = Vec::new();
    let mut push = |cliques: Vec<Vec<usize>>, loadings: Vec<Option<DVector<f64>>>| -> Result<()> {
        if cliques.iter().any(|c| c.is_empty()) {
            return Ok(());
        }
        if out.iter().any(|c| c.cliques == cliques) {
            return Ok(());
        }
        let loadings = cliques
            .iter()
            .zip(loadings)
            .map(|(c, l)| l.map_or_else(|| clique_loading(m_obs, c), Ok))
            .collect::<Result<Vec<_>>>()?;
        out.push(Candidate { cliques, loadings });
        Ok(())
    };
    if r == 1 {
        for comp in comps.iter().take(2) {
            push(vec![support(comp)], vec![Some(comp.clone())])?;
        }
        for comp in comps.iter().take(2) {
            push(vec![complement(&support(comp), p)], vec![None])?;
        }
    } else {
        let used = &comps[..r.min(comps.len())];
        if used.len() < r {
            return Err(Error::Degenerate(format!(
                "only {} sparse components available for {r} missing actors",
                used.len()
            )));
        }
        let primary: Vec<Vec<usize>> = used.iter().map(support).collect();
        push(primary.clone(), used.iter().cloned().map(Some).collect())?;
        for a in 0..r {
            let mut cl = primary.clone();
            cl[a] = complement(&primary[a], p);
            let mut ld: Vec<Option<DVector<f64>>> = used.iter().cloned().map(Some).collect();
            ld[a] = None;
            push(cl, ld)?;
        }
    }
    Ok(out)
}

/// Candidate initializations for `r` missing actors.
pub fn candidate_cliques(m_obs: &DMatrix<f64>, r: usize, card: usize) -> Result<Vec<Candidate>> {
    if r == 0 {
        return Err(Error::InvalidInput("candidate cliques need r >= 1".into()));
    }
    let k = if r == 1 { 2 } else { r };
    let comps = spca_components(m_obs, k.min(m_obs.ncols()).min(m_obs.nrows()), card)?;
    if comps.is_empty() {
        return Err(Error::Degenerate("sparse PCA found no components".into()));
    }
    candidates_from_components(m_obs, &comps, r)
}

/// A user- or oracle-supplied initialization.
pub fn candidate_from_cliques(m_obs: &DMatrix<f64>, cliques: Vec<Vec<usize>>) -> Result<Candidate> {
    let mut cliques = cliques;
    for c in cliques.iter_mut() {
        c.sort_unstable();
        c.dedup();
    }
    let loadings = cliques.iter().map(|c| clique_loading(m_obs, c)).collect::<Result<Vec<_>>>()?;
    Ok(Candidate { cliques, loadings })
}

/// Runs [`candidate_cliques`] on `n_resamples` row subsamples of size
/// `frac · n` and returns the distinct candidates in order of appearance.
pub fn resample_cliques(
    m_obs: &DMatrix<f64>,
    r: usize,
    card: usize,
    n_resamples: usize,
    frac: f64,
    seed: u64,
) -> Result<Vec<Candidate>> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidInput(format!("resampling fraction must be in (0, 1), got {frac}")));
    }
    let n = m_obs.nrows();
    let size = ((frac * n as f64).round() as usize).clamp(2, n);
    let mut seen: BTreeSet<Vec<Vec<usize>>> = BTreeSet::new();
    let mut out = Vec::new();
    for b in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rows = sample(&mut rng, n, size).into_vec();
        rows.sort_unstable();
        let sub = m_obs.select_rows(rows.iter());
        let Ok(cands) = candidate_cliques(&sub, r, card) else { continue };
        for c in cands {
            if seen.insert(c.cliques.clone()) {
                // Loadings are recomputed on the full data.
                out.push(candidate_from_cliques(m_obs, c.cliques)?);
            }
        }
    }
    Ok(out)
}

/// Initial hidden means as standardized clique scores, the initial
/// correlation matrix, and uniform tree weights without hidden–hidden edges.
pub fn init_params(m_obs: &DMatrix<f64>, candidate: &Candidate) -> Result<InitState> {
    let (n, p) = m_obs.shape();
    let r = candidate.cliques.len();
    if candidate.loadings.len() != r {
        return Err(Error::InvalidInput("one loading per clique is required".into()));
    }
    for c in &candidate.cliques {
        if c.is_empty() || c.iter().any(|&j| j >= p) {
            return Err(Error::InvalidInput(format!("clique {c:?} must be a non-empty subset of 0..{p}")));
        }
    }
    let mut m_hidden0 = DMatrix::zeros(n, r);
    for (h, l) in candidate.loadings.iter().enumerate() {
        let mut score = m_obs * l;
        let mean = score.mean();
        score.add_scalar_mut(-mean);
        let ms = score.norm_squared() / n as f64;
        if !(ms > 1e-20) {
            return Err(Error::Degenerate(format!("initial score of missing actor {} has zero variance", h + 1)));
        }
        m_hidden0.set_column(h, &(score / ms.sqrt()));
    }
    let mut joint = DMatrix::zeros(n, p + r);
    joint.view_mut((0, 0), (n, p)).copy_from(m_obs);
    joint.view_mut((0, p), (n, r)).copy_from(&m_hidden0);
    let c = covariance(&joint);
    let d = c.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    let q = p + r;
    let r0 = DMatrix::from_fn(q, q, |j, k| if j == k { 1.0 } else { c[(j, k)] * d[j] * d[k] });
    let beta0 = EdgeWeightMatrix::uniform(q)?.without_edges(|j, k| j >= p && k >= p);
    Ok(InitState { cliques: candidate.cliques.clone(), m_hidden0, beta0, r0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Columns in `clique` share a factor with weight `w`.
    fn planted(n: usize, p: usize, clique: &[usize], w: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, p);
        for i in 0..n {
            let f: f64 = StandardNormal.sample(&mut rng);
            for j in 0..p {
                let e: f64 = StandardNormal.sample(&mut rng);
                m[(i, j)] = if clique.contains(&j) { w * f + (1.0 - w * w).sqrt() * e } else { e };
            }
        }
        m
    }

    #[test]
    fn default_cardinality_rule() {
        assert_eq!(default_cardinality(14), 5);
        assert_eq!(default_cardinality(6), 3);
        assert_eq!(default_cardinality(30), 10);
        assert_eq!(default_cardinality(3), 3);
    }

    #[test]
    fn planted_factor_is_recovered() {
        let m = planted(300, 10, &[0, 1, 2], 0.8, 1);
        let comps = spca_components(&m, 2, 3).unwrap();
        assert_eq!(support(&comps[0]), vec![0, 1, 2]);
        for c in &comps {
            assert!((c.norm() - 1.0).abs() < 1e-12);
            assert!(support(c).len() <= 3);
        }
        // Deflation leaves the second component nearly orthogonal.
        assert!(comps[0].dot(&comps[1]).abs() < 0.2);
    }

    #[test]
    fn orthogonal_columns_pick_largest_variance() {
        let mut m = planted(400, 5, &[], 0.0, 2);
        m.column_mut(3).scale_mut(3.0);
        m.column_mut(1).scale_mut(2.0);
        let comps = spca_components(&m, 2, 1).unwrap();
        assert_eq!(support(&comps[0]), vec![3]);
        assert_eq!(support(&comps[1]), vec![1]);
    }

    #[test]
    fn duplicated_column_pair_is_selected() {
        let mut m = planted(200, 8, &[], 0.0, 3);
        let c = m.column(2).into_owned();
        m.set_column(6, &c);
        let comps = spca_components(&m, 1, 3).unwrap();
        let s = support(&comps[0]);
        assert!(s.contains(&2) && s.contains(&6));
    }

    #[test]
    fn rank_deficient_returns_fewer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let m = DMatrix::from_fn(50, 4, |i, j| f[i] * (j + 1) as f64);
        let comps = spca_components(&m, 3, 4).unwrap();
        assert_eq!(comps.len(), 1);
    }

    #[test]
    fn candidates_for_one_actor_from_supports() {
        let p = 14;
        let m = planted(100, p, &[], 0.0, 5);
        let mut a = DVector::zeros(p);
        for j in [0, 1, 2] {
            a[j] = 1.0 / 3f64.sqrt();
        }
        let mut b = DVector::zeros(p);
        for j in [6, 7] {
            b[j] = 1.0 / 2f64.sqrt();
        }
        let cands = candidates_from_components(&m, &[a, b], 1).unwrap();
        let cl: Vec<Vec<usize>> = cands.iter().map(|c| c.cliques[0].clone()).collect();
        assert_eq!(cl[0], vec![0, 1, 2]);
        assert_eq!(cl[1], vec![6, 7]);
        assert_eq!(cl[2], (3..14).collect::<Vec<_>>());
        assert_eq!(cl[3], (0..14).filter(|j| *j != 6 && *j != 7).collect::<Vec<_>>());
        for c in &cands {
            assert!((c.loadings[0].norm() - 1.0).abs() < 1e-12);
            assert_eq!(support(&c.loadings[0]), c.cliques[0]);
        }
    }

    #[test]
    fn candidates_for_two_actors() {
        let m = planted(200, 12, &[0, 1, 2, 3], 0.8, 6);
        let cands = candidate_cliques(&m, 2, 4).unwrap();
        assert_eq!(cands[0].cliques.len(), 2);
        assert!(cands.len() <= 3);
        for c in &cands {
            assert!(c.cliques.iter().all(|cl| !cl.is_empty() && cl.iter().all(|&j| j < 12)));
        }
    }

    #[test]
    fn permuting_columns_relabels_candidates() {
        let m = planted(200, 9, &[1, 4, 7], 0.8, 7);
        let perm = [8, 7, 6, 5, 4, 3, 2, 1, 0];
        let mp = DMatrix::from_fn(200, 9, |i, j| m[(i, perm[j])]);
        let a = candidate_cliques(&m, 1, 3).unwrap();
        let b = candidate_cliques(&mp, 1, 3).unwrap();
        assert_eq!(a.len(), b.len());
        for (ca, cb) in a.iter().zip(&b) {
            let mut mapped: Vec<usize> = cb.cliques[0].iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            assert_eq!(ca.cliques[0], mapped);
        }
    }

    #[test]
    fn larger_cardinality_never_lowers_recall() {
        for seed in 0..10 {
            let clique = [0, 2, 4, 6, 8];
            let m = planted(150, 15, &clique, 0.7, 10 + seed);
            let mut prev = 0.0;
            for card in 1..=8 {
                let comps = spca_components(&m, 1, card).unwrap();
                let s = support(&comps[0]);
                let recall = s.iter().filter(|j| clique.contains(j)).count() as f64 / clique.len() as f64;
                assert!(recall >= prev, "seed {seed} card {card}: {recall} < {prev}");
                prev = recall;
            }
        }
    }

    #[test]
    fn resampling_is_deterministic_and_deduplicated() {
        let m = planted(120, 10, &[0, 1, 2], 0.95, 8);
        let a = resample_cliques(&m, 1, 3, 30, 0.8, 99).unwrap();
        let b = resample_cliques(&m, 1, 3, 30, 0.8, 99).unwrap();
        assert_eq!(a, b);
        let unique: BTreeSet<_> = a.iter().map(|c| c.cliques.clone()).collect();
        assert_eq!(unique.len(), a.len());
        assert!(a.iter().any(|c| c.cliques[0] == vec![0, 1, 2]));
    }

    #[test]
    fn init_from_single_coordinate_loading() {
        let m = planted(80, 6, &[0, 1], 0.6, 9);
        let mut l = DVector::zeros(6);
        l[3] = 1.0;
        let init = init_params(&m, &Candidate { cliques: vec![vec![3]], loadings: vec![l] }).unwrap();
        let col = m.column(3);
        let mean = col.mean();
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / 80.0).sqrt();
        for i in 0..80 {
            assert!((init.m_hidden0[(i, 0)] - (m[(i, 3)] - mean) / sd).abs() < 1e-12);
        }
        for j in 0..7 {
            assert!((init.r0[(j, j)] - 1.0).abs() < 1e-14);
        }
        assert!((init.r0[(3, 6)] - 1.0).abs() < 1e-10);
        let lw = init.beta0.log_weights();
        for j in 0..7 {
            for k in 0..7 {
                if j != k {
                    assert_eq!(lw[(j, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn hidden_hidden_edges_are_excluded() {
        let m = planted(80, 6, &[0, 1], 0.6, 9);
        let cand = candidate_from_cliques(&m, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let init = init_params(&m, &cand).unwrap();
        assert!(!init.beta0.is_admissible(6, 7));
        assert!(init.beta0.is_admissible(0, 7));
    }

    #[test]
    fn zero_variance_score_is_degenerate() {
        let mut m = planted(50, 5, &[], 0.0, 3);
        m.column_mut(2).fill(1.0);
        assert!(matches!(
            init_params(&m, &candidate_from_cliques(&m, vec![vec![2]]).unwrap()),
            Err(Error::Degenerate(_))
        ));
    }
}
