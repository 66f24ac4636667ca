//! Algebra of product-form distributions over spanning trees.
//!
//! A symmetric weight matrix `W` defines `p(T) ∝ Π_{jk ∈ T} w_jk` over the
//! spanning trees of the complete graph. The normalising constant is a minor
//! of the weighted Laplacian, its gradient is the matrix of effective
//! resistances, and edge marginals are `P_jk = w_jk · M_jk`.
//!
//! All computations go through an elimination of the Laplacian grounded at
//! one node. Pivots are formed as sums of non-negative terms (ground weight
//! plus remaining off-diagonal weights), so no cancellation can occur. The
//! native path rescales weights by their maximum; if a pivot still underflows
//! the same elimination is replayed in the log domain.
//!
//! Structural zeros (edges that no tree may use) are stored as `-inf`
//! log-weights; every other log-weight is clamped at [`LOG_WEIGHT_FLOOR`]
//! relative to the largest one, so clamped edges carry marginals that are
//! effectively zero.

mod enumerate;
mod positive;

pub use enumerate::{enumerate_trees, is_spanning_tree, Edge, MAX_ENUMERATION_NODES};
pub(crate) use enumerate::ordered;
pub use positive::log_sum_exp;

use nalgebra::DMatrix;
use positive::{LogNum, Positive};

use crate::error::{Error, Result};

/// Log-weights are clamped at this value after shifting the maximum to 0.
pub const LOG_WEIGHT_FLOOR: f64 = -700.0;

const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric matrix of log edge weights with a `-inf` diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightMatrix {
    logw: DMatrix<f64>,
}

impl EdgeWeightMatrix {
    /// Strictly positive weights; the diagonal is ignored.
    pub fn from_weights(w: &DMatrix<f64>) -> Result<Self> {
        check_square(w)?;
        let q = w.nrows();
        let mut logw = DMatrix::from_element(q, q, f64::NEG_INFINITY);
        for j in 0..q {
            for k in 0..q {
                if j == k {
                    continue;
                }
                let v = w[(j, k)];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "weight ({j}, {k}) = {v} is not strictly positive"
                    )));
                }
                logw[(j, k)] = v.ln();
            }
        }
        Self::from_log_weights(&logw)
    }

    /// Finite log-weights; the diagonal is ignored.
    pub fn from_log_weights(logw: &DMatrix<f64>) -> Result<Self> {
        check_square(logw)?;
        let q = logw.nrows();
        for j in 0..q {
            for k in 0..q {
                if j != k && !logw[(j, k)].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "log-weight ({j}, {k}) = {} is not finite",
                        logw[(j, k)]
                    )));
                }
            }
        }
        Self::from_masked_log_weights(logw)
    }

    /// Like [`Self::from_log_weights`] but `-inf` entries are accepted as
    /// structural zeros.
    pub fn from_masked_log_weights(logw: &DMatrix<f64>) -> Result<Self> {
        check_square(logw)?;
        let q = logw.nrows();
        let mut out = DMatrix::from_element(q, q, f64::NEG_INFINITY);
        for j in 0..q {
            for k in (j + 1)..q {
                let (a, b) = (logw[(j, k)], logw[(k, j)]);
                if a.is_nan() || b.is_nan() || a == f64::INFINITY || b == f64::INFINITY {
                    return Err(Error::InvalidInput(format!("log-weight ({j}, {k}) is not usable")));
                }
                let v = if a == b {
                    a
                } else if a.is_finite()
                    && b.is_finite()
                    && (a - b).abs() <= SYMMETRY_TOL * a.abs().max(1.0)
                {
                    0.5 * (a + b)
                } else {
                    return Err(Error::InvalidInput(format!(
                        "weights are not symmetric at ({j}, {k}): {a} vs {b}"
                    )));
                };
                out[(j, k)] = v;
                out[(k, j)] = v;
            }
        }
        Ok(EdgeWeightMatrix { logw: out })
    }

    /// All admissible edges with weight one.
    pub fn uniform(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 nodes, got {q}")));
        }
        let mut logw = DMatrix::zeros(q, q);
        logw.fill_diagonal(f64::NEG_INFINITY);
        Ok(EdgeWeightMatrix { logw })
    }

    /// Marks every pair for which `forbidden(j, k)` holds as a structural zero.
    pub fn without_edges(mut self, forbidden: impl Fn(usize, usize) -> bool) -> Self {
        let q = self.dim();
        for j in 0..q {
            for k in 0..q {
                if j != k && forbidden(j, k) {
                    self.logw[(j, k)] = f64::NEG_INFINITY;
                }
            }
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.logw.nrows()
    }

    pub fn log_weights(&self) -> &DMatrix<f64> {
        &self.logw
    }

    pub fn log_weight(&self, j: usize, k: usize) -> f64 {
        self.logw[(j, k)]
    }

    pub fn weight(&self, j: usize, k: usize) -> f64 {
        self.logw[(j, k)].exp()
    }

    pub fn is_admissible(&self, j: usize, k: usize) -> bool {
        j != k && self.logw[(j, k)] > f64::NEG_INFINITY
    }

    /// Largest admissible log-weight.
    pub fn max_log_weight(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for j in 0..self.dim() {
            for k in (j + 1)..self.dim() {
                m = m.max(self.logw[(j, k)]);
            }
        }
        m
    }

    /// Shifted so the largest log-weight is 0, then clamped at the floor.
    /// The tree distribution is unchanged up to the clamp.
    pub fn renormalized(&self) -> Self {
        let shift = self.max_log_weight();
        let q = self.dim();
        let mut logw = self.logw.clone();
        for j in 0..q {
            for k in 0..q {
                let v = logw[(j, k)];
                if j != k && v > f64::NEG_INFINITY {
                    logw[(j, k)] = (v - shift).max(LOG_WEIGHT_FLOOR);
                }
            }
        }
        EdgeWeightMatrix { logw }
    }

    /// `Σ_{jk ∈ T} log w_jk`.
    pub fn tree_log_weight(&self, tree: &[Edge]) -> f64 {
        tree.iter().map(|&(j, k)| self.logw[(j, k)]).sum()
    }

    pub fn log_partition(&self) -> Result<f64> {
        log_partition(self)
    }

    pub fn edge_marginals(&self) -> Result<EdgeMarginalMatrix> {
        edge_marginals(self)
    }

    /// Rescaled weights used by every factorisation, with the applied shift.
    fn scaled(&self) -> (Vec<f64>, f64) {
        let q = self.dim();
        let shift = self.max_log_weight();
        let mut out = vec![f64::NEG_INFINITY; q * q];
        for j in 0..q {
            for k in 0..q {
                let v = self.logw[(j, k)];
                if j != k && v > f64::NEG_INFINITY {
                    out[j * q + k] = (v - shift).max(LOG_WEIGHT_FLOOR);
                }
            }
        }
        (out, shift)
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "weight matrix is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() < 2 {
        return Err(Error::InvalidInput("weight matrix needs at least 2 nodes".into()));
    }
    Ok(())
}

/// Laplacian with the first row and column deleted, stored as
/// `exp(log_scale) * matrix`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianMinor {
    pub matrix: DMatrix<f64>,
    pub log_scale: f64,
}

/// Full Laplacian of `w` (rows sum to zero), in the rescaled units of
/// [`laplacian`].
pub fn full_laplacian(w: &EdgeWeightMatrix) -> (DMatrix<f64>, f64) {
    let q = w.dim();
    let (logw, shift) = w.scaled();
    let mut lap = DMatrix::zeros(q, q);
    for j in 0..q {
        for k in 0..q {
            if j != k {
                let v = logw[j * q + k].exp();
                lap[(j, k)] = -v;
                lap[(j, j)] += v;
            }
        }
    }
    (lap, shift)
}

pub fn laplacian(w: &EdgeWeightMatrix) -> LaplacianMinor {
    let q = w.dim();
    let (lap, shift) = full_laplacian(w);
    LaplacianMinor { matrix: lap.view((1, 1), (q - 1, q - 1)).into_owned(), log_scale: shift }
}

/// Elimination of the Laplacian grounded at one node.
///
/// `pivots[s]` is the pivot of the `s`-th eliminated node and
/// `mult[m][s] = a_ms / d_s >= 0` is minus the unit-lower factor entry.
struct Grounded<N> {
    nodes: Vec<usize>,
    pivots: Vec<N>,
    mult: Vec<Vec<N>>,
}

fn eliminate<N: Positive>(logw: &[f64], q: usize, ground: usize) -> Option<Grounded<N>> {
    let nodes: Vec<usize> = (0..q).filter(|&v| v != ground).collect();
    let n = nodes.len();
    let mut a: Vec<N> = vec![N::ZERO; n * n];
    let mut g: Vec<N> = Vec::with_capacity(n);
    for (x, &u) in nodes.iter().enumerate() {
        g.push(N::from_ln(logw[u * q + ground]));
        for (y, &v) in nodes.iter().enumerate() {
            if x != y {
                a[x * n + y] = N::from_ln(logw[u * q + v]);
            }
        }
    }
    let mut pivots = Vec::with_capacity(n);
    let mut mult: Vec<Vec<N>> = vec![Vec::new(); n];
    for s in 0..n {
        let mut d = g[s];
        for k in (s + 1)..n {
            d = d.add(a[s * n + k]);
        }
        if !d.usable_pivot() {
            return None;
        }
        pivots.push(d);
        let gs = g[s];
        for j in (s + 1)..n {
            let ajs = a[j * n + s];
            let l = ajs.div(d);
            mult[j].push(l);
            g[j] = g[j].add(l.mul(gs));
            for k in (j + 1)..n {
                let upd = l.mul(a[s * n + k]);
                let v = a[j * n + k].add(upd);
                a[j * n + k] = v;
                a[k * n + j] = v;
            }
        }
    }
    Some(Grounded { nodes, pivots, mult })
}

impl<N: Positive> Grounded<N> {
    fn log_det(&self) -> f64 {
        self.pivots.iter().map(|p| p.ln()).sum()
    }

    /// `ln [(Q^{(g)})^{-1}]_{ll}` for every eliminated position `l`.
    fn log_inverse_diagonal(&self) -> Vec<f64> {
        let n = self.pivots.len();
        let mut out = Vec::with_capacity(n);
        let mut x: Vec<N> = vec![N::ZERO; n];
        for l in 0..n {
            x[l] = N::from_ln(0.0);
            let mut acc = x[l].mul(x[l]).div(self.pivots[l]);
            for m in (l + 1)..n {
                let mut v = N::ZERO;
                for j in l..m {
                    v = v.add(self.mult[m][j].mul(x[j]));
                }
                x[m] = v;
                acc = acc.add(v.mul(v).div(self.pivots[m]));
            }
            out.push(acc.ln());
        }
        out
    }
}

/// Runs `f` natively and replays it in the log domain if a pivot underflows.
fn with_fallback<T>(
    native: impl FnOnce() -> Option<T>,
    logdomain: impl FnOnce() -> Option<T>,
) -> Result<T> {
    if let Some(v) = native() {
        return Ok(v);
    }
    logdomain().ok_or_else(|| {
        Error::Degenerate("Laplacian minor is singular: admissible edges do not connect all nodes".into())
    })
}

/// `log B = log Σ_T Π_{jk∈T} w_jk`, the log-determinant of the first
/// Laplacian minor.
pub fn log_partition(w: &EdgeWeightMatrix) -> Result<f64> {
    let q = w.dim();
    let (logw, shift) = w.scaled();
    let det = with_fallback(
        || eliminate::<f64>(&logw, q, 0).map(|f| f.log_det()),
        || eliminate::<LogNum>(&logw, q, 0).map(|f| f.log_det()),
    )?;
    Ok(det + (q as f64 - 1.0) * shift)
}

fn log_resistances_generic<N: Positive>(logw: &[f64], q: usize) -> Option<DMatrix<f64>> {
    let mut out = DMatrix::from_element(q, q, f64::NEG_INFINITY);
    for ground in 0..(q - 1) {
        let f = eliminate::<N>(logw, q, ground)?;
        let diag = f.log_inverse_diagonal();
        for (pos, &node) in f.nodes.iter().enumerate() {
            if node > ground {
                let v = diag[pos];
                if !v.is_finite() {
                    return None;
                }
                out[(ground, node)] = v;
                out[(node, ground)] = v;
            }
        }
    }
    Some(out)
}

/// Log of the Meilă–Jaakkola gradient matrix `M`, with `∂B/∂w_jk = M_jk B`.
///
/// `M_jk` is the effective resistance between `j` and `k`; the diagonal is
/// `-inf` (zero).
pub fn log_meila_matrix(w: &EdgeWeightMatrix) -> Result<DMatrix<f64>> {
    let q = w.dim();
    let (logw, shift) = w.scaled();
    let mut r = with_fallback(
        || log_resistances_generic::<f64>(&logw, q),
        || log_resistances_generic::<LogNum>(&logw, q),
    )?;
    for j in 0..q {
        for k in 0..q {
            if j != k {
                r[(j, k)] -= shift;
            }
        }
    }
    Ok(r)
}

/// The Meilă–Jaakkola matrix in natural units. Entries may overflow when
/// all weights are tiny; use [`log_meila_matrix`] in that case.
pub fn meila_matrix(w: &EdgeWeightMatrix) -> Result<DMatrix<f64>> {
    let mut m = log_meila_matrix(w)?;
    m.apply(|v| *v = v.exp());
    Ok(m)
}

/// `ln P_jk` with `P_jk = w_jk M_jk`; structural zeros give `-inf`.
pub fn log_edge_marginals(w: &EdgeWeightMatrix) -> Result<DMatrix<f64>> {
    let q = w.dim();
    let mut lm = log_meila_matrix(w)?;
    let shift = w.max_log_weight();
    for j in 0..q {
        for k in 0..q {
            lm[(j, k)] = if j != k && w.is_admissible(j, k) {
                let lw = (w.log_weight(j, k) - shift).max(LOG_WEIGHT_FLOOR) + shift;
                (lw + lm[(j, k)]).min(0.0)
            } else {
                f64::NEG_INFINITY
            };
        }
    }
    Ok(lm)
}

/// Edge inclusion probabilities under the tree distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMarginalMatrix {
    p: DMatrix<f64>,
}

impl EdgeMarginalMatrix {
    /// Wraps a matrix that already satisfies the marginal invariants
    /// (symmetric, zero diagonal, entries in `[0, 1]`).
    pub fn from_matrix(p: DMatrix<f64>) -> Result<Self> {
        check_square(&p)?;
        let q = p.nrows();
        for j in 0..q {
            if p[(j, j)] != 0.0 {
                return Err(Error::InvalidInput("edge marginals need a zero diagonal".into()));
            }
            for k in 0..q {
                let v = p[(j, k)];
                if !(0.0..=1.0).contains(&v) || (v - p[(k, j)]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("invalid edge marginal at ({j}, {k})")));
                }
            }
        }
        Ok(EdgeMarginalMatrix { p })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.p[(j, k)]
    }
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn into_matrix(self) -> DMatrix<f64> {
        self.p
    }
    /// `Σ_{j<k} P_jk`, which equals `q - 1` for any tree distribution.
    pub fn total_mass(&self) -> f64 {
        let q = self.dim();
        let mut s = 0.0;
        for j in 0..q {
            for k in (j + 1)..q {
                s += self.p[(j, k)];
            }
        }
        s
    }
}

pub fn edge_marginals(w: &EdgeWeightMatrix) -> Result<EdgeMarginalMatrix> {
    let mut p = log_edge_marginals(w)?;
    p.apply(|v| *v = v.exp());
    Ok(EdgeMarginalMatrix { p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(q: usize, seed: u64, spread: f64) -> EdgeWeightMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lw = DMatrix::from_element(q, q, f64::NEG_INFINITY);
        for j in 0..q {
            for k in (j + 1)..q {
                let v = rng.random_range(-spread..spread);
                lw[(j, k)] = v;
                lw[(k, j)] = v;
            }
        }
        EdgeWeightMatrix::from_log_weights(&lw).unwrap()
    }

    /// Brute-force `(log B, P)` by enumeration.
    fn enumerate(w: &EdgeWeightMatrix) -> (f64, DMatrix<f64>) {
        let q = w.dim();
        let trees = enumerate_trees(q).unwrap();
        let logs: Vec<f64> = trees.iter().map(|t| w.tree_log_weight(t)).collect();
        let lb = log_sum_exp(&logs);
        let mut p = DMatrix::zeros(q, q);
        for (t, lt) in trees.iter().zip(&logs) {
            let pt = (lt - lb).exp();
            for &(j, k) in t {
                p[(j, k)] += pt;
                p[(k, j)] += pt;
            }
        }
        (lb, p)
    }

    #[test]
    fn laplacian_small_cases() {
        let lm = laplacian(&EdgeWeightMatrix::uniform(3).unwrap());
        assert_eq!(lm.log_scale, 0.0);
        assert_eq!(lm.matrix, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));

        let w = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 5.0, 0.0]);
        let lm = laplacian(&EdgeWeightMatrix::from_weights(&w).unwrap());
        assert_relative_eq!(lm.matrix[(0, 0)] * lm.log_scale.exp(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn full_laplacian_rows_sum_to_zero() {
        let (lap, _) = full_laplacian(&random_weights(4, 3, 2.0));
        for j in 0..4 {
            assert!(lap.row(j).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut w = DMatrix::from_element(3, 3, 1.0);
        w[(0, 1)] = 2.0;
        assert!(EdgeWeightMatrix::from_weights(&w).is_err());
        let mut w = DMatrix::from_element(3, 3, 1.0);
        w[(0, 2)] = -1.0;
        w[(2, 0)] = -1.0;
        assert!(EdgeWeightMatrix::from_weights(&w).is_err());
        assert!(EdgeWeightMatrix::from_weights(&DMatrix::from_element(2, 3, 1.0)).is_err());
    }

    #[test]
    fn cayley_partition() {
        let lb = log_partition(&EdgeWeightMatrix::uniform(3).unwrap()).unwrap();
        assert_relative_eq!(lb, 3f64.ln(), epsilon = 1e-12);
        let lb = log_partition(&EdgeWeightMatrix::uniform(5).unwrap()).unwrap();
        assert_relative_eq!(lb, 125f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn partition_and_marginals_match_enumeration() {
        for seed in 0..10 {
            let w = random_weights(5, seed, 3.0);
            let (lb, p_enum) = enumerate(&w);
            assert_relative_eq!(log_partition(&w).unwrap(), lb, epsilon = 1e-10);
            let p = edge_marginals(&w).unwrap();
            for j in 0..5 {
                for k in 0..5 {
                    assert!((p.get(j, k) - p_enum[(j, k)]).abs() < 1e-10);
                }
            }
            assert!((p.total_mass() - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_three_nodes_meila_and_marginals() {
        let w = EdgeWeightMatrix::uniform(3).unwrap();
        let m = meila_matrix(&w).unwrap();
        let p = edge_marginals(&w).unwrap();
        for j in 0..3 {
            assert_eq!(m[(j, j)], 0.0);
            for k in 0..3 {
                if j != k {
                    assert_relative_eq!(m[(j, k)], 2.0 / 3.0, epsilon = 1e-12);
                    assert_relative_eq!(p.get(j, k), 2.0 / 3.0, epsilon = 1e-12);
                }
            }
        }
        let p2 = edge_marginals(&EdgeWeightMatrix::uniform(2).unwrap()).unwrap();
        assert_relative_eq!(p2.get(0, 1), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn meila_matches_explicit_inverse_formula() {
        let w = random_weights(6, 11, 1.0);
        let lm = laplacian(&w);
        let inv = lm.matrix.clone().try_inverse().unwrap() / lm.log_scale.exp();
        let m = meila_matrix(&w).unwrap();
        for j in 1..6 {
            assert_relative_eq!(m[(0, j)], inv[(j - 1, j - 1)], max_relative = 1e-10);
            for k in (j + 1)..6 {
                let v = inv[(j - 1, j - 1)] + inv[(k - 1, k - 1)] - 2.0 * inv[(j - 1, k - 1)];
                assert_relative_eq!(m[(j, k)], v, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn meila_gradient_finite_difference() {
        let w = random_weights(4, 5, 1.0);
        let b = log_partition(&w).unwrap().exp();
        let m = meila_matrix(&w).unwrap();
        for j in 0..4 {
            for k in (j + 1)..4 {
                let wjk = w.weight(j, k);
                let h = 1e-6 * wjk;
                let shifted = |delta: f64| {
                    let mut lw = w.log_weights().clone();
                    lw[(j, k)] = (wjk + delta).ln();
                    lw[(k, j)] = lw[(j, k)];
                    log_partition(&EdgeWeightMatrix::from_log_weights(&lw).unwrap()).unwrap().exp()
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert_relative_eq!(m[(j, k)] * b, fd, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn extreme_weight_ranges_stay_finite() {
        // Weights spanning 10^{±300}.
        let q = 6;
        let mut lw = DMatrix::from_element(q, q, f64::NEG_INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for j in 0..q {
            for k in (j + 1)..q {
                let v = rng.random_range(-690.0..690.0);
                lw[(j, k)] = v;
                lw[(k, j)] = v;
            }
        }
        let w = EdgeWeightMatrix::from_log_weights(&lw).unwrap();
        let (lb, p_enum) = enumerate(&w);
        let got = log_partition(&w).unwrap();
        assert!(got.is_finite());
        assert_relative_eq!(got, lb, max_relative = 1e-10);
        let p = edge_marginals(&w).unwrap();
        for j in 0..q {
            for k in 0..q {
                assert!((p.get(j, k) - p_enum[(j, k)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn weakly_attached_first_node_keeps_marginals_accurate() {
        // Node 0 hangs off the rest by tiny weights; the resistance path
        // must not cancel.
        let q = 5;
        let mut lw = DMatrix::from_element(q, q, 0.0);
        for k in 1..q {
            lw[(0, k)] = -60.0;
            lw[(k, 0)] = -60.0;
        }
        lw[(1, 2)] = -45.0;
        lw[(2, 1)] = -45.0;
        lw.fill_diagonal(f64::NEG_INFINITY);
        let w = EdgeWeightMatrix::from_log_weights(&lw).unwrap();
        let (_, p_enum) = enumerate(&w);
        let lp = log_edge_marginals(&w).unwrap();
        let p_enum_12 = p_enum[(1, 2)];
        assert_relative_eq!(lp[(1, 2)].exp(), p_enum_12, max_relative = 1e-9);
    }

    #[test]
    fn structural_zeros_respected() {
        let w = EdgeWeightMatrix::uniform(5).unwrap().without_edges(|j, k| j >= 3 && k >= 3);
        let p = edge_marginals(&w).unwrap();
        assert_eq!(p.get(3, 4), 0.0);
        assert!((p.total_mass() - 4.0).abs() < 1e-12);
        // 5-node complete graph minus one edge: 125 - 125·(4/10) = 75 trees.
        assert_relative_eq!(log_partition(&w).unwrap(), 75f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn disconnected_support_is_degenerate() {
        let w = EdgeWeightMatrix::uniform(4).unwrap().without_edges(|j, k| (j == 0) != (k == 0));
        assert!(matches!(log_partition(&w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn minor_choice_does_not_matter() {
        let w = random_weights(5, 21, 2.0);
        let (logw, shift) = w.scaled();
        let base = eliminate::<f64>(&logw, 5, 0).unwrap().log_det();
        for g in 1..5 {
            let other = eliminate::<f64>(&logw, 5, g).unwrap().log_det();
            assert_relative_eq!(base, other, epsilon = 1e-12);
            let lg = eliminate::<LogNum>(&logw, 5, g).unwrap().log_det();
            assert_relative_eq!(base, lg, epsilon = 1e-12);
        }
        let _ = shift;
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn weights(q: usize) -> impl Strategy<Value = EdgeWeightMatrix> {
            proptest::collection::vec(-5.0f64..5.0, q * (q - 1) / 2).prop_map(move |v| {
                let mut lw = DMatrix::from_element(q, q, f64::NEG_INFINITY);
                let mut it = v.into_iter();
                for j in 0..q {
                    for k in (j + 1)..q {
                        let x = it.next().unwrap();
                        lw[(j, k)] = x;
                        lw[(k, j)] = x;
                    }
                }
                EdgeWeightMatrix::from_log_weights(&lw).unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn partition_equals_enumeration(w in (3usize..=6).prop_flat_map(weights)) {
                let (lb, _) = enumerate(&w);
                let got = log_partition(&w).unwrap();
                prop_assert!(((got.exp() - lb.exp()) / lb.exp()).abs() < 1e-8);
            }

            #[test]
            fn marginal_mass_is_q_minus_one(w in (2usize..=12).prop_flat_map(weights)) {
                let p = edge_marginals(&w).unwrap();
                prop_assert!((p.total_mass() - (w.dim() as f64 - 1.0)).abs() < 1e-8);
            }

            #[test]
            fn scaling_invariance(w in (3usize..=7).prop_flat_map(weights), c in -50.0f64..50.0) {
                let q = w.dim();
                let mut lw = w.log_weights().clone();
                lw.apply(|v| *v += c);
                let scaled = EdgeWeightMatrix::from_masked_log_weights(&lw).unwrap();
                let d = log_partition(&scaled).unwrap() - log_partition(&w).unwrap();
                prop_assert!((d - (q as f64 - 1.0) * c).abs() < 1e-8 * (1.0 + c.abs()));
                let (p1, p2) = (edge_marginals(&w).unwrap(), edge_marginals(&scaled).unwrap());
                prop_assert!((p1.matrix() - p2.matrix()).amax() < 1e-10);
            }
        }
    }
}
