//! Variational EM for the tree-mixture Gaussian layer with missing actors.
//!
//! Nodes `0..p` are observed and `p..p+r` are hidden. The observed moments
//! come frozen from the PLN fit; the algorithm alternates the M-step on the
//! tree weights `β` and the shared precision entries `ω`, and the VE-step on
//! the variational tree weights `β̃` and the hidden moments.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::InitState;
use crate::pln::PlnFit;
use crate::tree_algebra::{
    log_edge_marginals, log_meila_matrix, log_partition, Edge, EdgeMarginalMatrix, EdgeWeightMatrix,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Initial variance of each hidden coordinate, before scaling to unit mean square.
const INIT_HIDDEN_VARIANCE: f64 = 0.1;
/// Largest span of the tempered data term, in nats.
const MAX_DATA_SPAN: f64 = 700.0;
const CORRELATION_LIMIT: f64 = 1.0 - 1e-10;
/// Hidden actors whose means have variance below `e^{-20}` are degenerate.
pub const DEGENERATE_LOG_VARIANCE: f64 = -20.0;

/// How the variational tree weights absorb the Gaussian layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum TreeWeightRule {
    /// `log β̃ = log β − α((n/2) log|R_[kl]| + ω_kl [MᵀM]_kl)`.
    #[default]
    Standard,
    /// The exact mean-field update, in which the tree-dependent diagonal of
    /// `Ω_T` cancels the Gram term: `log β̃ = log β − α (n/2) log|R_[kl]|`.
    MeanField,
}

#[derive(Clone, Debug, Serialize)]
pub struct VemConfig {
    pub alpha: f64,
    pub eps: f64,
    pub max_iter: usize,
    pub rule: TreeWeightRule,
}

impl Default for VemConfig {
    fn default() -> Self {
        VemConfig { alpha: 0.1, eps: 1e-3, max_iter: 100, rule: TreeWeightRule::Standard }
    }
}

impl VemConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.eps > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("eps must be positive and max_iter at least 1".into()));
        }
        Ok(())
    }
}

/// Expected latent Gram matrix scaled to diagonal exactly `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsdMatrix {
    ssd: DMatrix<f64>,
    n: usize,
}

impl SsdMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.ssd
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn dim(&self) -> usize {
        self.ssd.nrows()
    }
    /// `ssd_kl / n`.
    pub fn correlation(&self, k: usize, l: usize) -> f64 {
        self.ssd[(k, l)] / self.n as f64
    }
}

/// `MᵀM + diag(Σ_i S_i)`, before any rescaling.
pub fn raw_ssd(m: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.shape() != s.shape() {
        return Err(Error::InvalidInput("means and variances must have the same shape".into()));
    }
    if s.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput("variational variances must be positive".into()));
    }
    let mut g = m.transpose() * m;
    for (k, col) in s.column_iter().enumerate() {
        g[(k, k)] += col.sum();
    }
    Ok(g)
}

fn normalize_ssd(raw: &DMatrix<f64>, n: usize) -> Result<SsdMatrix> {
    let q = raw.nrows();
    let nf = n as f64;
    let d: Vec<f64> = (0..q).map(|k| raw[(k, k)].sqrt()).collect();
    let mut ssd = DMatrix::zeros(q, q);
    for k in 0..q {
        ssd[(k, k)] = nf;
        for l in (k + 1)..q {
            let v = raw[(k, l)] * nf / (d[k] * d[l]);
            if !(v.abs() / nf < CORRELATION_LIMIT) {
                return Err(Error::Degenerate(format!(
                    "nodes {k} and {l} are perfectly correlated (ssd/n = {:.12})",
                    v / nf
                )));
            }
            ssd[(k, l)] = v;
            ssd[(l, k)] = v;
        }
    }
    Ok(SsdMatrix { ssd, n })
}

/// Expected Gram matrix of the latent layer, rescaled to diagonal `n`.
pub fn compute_ssd(m: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<SsdMatrix> {
    normalize_ssd(&raw_ssd(m, s)?, m.nrows())
}

/// Shared precision entries and per-edge correlation quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct OmegaUpdate {
    /// `ω_kl = −ρ/(1−ρ²)`, zero diagonal.
    pub omega: DMatrix<f64>,
    /// `ρ_kl = ssd_kl / n`, unit diagonal.
    pub rho: DMatrix<f64>,
    /// `log|R_[kl]| = log(1 − ρ²)`, zero diagonal.
    pub log_det_r: DMatrix<f64>,
}

impl OmegaUpdate {
    pub fn dim(&self) -> usize {
        self.omega.nrows()
    }

    /// `ρ²/(1−ρ²)`, the contribution of edge `kl` to both diagonals.
    pub fn diagonal_increment(&self, k: usize, l: usize) -> f64 {
        let r2 = self.rho[(k, l)] * self.rho[(k, l)];
        r2 / (1.0 - r2)
    }

    /// Diagonal of `Ω_T` for a tree given by its edges.
    pub fn tree_diagonal(&self, tree: &[Edge]) -> DVector<f64> {
        let mut d = DVector::from_element(self.dim(), 1.0);
        for &(k, l) in tree {
            let inc = self.diagonal_increment(k, l);
            d[k] += inc;
            d[l] += inc;
        }
        d
    }

    /// Full `Ω_T` for a tree.
    pub fn tree_precision(&self, tree: &[Edge]) -> DMatrix<f64> {
        let mut om = DMatrix::from_diagonal(&self.tree_diagonal(tree));
        for &(k, l) in tree {
            om[(k, l)] = self.omega[(k, l)];
            om[(l, k)] = self.omega[(k, l)];
        }
        om
    }
}

pub fn update_omega(ssd: &SsdMatrix) -> Result<OmegaUpdate> {
    let q = ssd.dim();
    let mut omega = DMatrix::zeros(q, q);
    let mut rho = DMatrix::identity(q, q);
    let mut log_det_r = DMatrix::zeros(q, q);
    for k in 0..q {
        for l in (k + 1)..q {
            let r = ssd.correlation(k, l);
            if !(r.abs() < 1.0) {
                return Err(Error::Degenerate(format!("edge ({k}, {l}) has |ssd/n| = {} >= 1", r.abs())));
            }
            let one_m = 1.0 - r * r;
            let w = -r / one_m;
            let ld = (-r * r).ln_1p();
            for (a, b) in [(k, l), (l, k)] {
                omega[(a, b)] = w;
                rho[(a, b)] = r;
                log_det_r[(a, b)] = ld;
            }
        }
    }
    Ok(OmegaUpdate { omega, rho, log_det_r })
}

/// `Ω̄ = E_g[Ω_T]`.
pub fn expected_precision(omega: &OmegaUpdate, p: &EdgeMarginalMatrix) -> DMatrix<f64> {
    let q = omega.dim();
    let mut out = DMatrix::identity(q, q);
    for k in 0..q {
        for l in 0..q {
            if k != l {
                let pk = p.get(k, l);
                out[(k, l)] = pk * omega.omega[(k, l)];
                out[(k, k)] += pk * omega.diagonal_increment(k, l);
            }
        }
    }
    out
}

fn from_log(logw: DMatrix<f64>) -> Result<EdgeWeightMatrix> {
    Ok(EdgeWeightMatrix::from_masked_log_weights(&logw)?.renormalized())
}

/// `β_kl ← P_kl / M(β)_kl` from log-marginals, structural zeros kept.
fn beta_fixed_point(log_p: &DMatrix<f64>, beta: &EdgeWeightMatrix) -> Result<DMatrix<f64>> {
    let q = beta.dim();
    let lm = log_meila_matrix(beta)?;
    let mut out = DMatrix::from_element(q, q, f64::NEG_INFINITY);
    for k in 0..q {
        for l in 0..q {
            if beta.is_admissible(k, l) {
                if !lm[(k, l)].is_finite() {
                    return Err(Error::Degenerate(format!("gradient of log B vanishes on edge ({k}, {l})")));
                }
                let lp = log_p[(k, l)].max(crate::tree_algebra::LOG_WEIGHT_FLOOR);
                out[(k, l)] = lp - lm[(k, l)];
            }
        }
    }
    Ok(out)
}

/// One fixed-point update of the tree weights, renormalized to max
/// log-weight 0. Iterating it converges to the maximizer of
/// `E_g[log p_β(T)]`.
pub fn update_beta(p: &EdgeMarginalMatrix, beta: &EdgeWeightMatrix) -> Result<EdgeWeightMatrix> {
    let log_p = p.matrix().map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    from_log(beta_fixed_point(&log_p, beta)?)
}

/// `Σ_{k<l} P_kl log β_kl − log B(β)`.
pub fn tree_prior_term(p: &EdgeMarginalMatrix, beta: &EdgeWeightMatrix) -> Result<f64> {
    let q = beta.dim();
    let mut s = 0.0;
    for k in 0..q {
        for l in (k + 1)..q {
            if beta.is_admissible(k, l) {
                s += p.get(k, l) * beta.log_weight(k, l);
            }
        }
    }
    Ok(s - log_partition(beta)?)
}

/// The fixed-point update with a backtracking line search in log-weights
/// so that the tree-prior term never decreases.
fn beta_step(p: &EdgeMarginalMatrix, log_p: &DMatrix<f64>, beta: &EdgeWeightMatrix) -> Result<EdgeWeightMatrix> {
    let target = from_log(beta_fixed_point(log_p, beta)?)?;
    let f0 = tree_prior_term(p, beta)?;
    let f1 = tree_prior_term(p, &target)?;
    if f1 >= f0 - 1e-12 * f0.abs().max(1.0) {
        return Ok(target);
    }
    let (a, b) = (beta.log_weights(), target.log_weights());
    let mut t = 0.5;
    while t > 1e-6 {
        let mixed = a.zip_map(b, |x, y| if x == f64::NEG_INFINITY { x } else { x + t * (y - x) });
        let cand = from_log(mixed)?;
        if tree_prior_term(p, &cand)? >= f0 {
            return Ok(cand);
        }
        t *= 0.5;
    }
    Ok(beta.clone())
}

/// The data term subtracted (times `α`) from `log β` for each edge.
fn data_term(
    omega: &OmegaUpdate,
    mtm: &DMatrix<f64>,
    n: usize,
    rule: TreeWeightRule,
    k: usize,
    l: usize,
) -> f64 {
    let det = 0.5 * n as f64 * omega.log_det_r[(k, l)];
    match rule {
        TreeWeightRule::Standard => det + omega.omega[(k, l)] * mtm[(k, l)],
        TreeWeightRule::MeanField => det,
    }
}

/// Variational tree weights from the current model; see [`TreeWeightRule`].
///
/// Fails with [`Error::TemperingTooLarge`] when the tempered data term
/// spans more than 700 nats over the admissible edges.
pub fn update_beta_tilde(
    beta: &EdgeWeightMatrix,
    omega: &OmegaUpdate,
    mtm: &DMatrix<f64>,
    n: usize,
    alpha: f64,
    rule: TreeWeightRule,
) -> Result<EdgeWeightMatrix> {
    let q = beta.dim();
    let mut logw = DMatrix::from_element(q, q, f64::NEG_INFINITY);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..q {
        for l in 0..q {
            if beta.is_admissible(k, l) {
                let d = alpha * data_term(omega, mtm, n, rule, k, l);
                lo = lo.min(d);
                hi = hi.max(d);
                logw[(k, l)] = beta.log_weight(k, l) - d;
            }
        }
    }
    if hi - lo > MAX_DATA_SPAN || !(hi - lo).is_finite() {
        return Err(Error::TemperingTooLarge { range: hi - lo, alpha });
    }
    from_log(logw)
}

/// Hidden means and variances from the expected precision:
/// `M_H = −M_O Ω̄_OH Ω̄_H^{-1}`, `S_H = 1/diag(Ω̄_H)`.
pub fn update_hidden(m_obs: &DMatrix<f64>, expected_prec: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let p = m_obs.ncols();
    let q = expected_prec.nrows();
    if q < p {
        return Err(Error::InvalidInput("expected precision smaller than observed block".into()));
    }
    let r = q - p;
    let mut s = DVector::zeros(r);
    for h in 0..r {
        let d = expected_prec[(p + h, p + h)];
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Degenerate(format!("hidden precision of actor {} is {d}", h + 1)));
        }
        s[h] = 1.0 / d;
    }
    let oh = expected_prec.view((0, p), (p, r));
    let mut m = -(m_obs * oh);
    for h in 0..r {
        m.column_mut(h).scale_mut(s[h]);
    }
    Ok((m, s))
}

/// Components of the lower bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ElboTerms {
    /// Poisson reconstruction and observed-latent entropy (fixed).
    pub observed: f64,
    /// `Σ P log β − log B`.
    pub tree_prior: f64,
    /// `log B̃ − Σ P log β̃`.
    pub tree_entropy: f64,
    /// `E_q log p(U | T)`.
    pub gaussian: f64,
    /// Entropy of the hidden Gaussian factors.
    pub hidden_entropy: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.observed + self.tree_prior + self.tree_entropy + self.gaussian + self.hidden_entropy
    }
}

/// `E_g E_h log p(U | T) = −(nq/2) log 2π − (n/2) Σ P log(1−ρ²) − ½ tr(Ω̄ SSD)`.
pub fn gaussian_term(
    omega: &OmegaUpdate,
    p: &EdgeMarginalMatrix,
    expected_prec: &DMatrix<f64>,
    ssd_raw: &DMatrix<f64>,
    n: usize,
) -> f64 {
    let q = omega.dim();
    let nf = n as f64;
    let mut s = -0.5 * nf * q as f64 * LN_2PI;
    for k in 0..q {
        for l in (k + 1)..q {
            s -= 0.5 * nf * p.get(k, l) * omega.log_det_r[(k, l)];
        }
    }
    s - 0.5 * expected_prec.component_mul(ssd_raw).sum()
}

pub fn tree_entropy(p: &EdgeMarginalMatrix, beta_tilde: &EdgeWeightMatrix) -> Result<f64> {
    Ok(-tree_prior_term(p, beta_tilde)?)
}

/// `(n/2) Σ_h log S_h + (n r / 2)(1 + log 2π)`.
pub fn hidden_entropy(s_hidden: &DVector<f64>, n: usize) -> f64 {
    let nf = n as f64;
    s_hidden.iter().map(|s| 0.5 * nf * (s.ln() + 1.0 + LN_2PI)).sum()
}

/// Assembles every term of the lower bound.
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    observed: f64,
    beta: &EdgeWeightMatrix,
    beta_tilde: &EdgeWeightMatrix,
    p: &EdgeMarginalMatrix,
    omega: &OmegaUpdate,
    expected_prec: &DMatrix<f64>,
    ssd_raw: &DMatrix<f64>,
    s_hidden: &DVector<f64>,
    n: usize,
) -> Result<ElboTerms> {
    Ok(ElboTerms {
        observed,
        tree_prior: tree_prior_term(p, beta)?,
        tree_entropy: tree_entropy(p, beta_tilde)?,
        gaussian: gaussian_term(omega, p, expected_prec, ssd_raw, n),
        hidden_entropy: hidden_entropy(s_hidden, n),
    })
}

/// Upper bound on `α` keeping the Laplacian minor of `β̃` below
/// `exp(log_delta)`: `(1/(c_sup n)) (log_delta/(q−1) − log(q−1))`.
pub fn alpha_upper_bound(c_sup: f64, n: usize, q: usize, log_delta: f64) -> Result<f64> {
    if !(c_sup > 0.0) || q < 3 || n == 0 {
        return Err(Error::Config(format!("alpha bound needs c_sup > 0, q >= 3, n >= 1 (got {c_sup}, {q}, {n})")));
    }
    let qm = (q - 1) as f64;
    let a = (log_delta / qm - qm.ln()) / (c_sup * n as f64);
    if !(a > 0.0) {
        return Err(Error::Config(format!(
            "no positive alpha keeps q = {q} within native precision; extended precision is required"
        )));
    }
    Ok(a)
}

/// Log of the largest finite `f64`.
pub fn log_max_float() -> f64 {
    f64::MAX.ln()
}

/// `C(x) = x/(1−x) − log √(1−x)`, the per-observation growth rate of
/// `log β̃` when `x` is the squared correlation of an edge.
pub fn tempering_constant(x: f64) -> f64 {
    x / (1.0 - x) - 0.5 * (1.0 - x).ln()
}

/// [`alpha_upper_bound`] with `C_sup = C(ρ_max²)`.
pub fn alpha_upper_bound_from_correlation(rho_max: f64, n: usize, q: usize, log_delta: f64) -> Result<f64> {
    if !(rho_max.abs() < 1.0) {
        return Err(Error::Config(format!("maximal correlation must be below 1, got {rho_max}")));
    }
    alpha_upper_bound(tempering_constant(rho_max * rho_max), n, q, log_delta)
}

/// `alpha auto`: the bound for the largest `|ssd_kl|/n` over a network
/// of `q` nodes, capped at 0.1.
pub fn auto_alpha(ssd: &SsdMatrix, q: usize) -> Result<f64> {
    let d = ssd.dim();
    let mut rmax: f64 = 0.0;
    for k in 0..d {
        for l in (k + 1)..d {
            rmax = rmax.max(ssd.correlation(k, l).abs());
        }
    }
    if rmax == 0.0 {
        return Ok(0.1);
    }
    Ok(alpha_upper_bound_from_correlation(rmax, ssd.n(), q.max(3), log_max_float())?.min(0.1))
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elbo: f64,
    /// Largest change in any edge probability.
    pub delta_p: f64,
    /// Largest change in any hidden mean.
    pub delta_m: f64,
    /// `Σ_{k<l} P_kl − (q − 1)`.
    pub edge_mass_error: f64,
}

#[derive(Clone, Debug)]
pub struct VemState {
    pub p_obs: usize,
    pub beta: EdgeWeightMatrix,
    pub beta_tilde: EdgeWeightMatrix,
    pub omega: OmegaUpdate,
    /// `n × r`, unit mean square `Σ_i (M² + S)/n = 1` per column.
    pub m_hidden: DMatrix<f64>,
    pub s_hidden: DVector<f64>,
    pub p: EdgeMarginalMatrix,
    pub elbo_trace: Vec<f64>,
    pub terms: ElboTerms,
    pub trace: Vec<TraceRecord>,
    pub converged: bool,
    pub iterations: usize,
    /// Hidden actors whose means collapsed to a constant.
    pub degenerate_actors: Vec<usize>,
    pub cliques: Vec<Vec<usize>>,
}

impl VemState {
    pub fn q(&self) -> usize {
        self.beta.dim()
    }
    pub fn r(&self) -> usize {
        self.q() - self.p_obs
    }
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_actors.is_empty()
    }
}

fn column_variance(c: nalgebra::DVectorView<'_, f64>) -> f64 {
    let n = c.len() as f64;
    let mean = c.mean();
    c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Scales each hidden column to `Σ_i (M² + S) = n`. With a free variance
/// for the unobserved node this reparametrization leaves the bound
/// unchanged and puts the next M-step in unit scale.
fn rescale_hidden(m: &mut DMatrix<f64>, s: &mut DVector<f64>) {
    let n = m.nrows() as f64;
    for h in 0..s.len() {
        let ms = (m.column(h).norm_squared() + n * s[h]) / n;
        if ms > 0.0 && ms.is_finite() {
            let c = 1.0 / ms.sqrt();
            m.column_mut(h).scale_mut(c);
            s[h] *= c * c;
        }
    }
}

fn joint_moments(pln: &PlnFit, m_h: &DMatrix<f64>, s_h: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = pln.m_obs.shape();
    let r = m_h.ncols();
    let mut m = DMatrix::zeros(n, p + r);
    let mut s = DMatrix::zeros(n, p + r);
    m.view_mut((0, 0), (n, p)).copy_from(&pln.m_obs);
    s.view_mut((0, 0), (n, p)).copy_from(&pln.s_obs);
    m.view_mut((0, p), (n, r)).copy_from(m_h);
    for h in 0..r {
        s.column_mut(p + h).fill(s_h[h]);
    }
    (m, s)
}

fn marginals_with_logs(bt: &EdgeWeightMatrix) -> Result<(EdgeMarginalMatrix, DMatrix<f64>)> {
    let lp = log_edge_marginals(bt)?;
    let p = EdgeMarginalMatrix::from_matrix(lp.map(f64::exp))?;
    Ok((p, lp))
}

/// Initial state for a network without missing actors.
pub fn observed_only_init(n: usize, p: usize) -> Result<InitState> {
    Ok(InitState {
        cliques: Vec::new(),
        m_hidden0: DMatrix::zeros(n, 0),
        beta0: EdgeWeightMatrix::uniform(p)?,
        r0: DMatrix::identity(p, p),
    })
}

/// Runs the variational EM from `init`.
pub fn run_vem(pln: &PlnFit, init: &InitState, config: &VemConfig) -> Result<VemState> {
    config.validate()?;
    let (n, p) = pln.m_obs.shape();
    let r = init.m_hidden0.ncols();
    let q = p + r;
    if init.beta0.dim() != q || init.m_hidden0.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "initial state is for {} nodes and {} sites, fit has {q} and {n}",
            init.beta0.dim(),
            init.m_hidden0.nrows()
        )));
    }
    for j in p..q {
        for k in p..q {
            if j != k && init.beta0.is_admissible(j, k) {
                return Err(Error::InvalidInput("hidden-hidden edges must be structural zeros".into()));
            }
        }
    }

    let mut m_h = init.m_hidden0.clone();
    let mut s_h = DVector::from_element(r, INIT_HIDDEN_VARIANCE);
    rescale_hidden(&mut m_h, &mut s_h);
    let (m_all, s_all) = joint_moments(pln, &m_h, &s_h);
    let ssd0 = compute_ssd(&m_all, &s_all)?;
    let omega0 = update_omega(&ssd0)?;
    let mut beta = init.beta0.renormalized();
    let mut beta_tilde = update_beta_tilde(&beta, &omega0, ssd0.matrix(), n, config.alpha, config.rule)?;
    let (mut p_mat, mut log_p) = marginals_with_logs(&beta_tilde)?;
    let mut omega = omega0;

    let mut elbo_trace = Vec::new();
    let mut trace = Vec::new();
    let mut terms = ElboTerms::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut degenerate = Vec::new();

    for it in 1..=config.max_iter {
        iterations = it;
        let (m_all, s_all) = joint_moments(pln, &m_h, &s_h);
        let ssd = compute_ssd(&m_all, &s_all)?;

        // M-step.
        beta = beta_step(&p_mat, &log_p, &beta)?;
        omega = update_omega(&ssd)?;

        // VE-step.
        beta_tilde = update_beta_tilde(&beta, &omega, ssd.matrix(), n, config.alpha, config.rule)?;
        let (p_new, log_p_new) = marginals_with_logs(&beta_tilde)?;
        let omega_bar = expected_precision(&omega, &p_new);
        let (m_new, s_new) = update_hidden(&pln.m_obs, &omega_bar)?;

        let (m_raw, s_raw) = joint_moments(pln, &m_new, &s_new);
        let ssd_raw = raw_ssd(&m_raw, &s_raw)?;
        terms = elbo(pln.observed_term, &beta, &beta_tilde, &p_new, &omega, &omega_bar, &ssd_raw, &s_new, n)?;

        let mut m_next = m_new;
        let mut s_next = s_new;
        rescale_hidden(&mut m_next, &mut s_next);
        degenerate = (0..r)
            .filter(|&h| {
                let v = column_variance(m_next.column(h));
                !(v.ln() >= DEGENERATE_LOG_VARIANCE)
            })
            .collect();

        let delta_p = (p_new.matrix() - p_mat.matrix()).amax();
        let delta_m = if r > 0 { (&m_next - &m_h).amax() } else { 0.0 };
        let mass = p_new.total_mass() - (q as f64 - 1.0);
        trace.push(TraceRecord { iteration: it, elbo: terms.total(), delta_p, delta_m, edge_mass_error: mass });
        elbo_trace.push(terms.total());
        debug!("iteration {it}: J = {:.6}, dP = {delta_p:.2e}, dM = {delta_m:.2e}", terms.total());

        p_mat = p_new;
        log_p = log_p_new;
        m_h = m_next;
        s_h = s_next;
        if delta_p.max(delta_m) < config.eps {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("VEM stopped after {iterations} iterations without reaching eps = {}", config.eps);
    }
    for &h in &degenerate {
        warn!("missing actor {} ended in a degenerate solution (Var(M_h) < e^-20)", h + 1);
    }

    Ok(VemState {
        p_obs: p,
        beta,
        beta_tilde,
        omega,
        m_hidden: m_h,
        s_hidden: s_h,
        p: p_mat,
        elbo_trace,
        terms,
        trace,
        converged,
        iterations,
        degenerate_actors: degenerate,
        cliques: init.cliques.clone(),
    })
}

/// Outcome of one candidate initialization.
#[derive(Debug)]
pub struct CandidateRun {
    pub index: usize,
    pub result: Result<VemState>,
}

/// Runs one VEM per initialization in parallel and returns every outcome
/// together with the index of the best non-degenerate run by final bound.
pub fn run_candidates(
    pln: &PlnFit,
    inits: &[InitState],
    config: &VemConfig,
) -> (Vec<CandidateRun>, Option<usize>) {
    let runs: Vec<CandidateRun> = inits
        .par_iter()
        .enumerate()
        .map(|(index, init)| CandidateRun { index, result: run_vem(pln, init, config) })
        .collect();
    let best = runs
        .iter()
        .filter_map(|c| c.result.as_ref().ok().filter(|s| !s.is_degenerate()).map(|s| (c.index, s.elbo())))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    (runs, best)
}
