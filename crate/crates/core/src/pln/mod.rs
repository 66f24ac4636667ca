//! The Poisson log-normal observation model.
//!
//! `Y_ij | Z_ij ~ Poisson(exp(Z_ij))` with `Z_i = o_i + x_iᵀθ + W_i` and
//! `W_i ~ N(0, Σ)`. The fit maximizes the usual variational lower bound with
//! `q(W_i) = N(m_i, diag s_i)` by block coordinate ascent.

mod density;
mod quadrature;

pub use density::{bivariate_pln_logpdf, univariate_pln_logpdf};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::data::CountDataset;
use crate::error::{Error, Result};

const LN_2PI_E: f64 = 2.837_877_066_409_345_5;
const INIT_VARIANCE: f64 = 0.1;
const INNER_NEWTON: usize = 5;

/// Frozen observed-layer estimates used by the network inference.
#[derive(Clone, Debug)]
pub struct PlnFit {
    /// `d × p` regression coefficients.
    pub theta: DMatrix<f64>,
    /// Latent scales `σ_j`.
    pub sigma: DVector<f64>,
    /// `n × p` standardized variational means.
    pub m_obs: DMatrix<f64>,
    /// `n × p` standardized variational variances.
    pub s_obs: DMatrix<f64>,
    /// Unstandardized latent covariance `Σ`.
    pub covariance: DMatrix<f64>,
    pub elbo: f64,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `E_q log p(Y | U_O)` plus the entropy of `q(U_O)`, in unit scale.
    pub observed_term: f64,
}

impl PlnFit {
    pub fn n(&self) -> usize {
        self.m_obs.nrows()
    }
    pub fn p(&self) -> usize {
        self.m_obs.ncols()
    }

    /// `o_ij + x_iᵀθ_j` for every site of `data`.
    pub fn linear_predictor(&self, data: &CountDataset) -> DMatrix<f64> {
        data.offsets() + data.covariates() * &self.theta
    }
}

struct State {
    theta: DMatrix<f64>,
    m: DMatrix<f64>,
    s: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

/// PLN lower bound for unstandardized parameters.
pub fn pln_elbo(
    data: &CountDataset,
    theta: &DMatrix<f64>,
    m: &DMatrix<f64>,
    s: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<f64> {
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Degenerate("latent covariance is not positive definite".into()))?;
    let omega = chol.inverse();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let (n, p) = m.shape();
    let a = data.offsets() + data.covariates() * theta;
    let y = data.counts();
    let mut poisson = 0.0;
    for j in 0..p {
        for i in 0..n {
            let eta = a[(i, j)] + m[(i, j)];
            poisson += y[(i, j)] * eta - (eta + 0.5 * s[(i, j)]).exp() - ln_gamma(y[(i, j)] + 1.0);
        }
    }
    let ssd = m.transpose() * m + DMatrix::from_diagonal(&row_sums(s));
    let trace = (&omega * &ssd).trace();
    let entropy: f64 = s.iter().map(|v| v.ln()).sum();
    Ok(poisson - 0.5 * n as f64 * log_det - 0.5 * trace + 0.5 * entropy + 0.5 * (n * p) as f64)
}

fn row_sums(s: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(s.ncols(), s.column_iter().map(|c| c.sum()))
}

/// Fits the PLN model and returns standardized moments.
///
/// Stops when the relative ELBO change falls below `tol` or after
/// `max_iter` sweeps; in the latter case `converged` is false.
pub fn fit_pln(data: &CountDataset, max_iter: usize, tol: f64) -> Result<PlnFit> {
    let (n, p, d) = (data.n(), data.p(), data.d());
    let y = data.counts();
    let x = data.covariates();

    let log_y = y.map(|v| (v + 1.0).ln()) - data.offsets();
    let theta = if d > 0 {
        x.clone()
            .svd(true, true)
            .solve(&log_y, 1e-12)
            .map_err(|e| Error::Degenerate(format!("initial regression failed: {e}")))?
    } else {
        DMatrix::zeros(0, p)
    };
    let m = &log_y - x * &theta;
    let s = DMatrix::from_element(n, p, INIT_VARIANCE);
    let mut st = State { sigma: covariance_step(&m, &s), theta, m, s };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut prev = pln_elbo(data, &st.theta, &st.m, &st.s, &st.sigma)?;
    for it in 0..max_iter {
        iterations = it + 1;
        let omega = Cholesky::new(st.sigma.clone())
            .ok_or_else(|| Error::Degenerate("latent covariance lost positive definiteness".into()))?
            .inverse();
        if d > 0 {
            theta_step(data, &mut st);
        }
        let a = data.offsets() + x * &st.theta;
        mean_step(y, &a, &omega, &mut st);
        variance_step(&a, &omega, &mut st);
        st.sigma = covariance_step(&st.m, &st.s);
        let cur = pln_elbo(data, &st.theta, &st.m, &st.s, &st.sigma)?;
        trace.push(cur);
        if (cur - prev).abs() <= tol * cur.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = cur;
    }
    if !converged {
        warn!("PLN fit stopped after {iterations} sweeps without reaching tolerance {tol}");
    }

    let sigma = st.sigma.diagonal().map(f64::sqrt);
    let mut m_obs = st.m.clone();
    let mut s_obs = st.s.clone();
    for j in 0..p {
        m_obs.column_mut(j).scale_mut(1.0 / sigma[j]);
        s_obs.column_mut(j).scale_mut(1.0 / (sigma[j] * sigma[j]));
    }
    let a = data.offsets() + x * &st.theta;
    let mut observed_term = 0.0;
    for j in 0..p {
        for i in 0..n {
            let eta = a[(i, j)] + st.m[(i, j)];
            observed_term += y[(i, j)] * eta - (eta + 0.5 * st.s[(i, j)]).exp() - ln_gamma(y[(i, j)] + 1.0)
                + 0.5 * (LN_2PI_E + s_obs[(i, j)].ln());
        }
    }
    let elbo = *trace.last().unwrap_or(&prev);
    Ok(PlnFit {
        theta: st.theta,
        sigma,
        m_obs,
        s_obs,
        covariance: st.sigma,
        elbo,
        elbo_trace: trace,
        iterations,
        converged,
        observed_term,
    })
}

fn covariance_step(m: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    (m.transpose() * m + DMatrix::from_diagonal(&row_sums(s))) / n
}

/// Poisson-GLM Newton per species with the latent moments as offsets.
fn theta_step(data: &CountDataset, st: &mut State) {
    let x = data.covariates();
    let y = data.counts();
    let (n, d) = x.shape();
    for j in 0..data.p() {
        let off: DVector<f64> = DVector::from_fn(n, |i, _| {
            data.offsets()[(i, j)] + st.m[(i, j)] + 0.5 * st.s[(i, j)]
        });
        let obj = |th: &DVector<f64>| -> f64 {
            let eta = x * th;
            (0..n).map(|i| y[(i, j)] * eta[i] - (eta[i] + off[i]).exp()).sum()
        };
        let mut th: DVector<f64> = st.theta.column(j).into_owned();
        let mut f0 = obj(&th);
        for _ in 0..INNER_NEWTON {
            let eta = x * &th;
            let mu = DVector::from_fn(n, |i, _| (eta[i] + off[i]).exp());
            let grad = x.transpose() * (y.column(j) - &mu);
            let mut xw = x.clone();
            for i in 0..n {
                xw.row_mut(i).scale_mut(mu[i]);
            }
            let h = x.transpose() * xw + DMatrix::identity(d, d) * 1e-10;
            let Some(step) = Cholesky::new(h).map(|c| c.solve(&grad)) else { break };
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &th + &step * t;
                let f1 = obj(&cand);
                if f1 >= f0 {
                    th = cand;
                    accepted = f1 - f0 > 1e-12 * f0.abs().max(1.0);
                    f0 = f1;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        st.theta.set_column(j, &th);
    }
}

/// Newton per site on `Σ_j [y m − exp(a + m + s/2)] − ½ mᵀΩm`.
fn mean_step(y: &DMatrix<f64>, a: &DMatrix<f64>, omega: &DMatrix<f64>, st: &mut State) {
    let (n, p) = st.m.shape();
    for i in 0..n {
        let c = DVector::from_fn(p, |j, _| a[(i, j)] + 0.5 * st.s[(i, j)]);
        let yi: DVector<f64> = y.row(i).transpose();
        let obj = |m: &DVector<f64>| -> f64 {
            let mut v = -0.5 * m.dot(&(omega * m));
            for j in 0..p {
                v += yi[j] * m[j] - (c[j] + m[j]).exp();
            }
            v
        };
        let mut mi: DVector<f64> = st.m.row(i).transpose();
        let mut f0 = obj(&mi);
        for _ in 0..INNER_NEWTON {
            let e = DVector::from_fn(p, |j, _| (c[j] + mi[j]).exp());
            let grad = &yi - &e - omega * &mi;
            let mut h = omega.clone();
            for j in 0..p {
                h[(j, j)] += e[j];
            }
            let Some(step) = Cholesky::new(h).map(|ch| ch.solve(&grad)) else { break };
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &mi + &step * t;
                let f1 = obj(&cand);
                if f1 >= f0 {
                    accepted = f1 - f0 > 1e-12 * f0.abs().max(1.0);
                    mi = cand;
                    f0 = f1;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        st.m.set_row(i, &mi.transpose());
    }
}

/// Exact coordinate update of each `s_ij`: the root of
/// `1/s − Ω_jj − exp(a + m + s/2) = 0`.
fn variance_step(a: &DMatrix<f64>, omega: &DMatrix<f64>, st: &mut State) {
    let (n, p) = st.s.shape();
    for j in 0..p {
        let w = omega[(j, j)];
        for i in 0..n {
            let c = (a[(i, j)] + st.m[(i, j)]).exp();
            st.s[(i, j)] = variance_root(c, w);
        }
    }
}

pub(crate) fn variance_root(c: f64, w: f64) -> f64 {
    // phi(u) with s = e^u is strictly decreasing.
    let phi = |u: f64| (-u).exp() - w - c * (0.5 * u.exp()).exp();
    let mut hi = -(w.ln());
    let mut lo = hi - 1.0;
    while phi(lo) <= 0.0 {
        lo -= 2.0;
        if lo < -700.0 {
            return lo.exp();
        }
    }
    if phi(hi) > 0.0 {
        // Only possible through rounding at the bracket edge.
        return hi.exp();
    }
    let mut u = 0.5 * (lo + hi);
    for _ in 0..100 {
        let f = phi(u);
        if f > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let s = u.exp();
        let df = -(-u).exp() - c * (0.5 * s).exp() * 0.5 * s;
        let mut next = u - f / df;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() < 1e-14 {
            u = next;
            break;
        }
        u = next;
    }
    u.exp()
}
