//! Poisson log-normal marginal densities by mode-centred Gauss–Hermite
//! quadrature.

use statrs::function::gamma::ln_gamma;

use super::quadrature::hermite_rule;
use crate::error::{Error, Result};
use crate::tree_algebra::log_sum_exp;

const START_NODES: usize = 30;
const MAX_NODES: usize = 480;
const NODE_TOL: f64 = 1e-7;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Runs `eval(n)` for n = 30, 60, … until successive values agree.
fn refine(mut eval: impl FnMut(usize) -> f64) -> f64 {
    let mut n = START_NODES;
    let mut prev = eval(n);
    while n < MAX_NODES {
        n *= 2;
        let cur = eval(n);
        if (cur - prev).abs() < NODE_TOL {
            return cur;
        }
        prev = cur;
    }
    prev
}

/// `log ∫ Pois(y; e^z) N(z; mu, s) dz`.
pub fn univariate_pln_logpdf(y: u64, mu: f64, s: f64) -> Result<f64> {
    if !(s > 0.0 && s.is_finite() && mu.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid univariate parameters mu={mu}, s={s}")));
    }
    let yf = y as f64;
    let f = |z: f64| yf * z - z.exp() - 0.5 * (z - mu) * (z - mu) / s;
    // Newton on the concave log-integrand.
    let mut z = if y > 0 && f(yf.ln()) > f(mu) { yf.ln() } else { mu };
    for _ in 0..200 {
        let g = yf - z.exp() - (z - mu) / s;
        let h = z.exp() + 1.0 / s;
        let step = g / h;
        let f0 = f(z);
        let mut t = 1.0;
        while f(z + t * step) < f0 && t > 1e-12 {
            t *= 0.5;
        }
        z += t * step;
        if (t * step).abs() < 1e-12 * z.abs().max(1.0) {
            break;
        }
    }
    let scale = (z.exp() + 1.0 / s).powf(-0.5);
    let konst = -ln_gamma(yf + 1.0) - 0.5 * (LN_2PI + s.ln());
    let lscale = 0.5 * std::f64::consts::LN_2 + scale.ln();
    let sq2 = std::f64::consts::SQRT_2 * scale;
    let mut buf = Vec::new();
    Ok(refine(|n| {
        let rule = hermite_rule(n);
        buf.clear();
        buf.extend(rule.nodes.iter().zip(&rule.log_scaled_weights).map(|(&t, &lw)| lw + f(z + sq2 * t)));
        log_sum_exp(&buf)
    }) + konst
        + lscale)
}

/// `log ∫∫ Pois(y1; e^{z1}) Pois(y2; e^{z2}) N(z; mu, Σ) dz` with
/// `Σ = [[s11, s12], [s12, s22]]`.
///
/// The rule is centred at the mode of the integrand and rotated by the
/// Cholesky factor of the inverse Hessian there.
pub fn bivariate_pln_logpdf(
    y1: u64,
    y2: u64,
    mu1: f64,
    mu2: f64,
    s11: f64,
    s22: f64,
    s12: f64,
) -> Result<f64> {
    let det = s11 * s22 - s12 * s12;
    if !(s11 > 0.0 && s22 > 0.0 && det > 0.0 && det.is_finite() && mu1.is_finite() && mu2.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "invalid bivariate covariance [[{s11}, {s12}], [{s12}, {s22}]]"
        )));
    }
    let (a, b) = (y1 as f64, y2 as f64);
    let (p11, p22, p12) = (s22 / det, s11 / det, -s12 / det);
    let f = |z1: f64, z2: f64| {
        let (d1, d2) = (z1 - mu1, z2 - mu2);
        a * z1 - z1.exp() + b * z2 - z2.exp() - 0.5 * (p11 * d1 * d1 + 2.0 * p12 * d1 * d2 + p22 * d2 * d2)
    };

    let start = |y: u64, mu: f64| if y > 0 { (y as f64).ln() } else { mu };
    let mut z = (mu1, mu2);
    let alt = (start(y1, mu1), start(y2, mu2));
    if f(alt.0, alt.1) > f(z.0, z.1) {
        z = alt;
    }
    let hessian = |z: (f64, f64)| (z.0.exp() + p11, z.1.exp() + p22, p12);
    for _ in 0..200 {
        let (e1, e2) = (z.0.exp(), z.1.exp());
        let (d1, d2) = (z.0 - mu1, z.1 - mu2);
        let g1 = a - e1 - (p11 * d1 + p12 * d2);
        let g2 = b - e2 - (p12 * d1 + p22 * d2);
        let (h11, h22, h12) = hessian(z);
        let hd = h11 * h22 - h12 * h12;
        let s1 = (h22 * g1 - h12 * g2) / hd;
        let s2 = (h11 * g2 - h12 * g1) / hd;
        let f0 = f(z.0, z.1);
        let mut t = 1.0;
        while f(z.0 + t * s1, z.1 + t * s2) < f0 && t > 1e-12 {
            t *= 0.5;
        }
        z = (z.0 + t * s1, z.1 + t * s2);
        if (t * s1).abs().max((t * s2).abs()) < 1e-12 * z.0.abs().max(z.1.abs()).max(1.0) {
            break;
        }
    }

    // L = C^{-T} where C C^T is the Hessian, so L L^T is its inverse.
    let (h11, h22, h12) = hessian(z);
    let c11 = h11.sqrt();
    let c21 = h12 / c11;
    let c22 = (h22 - c21 * c21).sqrt();
    let sq2 = std::f64::consts::SQRT_2;
    let (l11, l12, l22) = (sq2 / c11, -sq2 * c21 / (c11 * c22), sq2 / c22);
    let log_jac = std::f64::consts::LN_2 - (c11 * c22).ln();
    let konst = -ln_gamma(a + 1.0) - ln_gamma(b + 1.0) - LN_2PI - 0.5 * det.ln();

    let mut buf = Vec::new();
    Ok(refine(|n| {
        let rule = hermite_rule(n);
        buf.clear();
        for (&t1, &w1) in rule.nodes.iter().zip(&rule.log_scaled_weights) {
            for (&t2, &w2) in rule.nodes.iter().zip(&rule.log_scaled_weights) {
                let z1 = z.0 + l11 * t1 + l12 * t2;
                let z2 = z.1 + l22 * t2;
                buf.push(w1 + w2 + f(z1, z2));
            }
        }
        log_sum_exp(&buf)
    }) + konst
        + log_jac)
}
