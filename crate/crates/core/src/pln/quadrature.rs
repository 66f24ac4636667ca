//! Gauss–Hermite rules for `∫ f(x) e^{-x²} dx`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

/// Nodes with `ln w_i + x_i²`, so that `∫ f(x) dx ≈ Σ exp(lw_i) f(x_i)`.
#[derive(Debug)]
pub(crate) struct HermiteRule {
    pub nodes: Vec<f64>,
    pub log_scaled_weights: Vec<f64>,
}

const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}

/// Nodes from the eigenvalues of the Jacobi matrix, polished by Newton on
/// the orthonormal Hermite recurrence. The recurrence is carried with a
/// running log-scale so the weights stay accurate where the raw polynomials
/// overflow.
fn compute(n: usize) -> HermiteRule {
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let mut roots: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    roots.sort_by(|a, b| b.total_cmp(a));
    let mut x = vec![0.0; n];
    let mut lw = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = roots[i];
        let mut log_pp = 0.0;
        for _ in 0..20 {
            let (p1, pp, log_scale) = recurrence(z, n);
            let dz = p1 / pp;
            z -= dz;
            log_pp = pp.abs().ln() + log_scale;
            if dz.abs() <= 3e-15 * z.abs().max(1.0) {
                break;
            }
        }
        if 2 * i + 1 == n {
            z = 0.0;
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        let l = std::f64::consts::LN_2 - 2.0 * log_pp + z * z;
        lw[i] = l;
        lw[n - 1 - i] = l;
    }
    HermiteRule { nodes: x, log_scaled_weights: lw }
}

/// Returns `(p_n, p_n', log_scale)` where the true values are the returned
/// ones times `exp(log_scale)`.
fn recurrence(z: f64, n: usize) -> (f64, f64, f64) {
    let mut p1 = PIM4;
    let mut p2 = 0.0;
    let mut log_scale = 0.0;
    let mut p3;
    for j in 1..=n {
        p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        if p1.abs() > 1e150 {
            p1 *= 1e-150;
            p2 *= 1e-150;
            log_scale += 150.0 * std::f64::consts::LN_10;
        }
    }
    let pp = (2.0 * n as f64).sqrt() * p2;
    (p1, pp, log_scale)
}

type Cache = Mutex<HashMap<usize, Arc<HermiteRule>>>;

/// Cached rule with `n` nodes.
pub(crate) fn hermite_rule(n: usize) -> Arc<HermiteRule> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().expect("quadrature cache").get(&n) {
        return r.clone();
    }
    let rule = Arc::new(compute(n));
    cache.lock().expect("quadrature cache").insert(n, rule.clone());
    rule
}
