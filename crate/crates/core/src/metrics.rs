//! Scores of an inferred network against a simulated truth.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulate::InfluenceClass;

/// One benchmark row.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    /// Missing when nothing was predicted.
    pub precision: Option<f64>,
    /// Missing when the hidden node has no true neighbour.
    pub recall: Option<f64>,
    pub hidden_correlation: Option<f64>,
    pub runtime_s: f64,
    pub influence_class: InfluenceClass,
    pub converged: bool,
}

/// Scored node pairs: all `j < k` except pairs of hidden nodes.
fn scored_pairs(q: usize, p_obs: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..q).flat_map(move |j| ((j + 1)..q).map(move |k| (j, k))).filter(move |&(j, k)| j < p_obs || k < p_obs)
}

/// Rank AUC of `scores` against 0/1 `truth`, ties counted one half.
pub fn rank_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), truth.len());
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if truth[t] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// AUC of edge probabilities against the true adjacency, with observed
/// nodes first and the `q − p_obs` hidden nodes last in both matrices.
pub fn auc_edges(p: &DMatrix<f64>, truth: &DMatrix<u8>, p_obs: usize) -> Result<f64> {
    let q = p.nrows();
    if truth.shape() != (q, q) || p.ncols() != q || p_obs > q {
        return Err(Error::InvalidInput(format!(
            "edge scores are {:?}, truth is {:?}",
            p.shape(),
            truth.shape()
        )));
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) =
        scored_pairs(q, p_obs).map(|(j, k)| (p[(j, k)], truth[(j, k)] != 0)).unzip();
    rank_auc(&scores, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Precision and recall of the links of `hidden` at `P > threshold`.
pub fn hidden_link_pr(p: &DMatrix<f64>, truth: &DMatrix<u8>, hidden: usize, threshold: f64) -> PrecisionRecall {
    let q = p.nrows();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for j in (0..q).filter(|&j| j != hidden) {
        match (p[(hidden, j)] > threshold, truth[(hidden, j)] != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    PrecisionRecall { precision: ratio(tp, fp), recall: ratio(tp, fn_) }
}

/// `|corr(a, b)|`.
pub fn hidden_correlation(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::InvalidInput("correlation needs two vectors of equal length >= 3".into()));
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::Degenerate("constant vector in correlation".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).abs().min(1.0))
}

/// Greedy matching of inferred hidden columns to true ones by largest
/// absolute correlation; `out[h]` is the true index for inferred `h`.
pub fn match_hidden(inferred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (r, rt) = (inferred.ncols(), truth.ncols());
    if r > rt {
        return Err(Error::InvalidInput(format!("{r} inferred actors but only {rt} true ones")));
    }
    let mut corr = Vec::new();
    for h in 0..r {
        for t in 0..rt {
            let c = hidden_correlation(&inferred.column(h).into_owned(), &truth.column(t).into_owned()).unwrap_or(0.0);
            corr.push((c, h, t));
        }
    }
    corr.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![usize::MAX; r];
    let mut used = vec![false; rt];
    for (_, h, t) in corr {
        if out[h] == usize::MAX && !used[t] {
            out[h] = t;
            used[t] = true;
        }
    }
    Ok(out)
}

/// False negative and false positive rates of an estimated clique of
/// observed nodes against the true neighbourhood.
pub fn clique_error_rates(estimated: &[usize], truth: &[usize], p: usize) -> (Option<f64>, Option<f64>) {
    let fneg = truth.iter().filter(|t| !estimated.contains(t)).count();
    let fpos = estimated.iter().filter(|e| !truth.contains(e)).count();
    let negatives = p - truth.len();
    let rate = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    (rate(fneg, truth.len()), rate(fpos, negatives))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_truth(q: usize, seed: u64) -> (DMatrix<f64>, DMatrix<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DMatrix::zeros(q, q);
        let mut t = DMatrix::zeros(q, q);
        for j in 0..q {
            for k in (j + 1)..q {
                let v = (rng.random::<f64>() * 8.0).floor() / 8.0;
                let e = (rng.random::<f64>() < 0.3) as u8;
                p[(j, k)] = v;
                p[(k, j)] = v;
                t[(j, k)] = e;
                t[(k, j)] = e;
            }
        }
        t[(0, 1)] = 1;
        t[(1, 0)] = 1;
        t[(0, 2)] = 0;
        t[(2, 0)] = 0;
        (p, t)
    }

    /// Quadratic-time AUC over all positive/negative pairs.
    fn pairwise_auc(p: &DMatrix<f64>, t: &DMatrix<u8>, p_obs: usize) -> f64 {
        let pairs: Vec<(f64, bool)> = scored_pairs(p.nrows(), p_obs).map(|(j, k)| (p[(j, k)], t[(j, k)] != 0)).collect();
        let (mut s, mut c) = (0.0, 0.0);
        for a in pairs.iter().filter(|x| x.1) {
            for b in pairs.iter().filter(|x| !x.1) {
                s += if a.0 > b.0 { 1.0 } else if a.0 == b.0 { 0.5 } else { 0.0 };
                c += 1.0;
            }
        }
        s / c
    }

    #[test]
    fn perfect_and_constant_scores() {
        let (_, t) = random_truth(8, 1);
        let p = t.map(|v| v as f64);
        assert_relative_eq!(auc_edges(&p, &t, 7).unwrap(), 1.0);
        let c = DMatrix::from_element(8, 8, 0.3);
        assert_relative_eq!(auc_edges(&c, &t, 7).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        for seed in 0..20 {
            let (p, t) = random_truth(10, seed);
            let a = auc_edges(&p, &t, 8).unwrap();
            assert!((a - pairwise_auc(&p, &t, 8)).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_pairs_excluded() {
        let (mut p, t) = random_truth(6, 3);
        let base = auc_edges(&p, &t, 4).unwrap();
        p[(4, 5)] = 17.0;
        p[(5, 4)] = 17.0;
        assert_eq!(auc_edges(&p, &t, 4).unwrap(), base);
    }

    #[test]
    fn undefined_auc() {
        let t = DMatrix::<u8>::zeros(4, 4);
        assert!(matches!(auc_edges(&DMatrix::zeros(4, 4), &t, 4), Err(Error::UndefinedAuc)));
    }

    #[test]
    fn precision_recall_conventions() {
        let q = 6;
        let h = 5;
        let mut t = DMatrix::<u8>::zeros(q, q);
        for j in [0, 1, 2, 3] {
            t[(h, j)] = 1;
            t[(j, h)] = 1;
        }
        let p = t.map(|v| v as f64);
        assert_eq!(hidden_link_pr(&p, &t, h, 0.5), PrecisionRecall { precision: Some(1.0), recall: Some(1.0) });
        let z = DMatrix::zeros(q, q);
        assert_eq!(hidden_link_pr(&z, &t, h, 0.5), PrecisionRecall { precision: None, recall: Some(0.0) });
        let mut half = z.clone();
        for j in [0, 1] {
            half[(h, j)] = 0.9;
            half[(j, h)] = 0.9;
        }
        assert_eq!(hidden_link_pr(&half, &t, h, 0.5), PrecisionRecall { precision: Some(1.0), recall: Some(0.5) });
    }

    #[test]
    fn correlation_cases() {
        let u = DVector::from_fn(50, |i, _| (i as f64 * 0.3).sin());
        assert_relative_eq!(hidden_correlation(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
        let v = u.map(|x| -2.0 * x + 3.0);
        assert_relative_eq!(hidden_correlation(&v, &u).unwrap(), 1.0, epsilon = 1e-12);
        let c = DVector::from_element(50, 1.0);
        assert!(matches!(hidden_correlation(&c, &u), Err(Error::Degenerate(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DVector::from_fn(1000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(1000, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert!(hidden_correlation(&a, &b).unwrap() <= 0.1);
    }

    #[test]
    fn greedy_matching_recovers_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = DMatrix::from_fn(80, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut inf = DMatrix::zeros(80, 2);
        inf.set_column(0, &(truth.column(2) * -1.0));
        inf.set_column(1, &(truth.column(0) * 0.5));
        assert_eq!(match_hidden(&inf, &truth).unwrap(), vec![2, 0]);
    }

    #[test]
    fn clique_rates() {
        let (fnr, fpr) = clique_error_rates(&[0, 1, 5], &[0, 1, 2, 3], 10);
        assert_relative_eq!(fnr.unwrap(), 0.5);
        assert_relative_eq!(fpr.unwrap(), 1.0 / 6.0);
    }

    proptest! {
        #[test]
        fn auc_invariant_to_increasing_transform(seed in 0u64..5000) {
            let (p, t) = random_truth(9, seed);
            let a = auc_edges(&p, &t, 8).unwrap();
            let b = auc_edges(&p.map(|v| (3.0 * v).exp() - 7.0), &t, 8).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn pr_invariant_to_observed_relabelling(seed in 0u64..5000) {
            let q = 7;
            let h = 6;
            let (p, t) = random_truth(q, seed);
            let mut perm: Vec<usize> = (0..h).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            perm.push(h);
            let pp = DMatrix::from_fn(q, q, |j, k| p[(perm[j], perm[k])]);
            let tt = DMatrix::from_fn(q, q, |j, k| t[(perm[j], perm[k])]);
            prop_assert_eq!(hidden_link_pr(&p, &t, h, 0.5), hidden_link_pr(&pp, &tt, h, 0.5));
        }

        #[test]
        fn correlation_affine_invariant(seed in 0u64..5000, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            prop_assume!(a.abs() > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(30, |_, _| rng.sample::<f64, _>(StandardNormal));
            let c0 = hidden_correlation(&x, &y).unwrap();
            let c1 = hidden_correlation(&x.map(|v| a * v + b), &y).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
        }
    }
}
