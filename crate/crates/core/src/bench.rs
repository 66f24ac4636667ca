//! Simulation benchmark: simulate, infer one missing actor, score.

use std::collections::BTreeMap;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::{candidate_cliques, candidate_from_cliques, default_cardinality, init_params, InitState};
use crate::metrics::{auc_edges, clique_error_rates, hidden_correlation, hidden_link_pr, EvalReport};
use crate::pln::fit_pln;
use crate::simulate::{simulate_replicate, InfluenceClass, SimConfig, SimReplicate};
use crate::vem::{run_candidates, VemConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Candidate cliques from sPCA, best bound kept.
    Blind,
    /// A single run started from the true neighbourhood of the missing actor.
    Oracle,
}

impl std::str::FromStr for BenchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blind" => Ok(BenchMode::Blind),
            "oracle" => Ok(BenchMode::Oracle),
            other => Err(Error::Config(format!("unknown benchmark mode '{other}' (blind|oracle)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub reps: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub vem: VemConfig,
    pub pln_max_iter: usize,
    pub pln_tol: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Blind,
            reps: 60,
            seed: 1,
            sim: SimConfig::default(),
            vem: VemConfig::default(),
            pln_max_iter: 300,
            pln_tol: 1e-8,
        }
    }
}

/// Seed of replicate `k`.
pub fn replicate_seed(master: u64, k: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub hidden_degree: usize,
    pub report: EvalReport,
    /// Initial clique of the retained run, as observed column indices.
    pub initial_clique: Vec<usize>,
    pub clique_fnr: Option<f64>,
    pub clique_fpr: Option<f64>,
}

fn inits_for(rep: &SimReplicate, m_obs: &nalgebra::DMatrix<f64>, mode: BenchMode) -> Result<Vec<InitState>> {
    let candidates = match mode {
        BenchMode::Blind => candidate_cliques(m_obs, 1, default_cardinality(m_obs.ncols()))?,
        BenchMode::Oracle => vec![candidate_from_cliques(m_obs, vec![rep.true_clique()])?],
    };
    candidates.iter().map(|c| init_params(m_obs, c)).collect()
}

/// Runs one replicate end to end.
pub fn run_replicate(config: &BenchConfig, k: usize) -> Result<ReplicateResult> {
    let seed = replicate_seed(config.seed, k);
    let rep = simulate_replicate(&config.sim, seed)?;
    let start = Instant::now();
    let data = rep.dataset()?;
    let fit = fit_pln(&data, config.pln_max_iter, config.pln_tol)?;
    let inits = inits_for(&rep, &fit.m_obs, config.mode)?;
    let (mut runs, best) = run_candidates(&fit, &inits, &config.vem);
    let b = best.ok_or_else(|| {
        let why = runs.iter().find_map(|c| c.result.as_ref().err()).map(|e| e.to_string());
        Error::Degenerate(why.unwrap_or_else(|| "every candidate ended in a degenerate solution".into()))
    })?;
    let state = std::mem::replace(&mut runs[b].result, Err(Error::Degenerate(String::new())))?;
    let runtime_s = start.elapsed().as_secs_f64();

    let truth = rep.inference_adjacency();
    let p = rep.observed_nodes().len();
    let pm = state.p.matrix();
    let auc = auc_edges(pm, &truth, p)?;
    let pr = hidden_link_pr(pm, &truth, p, 0.5);
    let corr = hidden_correlation(&state.m_hidden.column(0).into_owned(), &rep.hidden_latent()).ok();
    let initial_clique = state.cliques.first().cloned().unwrap_or_default();
    let (clique_fnr, clique_fpr) = clique_error_rates(&initial_clique, &rep.true_clique(), p);
    Ok(ReplicateResult {
        replicate: k,
        seed,
        hidden_degree: rep.hidden_degree(),
        report: EvalReport {
            auc,
            precision: pr.precision,
            recall: pr.recall,
            hidden_correlation: corr,
            runtime_s,
            influence_class: rep.influence_class,
            converged: state.converged,
        },
        initial_clique,
        clique_fnr,
        clique_fpr,
    })
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub results: Vec<ReplicateResult>,
    /// `(replicate, message)` of failed replicates.
    pub failures: Vec<(usize, String)>,
}

/// Runs all replicates in parallel; failures are logged and counted.
pub fn run_benchmark(config: &BenchConfig) -> BenchOutcome {
    let out: Vec<(usize, Result<ReplicateResult>)> =
        (0..config.reps).into_par_iter().map(|k| (k, run_replicate(config, k))).collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in out {
        match r {
            Ok(v) => results.push(v),
            Err(e) => {
                warn!("replicate {k} failed: {e}");
                failures.push((k, e.to_string()));
            }
        }
    }
    BenchOutcome { results, failures }
}

/// Mean and standard deviation over the available values.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl MeanSd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return MeanSd { mean: f64::NAN, sd: f64::NAN, count: 0 };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, count: n }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassSummary {
    pub class: InfluenceClass,
    pub n: usize,
    pub auc: MeanSd,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub correlation: MeanSd,
    pub time: MeanSd,
}

/// Per-class aggregates, in class order.
pub fn summarize(results: &[ReplicateResult]) -> Vec<ClassSummary> {
    let mut by: BTreeMap<InfluenceClass, Vec<&EvalReport>> = BTreeMap::new();
    for r in results {
        by.entry(r.report.influence_class).or_default().push(&r.report);
    }
    by.into_iter()
        .map(|(class, v)| ClassSummary {
            class,
            n: v.len(),
            auc: MeanSd::of(v.iter().map(|r| r.auc)),
            precision: MeanSd::of(v.iter().filter_map(|r| r.precision)),
            recall: MeanSd::of(v.iter().filter_map(|r| r.recall)),
            correlation: MeanSd::of(v.iter().filter_map(|r| r.hidden_correlation)),
            time: MeanSd::of(v.iter().map(|r| r.runtime_s)),
        })
        .collect()
}
