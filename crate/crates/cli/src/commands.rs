use std::path::Path;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use nestor::bench::{replicate_seed, run_benchmark, summarize, BenchConfig, BenchMode, MeanSd};
use nestor::init::{
    candidate_cliques, candidate_from_cliques, default_cardinality, init_params, resample_cliques, Candidate,
    InitState,
};
use nestor::model_select::{select_r, CrossValConfig};
use nestor::pln::{fit_pln, PlnFit};
use nestor::simulate::{simulate_replicate, SimConfig};
use nestor::vem::{auto_alpha, compute_ssd, observed_only_init, run_candidates, TreeWeightRule, VemConfig};
use nestor::CountDataset;

use crate::io::{fmt, fmt_opt, read_cliques, read_counts, read_table, write_matrix, TidyWriter};
use crate::manifest::ManifestBuilder;
use crate::{BenchmarkArgs, CliError, DataArgs, FitArgs, SelectArgs, SimulateArgs, Status, VemArgs};

const PLN_MAX_ITER: usize = 300;
const PLN_TOL: f64 = 1e-8;
const RESAMPLE_FRACTION: f64 = 0.8;

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Loaded dataset with its site labels.
struct Loaded {
    data: CountDataset,
    sites: Vec<String>,
}

fn load(args: &DataArgs, mb: &mut ManifestBuilder) -> Result<Loaded, CliError> {
    let counts = read_counts(&args.counts)?;
    mb.input(&args.counts)?;
    let n = counts.values.nrows();
    let p = counts.values.ncols();
    let mut x = if args.no_intercept { DMatrix::zeros(n, 0) } else { DMatrix::from_element(n, 1, 1.0) };
    if let Some(path) = &args.covariates {
        let cov = read_table(path)?;
        mb.input(path)?;
        if cov.values.nrows() != n {
            return Err(CliError::Input(format!(
                "{}: {} rows, counts have {n}",
                path.display(),
                cov.values.nrows()
            )));
        }
        let d0 = x.ncols();
        x = x.resize_horizontally(d0 + cov.values.ncols(), 0.0);
        x.view_mut((0, d0), (n, cov.values.ncols())).copy_from(&cov.values);
    }
    if x.ncols() == 0 {
        return Err(CliError::Input("no covariates: drop --no-intercept or pass --covariates".into()));
    }
    let o = match &args.offsets {
        Some(path) => {
            let t = read_table(path)?;
            mb.input(path)?;
            if t.values.shape() != (n, p) {
                return Err(CliError::Input(format!(
                    "{}: offsets are {}x{}, counts are {n}x{p}",
                    path.display(),
                    t.values.nrows(),
                    t.values.ncols()
                )));
            }
            t.values
        }
        None => DMatrix::zeros(n, p),
    };
    let data = CountDataset::with_names(counts.values, x, o, counts.columns)?;
    Ok(Loaded { data, sites: counts.rows })
}

fn parse_rule(s: &str) -> Result<TreeWeightRule, CliError> {
    match s {
        "standard" => Ok(TreeWeightRule::Standard),
        "mean-field" => Ok(TreeWeightRule::MeanField),
        other => Err(CliError::Input(format!("unknown --rule '{other}' (standard|mean-field)"))),
    }
}

/// Resolves `--alpha`, computing the automatic bound for `q` nodes if asked.
fn vem_config(args: &VemArgs, fit: Option<&PlnFit>, q: usize) -> Result<VemConfig, CliError> {
    let alpha = if args.alpha == "auto" {
        let fit = fit.ok_or_else(|| CliError::Input("--alpha auto is not available for this command".into()))?;
        let a = auto_alpha(&compute_ssd(&fit.m_obs, &fit.s_obs)?, q)?;
        info!("automatic alpha = {a:.5}");
        a
    } else {
        args.alpha.parse().map_err(|_| CliError::Input(format!("--alpha must be a number or 'auto', got '{}'", args.alpha)))?
    };
    Ok(VemConfig { alpha, eps: args.eps, max_iter: args.max_iter, rule: parse_rule(&args.rule)? })
}

#[derive(Serialize)]
struct FitSnapshot<'a> {
    r: usize,
    vem: &'a VemConfig,
    cliques_file: Option<String>,
    resample: Option<usize>,
    cardinality: usize,
    pln_max_iter: usize,
    pln_tol: f64,
    intercept: bool,
}

fn node_name(species: &[String], k: usize) -> String {
    if k < species.len() {
        species[k].clone()
    } else {
        format!("H{}", k - species.len() + 1)
    }
}

fn clique_names(species: &[String], clique: &[usize]) -> String {
    clique.iter().map(|&j| species[j].as_str()).collect::<Vec<_>>().join(";")
}

pub fn fit(a: &FitArgs) -> Result<Status, CliError> {
    prepare_out(&a.out)?;
    let mut mb = ManifestBuilder::new("fit", a.seed, &json!({}))?;
    let loaded = load(&a.data, &mut mb)?;
    let data = &loaded.data;
    let species = data.species().to_vec();
    let p = data.p();
    let card = a.cardinality.unwrap_or_else(|| default_cardinality(p));

    let user_cliques = match &a.cliques {
        Some(path) => {
            mb.input(path)?;
            Some(read_cliques(path, &species)?)
        }
        None => None,
    };
    let r = match (&user_cliques, a.r) {
        (Some(c), Some(r)) if c.len() != r => {
            return Err(CliError::Input(format!("--r {r} but the cliques file lists {} cliques", c.len())))
        }
        (Some(c), _) => c.len(),
        (None, r) => r.unwrap_or(1),
    };

    let fit = fit_pln(data, PLN_MAX_ITER, PLN_TOL)?;
    if !fit.converged {
        warn!("PLN fit stopped after {} iterations without converging", fit.iterations);
    }
    let cfg = vem_config(&a.vem, Some(&fit), p + r)?;

    let candidates: Vec<Candidate> = match user_cliques {
        Some(c) => vec![candidate_from_cliques(&fit.m_obs, c)?],
        None if r == 0 => Vec::new(),
        None => {
            let mut c = candidate_cliques(&fit.m_obs, r, card)?;
            if let Some(nres) = a.resample {
                for extra in resample_cliques(&fit.m_obs, r, card, nres, RESAMPLE_FRACTION, a.seed)? {
                    if !c.iter().any(|x| x.cliques == extra.cliques) {
                        c.push(extra);
                    }
                }
            }
            c
        }
    };
    let inits: Vec<InitState> = if r == 0 {
        vec![observed_only_init(data.n(), p)?]
    } else {
        candidates.iter().map(|c| init_params(&fit.m_obs, c)).collect::<Result<_, _>>()?
    };
    info!("running {} VEM initialisations", inits.len());
    let (runs, best) = run_candidates(&fit, &inits, &cfg);

    let mut cw = TidyWriter::create(
        &a.out,
        "candidates.csv",
        "candidates",
        &["candidate", "cliques", "elbo", "iterations", "converged", "degenerate_actors", "error", "selected"],
    )?;
    let mut tw = TidyWriter::create(
        &a.out,
        "trace.csv",
        "trace",
        &["candidate", "iteration", "elbo", "delta_p", "delta_m", "edge_mass_error"],
    )?;
    for run in &runs {
        let cliques = inits[run.index].cliques.iter().map(|c| clique_names(&species, c)).collect::<Vec<_>>().join("|");
        let selected = (Some(run.index) == best).to_string();
        match &run.result {
            Ok(s) => {
                let deg = s.degenerate_actors.iter().map(|h| format!("H{}", h + 1)).collect::<Vec<_>>().join(";");
                cw.row([
                    run.index.to_string(),
                    cliques,
                    fmt(s.elbo()),
                    s.iterations.to_string(),
                    s.converged.to_string(),
                    deg,
                    String::new(),
                    selected,
                ])?;
                for t in &s.trace {
                    tw.row([
                        run.index.to_string(),
                        t.iteration.to_string(),
                        fmt(t.elbo),
                        fmt(t.delta_p),
                        fmt(t.delta_m),
                        fmt(t.edge_mass_error),
                    ])?;
                }
            }
            Err(e) => {
                cw.row([
                    run.index.to_string(),
                    cliques,
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.to_string(),
                    selected,
                ])?;
            }
        }
    }
    mb.output(&cw.finish()?);
    mb.output(&tw.finish()?);

    let Some(b) = best else {
        let err = runs.into_iter().find_map(|c| c.result.err());
        return Err(match err {
            Some(e) => CliError::Core(e),
            None => CliError::Core(nestor::Error::Degenerate("every initialisation ended in a degenerate solution".into())),
        });
    };
    let state = runs[b].result.as_ref().expect("selected run succeeded");

    let mut ew =
        TidyWriter::create(&a.out, "edges.csv", "edges", &["k", "l", "node_k", "node_l", "probability", "omega"])?;
    let q = state.q();
    for k in 0..q {
        for l in (k + 1)..q {
            if k >= p && l >= p {
                continue;
            }
            ew.row([
                (k + 1).to_string(),
                (l + 1).to_string(),
                node_name(&species, k),
                node_name(&species, l),
                fmt(state.p.get(k, l)),
                fmt(state.omega.omega[(k, l)]),
            ])?;
        }
    }
    mb.output(&ew.finish()?);

    if r > 0 {
        let mut hw = TidyWriter::create(&a.out, "hidden_means.csv", "hidden_means", &["site", "actor", "mean", "variance"])?;
        for i in 0..data.n() {
            for h in 0..r {
                hw.row([
                    loaded.sites[i].clone(),
                    format!("H{}", h + 1),
                    fmt(state.m_hidden[(i, h)]),
                    fmt(state.s_hidden[h]),
                ])?;
            }
        }
        mb.output(&hw.finish()?);
    }

    let snapshot = FitSnapshot {
        r,
        vem: &cfg,
        cliques_file: a.cliques.as_ref().map(|p| p.display().to_string()),
        resample: a.resample,
        cardinality: card,
        pln_max_iter: PLN_MAX_ITER,
        pln_tol: PLN_TOL,
        intercept: !a.data.no_intercept,
    };
    mb.set_config(&snapshot)?;
    mb.write(
        &a.out,
        json!({
            "selected_candidate": b,
            "elbo": state.elbo(),
            "converged": state.converged,
            "iterations": state.iterations,
            "candidates": inits.len(),
            "pln_converged": fit.converged,
        }),
    )?;
    Ok(if state.converged { Status::Done } else { Status::NotConverged })
}

pub fn select(a: &SelectArgs) -> Result<Status, CliError> {
    prepare_out(&a.out)?;
    let mut mb = ManifestBuilder::new("select", a.seed, &json!({}))?;
    let loaded = load(&a.data, &mut mb)?;
    let data = &loaded.data;
    let rmax = a.r_grid.iter().copied().max().unwrap_or(0);
    let full_fit = if a.vem.alpha == "auto" { Some(fit_pln(data, PLN_MAX_ITER, PLN_TOL)?) } else { None };
    let vem = vem_config(&a.vem, full_fit.as_ref(), data.p() + rmax)?;
    let cfg = CrossValConfig {
        r_grid: a.r_grid.clone(),
        folds: a.folds,
        trees: a.trees,
        seed: a.seed,
        vem,
        cardinality: a.cardinality,
        pln_max_iter: PLN_MAX_ITER,
        pln_tol: PLN_TOL,
    };
    mb.set_config(&cfg)?;
    let table = select_r(data, &cfg)?;

    let mut fw = TidyWriter::create(&a.out, "pcl.csv", "pcl", &["r", "fold", "pcl"])?;
    for row in &table.rows {
        for (v, s) in row.folds.iter().enumerate() {
            fw.row([row.r.to_string(), (v + 1).to_string(), fmt_opt(*s)])?;
        }
    }
    mb.output(&fw.finish()?);
    let mut sw =
        TidyWriter::create(&a.out, "pcl_summary.csv", "pcl_summary", &["r", "mean", "sd", "folds_used", "selected"])?;
    for row in &table.rows {
        let ms = MeanSd::of(row.folds.iter().flatten().copied());
        sw.row([
            row.r.to_string(),
            fmt(row.mean),
            fmt(ms.sd),
            ms.count.to_string(),
            (row.r == table.best_r).to_string(),
        ])?;
    }
    mb.output(&sw.finish()?);
    mb.write(&a.out, json!({ "best_r": table.best_r }))?;
    println!("{}", table.best_r);
    Ok(Status::Done)
}

pub fn simulate(a: &SimulateArgs) -> Result<Status, CliError> {
    prepare_out(&a.out)?;
    let sim = SimConfig { p: a.p, n: a.n, ..SimConfig::default() };
    let mut mb = ManifestBuilder::new("simulate", a.seed, &json!({ "sim": &sim, "reps": a.reps }))?;
    let mut lw = TidyWriter::create(
        &a.out,
        "replicates.csv",
        "replicates",
        &["replicate", "seed", "directory", "hidden_degree", "influence_class"],
    )?;
    let width = a.reps.max(1).to_string().len().max(3);
    for k in 0..a.reps {
        let seed = replicate_seed(a.seed, k);
        let rep = simulate_replicate(&sim, seed)?;
        let name = format!("rep_{:0width$}", k + 1);
        let dir = a.out.join(&name);
        std::fs::create_dir_all(&dir)?;
        let species: Vec<String> = (1..=a.p).map(|j| format!("sp{j}")).collect();
        let sites: Vec<String> = (1..=a.n).map(|i| format!("s{i}")).collect();
        write_matrix(&dir.join("counts.csv"), &species, Some(&sites), &rep.y)?;
        let adj = rep.inference_adjacency();
        let mut nodes = species.clone();
        nodes.push("hidden".into());
        let truth = json!({
            "seed": seed,
            "nodes": nodes,
            "adjacency": (0..adj.nrows()).map(|i| (0..adj.ncols()).map(|j| adj[(i, j)]).collect::<Vec<u8>>()).collect::<Vec<_>>(),
            "hidden_index": rep.hidden_index,
            "hidden_degree": rep.hidden_degree(),
            "influence_class": rep.influence_class.name(),
            "true_clique": rep.true_clique().iter().map(|&j| species[j].clone()).collect::<Vec<_>>(),
            "hidden_latent": rep.hidden_latent().iter().copied().collect::<Vec<f64>>(),
        });
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&truth).expect("json") + "\n")?;
        info!("replicate {}: hidden degree {} ({})", k + 1, rep.hidden_degree(), rep.influence_class.name());
        lw.row([
            (k + 1).to_string(),
            seed.to_string(),
            name,
            rep.hidden_degree().to_string(),
            rep.influence_class.name().to_string(),
        ])?;
    }
    mb.output(&lw.finish()?);
    mb.write(&a.out, json!({ "replicates": a.reps }))?;
    Ok(Status::Done)
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<Status, CliError> {
    prepare_out(&a.out)?;
    let mode: BenchMode = a.mode.parse()?;
    let vem = vem_config(&a.vem, None, a.p + 1)?;
    let cfg = BenchConfig {
        mode,
        reps: a.reps,
        seed: a.seed,
        sim: SimConfig { p: a.p, n: a.n, ..SimConfig::default() },
        vem,
        pln_max_iter: PLN_MAX_ITER,
        pln_tol: PLN_TOL,
    };
    let mut mb = ManifestBuilder::new("benchmark", a.seed, &cfg)?;
    let out = run_benchmark(&cfg);

    let mut rw = TidyWriter::create(
        &a.out,
        "results.csv",
        "results",
        &[
            "replicate", "seed", "class", "hidden_degree", "auc", "precision", "recall", "correlation", "time_s",
            "converged", "clique_fnr", "clique_fpr",
        ],
    )?;
    for r in &out.results {
        let e = &r.report;
        rw.row([
            (r.replicate + 1).to_string(),
            r.seed.to_string(),
            e.influence_class.name().to_string(),
            r.hidden_degree.to_string(),
            fmt(e.auc),
            fmt_opt(e.precision),
            fmt_opt(e.recall),
            fmt_opt(e.hidden_correlation),
            fmt(e.runtime_s),
            e.converged.to_string(),
            fmt_opt(r.clique_fnr),
            fmt_opt(r.clique_fpr),
        ])?;
    }
    mb.output(&rw.finish()?);

    let mut sw = TidyWriter::create(
        &a.out,
        "summary.csv",
        "summary",
        &[
            "class", "n", "auc_mean", "auc_sd", "precision_mean", "precision_sd", "recall_mean", "recall_sd",
            "correlation_mean", "correlation_sd", "time_mean", "time_sd",
        ],
    )?;
    for c in summarize(&out.results) {
        sw.row([
            c.class.name().to_string(),
            c.n.to_string(),
            fmt(c.auc.mean),
            fmt(c.auc.sd),
            fmt(c.precision.mean),
            fmt(c.precision.sd),
            fmt(c.recall.mean),
            fmt(c.recall.sd),
            fmt(c.correlation.mean),
            fmt(c.correlation.sd),
            fmt(c.time.mean),
            fmt(c.time.sd),
        ])?;
    }
    mb.output(&sw.finish()?);
    for (k, msg) in &out.failures {
        warn!("replicate {} excluded: {msg}", k + 1);
    }
    mb.write(
        &a.out,
        json!({
            "completed": out.results.len(),
            "failed": out.failures.len(),
            "failures": out.failures.iter().map(|(k, m)| json!({ "replicate": k + 1, "error": m })).collect::<Vec<_>>(),
        }),
    )?;
    if out.results.is_empty() && !out.failures.is_empty() {
        return Err(CliError::Core(nestor::Error::Degenerate("every replicate failed".into())));
    }
    Ok(Status::Done)
}
