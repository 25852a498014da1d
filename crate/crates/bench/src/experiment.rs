//! Runs every configured method on every seed and writes result tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use cpoe::baselines::{FullGp, Poe, PoeMode, SparseGp, FULL_GP_CAP};
use cpoe::graph::{ExpertGraph, GraphConfig};
use cpoe::kernels::GpParams;
use cpoe::metrics::MetricReport;
use cpoe::model::{CpoeModel, CpoeStructure, SavedModel};
use cpoe::prediction::{PredictConfig, PredictiveGaussian};
use cpoe::training::{
    fit_deterministic, log_prior, train_cpoe, LogNormal, ObjectiveKind, OptimMode, OptimizerConfig, PriorSpec,
    TraceEntry,
};
use log::{info, warn};

use crate::config::{DataSource, ExperimentConfig, Method};
use crate::dataset::{load_csv, write_csv, Dataset};
use crate::model_io;
use crate::synth::synth_gp_data;

/// Scores and timings of one method on one repetition.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    /// `None` on success, otherwise the error message.
    pub failure: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub report: Option<MetricReport>,
    pub lml: Option<f64>,
    pub train_secs: f64,
    pub fit_secs: f64,
    pub predict_secs: f64,
    pub trace: Vec<TraceEntry>,
    pub param_names: Vec<String>,
    /// Hyperparameters the method was fitted with.
    pub theta: Vec<f64>,
}

impl MethodOutcome {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub outcomes: Vec<MethodOutcome>,
    pub total_secs: f64,
    /// Wall time spent outside data preparation and method runs.
    pub overhead_secs: f64,
    pub output: PathBuf,
}

impl ExperimentSummary {
    pub fn overhead_fraction(&self) -> f64 {
        if self.total_secs > 0.0 {
            self.overhead_secs / self.total_secs
        } else {
            0.0
        }
    }
}

/// Predictions of one fitted method plus what the tables need.
#[derive(Clone)]
struct Fitted {
    latent: Vec<PredictiveGaussian>,
    noise: f64,
    lml: f64,
    train_secs: f64,
    fit_secs: f64,
    predict_secs: f64,
    trace: Vec<TraceEntry>,
    params: GpParams,
}

/// Shared inputs of every method on one repetition.
struct RepContext<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Dataset,
    init: GpParams,
    optim: Option<OptimizerConfig>,
    graph_seed: u64,
    rep: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let start = Instant::now();
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    let base = cfg.kernel.resolve()?;
    let mut outcomes = Vec::new();
    let mut work_secs = 0.0;
    for (rep, &seed) in cfg.seeds.iter().enumerate() {
        let t = Instant::now();
        let data = prepare_data(cfg, &base, seed)?;
        let d = data.input_dim();
        let init = GpParams {
            kernel: base.kernel.broadcast_to(d),
            log_noise: base.log_noise,
        };
        init.validate()?;
        let optim = match &cfg.train {
            Some(o) => {
                let mut o = o.clone();
                o.seed = seed;
                o.prior = prior_spec(&init, &cfg.priors)?;
                if !o.prior.is_empty() && o.objective == ObjectiveKind::Lml {
                    warn!("priors are set but train.objective is lml; they are ignored");
                }
                Some(o)
            }
            None => None,
        };
        let ctx = RepContext {
            cfg,
            data: &data,
            init,
            optim,
            graph_seed: cfg.graph_seed.unwrap_or(seed),
            rep,
        };
        info!("rep {rep} (seed {seed}): {} train / {} test points", data.n_train(), data.n_test());
        let train_path = cfg.output.join(format!("train_rep{rep}.csv"));
        write_train_csv(&train_path, &data)?;
        let reference = match run_full(&ctx) {
            Ok(f) => Some(f),
            Err(e) => {
                warn!("no full GP reference: {e:#}");
                None
            }
        };
        work_secs += t.elapsed().as_secs_f64();
        for &method in &cfg.methods {
            let t = Instant::now();
            let result = match method {
                Method::FullGp => match &reference {
                    Some(r) => Ok(r.clone()),
                    None => Err(anyhow!("full GP unavailable for {} training points", data.n_train())),
                },
                _ => run_method(&ctx, method),
            };
            let outcome = score(&ctx, method, seed, result, reference.as_ref());
            work_secs += t.elapsed().as_secs_f64();
            match &outcome.failure {
                None => info!("{method} rep {rep}: lml {:?}", outcome.lml),
                Some(e) => warn!("{method} rep {rep} failed: {e}"),
            }
            outcomes.push(outcome);
        }
    }
    write_results(cfg, &outcomes)?;
    write_traces(cfg, &outcomes)?;
    let total_secs = start.elapsed().as_secs_f64();
    let summary = ExperimentSummary {
        overhead_secs: (total_secs - work_secs).max(0.0),
        total_secs,
        outcomes,
        output: cfg.output.clone(),
    };
    write_timing(cfg, &summary)?;
    if summary.overhead_fraction() > 0.05 {
        warn!("harness overhead is {:.1}% of the run time", 100.0 * summary.overhead_fraction());
    }
    Ok(summary)
}

fn prepare_data(cfg: &ExperimentConfig, base: &GpParams, seed: u64) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Csv { path, target } => load_csv(path, target.as_deref(), cfg.test_fraction, seed),
        DataSource::Synthetic { n, d } => {
            let (x, y) = synth_gp_data(base, *n, *d, seed)?;
            let names = (0..*d).map(|k| format!("x{k}")).collect();
            Dataset::from_xy(&x, &y, cfg.test_fraction, seed, false, names, "y".into())
        }
    }
}

/// Maps `(name, nu, lambda)` entries onto the parameter vector.
pub fn prior_spec(params: &GpParams, priors: &[(String, f64, f64)]) -> Result<PriorSpec> {
    let names = params.param_names();
    let mut spec = PriorSpec::none(names.len());
    for (name, nu, lambda) in priors {
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| anyhow!("prior on unknown parameter '{name}'; parameters are {names:?}"))?;
        spec.priors[i] = Some(LogNormal::new(*nu, *lambda)?);
    }
    Ok(spec)
}

fn write_train_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut header = data.input_names.clone();
    header.push(data.target_name.clone());
    let rows = (0..data.n_train()).map(|i| {
        let mut r: Vec<f64> = data.x_train.row(i).iter().copied().collect();
        r.push(data.y_train[i]);
        r
    });
    write_csv(Some(path), &header, rows)
}

/// Maximises `lml(theta)` (plus the prior under a MAP objective) with the
/// full-batch optimiser. Used for models without a per-expert objective.
fn train_dense<F>(ctx: &RepContext<'_>, lml: F) -> Result<(GpParams, Vec<TraceEntry>)>
where
    F: Fn(&GpParams) -> cpoe::Result<(f64, Vec<f64>)> + Sync,
{
    let Some(optim) = &ctx.optim else {
        return Ok((ctx.init.clone(), Vec::new()));
    };
    let mut optim = optim.clone();
    if optim.mode == OptimMode::Stochastic {
        optim = OptimizerConfig {
            objective: optim.objective,
            prior: optim.prior.clone(),
            ..OptimizerConfig::deterministic()
        };
    }
    let prior = if optim.objective == ObjectiveKind::Map {
        optim.prior.clone()
    } else {
        PriorSpec::default()
    };
    let f = |t: &[f64]| -> cpoe::Result<(f64, Vec<f64>)> {
        let (v, mut g) = lml(&ctx.init.with_vec(t)?)?;
        let (lp, lg) = log_prior(t, &prior)?;
        for (a, b) in g.iter_mut().zip(lg) {
            *a += b;
        }
        Ok((v + lp, g))
    };
    let fit = fit_deterministic(&f, &ctx.init.to_vec(), &optim)?;
    Ok((ctx.init.with_vec(&fit.theta)?, fit.trace))
}

fn run_full(ctx: &RepContext<'_>) -> Result<Fitted> {
    let d = ctx.data;
    if d.n_train() > FULL_GP_CAP {
        bail!("{} training points exceed the full GP cap of {FULL_GP_CAP}", d.n_train());
    }
    let t = Instant::now();
    let (params, trace) = train_dense(ctx, |p| {
        let gp = FullGp::fit(&d.x_train, &d.y_train, p)?;
        Ok((gp.log_marginal_likelihood(), gp.lml_gradient()?))
    })?;
    let train_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let gp = FullGp::fit(&d.x_train, &d.y_train, &params)?;
    let fit_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let latent = gp.predict(&d.x_test, false)?;
    Ok(Fitted {
        latent,
        noise: params.noise_variance(),
        lml: gp.log_marginal_likelihood(),
        train_secs,
        fit_secs,
        predict_secs: t.elapsed().as_secs_f64(),
        trace,
        params,
    })
}

fn run_method(ctx: &RepContext<'_>, method: Method) -> Result<Fitted> {
    let d = ctx.data;
    let cfg = ctx.cfg;
    match method {
        Method::FullGp => run_full(ctx),
        Method::Sgp { inducing } => {
            let n = d.n_train();
            let m = inducing.min(n);
            if m < inducing {
                warn!("sgp: {inducing} inducing points requested, only {n} training points");
            }
            let t = Instant::now();
            let graph = ExpertGraph::build(&d.x_train, &GraphConfig::new(1, m as f64 / n as f64, 1, ctx.graph_seed))?;
            let (params, trace) = match &ctx.optim {
                Some(o) => {
                    let s = Arc::new(CpoeStructure::new(&d.x_train, &d.y_train, graph.clone(), cfg.variant)?);
                    let (model, fit) = train_cpoe(s, &ctx.init, o)?;
                    (model.params().clone(), fit.trace)
                }
                None => (ctx.init.clone(), Vec::new()),
            };
            let train_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let gp = SparseGp::from_graph(&d.x_train, &d.y_train, &graph, &params, cfg.variant)?;
            let fit_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let latent = gp.predict(&d.x_test, false)?;
            Ok(Fitted {
                latent,
                noise: params.noise_variance(),
                lml: gp.log_marginal_likelihood(),
                train_secs,
                fit_secs,
                predict_secs: t.elapsed().as_secs_f64(),
                trace,
                params,
            })
        }
        Method::MinVar | Method::Gpoe | Method::GpoeSharpened => {
            let mode = match method {
                Method::MinVar => PoeMode::MinVar,
                Method::Gpoe => PoeMode::Gpoe,
                _ => PoeMode::GpoeSharpened,
            };
            let t = Instant::now();
            let graph = ExpertGraph::build(&d.x_train, &GraphConfig::new(cfg.experts, 1.0, 1, ctx.graph_seed))?;
            let (params, trace) = train_dense(ctx, |p| {
                let poe = Poe::from_graph(&d.x_train, &d.y_train, &graph, p)?;
                Ok((poe.log_marginal_likelihood(), poe.lml_gradient()?))
            })?;
            let train_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let poe = Poe::from_graph(&d.x_train, &d.y_train, &graph, &params)?;
            let fit_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let latent = poe.predict(&d.x_test, mode, false)?;
            Ok(Fitted {
                latent,
                noise: params.noise_variance(),
                lml: poe.log_marginal_likelihood(),
                train_secs,
                fit_secs,
                predict_secs: t.elapsed().as_secs_f64(),
                trace,
                params,
            })
        }
        Method::Cpoe { correlation } => {
            let t = Instant::now();
            let graph = ExpertGraph::build(
                &d.x_train,
                &GraphConfig::new(cfg.experts, cfg.gamma, correlation, ctx.graph_seed),
            )?;
            let s = Arc::new(CpoeStructure::new(&d.x_train, &d.y_train, graph, cfg.variant)?);
            let (params, trace) = match &ctx.optim {
                Some(o) => {
                    let (model, fit) = train_cpoe(s.clone(), &ctx.init, o)?;
                    (model.params().clone(), fit.trace)
                }
                None => (ctx.init.clone(), Vec::new()),
            };
            let train_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let model = CpoeModel::with_structure(s, &params)?;
            let fit_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let pc = PredictConfig {
                sharpening: cfg.sharpening,
                noisy: false,
            };
            let latent = model.predict(&d.x_test, &pc)?;
            let predict_secs = t.elapsed().as_secs_f64();
            let saved = SavedModel::from_model(&model);
            let path = cfg.output.join(format!("model_{method}_rep{}.txt", ctx.rep));
            model_io::save_model(&path, saved, d, &format!("train_rep{}.csv", ctx.rep), cfg.sharpening)?;
            Ok(Fitted {
                latent,
                noise: params.noise_variance(),
                lml: model.log_marginal_likelihood(),
                train_secs,
                fit_secs,
                predict_secs,
                trace,
                params,
            })
        }
    }
}

fn score(
    ctx: &RepContext<'_>,
    method: Method,
    seed: u64,
    result: Result<Fitted>,
    reference: Option<&Fitted>,
) -> MethodOutcome {
    let d = ctx.data;
    let mut out = MethodOutcome {
        method,
        rep: ctx.rep,
        seed,
        failure: None,
        n_train: d.n_train(),
        n_test: d.n_test(),
        report: None,
        lml: None,
        train_secs: 0.0,
        fit_secs: 0.0,
        predict_secs: 0.0,
        trace: Vec::new(),
        param_names: ctx.init.param_names(),
        theta: Vec::new(),
    };
    let scored = result.and_then(|f| {
        out.train_secs = f.train_secs;
        out.fit_secs = f.fit_secs;
        out.predict_secs = f.predict_secs;
        out.trace = f.trace.clone();
        out.lml = Some(f.lml);
        out.theta = f.params.to_vec();
        if d.n_test() == 0 {
            return Ok(None);
        }
        let (m, vy) = moments(&f.latent, f.noise);
        let shift = |fit: &Fitted| if ctx.cfg.noisy { fit.noise } else { 0.0 };
        let (mk, vk) = moments(&f.latent, shift(&f));
        let refs = reference.map(|r| moments(&r.latent, shift(r)));
        let mut report = MetricReport::compute(&m, &vy, d.y_test.as_slice(), None)?;
        if let Some((mr, vr)) = &refs {
            let kr = MetricReport::compute(&mk, &vk, d.y_test.as_slice(), Some((mr, vr)))?;
            report.kl = kr.kl;
            report.err = kr.err;
        }
        Ok(Some(report))
    });
    match scored {
        Ok(r) => out.report = r,
        Err(e) => out.failure = Some(format!("{e:#}")),
    }
    out
}

fn moments(p: &[PredictiveGaussian], add: f64) -> (Vec<f64>, Vec<f64>) {
    (p.iter().map(|g| g.mean).collect(), p.iter().map(|g| g.variance + add).collect())
}

const METRICS: [&str; 8] = ["kl", "err", "crps", "rmse", "abse", "nlp", "cov95", "lml"];

fn metric_values(o: &MethodOutcome) -> [Option<f64>; 8] {
    let r = o.report.as_ref();
    [
        r.and_then(|r| r.kl),
        r.and_then(|r| r.err),
        r.map(|r| r.crps),
        r.map(|r| r.rmse),
        r.map(|r| r.abse),
        r.map(|r| r.nlp),
        r.map(|r| r.cov95),
        o.lml,
    ]
}

fn method_columns(cfg: &ExperimentConfig, m: Method) -> (usize, String, String, String) {
    match m {
        Method::FullGp => (1, "1".into(), "1".into(), "".into()),
        Method::Sgp { inducing } => (1, "".into(), "1".into(), inducing.to_string()),
        Method::MinVar | Method::Gpoe | Method::GpoeSharpened => (cfg.experts, "1".into(), "1".into(), "".into()),
        Method::Cpoe { correlation } => (cfg.experts, cfg.gamma.to_string(), correlation.to_string(), "".into()),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

fn write_results(cfg: &ExperimentConfig, outcomes: &[MethodOutcome]) -> Result<()> {
    let path = cfg.output.join("results.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec![
        "config_hash", "method", "rep", "seed", "status", "n_train", "n_test", "experts", "gamma", "correlation",
        "inducing",
    ];
    header.extend(METRICS);
    header.extend(["train_secs", "fit_secs", "predict_secs", "message"]);
    w.write_record(&header)?;
    for o in outcomes {
        let (experts, gamma, corr, inducing) = method_columns(cfg, o.method);
        let mut row = vec![
            cfg.hash.clone(),
            o.method.to_string(),
            o.rep.to_string(),
            o.seed.to_string(),
            if o.ok() { "ok".into() } else { "failed".into() },
            o.n_train.to_string(),
            o.n_test.to_string(),
            experts.to_string(),
            gamma,
            corr,
            inducing,
        ];
        row.extend(metric_values(o).iter().map(|v| fmt_opt(*v)));
        row.extend([o.train_secs, o.fit_secs, o.predict_secs].iter().map(|v| format!("{v:e}")));
        row.push(o.failure.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    for &method in &cfg.methods {
        let ok: Vec<&MethodOutcome> = outcomes.iter().filter(|o| o.method == method && o.ok()).collect();
        let (experts, gamma, corr, inducing) = method_columns(cfg, method);
        for (label, stat) in [("mean", mean_std as fn(&[f64]) -> (f64, f64)), ("std", mean_std)] {
            let mut row = vec![
                cfg.hash.clone(),
                method.to_string(),
                label.to_string(),
                seeds.join(";"),
                format!("{}/{}", ok.len(), cfg.seeds.len()),
                ok.first().map_or(String::new(), |o| o.n_train.to_string()),
                ok.first().map_or(String::new(), |o| o.n_test.to_string()),
                experts.to_string(),
                gamma.clone(),
                corr.clone(),
                inducing.clone(),
            ];
            let cols: Vec<Vec<f64>> = (0..METRICS.len())
                .map(|k| ok.iter().filter_map(|o| metric_values(o)[k]).collect())
                .chain([
                    ok.iter().map(|o| o.train_secs).collect(),
                    ok.iter().map(|o| o.fit_secs).collect(),
                    ok.iter().map(|o| o.predict_secs).collect(),
                ])
                .collect();
            for c in cols {
                if c.is_empty() {
                    row.push(String::new());
                } else {
                    let (m, s) = stat(&c);
                    row.push(format!("{:e}", if label == "mean" { m } else { s }));
                }
            }
            row.push(String::new());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sample mean and standard deviation (n - 1 denominator, 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn write_timing(cfg: &ExperimentConfig, s: &ExperimentSummary) -> Result<()> {
    let path = cfg.output.join("timing.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["config_hash", "method", "rep", "seed", "phase", "secs"])?;
    for o in &s.outcomes {
        for (phase, secs) in [("train", o.train_secs), ("fit", o.fit_secs), ("predict", o.predict_secs)] {
            w.write_record([
                cfg.hash.clone(),
                o.method.to_string(),
                o.rep.to_string(),
                o.seed.to_string(),
                phase.to_string(),
                format!("{secs:e}"),
            ])?;
        }
    }
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    for (phase, v) in [
        ("total", s.total_secs),
        ("overhead", s.overhead_secs),
        ("overhead_fraction", s.overhead_fraction()),
    ] {
        w.write_record([
            cfg.hash.clone(),
            "harness".into(),
            String::new(),
            seeds.join(";"),
            phase.to_string(),
            format!("{v:e}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_traces(cfg: &ExperimentConfig, outcomes: &[MethodOutcome]) -> Result<()> {
    for &method in &cfg.methods {
        let runs: Vec<&MethodOutcome> = outcomes.iter().filter(|o| o.method == method && !o.trace.is_empty()).collect();
        let Some(first) = runs.first() else { continue };
        let path = cfg.output.join(format!("trace_{method}.csv"));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header: Vec<String> =
            ["config_hash", "rep", "seed", "iteration", "objective", "elapsed_secs"].map(String::from).to_vec();
        header.extend(first.param_names.iter().cloned());
        w.write_record(&header)?;
        for o in runs {
            for e in &o.trace {
                let mut row = vec![
                    cfg.hash.clone(),
                    o.rep.to_string(),
                    o.seed.to_string(),
                    e.iteration.to_string(),
                    format!("{:e}", e.objective),
                    format!("{:e}", e.elapsed_secs),
                ];
                row.extend(e.theta.iter().map(|v| format!("{v:e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}
