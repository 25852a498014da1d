//! Hyperparameter estimation: full-batch quasi-Newton and per-expert Adam.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use argmin::core::observers::{Observe, ObserverMode};
use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient, IterState, State, KV};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CpoeError, Result};
use crate::kernels::GpParams;
use crate::model::{CpoeModel, CpoeStructure, StochasticObjective};

/// Log-normal prior on a positive hyperparameter, `log theta ~ N(nu, lambda^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormal {
    pub nu: f64,
    pub lambda: f64,
}

impl LogNormal {
    pub fn new(nu: f64, lambda: f64) -> Result<Self> {
        if !nu.is_finite() || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CpoeError::param(format!("log-normal prior needs finite nu and lambda > 0, got ({nu}, {lambda})")));
        }
        Ok(LogNormal { nu, lambda })
    }

    /// Log density of `theta = exp(u)` and its derivative with respect to `u`.
    pub fn eval(&self, u: f64) -> (f64, f64) {
        let l2 = self.lambda * self.lambda;
        let r = u - self.nu;
        let value = -u - 0.5 * (2.0 * std::f64::consts::PI * l2).ln() - r * r / (2.0 * l2);
        (value, -1.0 - r / l2)
    }
}

/// Optional prior per flattened hyperparameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorSpec {
    pub priors: Vec<Option<LogNormal>>,
}

impl PriorSpec {
    pub fn none(n: usize) -> Self {
        PriorSpec { priors: vec![None; n] }
    }

    pub fn is_empty(&self) -> bool {
        self.priors.iter().all(|p| p.is_none())
    }
}

/// Sum of log-normal log densities and its gradient in log space. Entries
/// without a prior contribute nothing.
pub fn log_prior(theta: &[f64], spec: &PriorSpec) -> Result<(f64, Vec<f64>)> {
    if !spec.priors.is_empty() && spec.priors.len() != theta.len() {
        return Err(CpoeError::dims(format!(
            "{} priors for {} hyperparameters",
            spec.priors.len(),
            theta.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for (i, p) in spec.priors.iter().enumerate() {
        if let Some(p) = p {
            let (v, g) = p.eval(theta[i]);
            value += v;
            grad[i] = g;
        }
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Lml,
    Map,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub mode: OptimMode,
    /// Adam step size.
    pub learning_rate: f64,
    /// Epochs for the stochastic optimiser, iterations for the deterministic.
    pub max_epochs: usize,
    /// Relative change of the objective that stops the optimiser.
    pub tolerance: f64,
    /// Gradient norm below which the deterministic optimiser stops.
    pub grad_tolerance: f64,
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub prior: PriorSpec,
}

impl OptimizerConfig {
    pub fn deterministic() -> Self {
        OptimizerConfig {
            mode: OptimMode::Deterministic,
            learning_rate: 0.01,
            max_epochs: 200,
            tolerance: 1e-9,
            grad_tolerance: 1e-6,
            seed: 0,
            objective: ObjectiveKind::Lml,
            prior: PriorSpec::default(),
        }
    }

    pub fn stochastic(seed: u64) -> Self {
        OptimizerConfig {
            mode: OptimMode::Stochastic,
            max_epochs: 15,
            tolerance: 1e-2,
            seed,
            ..Self::deterministic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CpoeError::config("learning rate must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.grad_tolerance >= 0.0) {
            return Err(CpoeError::config("tolerances must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(CpoeError::config("max epochs must be at least 1"));
        }
        Ok(())
    }

    fn prior(&self) -> Option<&PriorSpec> {
        (self.objective == ObjectiveKind::Map).then_some(&self.prior)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub objective: f64,
    pub elapsed_secs: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
    /// The stopping criterion was met, as opposed to hitting a limit or
    /// failing.
    pub converged: bool,
    /// The stochastic optimiser diverged and returned its best iterate.
    pub reverted: bool,
}

/// Value and gradient of the objective to maximise.
pub type ValueGrad<'a> = dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync + 'a;

#[derive(Default)]
struct Best {
    value: f64,
    theta: Vec<f64>,
}

/// `-f / scale` as a cost to minimise.
struct Negated<'a> {
    f: &'a ValueGrad<'a>,
    scale: f64,
    best: Arc<Mutex<Best>>,
}

impl Negated<'_> {
    fn eval(&self, theta: &[f64]) -> std::result::Result<(f64, Vec<f64>), ArgminError> {
        let (v, g) = (self.f)(theta)?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(CpoeError::Optimization(format!("objective not finite at {theta:?}")).into());
        }
        let mut best = self.best.lock().unwrap();
        if v > best.value {
            best.value = v;
            best.theta = theta.to_vec();
        }
        Ok((-v / self.scale, g.into_iter().map(|x| -x / self.scale).collect()))
    }
}

impl CostFunction for Negated<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, ArgminError> {
        self.eval(p).map(|(v, _)| v)
    }
}

impl Gradient for Negated<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, ArgminError> {
        self.eval(p).map(|(_, g)| g)
    }
}

type LbfgsState = IterState<Vec<f64>, Vec<f64>, (), (), (), f64>;

struct Tracer {
    start: Instant,
    scale: f64,
    trace: Arc<Mutex<Vec<TraceEntry>>>,
}

impl Observe<LbfgsState> for Tracer {
    fn observe_iter(&mut self, state: &LbfgsState, _kv: &KV) -> std::result::Result<(), ArgminError> {
        if let Some(p) = state.get_param() {
            self.trace.lock().unwrap().push(TraceEntry {
                iteration: state.get_iter() as usize + 1,
                objective: -state.get_cost() * self.scale,
                elapsed_secs: self.start.elapsed().as_secs_f64(),
                theta: p.clone(),
            });
        }
        Ok(())
    }
}

/// Length, in log-parameter units, of the first quasi-Newton trial step.
const MAX_FIRST_STEP: f64 = 0.5;

/// Maximises `f` with L-BFGS and a More-Thuente line search. The relative
/// tolerance is applied to the change of the objective, scaled by the initial
/// objective.
pub fn fit_deterministic(f: &ValueGrad<'_>, theta0: &[f64], cfg: &OptimizerConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let (f0, g0) = f(theta0)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(CpoeError::Optimization("objective not finite at the initial hyperparameters".into()));
    }
    let first = TraceEntry {
        iteration: 0,
        objective: f0,
        elapsed_secs: start.elapsed().as_secs_f64(),
        theta: theta0.to_vec(),
    };
    if g0.iter().map(|v| v * v).sum::<f64>().sqrt() <= cfg.grad_tolerance {
        return Ok(FitResult {
            theta: theta0.to_vec(),
            objective: f0,
            iterations: 0,
            trace: vec![first],
            converged: true,
            reverted: false,
        });
    }
    let best = Arc::new(Mutex::new(Best {
        value: f0,
        theta: theta0.to_vec(),
    }));
    let trace = Arc::new(Mutex::new(vec![first]));
    // The first quasi-Newton step is the raw gradient; scaling the cost
    // bounds its length. Later steps do not depend on the scale.
    let scale = (g0.iter().map(|v| v * v).sum::<f64>().sqrt() / MAX_FIRST_STEP).max(1.0);
    let problem = Negated {
        f,
        scale,
        best: best.clone(),
    };
    let tol_cost = cfg.tolerance * f0.abs().max(1.0) / scale;
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
        .with_tolerance_grad(cfg.grad_tolerance / scale)
        .and_then(|s| s.with_tolerance_cost(tol_cost))
        .map_err(|e| CpoeError::Optimization(e.to_string()))?;
    let run = Executor::new(problem, solver)
        .configure(|s| s.param(theta0.to_vec()).max_iters(cfg.max_epochs as u64))
        .add_observer(
            Tracer {
                start,
                scale,
                trace: trace.clone(),
            },
            ObserverMode::Always,
        )
        .timer(false)
        .run();
    let (iterations, converged) = match &run {
        Ok(res) => {
            let st = res.state();
            log::debug!("quasi-Newton run ended: {:?}", st.get_termination_reason());
            let converged = matches!(
                st.get_termination_reason(),
                Some(argmin::core::TerminationReason::SolverConverged)
            );
            (st.get_iter() as usize, converged)
        }
        Err(e) => {
            log::warn!("quasi-Newton run stopped early: {e}");
            (trace.lock().unwrap().len() - 1, false)
        }
    };
    let best = best.lock().unwrap();
    let trace = trace.lock().unwrap().clone();
    Ok(FitResult {
        theta: best.theta.clone(),
        objective: best.value,
        iterations,
        trace,
        converged,
        reverted: false,
    })
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Consecutive worsening epochs that count as divergence.
const DIVERGENCE_EPOCHS: usize = 5;

/// Adam ascent on a sum of terms, one term per step, epochs over a shuffled
/// term order. `term(j, theta)` returns the value and gradient of term `j`;
/// `total(theta)` returns the full objective, evaluated after every epoch.
pub fn fit_stochastic(
    n_terms: usize,
    term: &(dyn Fn(usize, &[f64]) -> Result<(f64, Vec<f64>)> + Sync),
    total: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    theta0: &[f64],
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if n_terms == 0 {
        return Err(CpoeError::config("no objective terms"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = theta0.to_vec();
    let n = theta.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut step = 0i32;
    let mut prev = total(&theta)?;
    if !prev.is_finite() {
        return Err(CpoeError::Optimization("objective not finite at the initial hyperparameters".into()));
    }
    let mut trace = vec![TraceEntry {
        iteration: 0,
        objective: prev,
        elapsed_secs: start.elapsed().as_secs_f64(),
        theta: theta.clone(),
    }];
    let (mut best_value, mut best_theta) = (prev, theta.clone());
    let mut worse = 0;
    let mut order: Vec<usize> = (0..n_terms).collect();
    let mut converged = false;
    let mut reverted = false;
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        for &j in &order {
            let g = match term(j, &theta) {
                Ok((_, g)) if g.iter().all(|x| x.is_finite()) => g,
                Ok(_) => {
                    log::warn!("skipping step on term {j}: gradient not finite");
                    continue;
                }
                Err(e) => {
                    log::warn!("skipping step on term {j}: {e}");
                    continue;
                }
            };
            step += 1;
            let b1 = 1.0 - ADAM_BETA1.powi(step);
            let b2 = 1.0 - ADAM_BETA2.powi(step);
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                theta[i] += cfg.learning_rate * (m[i] / b1) / ((v[i] / b2).sqrt() + ADAM_EPS);
            }
        }
        let value = total(&theta).unwrap_or(f64::NEG_INFINITY);
        trace.push(TraceEntry {
            iteration: epoch,
            objective: value,
            elapsed_secs: start.elapsed().as_secs_f64(),
            theta: theta.clone(),
        });
        if value > best_value {
            best_value = value;
            best_theta = theta.clone();
            worse = 0;
        } else {
            worse += 1;
            if worse >= DIVERGENCE_EPOCHS {
                log::warn!("objective worsened for {worse} epochs; reverting to the best iterate");
                theta = best_theta.clone();
                reverted = true;
                break;
            }
        }
        if value.is_finite() && (value - prev).abs() < cfg.tolerance * prev.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = value;
    }
    if !reverted && !trace.last().is_some_and(|t| t.objective.is_finite()) {
        theta = best_theta.clone();
        reverted = true;
    }
    let objective = if reverted { best_value } else { trace.last().unwrap().objective };
    Ok(FitResult {
        theta,
        objective,
        iterations: epochs,
        trace,
        converged,
        reverted,
    })
}

fn check_prior(params: &GpParams, cfg: &OptimizerConfig) -> Result<()> {
    if let Some(p) = cfg.prior() {
        if !p.priors.is_empty() && p.priors.len() != params.n_params() {
            return Err(CpoeError::config(format!(
                "{} priors for {} hyperparameters",
                p.priors.len(),
                params.n_params()
            )));
        }
    }
    Ok(())
}

/// Fits CPoE hyperparameters with the optimiser chosen in `cfg` and returns
/// the model refit exactly at the result.
pub fn train_cpoe(structure: Arc<CpoeStructure>, init: &GpParams, cfg: &OptimizerConfig) -> Result<(CpoeModel, FitResult)> {
    check_prior(init, cfg)?;
    let prior = cfg.prior().cloned().unwrap_or_default();
    let theta0 = init.to_vec();
    let fit = match cfg.mode {
        OptimMode::Deterministic => {
            let f = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
                let p = init.with_vec(t)?;
                let m = CpoeModel::with_structure(structure.clone(), &p)?;
                let mut g = m.lml_gradient()?;
                let (lp, lg) = log_prior(t, &prior)?;
                for (a, b) in g.iter_mut().zip(lg) {
                    *a += b;
                }
                Ok((m.log_marginal_likelihood() + lp, g))
            };
            fit_deterministic(&f, &theta0, cfg)?
        }
        OptimMode::Stochastic => {
            let obj = StochasticObjective::new(structure.clone());
            let jn = obj.n_terms() as f64;
            let term = |j: usize, t: &[f64]| -> Result<(f64, Vec<f64>)> {
                let (v, mut g) = obj.term(j, &init.with_vec(t)?)?;
                let (lp, lg) = log_prior(t, &prior)?;
                for (a, b) in g.iter_mut().zip(lg) {
                    *a += b / jn;
                }
                Ok((v + lp / jn, g))
            };
            let total = |t: &[f64]| -> Result<f64> {
                Ok(obj.total(&init.with_vec(t)?)? + log_prior(t, &prior)?.0)
            };
            fit_stochastic(obj.n_terms(), &term, &total, &theta0, cfg)?
        }
    };
    let model = CpoeModel::with_structure(structure, &init.with_vec(&fit.theta)?)?;
    Ok((model, fit))
}
