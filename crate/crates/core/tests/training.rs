use std::f64::consts::PI;
use std::sync::Arc;

use cpoe::graph::{ExpertGraph, GraphConfig};
use cpoe::kernels::{GpParams, KernelSpec};
use cpoe::model::{CpoeModel, CpoeStructure, StochasticObjective, Variant};
use cpoe::training::{log_prior, train_cpoe, LogNormal, ObjectiveKind, OptimizerConfig, PriorSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Exact draw from a GP with the given parameters.
fn gp_sample(n: usize, params: &GpParams, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
    let mut k = params.kernel.eval(&x, &x).unwrap();
    for i in 0..n {
        k[(i, i)] += params.noise_variance() + 1e-9;
    }
    let l = k.cholesky().unwrap().l();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (x, l * z)
}

fn truth() -> GpParams {
    GpParams::new(KernelSpec::se_ard(1.0, &[0.3, 0.3]), 0.01).unwrap()
}

fn start() -> GpParams {
    GpParams::new(KernelSpec::se_ard(0.5, &[0.8, 0.8]), 0.1).unwrap()
}

fn structure(seed: u64, n: usize, experts: usize) -> Arc<CpoeStructure> {
    let (x, y) = gp_sample(n, &truth(), seed);
    let g = ExpertGraph::build(&x, &GraphConfig::new(experts, 0.5, 2, seed)).unwrap();
    Arc::new(CpoeStructure::new(&x, &y, g, Variant::Fitc).unwrap())
}

#[test]
fn deterministic_recovers_lengthscale() {
    for seed in 0..5 {
        let (model, fit) = train_cpoe(structure(seed, 256, 4), &start(), &OptimizerConfig::deterministic()).unwrap();
        for ls in &fit.theta[1..3] {
            let ratio = ls.exp() / 0.3;
            assert!((0.5..=2.0).contains(&ratio), "seed {seed}: lengthscale ratio {ratio}");
        }
        for w in fit.trace.windows(2) {
            assert!(w[1].objective >= w[0].objective - 1e-8 * w[0].objective.abs());
        }
        assert_eq!(model.log_marginal_likelihood(), fit.objective);
    }
}

#[test]
fn map_objective_is_lml_plus_prior() {
    let s = structure(7, 128, 4);
    let mut cfg = OptimizerConfig::deterministic();
    cfg.objective = ObjectiveKind::Map;
    cfg.prior = PriorSpec {
        priors: vec![None, Some(LogNormal::new(-1.0, 0.5).unwrap()), Some(LogNormal::new(-1.0, 0.5).unwrap()), None],
    };
    cfg.max_epochs = 20;
    let (model, fit) = train_cpoe(s, &start(), &cfg).unwrap();
    let lp = log_prior(&fit.theta, &cfg.prior).unwrap().0;
    assert_eq!(fit.objective, model.log_marginal_likelihood() + lp);
}

#[test]
fn stochastic_epochs_report_the_term_sum() {
    let s = structure(3, 256, 8);
    let cfg = OptimizerConfig::stochastic(11);
    let (_, fit) = train_cpoe(s.clone(), &start(), &cfg).unwrap();
    assert!(fit.trace.len() >= 2);
    let obj = StochasticObjective::new(s.clone());
    for e in &fit.trace {
        let p = start().with_vec(&e.theta).unwrap();
        let sum: f64 = (0..8).map(|j| obj.term_value(j, &p).unwrap()).sum::<f64>()
            - 0.5 * s.n_points() as f64 * (2.0 * PI).ln();
        assert_eq!(e.objective, sum);
    }
    assert!(fit.trace.last().unwrap().objective > fit.trace[0].objective);
}

#[test]
fn stochastic_runs_are_reproducible() {
    let s = structure(5, 128, 4);
    let mut cfg = OptimizerConfig::stochastic(2);
    cfg.max_epochs = 4;
    let (a, fa) = train_cpoe(s.clone(), &start(), &cfg).unwrap();
    let (b, fb) = train_cpoe(s, &start(), &cfg).unwrap();
    assert_eq!(fa.theta, fb.theta);
    assert_eq!(a.log_marginal_likelihood(), b.log_marginal_likelihood());
}

#[test]
fn single_expert_stochastic_is_full_batch_ascent() {
    let (x, y) = gp_sample(64, &truth(), 1);
    let g = ExpertGraph::build(&x, &GraphConfig::new(1, 0.5, 1, 1)).unwrap();
    let s = Arc::new(CpoeStructure::new(&x, &y, g, Variant::Vfe).unwrap());
    let mut cfg = OptimizerConfig::stochastic(0);
    cfg.max_epochs = 3;
    let (m, fit) = train_cpoe(s.clone(), &start(), &cfg).unwrap();
    // One term: every step uses the gradient of the full objective.
    let full = CpoeModel::with_structure(s, &start()).unwrap();
    assert!(m.log_marginal_likelihood() > full.log_marginal_likelihood());
    assert_eq!(fit.iterations, 3);
}
