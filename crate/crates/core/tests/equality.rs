use cpoe::baselines::{FullGp, Poe, PoeMode, SparseGp};
use cpoe::graph::{ExpertGraph, GraphConfig};
use cpoe::kernels::{GpParams, KernelSpec};
use cpoe::model::{CpoeModel, Variant};
use cpoe::prediction::PredictConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
    let y = DVector::from_fn(n, |i, _| (5.0 * x[(i, 0)]).sin() * (3.0 * x[(i, 1)]).cos() + 0.1 * rng.gen::<f64>());
    let xs = DMatrix::from_fn(30, 2, |_, _| rng.gen::<f64>() * 1.2 - 0.1);
    (x, y, xs)
}

fn params() -> GpParams {
    GpParams::new(KernelSpec::se_ard(1.1, &[0.3, 0.45]), 0.05).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn all_inducing_all_correlated_is_the_full_gp() {
    for seed in 0..3 {
        let (x, y, xs) = data(64, seed);
        let p = params();
        let g = ExpertGraph::build(&x, &GraphConfig::new(4, 1.0, 4, seed)).unwrap();
        let m = CpoeModel::fit(&x, &y, g, &p, Variant::Fitc).unwrap();
        let full = FullGp::fit(&x, &y, &p).unwrap();
        assert!(close(m.log_marginal_likelihood(), full.log_marginal_likelihood(), 1e-8));
        let a = m.predict(&xs, &PredictConfig::noisy()).unwrap();
        let b = full.predict(&xs, true).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!(close(u.mean, v.mean, 1e-8), "{} vs {}", u.mean, v.mean);
            assert!(close(u.variance, v.variance, 1e-8), "{} vs {}", u.variance, v.variance);
        }
    }
}

#[test]
fn all_correlated_is_the_global_sparse_gp() {
    for variant in [Variant::Fitc, Variant::Dtc, Variant::Vfe, Variant::Pep { alpha: 0.4 }] {
        let (x, y, xs) = data(64, 5);
        let p = params();
        let g = ExpertGraph::build(&x, &GraphConfig::new(4, 0.5, 4, 2)).unwrap();
        let sgp = SparseGp::from_graph(&x, &y, &g, &p, variant).unwrap();
        let m = CpoeModel::fit(&x, &y, g, &p, variant).unwrap();
        assert!(close(m.log_marginal_likelihood(), sgp.log_marginal_likelihood(), 1e-8), "{variant}");
        let a = m.predict(&xs, &PredictConfig::default()).unwrap();
        let b = sgp.predict(&xs, false).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!(close(u.mean, v.mean, 1e-8));
            assert!(close(u.variance, v.variance, 1e-8));
        }
    }
}

#[test]
fn independent_experts_are_gpoe() {
    let (x, y, xs) = data(48, 9);
    let p = params();
    let g = ExpertGraph::build(&x, &GraphConfig::new(4, 1.0, 1, 4)).unwrap();
    let poe = Poe::from_graph(&x, &y, &g, &p).unwrap();
    let m = CpoeModel::fit(&x, &y, g, &p, Variant::Fitc).unwrap();
    assert!(close(m.log_marginal_likelihood(), poe.log_marginal_likelihood(), 1e-8));
    for (cfg, mode) in [
        (PredictConfig::default().with_sharpening(1.0), PoeMode::Gpoe),
        (PredictConfig::default(), PoeMode::GpoeSharpened),
    ] {
        for i in 0..xs.nrows() {
            let row: Vec<f64> = xs.row(i).iter().copied().collect();
            let a = m.predict_point(&row, &cfg).unwrap();
            let b = poe.predict_point(&row, mode, false).unwrap();
            assert!(close(a.mean, b.mean, 1e-8), "{mode}: {} vs {}", a.mean, b.mean);
            assert!(close(a.variance, b.variance, 1e-8));
        }
    }
}

#[test]
fn poe_gradient_matches_finite_differences() {
    let (x, y, _) = data(40, 1);
    let p = params();
    let members = vec![(0..20).collect::<Vec<_>>(), (20..40).collect()];
    let g = Poe::fit(&x, &y, &members, &p).unwrap().lml_gradient().unwrap();
    let theta = p.to_vec();
    for i in 0..theta.len() {
        let h = 1e-5;
        let mut a = theta.clone();
        a[i] += h;
        let mut b = theta.clone();
        b[i] -= h;
        let fa = Poe::fit(&x, &y, &members, &p.with_vec(&a).unwrap()).unwrap().log_marginal_likelihood();
        let fb = Poe::fit(&x, &y, &members, &p.with_vec(&b).unwrap()).unwrap().log_marginal_likelihood();
        let fd = (fa - fb) / (2.0 * h);
        assert!(close(g[i], fd, 1e-5), "{i}: {} vs {fd}", g[i]);
    }
}
