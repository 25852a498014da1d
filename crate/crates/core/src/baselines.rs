//! Reference models: the exact GP, a global sparse GP and independent
//! products of experts.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CpoeError, Result};
use crate::graph::ExpertGraph;
use crate::kernels::GpParams;
use crate::linalg::{add_diag, chol_logdet, cholesky, frob_dot, select_rows, select_vec, solve_lower, solve_lower_vec, Chol, JITTER_LEVELS};
use crate::model::Variant;
use crate::prediction::{aggregate, aggregation_weights, raw_weight, PredictiveGaussian};

/// Largest training set the dense GP accepts by default.
pub const FULL_GP_CAP: usize = 8192;

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>, params: &GpParams) -> Result<()> {
    params.validate()?;
    if x.nrows() != y.len() {
        return Err(CpoeError::dims(format!("{} inputs but {} targets", x.nrows(), y.len())));
    }
    if x.nrows() == 0 {
        return Err(CpoeError::config("no training data"));
    }
    if let Some(d) = params.kernel.input_dim() {
        if d != x.ncols() {
            return Err(CpoeError::dims(format!("kernel expects {d} inputs, data has {}", x.ncols())));
        }
    }
    Ok(())
}

fn check_point(x: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if x.len() != d {
        return Err(CpoeError::dims(format!("test point has {} inputs, model has {d}", x.len())));
    }
    Ok(DMatrix::from_row_slice(1, d, x))
}

fn is_not_pd(e: &CpoeError) -> bool {
    matches!(e, CpoeError::NotPositiveDefinite(_) | CpoeError::BlockNotPositiveDefinite { .. })
}

/// Exact GP on `K + c k0 I + sigma^2 I`, with the same relative nugget `c`
/// as the sparse models.
#[derive(Debug, Clone)]
pub struct FullGp {
    x: DMatrix<f64>,
    params: GpParams,
    jitter: f64,
    chol: Chol,
    alpha: DVector<f64>,
    lml: f64,
}

impl FullGp {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, params: &GpParams) -> Result<Self> {
        Self::fit_with_cap(x, y, params, FULL_GP_CAP)
    }

    pub fn fit_with_cap(x: &DMatrix<f64>, y: &DVector<f64>, params: &GpParams, cap: usize) -> Result<Self> {
        check_data(x, y, params)?;
        if x.nrows() > cap {
            return Err(CpoeError::TooLarge {
                what: "full GP training set",
                size: x.nrows(),
                cap,
            });
        }
        let k = params.kernel.eval_symmetric(x)?;
        let k0 = params.kernel.prior_variance();
        let mut last = None;
        for &c in &JITTER_LEVELS {
            let mut kn = k.clone();
            add_diag(&mut kn, c * k0 + params.noise_variance());
            match cholesky(&kn, "full GP covariance") {
                Ok(chol) => {
                    let alpha = chol.solve(y);
                    let lml = -0.5 * (y.dot(&alpha) + chol_logdet(&chol) + x.nrows() as f64 * (2.0 * PI).ln());
                    return Ok(FullGp {
                        x: x.clone(),
                        params: params.clone(),
                        jitter: c,
                        chol,
                        alpha,
                        lml,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap())
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_points(&self) -> usize {
        self.x.nrows()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// `0.5 tr((alpha alpha^T - K^{-1}) dK)` per hyperparameter.
    pub fn lml_gradient(&self) -> Result<Vec<f64>> {
        let n = self.x.nrows();
        let mut w = &self.alpha * self.alpha.transpose();
        w -= self.chol.inverse();
        let tr = w.trace();
        let dk0 = self.params.kernel.prior_variance_grad();
        let mut g = Vec::with_capacity(self.params.n_params());
        for p in 0..self.params.kernel.n_params() {
            let dk = self.params.kernel.grad(&self.x, &self.x, p)?;
            g.push(0.5 * (frob_dot(&w, &dk) + self.jitter * dk0[p] * tr));
        }
        g.push(0.5 * self.params.noise_variance() * tr);
        debug_assert_eq!(w.nrows(), n);
        Ok(g)
    }

    pub fn predict_point(&self, x: &[f64], noisy: bool) -> Result<PredictiveGaussian> {
        let xs = check_point(x, self.x.ncols())?;
        let k = self.params.kernel.eval(&self.x, &xs)?.column(0).into_owned();
        let q = solve_lower_vec(&self.chol.l(), &k);
        let k0 = self.params.kernel.prior_variance();
        let mut variance = (k0 - q.norm_squared()).max(k0 * 1e-15);
        if noisy {
            variance += self.params.noise_variance();
        }
        Ok(PredictiveGaussian {
            mean: k.dot(&self.alpha),
            variance,
            noisy,
        })
    }

    pub fn predict(&self, xs: &DMatrix<f64>, noisy: bool) -> Result<Vec<PredictiveGaussian>> {
        let l = self.chol.l();
        let k0 = self.params.kernel.prior_variance();
        let ks = self.params.kernel.eval(&self.x, xs)?;
        let q = solve_lower(&l, &ks);
        let mean = ks.tr_mul(&self.alpha);
        Ok((0..xs.nrows())
            .map(|i| {
                let mut variance = (k0 - q.column(i).norm_squared()).max(k0 * 1e-15);
                if noisy {
                    variance += self.params.noise_variance();
                }
                PredictiveGaussian {
                    mean: mean[i],
                    variance,
                    noisy,
                }
            })
            .collect())
    }
}

/// Global sparse GP with fixed inducing inputs and a diagonal likelihood
/// correction. Training rows that coincide with an inducing input are tied to
/// that inducing value exactly, as in the CPoE model.
#[derive(Debug, Clone)]
pub struct SparseGp {
    z: DMatrix<f64>,
    params: GpParams,
    variant: Variant,
    jitter: f64,
    /// Lower factor of the jittered inducing covariance.
    lz: DMatrix<f64>,
    /// Lower factor of `I + Phi^T Lambda^{-1} Phi`, `Phi = H L_z`.
    la: DMatrix<f64>,
    /// Posterior mean of the whitened inducing values.
    mean_v: DVector<f64>,
    lml: f64,
}

impl SparseGp {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, z: &DMatrix<f64>, params: &GpParams, variant: Variant) -> Result<Self> {
        check_data(x, y, params)?;
        variant.validate()?;
        if variant.is_block() || variant == Variant::Pitc {
            return Err(CpoeError::config(format!("sparse GP baseline needs a diagonal variant, got {variant}")));
        }
        if z.nrows() == 0 || z.ncols() != x.ncols() {
            return Err(CpoeError::dims("inducing inputs must be a non-empty matrix with the data's columns"));
        }
        let mut last = None;
        for &c in &JITTER_LEVELS {
            match Self::build(x, y, z, params, variant, c) {
                Ok(m) => return Ok(m),
                Err(e) if is_not_pd(&e) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap())
    }

    /// Inducing inputs taken as the concatenated local inducing inputs of a
    /// graph.
    pub fn from_graph(x: &DMatrix<f64>, y: &DVector<f64>, graph: &ExpertGraph, params: &GpParams, variant: Variant) -> Result<Self> {
        let rows: Vec<usize> = (0..graph.n_experts).flat_map(|j| graph.inducing_rows(j)).collect();
        Self::fit(x, y, &select_rows(x, &rows), params, variant)
    }

    fn build(x: &DMatrix<f64>, y: &DVector<f64>, z: &DMatrix<f64>, params: &GpParams, variant: Variant, jitter: f64) -> Result<Self> {
        let kern = &params.kernel;
        let noise = params.noise_variance();
        let n = x.nrows();
        let m = z.nrows();
        let mut kzz = kern.eval_symmetric(z)?;
        add_diag(&mut kzz, jitter * kern.prior_variance());
        let lz = cholesky(&kzz, "sparse GP inducing covariance")?.l();

        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in (0..m).rev() {
            lookup.insert(z.row(i).iter().map(|v| v.to_bits()).collect(), i);
        }
        let kxz = kern.eval(x, z)?;
        // Phi = K_xz K~^{-1} L_z = K_xz L_z^{-T}
        let mut phi = solve_lower(&lz, &kxz.transpose()).transpose();
        let kxx = kern.eval_diag(x)?;
        let mut d = DVector::zeros(n);
        for r in 0..n {
            let key: Vec<u64> = x.row(r).iter().map(|v| v.to_bits()).collect();
            if let Some(&k) = lookup.get(&key) {
                phi.row_mut(r).copy_from(&lz.row(k));
            } else {
                d[r] = (kxx[r] - phi.row(r).norm_squared()).max(0.0);
            }
        }
        let (lam_diag, lambda) = match variant {
            Variant::Dtc => (DVector::from_element(n, noise), 0.0),
            Variant::Vfe => (DVector::from_element(n, noise), d.sum() / (2.0 * noise)),
            Variant::Fitc => (d.add_scalar(noise), 0.0),
            Variant::Pep { alpha } => {
                let c = (1.0 - alpha) / (2.0 * alpha);
                let lam = c * d.iter().map(|v| (alpha * v / noise).ln_1p()).sum::<f64>();
                ((&d * alpha).add_scalar(noise), lam)
            }
            Variant::Pitc | Variant::PepBlock { .. } => unreachable!("rejected in fit"),
        };
        let mut scaled = phi.clone();
        for r in 0..n {
            scaled.row_mut(r).scale_mut(1.0 / lam_diag[r].sqrt());
        }
        let mut a = scaled.tr_mul(&scaled);
        add_diag(&mut a, 1.0);
        let la = cholesky(&a, "sparse GP posterior precision")?.l();
        let ly = y.component_div(&lam_diag);
        let c = solve_lower_vec(&la, &phi.tr_mul(&ly));
        let mean_v = la.tr_solve_lower_triangular(&c).expect("nonzero diagonal");
        let logdet_a = 2.0 * la.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_lam: f64 = lam_diag.iter().map(|v| v.ln()).sum();
        let lml = -0.5 * (y.dot(&ly) - c.norm_squared() + logdet_lam + logdet_a + n as f64 * (2.0 * PI).ln()) - lambda;
        Ok(SparseGp {
            z: z.clone(),
            params: params.clone(),
            variant,
            jitter,
            lz,
            la,
            mean_v,
            lml,
        })
    }

    pub fn params(&self) -> &GpParams {
        &self.params
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn predict_point(&self, x: &[f64], noisy: bool) -> Result<PredictiveGaussian> {
        let xs = check_point(x, self.z.ncols())?;
        Ok(self.predict(&xs, noisy)?.remove(0))
    }

    pub fn predict(&self, xs: &DMatrix<f64>, noisy: bool) -> Result<Vec<PredictiveGaussian>> {
        if xs.ncols() != self.z.ncols() {
            return Err(CpoeError::dims("test inputs have the wrong number of columns"));
        }
        let k0 = self.params.kernel.prior_variance();
        let q = solve_lower(&self.lz, &self.params.kernel.eval(&self.z, xs)?);
        let r = solve_lower(&self.la, &q);
        let mean = q.tr_mul(&self.mean_v);
        Ok((0..xs.nrows())
            .map(|i| {
                let v = k0 - q.column(i).norm_squared() + r.column(i).norm_squared();
                let mut variance = v.max(k0 * 1e-15);
                if noisy {
                    variance += self.params.noise_variance();
                }
                PredictiveGaussian {
                    mean: mean[i],
                    variance,
                    noisy,
                }
            })
            .collect())
    }
}

/// Aggregation rule for independent experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoeMode {
    /// Prediction of the expert with the smallest variance; ties go to the
    /// lowest expert index.
    MinVar,
    /// Normalised entropy weights without sharpening.
    Gpoe,
    /// Normalised entropy weights raised to `log N`.
    GpoeSharpened,
}

impl std::fmt::Display for PoeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoeMode::MinVar => "minvar",
            PoeMode::Gpoe => "gpoe",
            PoeMode::GpoeSharpened => "gpoe_sharp",
        })
    }
}

impl std::str::FromStr for PoeMode {
    type Err = CpoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minvar" => Ok(PoeMode::MinVar),
            "gpoe" => Ok(PoeMode::Gpoe),
            "gpoe_sharp" | "gpoe_sharpened" => Ok(PoeMode::GpoeSharpened),
            _ => Err(CpoeError::config(format!("unknown PoE mode '{s}'"))),
        }
    }
}

/// Independent exact GPs on disjoint partitions.
#[derive(Debug, Clone)]
pub struct Poe {
    experts: Vec<FullGp>,
    n: usize,
    dim: usize,
}

impl Poe {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, members: &[Vec<usize>], params: &GpParams) -> Result<Self> {
        check_data(x, y, params)?;
        if members.is_empty() {
            return Err(CpoeError::config("no experts"));
        }
        let experts = members
            .par_iter()
            .map(|rows| {
                if rows.iter().any(|&r| r >= x.nrows()) {
                    return Err(CpoeError::dims("partition row out of range"));
                }
                FullGp::fit(&select_rows(x, rows), &select_vec(y, rows), params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Poe {
            experts,
            n: x.nrows(),
            dim: x.ncols(),
        })
    }

    /// Experts on the partitions of a graph.
    pub fn from_graph(x: &DMatrix<f64>, y: &DVector<f64>, graph: &ExpertGraph, params: &GpParams) -> Result<Self> {
        Self::fit(x, y, &graph.members, params)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, j: usize) -> &FullGp {
        &self.experts[j]
    }

    /// Sum of the local log marginal likelihoods.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.experts.iter().map(|e| e.log_marginal_likelihood()).sum()
    }

    pub fn lml_gradient(&self) -> Result<Vec<f64>> {
        let parts = self
            .experts
            .par_iter()
            .map(|e| e.lml_gradient())
            .collect::<Result<Vec<_>>>()?;
        let mut g = vec![0.0; parts[0].len()];
        for p in parts {
            for (a, b) in g.iter_mut().zip(p) {
                *a += b;
            }
        }
        Ok(g)
    }

    /// Latent local predictions `(m_j, v_j)`.
    pub fn local(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        check_point(x, self.dim)?;
        self.experts
            .iter()
            .map(|e| e.predict_point(x, false).map(|p| (p.mean, p.variance)))
            .collect()
    }

    pub fn predict_point(&self, x: &[f64], mode: PoeMode, noisy: bool) -> Result<PredictiveGaussian> {
        let local = self.local(x)?;
        let mut p = match mode {
            PoeMode::MinVar => {
                let mut best = 0;
                for (j, l) in local.iter().enumerate() {
                    if l.1 < local[best].1 {
                        best = j;
                    }
                }
                PredictiveGaussian {
                    mean: local[best].0,
                    variance: local[best].1,
                    noisy: false,
                }
            }
            PoeMode::Gpoe | PoeMode::GpoeSharpened => {
                let z = if mode == PoeMode::Gpoe { 1.0 } else { (self.n as f64).ln() };
                let k0 = self.experts[0].params().kernel.prior_variance();
                let raw: Vec<f64> = local.iter().map(|l| raw_weight(k0, l.1)).collect();
                aggregate(&local, &aggregation_weights(&raw, z))?
            }
        };
        if noisy {
            p.variance += self.experts[0].params().noise_variance();
            p.noisy = true;
        }
        Ok(p)
    }

    pub fn predict(&self, xs: &DMatrix<f64>, mode: PoeMode, noisy: bool) -> Result<Vec<PredictiveGaussian>> {
        (0..xs.nrows())
            .map(|i| {
                let row: Vec<f64> = xs.row(i).iter().copied().collect();
                self.predict_point(&row, mode, noisy)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn params() -> GpParams {
        GpParams::new(KernelSpec::se_ard(1.2, &[0.5]), 0.1).unwrap()
    }

    #[test]
    fn single_point_scalar_algebra() {
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let y = DVector::from_vec(vec![2.0]);
        let p = params();
        let gp = FullGp::fit(&x, &y, &p).unwrap();
        let k11 = 1.2 * (1.0 + 1e-8) + 0.1;
        let kx = 1.2 * (-0.5 * (0.4f64 / 0.5).powi(2)).exp();
        let pred = gp.predict_point(&[0.7], false).unwrap();
        assert!((pred.mean - kx * 2.0 / k11).abs() < 1e-14);
        assert!((pred.variance - (1.2 - kx * kx / k11)).abs() < 1e-14);
        let lml = -0.5 * (4.0 / k11 + k11.ln() + (2.0 * PI).ln());
        assert!((gp.log_marginal_likelihood() - lml).abs() < 1e-14);
    }

    #[test]
    fn interpolates_without_noise() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let p = GpParams::new(KernelSpec::se_ard(1.0, &[0.4]), 1e-10).unwrap();
        let gp = FullGp::fit(&x, &y, &p).unwrap();
        let m = gp.predict_point(&[0.5], false).unwrap().mean;
        assert!((m + 1.0).abs() < 1e-5);
    }

    #[test]
    fn cap_is_enforced() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::zeros(3);
        assert!(matches!(FullGp::fit_with_cap(&x, &y, &params(), 2), Err(CpoeError::TooLarge { .. })));
    }

    #[test]
    fn complete_inducing_set_is_the_full_gp() {
        let x = DMatrix::from_fn(20, 1, |i, _| (i as f64 * 0.37).sin());
        let y = DVector::from_fn(20, |i, _| (i as f64).cos());
        let p = params();
        let full = FullGp::fit(&x, &y, &p).unwrap();
        let sgp = SparseGp::fit(&x, &y, &x, &p, Variant::Fitc).unwrap();
        assert!((full.log_marginal_likelihood() - sgp.log_marginal_likelihood()).abs() < 1e-8);
        let xs = DMatrix::from_row_slice(2, 1, &[0.1, 2.0]);
        for (a, b) in full.predict(&xs, true).unwrap().iter().zip(sgp.predict(&xs, true).unwrap()) {
            assert!((a.mean - b.mean).abs() < 1e-8);
            assert!((a.variance - b.variance).abs() < 1e-8);
        }
    }

    #[test]
    fn far_inducing_point_gives_prior() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64 * 0.1);
        let y = DVector::from_element(10, 1.0);
        let z = DMatrix::from_row_slice(1, 1, &[100.0]);
        let sgp = SparseGp::fit(&x, &y, &z, &params(), Variant::Fitc).unwrap();
        let p = sgp.predict_point(&[0.5], false).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert!((p.variance - 1.2).abs() < 1e-12);
    }

    #[test]
    fn min_var_picks_argmin() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 3.0, 3.1]);
        let y = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let poe = Poe::fit(&x, &y, &[vec![0, 1], vec![2, 3]], &params()).unwrap();
        let local = poe.local(&[0.05]).unwrap();
        assert!(local[0].1 < local[1].1);
        let p = poe.predict_point(&[0.05], PoeMode::MinVar, false).unwrap();
        assert_eq!((p.mean, p.variance), local[0]);
        let single = Poe::fit(&x, &y, &[vec![0, 1, 2, 3]], &params()).unwrap();
        for mode in [PoeMode::MinVar, PoeMode::Gpoe, PoeMode::GpoeSharpened] {
            let a = single.predict_point(&[1.0], mode, false).unwrap();
            let b = single.expert(0).predict_point(&[1.0], false).unwrap();
            assert!((a.mean - b.mean).abs() < 1e-14 && (a.variance - b.variance).abs() < 1e-14);
        }
    }

    #[test]
    fn full_gp_gradient_matches_finite_differences() {
        let x = DMatrix::from_fn(15, 2, |i, k| ((i * (k + 2)) as f64 * 0.31).sin());
        let y = DVector::from_fn(15, |i, _| (i as f64 * 0.5).sin());
        let p = GpParams::new(KernelSpec::se_ard(0.8, &[0.6, 1.1]), 0.2).unwrap();
        let g = FullGp::fit(&x, &y, &p).unwrap().lml_gradient().unwrap();
        let theta = p.to_vec();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut a = theta.clone();
            a[i] += h;
            let mut b = theta.clone();
            b[i] -= h;
            let fa = FullGp::fit(&x, &y, &p.with_vec(&a).unwrap()).unwrap().log_marginal_likelihood();
            let fb = FullGp::fit(&x, &y, &p.with_vec(&b).unwrap()).unwrap().log_marginal_likelihood();
            let fd = (fa - fb) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {} vs {fd}", g[i]);
        }
    }
}
