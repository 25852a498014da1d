//! Predictions from a fitted CPoE model.
//!
//! Experts `C..J` (1-based) each produce a local Gaussian from the posterior
//! of their correlation set. The local predictions are combined with
//! normalised, sharpened differential-entropy weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{CpoeError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{solve_lower_tr_vec, solve_lower_vec};
use crate::model::CpoeModel;

/// Smallest raw weight; keeps the log-space normalisation finite.
pub const MIN_RAW_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct PredictConfig {
    /// Exponent applied to the raw weights before normalising. `None` uses
    /// `log(N) * C`.
    pub sharpening: Option<f64>,
    /// Add the observation noise to the aggregated variance.
    pub noisy: bool,
}


impl PredictConfig {
    pub fn noisy() -> Self {
        PredictConfig {
            noisy: true,
            ..Self::default()
        }
    }

    pub fn with_sharpening(mut self, z: f64) -> Self {
        self.sharpening = Some(z);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: f64,
    pub variance: f64,
    /// Whether `variance` includes the observation noise.
    pub noisy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPrediction {
    pub expert: usize,
    pub mean: f64,
    pub variance: f64,
    /// `k(x, x)`.
    pub prior_variance: f64,
    /// `0.5 log(prior_variance / variance)`, before clamping.
    pub raw_weight: f64,
    /// Normalised aggregation weight.
    pub weight: f64,
}

/// Raw weight: entropy reduction of a local prediction relative to the prior.
pub fn raw_weight(prior_var: f64, v: f64) -> f64 {
    0.5 * (prior_var.ln() - v.ln())
}

/// Normalised weights `b_j^z / sum_k b_k^z` with `b_j` clamped to at least
/// `MIN_RAW_WEIGHT`. When no raw weight is positive the result is uniform.
pub fn aggregation_weights(raw: &[f64], z: f64) -> Vec<f64> {
    let logw: Vec<f64> = raw.iter().map(|b| z * b.max(MIN_RAW_WEIGHT).ln()).collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm = top + logw.iter().map(|w| (w - top).exp()).sum::<f64>().ln();
    logw.iter().map(|w| (w - norm).exp()).collect()
}

/// Covariance intersection of `(mean, variance)` pairs with normalised
/// weights: `1/v = sum_j b_j / v_j`, `m = v sum_j b_j m_j / v_j`.
pub fn aggregate(local: &[(f64, f64)], weights: &[f64]) -> Result<PredictiveGaussian> {
    if local.is_empty() || local.len() != weights.len() {
        return Err(CpoeError::dims("aggregation needs one weight per local prediction"));
    }
    let (mut prec, mut num) = (0.0, 0.0);
    for (&(m, v), b) in local.iter().zip(weights) {
        prec += b / v;
        num += b * m / v;
    }
    Ok(PredictiveGaussian {
        mean: num / prec,
        variance: 1.0 / prec,
        noisy: false,
    })
}

/// Local posterior of one predicting expert.
#[derive(Debug, Clone)]
struct LocalExpert {
    expert: usize,
    inputs: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Precomputed local posteriors; reuse for many test points.
#[derive(Debug, Clone)]
pub struct CpoePredictor {
    kernel: KernelSpec,
    noise: f64,
    experts: Vec<LocalExpert>,
    default_z: f64,
    dim: usize,
}

impl CpoePredictor {
    pub fn new(model: &CpoeModel) -> Result<Self> {
        let s = model.structure();
        let l = s.block_size();
        let c = s.graph.correlation;
        let mut experts = Vec::new();
        for j in (c - 1)..s.n_experts() {
            let psi = s.correlation_set(j).to_vec();
            let cov = model.posterior_covariance().dense_sub(&psi)?;
            let mut mean = DVector::zeros(psi.len() * l);
            for (p, &k) in psi.iter().enumerate() {
                mean.rows_mut(p * l, l)
                    .copy_from(&model.posterior_mean().rows(k * l, l));
            }
            experts.push(LocalExpert {
                expert: j,
                inputs: s.psi_inputs(j).clone(),
                chol_l: model.factors.experts[j].kp_chol.clone(),
                mean,
                cov,
            });
        }
        Ok(CpoePredictor {
            kernel: model.params().kernel.clone(),
            noise: model.params().noise_variance(),
            experts,
            default_z: (s.n_points() as f64).ln() * c as f64,
            dim: s.input_dim(),
        })
    }

    /// Local prediction `(m_j, v_j)` of predicting expert `j` (0-based,
    /// `j >= C - 1`).
    pub fn local_predict(&self, j: usize, x: &[f64]) -> Result<(f64, f64)> {
        self.check_point(x)?;
        let e = self
            .experts
            .iter()
            .find(|e| e.expert == j)
            .ok_or_else(|| CpoeError::param(format!("expert {j} does not predict")))?;
        self.local_gaussian(e, x)
    }

    fn local_gaussian(&self, e: &LocalExpert, x: &[f64]) -> Result<(f64, f64)> {
        let xs = DMatrix::from_row_slice(1, x.len(), x);
        let k0 = self.kernel.prior_variance();
        let k = self.kernel.eval(&e.inputs, &xs)?.column(0).into_owned();
        let h = solve_lower_tr_vec(&e.chol_l, &solve_lower_vec(&e.chol_l, &k));
        let m = h.dot(&e.mean);
        let v_cond = (k0 - h.dot(&k)).max(0.0);
        let v = ((&e.cov * &h).dot(&h) + v_cond).max(k0 * 1e-15);
        Ok((m, v))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(CpoeError::dims(format!("test point has {} inputs, model has {}", x.len(), self.dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CpoeError::param("test inputs must be finite"));
        }
        Ok(())
    }

    pub fn local(&self, x: &[f64], cfg: &PredictConfig) -> Result<Vec<LocalPrediction>> {
        self.check_point(x)?;
        let k0 = self.kernel.prior_variance();
        let mut out = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let (m, v) = self.local_gaussian(e, x)?;
            out.push(LocalPrediction {
                expert: e.expert,
                mean: m,
                variance: v,
                prior_variance: k0,
                raw_weight: raw_weight(k0, v),
                weight: 0.0,
            });
        }
        let raw: Vec<f64> = out.iter().map(|p| p.raw_weight).collect();
        let w = aggregation_weights(&raw, cfg.sharpening.unwrap_or(self.default_z));
        for (p, wi) in out.iter_mut().zip(w) {
            p.weight = wi;
        }
        Ok(out)
    }

    pub fn predict_point(&self, x: &[f64], cfg: &PredictConfig) -> Result<PredictiveGaussian> {
        let local = self.local(x, cfg)?;
        let pairs: Vec<(f64, f64)> = local.iter().map(|p| (p.mean, p.variance)).collect();
        let w: Vec<f64> = local.iter().map(|p| p.weight).collect();
        let mut p = aggregate(&pairs, &w)?;
        if cfg.noisy {
            p.variance += self.noise;
            p.noisy = true;
        }
        Ok(p)
    }

    pub fn predict(&self, xs: &DMatrix<f64>, cfg: &PredictConfig) -> Result<Vec<PredictiveGaussian>> {
        (0..xs.nrows())
            .map(|i| {
                let row: Vec<f64> = xs.row(i).iter().copied().collect();
                self.predict_point(&row, cfg)
            })
            .collect()
    }
}

impl CpoeModel {
    pub fn predictor(&self) -> Result<CpoePredictor> {
        CpoePredictor::new(self)
    }

    pub fn predict_point(&self, x: &[f64], cfg: &PredictConfig) -> Result<PredictiveGaussian> {
        self.predictor()?.predict_point(x, cfg)
    }

    pub fn predict(&self, xs: &DMatrix<f64>, cfg: &PredictConfig) -> Result<Vec<PredictiveGaussian>> {
        self.predictor()?.predict(xs, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_experts_give_equal_weights() {
        let w = aggregation_weights(&[0.3, 0.3], 7.0);
        assert!((w[0] - 0.5).abs() < 1e-15);
        let p = aggregate(&[(1.0, 0.5), (3.0, 0.5)], &w).unwrap();
        assert!((p.mean - 2.0).abs() < 1e-12);
        assert!((p.variance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_expert_passes_through() {
        let w = aggregation_weights(&[0.2], 4.0);
        assert_eq!(w, vec![1.0]);
        let p = aggregate(&[(0.7, 0.3)], &w).unwrap();
        assert!((p.mean - 0.7).abs() < 1e-15 && (p.variance - 0.3).abs() < 1e-15);
    }

    #[test]
    fn direct_formula_example() {
        let p = aggregate(&[(0.0, 1.0), (1.0, 1.0)], &[0.5, 0.5]).unwrap();
        assert!((p.mean - 0.5).abs() < 1e-15);
        assert!((p.variance - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sharpened_weights_by_formula() {
        let raw = [raw_weight(1.0, 0.1), raw_weight(1.0, 0.5)];
        let z = 2.0 * 100f64.ln();
        let w = aggregation_weights(&raw, z);
        let b0 = (0.5 * 10f64.ln()).powf(z);
        let b1 = (0.5 * 2f64.ln()).powf(z);
        assert!((w[0] - b0 / (b0 + b1)).abs() < 1e-12);
        assert!((w[1] - b1 / (b0 + b1)).abs() < 1e-12);
    }

    #[test]
    fn sharpening_favours_confident_expert() {
        let raw = [raw_weight(1.0, 0.1), raw_weight(1.0, 0.9)];
        let w1 = aggregation_weights(&raw, 1.0);
        let w20 = aggregation_weights(&raw, 20.0);
        assert!(w20[0] > w1[0]);
        assert!((w20.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uninformative_experts() {
        let w = aggregation_weights(&[raw_weight(1.0, 2.0), raw_weight(1.0, 0.5)], 3.0);
        assert!(w[0] < 1e-20);
        let uniform = aggregation_weights(&[-0.1, -2.0, 0.0], 5.0);
        for v in uniform {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let huge = aggregation_weights(&[0.2, 0.3], 1e4);
        assert!(huge.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_aggregation_fails() {
        assert!(aggregate(&[], &[]).is_err());
    }
}
