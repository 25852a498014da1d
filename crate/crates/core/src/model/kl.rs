use super::{CpoeModel, Variant};
use crate::error::{CpoeError, Result};

/// Change in `KL(p || q_C)` between two correlation degrees on the same
/// partition and inducing inputs, split into the prior part and the
/// projection part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlDifference {
    pub prior: f64,
    pub projection: f64,
}

impl KlDifference {
    pub fn total(&self) -> f64 {
        self.prior + self.projection
    }
}

/// `KL(p || q_a) - KL(p || q_b)` for two models that differ only in their
/// correlation degree. Positive when `b` is the closer approximation.
pub fn prior_kl_difference(a: &CpoeModel, b: &CpoeModel) -> Result<KlDifference> {
    let (ga, gb) = (a.graph(), b.graph());
    if ga.members != gb.members || ga.inducing != gb.inducing {
        return Err(CpoeError::config("models must share partition and inducing inputs"));
    }
    if a.variant() != b.variant() {
        return Err(CpoeError::config("models must use the same variant"));
    }
    if a.params() != b.params() {
        return Err(CpoeError::config("models must share hyperparameters"));
    }
    let prior = 0.5 * (a.prior_log_det() - b.prior_log_det());
    let noise = a.params().noise_variance();
    let s = a.structure();
    let mut projection = 0.0;
    for j in 0..ga.n_experts {
        let (fa, fb) = (&a.factors.experts[j], &b.factors.experts[j]);
        let exact = &s.experts[j].exact;
        let keep: Vec<usize> = (0..exact.len()).filter(|&r| exact[r].is_none()).collect();
        projection += match a.variant() {
            Variant::Dtc | Variant::Vfe => (fa.d_diag.sum() - fb.d_diag.sum()) / (2.0 * noise),
            Variant::Fitc | Variant::Pep { .. } => {
                0.5 * keep
                    .iter()
                    .map(|&r| (fa.d_diag[r].max(f64::MIN_POSITIVE) / fb.d_diag[r].max(f64::MIN_POSITIVE)).ln())
                    .sum::<f64>()
            }
            Variant::Pitc | Variant::PepBlock { .. } => {
                let logdet = |d: &nalgebra::DMatrix<f64>| -> Result<f64> {
                    if keep.is_empty() {
                        return Ok(0.0);
                    }
                    let sub = nalgebra::DMatrix::from_fn(keep.len(), keep.len(), |p, q| d[(keep[p], keep[q])]);
                    let c = crate::linalg::cholesky(&sub, "conditional covariance block")?;
                    Ok(crate::linalg::chol_logdet(&c))
                };
                0.5 * (logdet(fa.d_full.as_ref().unwrap())? - logdet(fb.d_full.as_ref().unwrap())?)
            }
        };
    }
    Ok(KlDifference { prior, projection })
}
