use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{CpoeStructure, Variant};
use crate::block_sparse::BlockSparseMatrix;
use crate::error::{CpoeError, Result};
use crate::kernels::{symmetrize, GpParams};
use crate::linalg::{add_diag, cholesky, chol_logdet, solve_lower, solve_lower_tr};

/// Covariance added to the noise in `V_j`.
#[derive(Debug, Clone)]
pub(crate) enum Cov {
    Zero,
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertFactors {
    /// Lower Cholesky factor of the jittered covariance of the family's
    /// inducing values (predecessors first, own block last).
    pub kp_chol: DMatrix<f64>,
    /// `log |Q_j|` from the trailing block of `kp_chol`.
    pub logdet_q: f64,
    /// Projection from the correlation set's inducing values.
    pub h: DMatrix<f64>,
    /// Diagonal of the conditional covariance, zero on exact rows.
    pub d_diag: DVector<f64>,
    /// Whole conditional covariance block, for block variants.
    pub d_full: Option<DMatrix<f64>>,
    pub vbar: Cov,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Factors {
    pub experts: Vec<ExpertFactors>,
    pub prior_precision: BlockSparseMatrix,
    pub jitter: f64,
}

/// Jittered covariance of stacked inducing inputs.
pub(crate) fn jittered_cov(params: &GpParams, a: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let mut k = params.kernel.eval_symmetric(a)?;
    add_diag(&mut k, jitter * params.kernel.prior_variance());
    Ok(k)
}

/// `K_xa K~^{-1}` with exact rows replaced by unit vectors at `offset + k`.
pub(crate) fn projection(
    k_xa: &DMatrix<f64>,
    chol_l: &DMatrix<f64>,
    exact: &[Option<usize>],
    offset: usize,
) -> DMatrix<f64> {
    let y = solve_lower(chol_l, &k_xa.transpose());
    let mut h = solve_lower_tr(chol_l, &y).transpose();
    for (r, e) in exact.iter().enumerate() {
        if let Some(k) = e {
            h.row_mut(r).fill(0.0);
            h[(r, offset + k)] = 1.0;
        }
    }
    h
}

/// Conditional covariance `K_xx - H K_ax` (diagonal, optionally full),
/// zero on exact rows.
pub(crate) fn conditional_cov(
    params: &GpParams,
    x: &DMatrix<f64>,
    k_xa: &DMatrix<f64>,
    h: &DMatrix<f64>,
    exact: &[Option<usize>],
    full: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let k0 = params.kernel.prior_variance();
    let b = x.nrows();
    let mut diag = DVector::from_fn(b, |r, _| {
        if exact[r].is_some() {
            0.0
        } else {
            (k0 - h.row(r).dot(&k_xa.row(r))).max(0.0)
        }
    });
    let d_full = if full {
        let mut d = params.kernel.eval_symmetric(x)? - h * k_xa.transpose();
        for (r, e) in exact.iter().enumerate() {
            if e.is_some() {
                d.row_mut(r).fill(0.0);
                d.column_mut(r).fill(0.0);
            }
        }
        symmetrize(&mut d);
        for r in 0..b {
            d[(r, r)] = d[(r, r)].max(0.0);
            diag[r] = d[(r, r)];
        }
        Some(d)
    } else {
        None
    };
    Ok((diag, d_full))
}

/// Noise correction `V_bar` and log-likelihood correction `lambda`.
pub(crate) fn variant_terms(
    variant: Variant,
    noise: f64,
    d_diag: &DVector<f64>,
    d_full: Option<&DMatrix<f64>>,
) -> Result<(Cov, f64)> {
    Ok(match variant {
        Variant::Dtc => (Cov::Zero, 0.0),
        Variant::Vfe => (Cov::Zero, d_diag.sum() / (2.0 * noise)),
        Variant::Fitc => (Cov::Diag(d_diag.clone()), 0.0),
        Variant::Pitc => (Cov::Full(d_full.expect("block variant keeps D").clone()), 0.0),
        Variant::Pep { alpha } => {
            let c = (1.0 - alpha) / (2.0 * alpha);
            let lam = c * d_diag.iter().map(|d| (alpha * d / noise).ln_1p()).sum::<f64>();
            (Cov::Diag(d_diag * alpha), lam)
        }
        Variant::PepBlock { alpha } => {
            let d = d_full.expect("block variant keeps D");
            let c = (1.0 - alpha) / (2.0 * alpha);
            let mut m = d * (alpha / noise);
            add_diag(&mut m, 1.0);
            let ch = cholesky(&m, "I + alpha D / sigma^2")?;
            (Cov::Full(d * alpha), c * chol_logdet(&ch))
        }
    })
}

impl Factors {
    pub fn build(s: &CpoeStructure, params: &GpParams, jitter: f64) -> Result<Self> {
        let l = s.block_size();
        let jn = s.n_experts();

        let priors: Vec<(DMatrix<f64>, f64, DMatrix<f64>)> = (0..jn)
            .into_par_iter()
            .map(|j| {
                let e = &s.experts[j];
                let k = jittered_cov(params, &e.a_family, jitter)?;
                let ch = cholesky(&k, &format!("prior covariance of expert {j}"))?;
                let lp = ch.l();
                let m = lp.nrows();
                let logdet_q = 2.0 * ((m - l)..m).map(|i| lp[(i, i)].ln()).sum::<f64>();
                // The last L rows of L^{-1} whiten a_j given its predecessors.
                let linv = solve_lower(&lp, &DMatrix::identity(m, m));
                let g = linv.rows(m - l, l).into_owned();
                Ok((lp, logdet_q, g.tr_mul(&g)))
            })
            .collect::<Result<_>>()?;

        let mut prior_precision = BlockSparseMatrix::zeros(s.pattern.clone(), l);
        for (j, (_, _, sj)) in priors.iter().enumerate() {
            prior_precision.add_dense(&s.experts[j].family, sj)?;
        }

        let noise = params.noise_variance();
        let experts = (0..jn)
            .into_par_iter()
            .map(|j| {
                let e = &s.experts[j];
                let owner = &priors[e.psi_owner].0;
                let k_xa = params.kernel.eval(&e.x, s.psi_inputs(j))?;
                let h = projection(&k_xa, owner, &e.exact, e.self_offset(j, l));
                let (d_diag, d_full) =
                    conditional_cov(params, &e.x, &k_xa, &h, &e.exact, s.variant.is_block())?;
                let (vbar, lambda) = variant_terms(s.variant, noise, &d_diag, d_full.as_ref())?;
                Ok(ExpertFactors {
                    kp_chol: priors[j].0.clone(),
                    logdet_q: priors[j].1,
                    h,
                    d_diag,
                    d_full,
                    vbar,
                    lambda,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        if experts.iter().any(|e| !e.lambda.is_finite() || !e.logdet_q.is_finite()) {
            return Err(CpoeError::NotPositiveDefinite("non-finite determinant".into()));
        }
        Ok(Factors {
            experts,
            prior_precision,
            jitter,
        })
    }
}
