//! Per-expert objective terms for stochastic training.
//!
//! Term `j` treats expert `j` on its own: its observations are projected from
//! its own inducing values only, so the marginal covariance of `y_j` is
//! `P_j = H_j K~_jj H_j^T + V_bar_j + sigma^2 I`. The sum of the terms is a
//! cheap surrogate of the log marginal likelihood whose gradient can be
//! sampled one expert at a time.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::factors::{conditional_cov, jittered_cov, projection, variant_terms, Cov};
use super::gradient::{mask_rows, variant_weights, KernelAdjoint, XxWeight};
use super::CpoeStructure;
use crate::error::{CpoeError, Result};
use crate::kernels::GpParams;
use crate::linalg::{add_diag, cholesky, chol_logdet, JITTER_LEVELS};

#[derive(Debug, Clone)]
pub struct StochasticObjective {
    structure: Arc<CpoeStructure>,
}

impl StochasticObjective {
    pub fn new(structure: Arc<CpoeStructure>) -> Self {
        StochasticObjective { structure }
    }

    pub fn structure(&self) -> &Arc<CpoeStructure> {
        &self.structure
    }

    pub fn n_terms(&self) -> usize {
        self.structure.n_experts()
    }

    /// Value of term `j` without the `-B_j/2 log 2 pi` constant.
    pub fn term_value(&self, j: usize, params: &GpParams) -> Result<f64> {
        self.with_jitter(|c| self.eval(j, params, c, false)).map(|(v, _)| v)
    }

    /// Value and gradient of term `j`.
    pub fn term(&self, j: usize, params: &GpParams) -> Result<(f64, Vec<f64>)> {
        self.with_jitter(|c| self.eval(j, params, c, true))
    }

    /// `sum_j l_j - N/2 log 2 pi`.
    pub fn total(&self, params: &GpParams) -> Result<f64> {
        let mut acc = 0.0;
        for j in 0..self.n_terms() {
            acc += self.term_value(j, params)?;
        }
        Ok(acc - 0.5 * self.structure.n_points() as f64 * (2.0 * PI).ln())
    }

    fn with_jitter<T>(&self, mut f: impl FnMut(f64) -> Result<T>) -> Result<T> {
        let mut last = None;
        for &c in &JITTER_LEVELS {
            match f(c) {
                Ok(v) => return Ok(v),
                Err(e @ (CpoeError::NotPositiveDefinite(_) | CpoeError::BlockNotPositiveDefinite { .. })) => {
                    last = Some(e)
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap())
    }

    fn eval(&self, j: usize, params: &GpParams, jitter: f64, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let s = &self.structure;
        if j >= s.n_experts() {
            return Err(CpoeError::param(format!("expert {j} out of range")));
        }
        let e = &s.experts[j];
        let noise = params.noise_variance();
        let kaa = jittered_cov(params, &e.a, jitter)?;
        let ch = cholesky(&kaa, &format!("inducing covariance of expert {j}"))?;
        let lk = ch.l();
        let k_xa = params.kernel.eval(&e.x, &e.a)?;
        let h = projection(&k_xa, &lk, &e.exact, 0);
        let (d_diag, d_full) = conditional_cov(params, &e.x, &k_xa, &h, &e.exact, s.variant.is_block())?;
        let (vbar, lambda) = variant_terms(s.variant, noise, &d_diag, d_full.as_ref())?;

        let hl = &h * &lk;
        let mut p = &hl * hl.transpose();
        match &vbar {
            Cov::Zero => {}
            Cov::Diag(d) => {
                for (r, v) in d.iter().enumerate() {
                    p[(r, r)] += v;
                }
            }
            Cov::Full(d) => p += d,
        }
        add_diag(&mut p, noise);
        let pc = cholesky(&p, &format!("marginal covariance of expert {j}"))?;
        let alpha = pc.solve(&e.y);
        let value = -0.5 * (e.y.dot(&alpha) + chol_logdet(&pc)) - lambda;
        if !with_grad {
            return Ok((value, Vec::new()));
        }

        let g_p: DMatrix<f64> = (&alpha * alpha.transpose() - pc.inverse()) * 0.5;
        let b = e.x.nrows();
        let m = e.a.nrows();
        let mut adj = KernelAdjoint::zeros(b, m, s.variant.is_block());
        adj.e_a += h.tr_mul(&(&g_p * &h));
        let mut g_h = &g_p * &h * &kaa * 2.0;
        mask_rows(&mut g_h, &e.exact);
        let g_v = XxWeight::Full(g_p.clone());
        let mut g_noise = noise * g_p.trace();
        let omega = match variant_weights(s.variant, noise, &g_v, &d_diag, d_full.as_ref(), &e.exact) {
            Some((om, dn)) => {
                g_noise += dn;
                om
            }
            None => XxWeight::Diag(nalgebra::DVector::zeros(b)),
        };
        let kinv = ch.inverse();
        adj.add_projection(&h, &kinv, &g_h, &omega);
        let mut g = adj.contract(params, &e.x, &e.a, jitter)?;
        g.push(g_noise);
        Ok((value, g))
    }
}
