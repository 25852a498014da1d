use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Cov, CpoeStructure, Factors};
use crate::block_sparse::{BlockCholesky, BlockSparseMatrix, PartialInverse};
use crate::error::Result;
use crate::kernels::{symmetrize, GpParams};
use crate::linalg::{add_diag, cholesky, chol_logdet, Chol};

/// Factorised `V_j = V_bar_j + sigma^2 I`.
#[derive(Debug, Clone)]
pub(crate) enum VFactor {
    Diag(DVector<f64>),
    Full(Chol),
}

impl VFactor {
    pub fn new(vbar: &Cov, noise: f64, b: usize) -> Result<Self> {
        Ok(match vbar {
            Cov::Zero => VFactor::Diag(DVector::from_element(b, noise)),
            Cov::Diag(d) => VFactor::Diag(d.add_scalar(noise)),
            Cov::Full(d) => {
                let mut v = d.clone();
                add_diag(&mut v, noise);
                VFactor::Full(cholesky(&v, "expert noise covariance")?)
            }
        })
    }

    pub fn solve(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            VFactor::Diag(v) => {
                let mut out = m.clone();
                for (r, vr) in v.iter().enumerate() {
                    out.row_mut(r).scale_mut(1.0 / vr);
                }
                out
            }
            VFactor::Full(c) => c.solve(m),
        }
    }

    pub fn solve_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            VFactor::Diag(v) => y.component_div(v),
            VFactor::Full(c) => c.solve(y),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            VFactor::Diag(v) => v.iter().map(|x| x.ln()).sum(),
            VFactor::Full(c) => chol_logdet(c),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ExpertSolve {
    pub v: VFactor,
    pub vinv_h: DMatrix<f64>,
    pub r: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Posterior {
    pub precision: BlockSparseMatrix,
    pub chol: BlockCholesky,
    pub mean: DVector<f64>,
    pub cov: PartialInverse,
    pub lml: f64,
    pub solves: Vec<ExpertSolve>,
}

impl Posterior {
    pub fn assemble(s: &CpoeStructure, params: &GpParams, f: &Factors) -> Result<Self> {
        let l = s.block_size();
        let jn = s.n_experts();
        let noise = params.noise_variance();

        let solves: Vec<ExpertSolve> = (0..jn)
            .into_par_iter()
            .map(|j| {
                let e = &s.experts[j];
                let ef = &f.experts[j];
                let v = VFactor::new(&ef.vbar, noise, e.x.nrows())?;
                let vinv_h = v.solve(&ef.h);
                let r = v.solve_vec(&e.y);
                Ok(ExpertSolve { v, vinv_h, r })
            })
            .collect::<Result<_>>()?;

        let mut precision = f.prior_precision.clone();
        let mut b = DVector::zeros(jn * l);
        let (mut quad_y, mut logdet_v, mut lambda, mut logdet_q) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..jn {
            let e = &s.experts[j];
            let ef = &f.experts[j];
            let sv = &solves[j];
            let mut t = ef.h.tr_mul(&sv.vinv_h);
            symmetrize(&mut t);
            precision.add_dense(&e.psi, &t)?;
            let bj = ef.h.tr_mul(&sv.r);
            for (p, &k) in e.psi.iter().enumerate() {
                let mut dst = b.rows_mut(k * l, l);
                dst += bj.rows(p * l, l);
            }
            quad_y += e.y.dot(&sv.r);
            logdet_v += sv.v.log_det();
            lambda += ef.lambda;
            logdet_q += ef.logdet_q;
        }

        let chol = BlockCholesky::factor(&precision, s.symbolic.clone())?;
        let mean = chol.solve(&b)?;
        let cov = chol.partial_inverse()?;
        let n = s.n_points() as f64;
        let lml = -0.5
            * (quad_y - mean.dot(&b) + chol.log_det() + logdet_v + logdet_q + n * (2.0 * PI).ln())
            - lambda;
        Ok(Posterior {
            precision,
            chol,
            mean,
            cov,
            lml,
            solves,
        })
    }

    /// Posterior mean over the blocks `blocks`, stacked.
    pub fn mean_sub(&self, blocks: &[usize], l: usize) -> DVector<f64> {
        let mut out = DVector::zeros(blocks.len() * l);
        for (p, &k) in blocks.iter().enumerate() {
            out.rows_mut(p * l, l).copy_from(&self.mean.rows(k * l, l));
        }
        out
    }
}
