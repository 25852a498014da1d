//! Gradient of the log marginal likelihood.
//!
//! Every expert's contribution is first reduced to sensitivities with respect
//! to its kernel matrices (`K~` over inducing inputs, `K_xa`, `K_xx`), which
//! are then contracted with the kernel derivatives. This keeps the cost per
//! hyperparameter at one pass over the expert's kernel derivative matrices.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::posterior::{Posterior, VFactor};
use super::{CpoeStructure, Factors, Variant};
use crate::error::Result;
use crate::kernels::GpParams;
use crate::linalg::{frob_dot, solve_lower};

/// Weight on the derivative of `K_xx`.
#[derive(Debug, Clone)]
pub(crate) enum XxWeight {
    Diag(DVector<f64>),
    Full(DMatrix<f64>),
}

/// Sensitivities of a scalar objective with respect to one expert's kernel
/// matrices.
#[derive(Debug, Clone)]
pub(crate) struct KernelAdjoint {
    /// On the jittered covariance of the inducing inputs.
    pub e_a: DMatrix<f64>,
    /// On the cross covariance between expert points and inducing inputs.
    pub e_x: DMatrix<f64>,
    pub e_xx: XxWeight,
}

impl KernelAdjoint {
    pub fn zeros(b: usize, m: usize, full: bool) -> Self {
        KernelAdjoint {
            e_a: DMatrix::zeros(m, m),
            e_x: DMatrix::zeros(b, m),
            e_xx: if full {
                XxWeight::Full(DMatrix::zeros(b, b))
            } else {
                XxWeight::Diag(DVector::zeros(b))
            },
        }
    }

    /// Adds the effect of the projection sensitivity `g_h` and the conditional
    /// covariance weight `omega` (both already zero on exact rows).
    pub fn add_projection(
        &mut self,
        h: &DMatrix<f64>,
        kinv: &DMatrix<f64>,
        g_h: &DMatrix<f64>,
        omega: &XxWeight,
    ) {
        // dH = (dK_xa - H dK~) K~^{-1}
        let p = g_h * kinv;
        self.e_a -= h.tr_mul(&p);
        self.e_x += &p;
        // dD = dK_xx - dK_xa H^T - H dK_ax + H dK~ H^T
        let oh = match omega {
            XxWeight::Diag(w) => {
                let mut oh = h.clone();
                for (r, wr) in w.iter().enumerate() {
                    oh.row_mut(r).scale_mut(*wr);
                }
                oh
            }
            XxWeight::Full(o) => o * h,
        };
        self.e_x -= &oh * 2.0;
        self.e_a += h.tr_mul(&oh);
        match (&mut self.e_xx, omega) {
            (XxWeight::Diag(a), XxWeight::Diag(w)) => *a += w,
            (XxWeight::Full(a), XxWeight::Full(w)) => *a += w,
            (XxWeight::Full(a), XxWeight::Diag(w)) => {
                for (r, wr) in w.iter().enumerate() {
                    a[(r, r)] += wr;
                }
            }
            (XxWeight::Diag(_), XxWeight::Full(_)) => unreachable!("diagonal adjoint given a full weight"),
        }
    }

    /// Contracts with the kernel derivatives; one entry per kernel parameter.
    pub fn contract(&self, params: &GpParams, x: &DMatrix<f64>, a: &DMatrix<f64>, jitter: f64) -> Result<Vec<f64>> {
        let k = &params.kernel;
        let d_aa = k.grad_all(a, a)?;
        let d_xa = k.grad_all(x, a)?;
        let dk0 = k.prior_variance_grad();
        let tr_a = self.e_a.trace();
        let d_xx = match &self.e_xx {
            XxWeight::Full(_) => Some(k.grad_all(x, x)?),
            XxWeight::Diag(_) => None,
        };
        Ok((0..k.n_params())
            .map(|p| {
                let mut g = frob_dot(&self.e_a, &d_aa[p]) + jitter * dk0[p] * tr_a + frob_dot(&self.e_x, &d_xa[p]);
                g += match (&self.e_xx, &d_xx) {
                    (XxWeight::Diag(w), _) => dk0[p] * w.sum(),
                    (XxWeight::Full(w), Some(d)) => frob_dot(w, &d[p]),
                    _ => unreachable!(),
                };
                g
            })
            .collect())
    }
}

/// `K^{-1}` from a lower Cholesky factor, plus the factor's inverse.
pub(crate) fn inverse_from_chol(l: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = l.nrows();
    let linv = solve_lower(l, &DMatrix::identity(n, n));
    (linv.tr_mul(&linv), linv)
}

/// Weight on `dD` and the derivative of `-lambda` with respect to the log
/// noise variance, given the noise-covariance sensitivity `g_v`.
pub(crate) fn variant_weights(
    variant: Variant,
    noise: f64,
    g_v: &XxWeight,
    d_diag: &DVector<f64>,
    d_full: Option<&DMatrix<f64>>,
    exact: &[Option<usize>],
) -> Option<(XxWeight, f64)> {
    let b = exact.len();
    let mask_vec = |mut w: DVector<f64>| {
        for (r, e) in exact.iter().enumerate() {
            if e.is_some() {
                w[r] = 0.0;
            }
        }
        w
    };
    let mask_mat = |mut w: DMatrix<f64>| {
        for (r, e) in exact.iter().enumerate() {
            if e.is_some() {
                w.row_mut(r).fill(0.0);
                w.column_mut(r).fill(0.0);
            }
        }
        w
    };
    let gv_diag = || match g_v {
        XxWeight::Diag(g) => g.clone(),
        XxWeight::Full(g) => g.diagonal(),
    };
    match variant {
        Variant::Dtc => None,
        Variant::Vfe => Some((
            XxWeight::Diag(mask_vec(DVector::from_element(b, -0.5 / noise))),
            d_diag.sum() / (2.0 * noise),
        )),
        Variant::Fitc => Some((XxWeight::Diag(mask_vec(gv_diag())), 0.0)),
        Variant::Pep { alpha } => {
            let c = (1.0 - alpha) / (2.0 * alpha);
            let g = gv_diag();
            let w = DVector::from_fn(b, |r, _| {
                alpha * g[r] - c * alpha / noise / (1.0 + alpha * d_diag[r] / noise)
            });
            let dn: f64 = d_diag
                .iter()
                .map(|d| {
                    let t = alpha * d / noise;
                    c * t / (1.0 + t)
                })
                .sum();
            Some((XxWeight::Diag(mask_vec(w)), dn))
        }
        Variant::Pitc => match g_v {
            XxWeight::Full(g) => Some((XxWeight::Full(mask_mat(g.clone())), 0.0)),
            XxWeight::Diag(_) => unreachable!("block variant has a full noise covariance"),
        },
        Variant::PepBlock { alpha } => {
            let c = (1.0 - alpha) / (2.0 * alpha);
            let d = d_full.expect("block variant keeps D");
            let ad = d * (alpha / noise);
            let mut m = ad.clone();
            for r in 0..b {
                m[(r, r)] += 1.0;
            }
            let minv = m.cholesky().expect("I + alpha D / sigma^2 is positive definite").inverse();
            let g = match g_v {
                XxWeight::Full(g) => g,
                XxWeight::Diag(_) => unreachable!("block variant has a full noise covariance"),
            };
            let w = g * alpha - &minv * (c * alpha / noise);
            let dn = c * frob_dot(&minv, &ad);
            Some((XxWeight::Full(mask_mat(w)), dn))
        }
    }
}

/// Sensitivity of `-1/2 tr(W T) + mu^T b - 1/2 y^T V^{-1} y - 1/2 log|V|`
/// with respect to `H` and `V`, with `A = V^{-1} H`, `r = V^{-1} y`.
fn data_sensitivities(
    v: &VFactor,
    a: &DMatrix<f64>,
    r: &DVector<f64>,
    mu: &DVector<f64>,
    w: &DMatrix<f64>,
) -> (DMatrix<f64>, XxWeight) {
    let aw = a * w;
    let u = a * mu;
    let g_h = r * mu.transpose() - &aw;
    let g_v = match v {
        VFactor::Diag(vd) => XxWeight::Diag(DVector::from_fn(r.len(), |i, _| {
            0.5 * aw.row(i).dot(&a.row(i)) - u[i] * r[i] + 0.5 * r[i] * r[i] - 0.5 / vd[i]
        })),
        VFactor::Full(c) => {
            let ur = &u * r.transpose();
            XxWeight::Full(
                (&aw * a.transpose()) * 0.5 - (&ur + ur.transpose()) * 0.5 + (r * r.transpose()) * 0.5
                    - c.inverse() * 0.5,
            )
        }
    };
    (g_h, g_v)
}

pub(crate) fn xx_trace(w: &XxWeight) -> f64 {
    match w {
        XxWeight::Diag(d) => d.sum(),
        XxWeight::Full(m) => m.trace(),
    }
}

pub(crate) fn mask_rows(m: &mut DMatrix<f64>, exact: &[Option<usize>]) {
    for (r, e) in exact.iter().enumerate() {
        if e.is_some() {
            m.row_mut(r).fill(0.0);
        }
    }
}

pub(crate) fn lml_gradient(s: &CpoeStructure, params: &GpParams, f: &Factors, post: &Posterior) -> Result<Vec<f64>> {
    let l = s.block_size();
    let noise = params.noise_variance();
    let np = params.n_params();
    let per_expert: Vec<Vec<f64>> = (0..s.n_experts())
        .into_par_iter()
        .map(|j| {
            let e = &s.experts[j];
            let ef = &f.experts[j];
            let sv = &post.solves[j];
            let m = e.psi.len() * l;
            let mu = post.mean_sub(&e.psi, l);
            let mut w = post.cov.dense_sub(&e.psi)?;
            w += &mu * mu.transpose();

            let mut adj = KernelAdjoint::zeros(e.x.nrows(), m, s.variant.is_block());

            // Prior factor p(a_j | a_pi(j)) over the family, a prefix of psi.
            let mf = e.family.len() * l;
            let (kp_inv, lp_inv) = inverse_from_chol(&ef.kp_chol);
            let wf = w.view((0, 0), (mf, mf));
            let mut e_s = (&kp_inv * wf * &kp_inv - &kp_inv) * 0.5;
            if mf > l {
                let mp = mf - l;
                let l11 = lp_inv.view((0, 0), (mp, mp));
                let kpi_inv = l11.tr_mul(&l11);
                let wpp = w.view((0, 0), (mp, mp));
                let corr = (&kpi_inv * wpp * &kpi_inv - &kpi_inv) * 0.5;
                let mut blk = e_s.view_mut((0, 0), (mp, mp));
                blk -= corr;
            }
            let mut blk = adj.e_a.view_mut((0, 0), (mf, mf));
            blk += e_s;

            // Likelihood factor N(y_j; H_j a_psi, V_j).
            let owner = &f.experts[e.psi_owner].kp_chol;
            let (kpsi_inv, _) = inverse_from_chol(owner);
            let (mut g_h, g_v) = data_sensitivities(&sv.v, &sv.vinv_h, &sv.r, &mu, &w);
            mask_rows(&mut g_h, &e.exact);
            let mut g_noise = noise * xx_trace(&g_v);
            let omega = match variant_weights(s.variant, noise, &g_v, &ef.d_diag, ef.d_full.as_ref(), &e.exact) {
                Some((om, dn)) => {
                    g_noise += dn;
                    om
                }
                None => XxWeight::Diag(DVector::zeros(e.x.nrows())),
            };
            adj.add_projection(&ef.h, &kpsi_inv, &g_h, &omega);
            let mut g = adj.contract(params, &e.x, s.psi_inputs(j), f.jitter)?;
            g.push(g_noise);
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; np];
    for g in per_expert {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}
