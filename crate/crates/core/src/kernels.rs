//! Covariance functions and hyperparameter vectors.
//!
//! Inputs are matrices with one point per row. All positive parameters are
//! stored as natural logarithms, so the flattened parameter vector is
//! unconstrained and gradients are taken with respect to the logs. Spectral
//! mixture frequency means are the only raw (unconstrained) parameters.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::config::KvMap;
use crate::error::{CpoeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `s2 * exp(-0.5 * sum_d (dx_d / l_d)^2)`.
    SquaredExponential {
        log_amplitude: f64,
        log_lengthscales: Vec<f64>,
    },
    /// `s2 * exp(-2 sum_d sin^2(pi dx_d / p) / l^2)`.
    Periodic {
        log_amplitude: f64,
        log_lengthscale: f64,
        log_period: f64,
    },
    /// `sum_q w_q prod_d exp(-2 pi^2 t_d^2 v_qd) cos(2 pi t_d m_qd)`.
    SpectralMixture {
        log_weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        log_variances: Vec<Vec<f64>>,
    },
    Sum(Vec<KernelSpec>),
}

impl KernelSpec {
    pub fn se_ard(amplitude: f64, lengthscales: &[f64]) -> Self {
        KernelSpec::SquaredExponential {
            log_amplitude: amplitude.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn periodic(amplitude: f64, lengthscale: f64, period: f64) -> Self {
        KernelSpec::Periodic {
            log_amplitude: amplitude.ln(),
            log_lengthscale: lengthscale.ln(),
            log_period: period.ln(),
        }
    }

    /// `means[q]` and `variances[q]` hold the per-dimension frequency mean and
    /// variance of mixture component `q`.
    pub fn spectral_mixture(weights: &[f64], means: &[Vec<f64>], variances: &[Vec<f64>]) -> Self {
        KernelSpec::SpectralMixture {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            means: means.to_vec(),
            log_variances: variances
                .iter()
                .map(|v| v.iter().map(|x| x.ln()).collect())
                .collect(),
        }
    }

    pub fn sum(components: Vec<KernelSpec>) -> Self {
        let mut flat = Vec::new();
        for c in components {
            match c {
                KernelSpec::Sum(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        KernelSpec::Sum(flat)
    }

    pub fn n_params(&self) -> usize {
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => 1 + log_lengthscales.len(),
            KernelSpec::Periodic { .. } => 3,
            KernelSpec::SpectralMixture {
                log_weights, means, ..
            } => {
                let d = means.first().map_or(0, |m| m.len());
                log_weights.len() * (1 + 2 * d)
            }
            KernelSpec::Sum(parts) => parts.iter().map(|p| p.n_params()).sum(),
        }
    }

    /// Unconstrained parameter vector in declaration order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.push_params(&mut out);
        out
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } => {
                out.push(*log_amplitude);
                out.extend_from_slice(log_lengthscales);
            }
            KernelSpec::Periodic {
                log_amplitude,
                log_lengthscale,
                log_period,
            } => out.extend_from_slice(&[*log_amplitude, *log_lengthscale, *log_period]),
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                for q in 0..log_weights.len() {
                    out.push(log_weights[q]);
                    out.extend_from_slice(&means[q]);
                    out.extend_from_slice(&log_variances[q]);
                }
            }
            KernelSpec::Sum(parts) => parts.iter().for_each(|p| p.push_params(out)),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_params());
        self.push_names("", &mut out);
        out
    }

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => {
                out.push(format!("{prefix}log_amplitude"));
                for d in 0..log_lengthscales.len() {
                    out.push(format!("{prefix}log_lengthscale_{d}"));
                }
            }
            KernelSpec::Periodic { .. } => {
                out.push(format!("{prefix}log_amplitude"));
                out.push(format!("{prefix}log_lengthscale"));
                out.push(format!("{prefix}log_period"));
            }
            KernelSpec::SpectralMixture {
                log_weights, means, ..
            } => {
                for q in 0..log_weights.len() {
                    out.push(format!("{prefix}log_weight_{q}"));
                    for d in 0..means[q].len() {
                        out.push(format!("{prefix}mean_{q}_{d}"));
                    }
                    for d in 0..means[q].len() {
                        out.push(format!("{prefix}log_variance_{q}_{d}"));
                    }
                }
            }
            KernelSpec::Sum(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    p.push_names(&format!("{prefix}k{i}."), out);
                }
            }
        }
    }

    /// Returns a copy with parameters replaced by `theta`.
    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(CpoeError::dims(format!(
                "kernel expects {} parameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let mut pos = 0;
        let out = self.read_params(theta, &mut pos);
        out.validate()?;
        Ok(out)
    }

    fn read_params(&self, theta: &[f64], pos: &mut usize) -> Self {
        let mut take = |n: usize| {
            let s = theta[*pos..*pos + n].to_vec();
            *pos += n;
            s
        };
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => {
                let a = take(1)[0];
                KernelSpec::SquaredExponential {
                    log_amplitude: a,
                    log_lengthscales: take(log_lengthscales.len()),
                }
            }
            KernelSpec::Periodic { .. } => {
                let v = take(3);
                KernelSpec::Periodic {
                    log_amplitude: v[0],
                    log_lengthscale: v[1],
                    log_period: v[2],
                }
            }
            KernelSpec::SpectralMixture {
                log_weights, means, ..
            } => {
                let mut w = Vec::new();
                let mut m = Vec::new();
                let mut v = Vec::new();
                for q in 0..log_weights.len() {
                    let d = means[q].len();
                    w.push(take(1)[0]);
                    m.push(take(d));
                    v.push(take(d));
                }
                KernelSpec::SpectralMixture {
                    log_weights: w,
                    means: m,
                    log_variances: v,
                }
            }
            KernelSpec::Sum(parts) => {
                KernelSpec::Sum(parts.iter().map(|p| p.read_params(theta, pos)).collect())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(CpoeError::param(
                "kernel parameters must be finite (positive parameters must be > 0)",
            ));
        }
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } if log_lengthscales.is_empty() => {
                Err(CpoeError::param("squared exponential needs lengthscales"))
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                if log_weights.is_empty()
                    || means.len() != log_weights.len()
                    || log_variances.len() != log_weights.len()
                {
                    return Err(CpoeError::param("spectral mixture component counts differ"));
                }
                let d = means[0].len();
                if d == 0
                    || means.iter().any(|m| m.len() != d)
                    || log_variances.iter().any(|v| v.len() != d)
                {
                    return Err(CpoeError::param(
                        "spectral mixture means/variances must share one input dimension",
                    ));
                }
                Ok(())
            }
            KernelSpec::Sum(parts) => {
                if parts.is_empty() {
                    return Err(CpoeError::param("sum kernel needs at least one component"));
                }
                parts.iter().try_for_each(|p| p.validate())
            }
            _ => Ok(()),
        }
    }

    /// Input dimension fixed by the parameters, if any.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::SquaredExponential {
                log_lengthscales, ..
            } => Some(log_lengthscales.len()),
            KernelSpec::Periodic { .. } => None,
            KernelSpec::SpectralMixture { means, .. } => means.first().map(|m| m.len()),
            KernelSpec::Sum(parts) => parts.iter().find_map(|p| p.input_dim()),
        }
    }

    /// Expands single-value lengthscales, means and variances to `d` inputs.
    pub fn broadcast_to(&self, d: usize) -> Self {
        match self {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } if log_lengthscales.len() == 1 => KernelSpec::SquaredExponential {
                log_amplitude: *log_amplitude,
                log_lengthscales: vec![log_lengthscales[0]; d],
            },
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => KernelSpec::SpectralMixture {
                log_weights: log_weights.clone(),
                means: means
                    .iter()
                    .map(|m| if m.len() == 1 { vec![m[0]; d] } else { m.clone() })
                    .collect(),
                log_variances: log_variances
                    .iter()
                    .map(|v| if v.len() == 1 { vec![v[0]; d] } else { v.clone() })
                    .collect(),
            },
            KernelSpec::Sum(parts) => KernelSpec::Sum(parts.iter().map(|p| p.broadcast_to(d)).collect()),
            other => other.clone(),
        }
    }

    fn check_inputs(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<()> {
        if x1.ncols() != x2.ncols() {
            return Err(CpoeError::dims(format!(
                "inputs have {} and {} columns",
                x1.ncols(),
                x2.ncols()
            )));
        }
        self.check_dim(x1.ncols())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        self.validate()?;
        match self {
            KernelSpec::Sum(parts) => parts.iter().try_for_each(|p| p.check_dim(d)),
            _ => match self.input_dim() {
                Some(k) if k != d => Err(CpoeError::dims(format!(
                    "kernel expects {k} input dimensions, data has {d}"
                ))),
                _ => Ok(()),
            },
        }
    }

    /// Prior variance `k(x, x)`; the same for every input since all kernels
    /// here are stationary.
    pub fn prior_variance(&self) -> f64 {
        match self {
            KernelSpec::SquaredExponential { log_amplitude, .. }
            | KernelSpec::Periodic { log_amplitude, .. } => log_amplitude.exp(),
            KernelSpec::SpectralMixture { log_weights, .. } => {
                log_weights.iter().map(|w| w.exp()).sum()
            }
            KernelSpec::Sum(parts) => parts.iter().map(|p| p.prior_variance()).sum(),
        }
    }

    /// Gradient of `k(x, x)` with respect to each parameter.
    pub fn prior_variance_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.push_prior_variance_grad(&mut out);
        out
    }

    fn push_prior_variance_grad(&self, out: &mut Vec<f64>) {
        match self {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } => {
                out.push(log_amplitude.exp());
                out.extend(std::iter::repeat_n(0.0, log_lengthscales.len()));
            }
            KernelSpec::Periodic { log_amplitude, .. } => {
                out.extend_from_slice(&[log_amplitude.exp(), 0.0, 0.0])
            }
            KernelSpec::SpectralMixture {
                log_weights, means, ..
            } => {
                for q in 0..log_weights.len() {
                    out.push(log_weights[q].exp());
                    out.extend(std::iter::repeat_n(0.0, 2 * means[q].len()));
                }
            }
            KernelSpec::Sum(parts) => parts.iter().for_each(|p| p.push_prior_variance_grad(out)),
        }
    }

    /// Covariance matrix between the rows of `x1` and `x2`.
    pub fn eval(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(x1, x2)?;
        let mut k = DMatrix::zeros(x1.nrows(), x2.nrows());
        self.accumulate(x1, x2, &mut k);
        Ok(k)
    }

    /// Covariance of `x` with itself, exactly symmetric.
    pub fn eval_symmetric(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.eval(x, x)?;
        symmetrize(&mut k);
        Ok(k)
    }

    pub fn eval_diag(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(x.ncols())?;
        Ok(DVector::from_element(x.nrows(), self.prior_variance()))
    }

    fn accumulate(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, k: &mut DMatrix<f64>) {
        let d = x1.ncols();
        match self {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } => {
                let s2 = log_amplitude.exp();
                let inv: Vec<f64> = log_lengthscales.iter().map(|l| (-l).exp()).collect();
                for j in 0..x2.nrows() {
                    for i in 0..x1.nrows() {
                        let mut r2 = 0.0;
                        for dd in 0..d {
                            let t = (x1[(i, dd)] - x2[(j, dd)]) * inv[dd];
                            r2 += t * t;
                        }
                        k[(i, j)] += s2 * (-0.5 * r2).exp();
                    }
                }
            }
            KernelSpec::Periodic {
                log_amplitude,
                log_lengthscale,
                log_period,
            } => {
                let s2 = log_amplitude.exp();
                let l2 = (2.0 * log_lengthscale).exp();
                let p = log_period.exp();
                for j in 0..x2.nrows() {
                    for i in 0..x1.nrows() {
                        let mut ss = 0.0;
                        for dd in 0..d {
                            let s = (PI * (x1[(i, dd)] - x2[(j, dd)]) / p).sin();
                            ss += s * s;
                        }
                        k[(i, j)] += s2 * (-2.0 * ss / l2).exp();
                    }
                }
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                let mut tau = vec![0.0; d];
                for j in 0..x2.nrows() {
                    for i in 0..x1.nrows() {
                        for dd in 0..d {
                            tau[dd] = x1[(i, dd)] - x2[(j, dd)];
                        }
                        let mut acc = 0.0;
                        for q in 0..log_weights.len() {
                            acc += sm_component(log_weights[q], &means[q], &log_variances[q], &tau);
                        }
                        k[(i, j)] += acc;
                    }
                }
            }
            KernelSpec::Sum(parts) => parts.iter().for_each(|p| p.accumulate(x1, x2, k)),
        }
    }

    /// Derivative of the covariance matrix with respect to parameter `index`.
    pub fn grad(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, index: usize) -> Result<DMatrix<f64>> {
        if index >= self.n_params() {
            return Err(CpoeError::param(format!(
                "parameter index {index} out of range for {} parameters",
                self.n_params()
            )));
        }
        Ok(self.grad_all(x1, x2)?.swap_remove(index))
    }

    /// Derivatives with respect to every parameter, in parameter order.
    pub fn grad_all(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_inputs(x1, x2)?;
        let mut out = Vec::with_capacity(self.n_params());
        self.push_grads(x1, x2, &mut out);
        Ok(out)
    }

    fn push_grads(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, out: &mut Vec<DMatrix<f64>>) {
        let (n1, n2, d) = (x1.nrows(), x2.nrows(), x1.ncols());
        match self {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } => {
                let s2 = log_amplitude.exp();
                let inv: Vec<f64> = log_lengthscales.iter().map(|l| (-l).exp()).collect();
                let mut g = vec![DMatrix::zeros(n1, n2); 1 + d];
                let mut sq = vec![0.0; d];
                for j in 0..n2 {
                    for i in 0..n1 {
                        let mut r2 = 0.0;
                        for dd in 0..d {
                            let t = (x1[(i, dd)] - x2[(j, dd)]) * inv[dd];
                            sq[dd] = t * t;
                            r2 += sq[dd];
                        }
                        let kij = s2 * (-0.5 * r2).exp();
                        g[0][(i, j)] = kij;
                        for dd in 0..d {
                            g[1 + dd][(i, j)] = kij * sq[dd];
                        }
                    }
                }
                out.extend(g);
            }
            KernelSpec::Periodic {
                log_amplitude,
                log_lengthscale,
                log_period,
            } => {
                let s2 = log_amplitude.exp();
                let l2 = (2.0 * log_lengthscale).exp();
                let p = log_period.exp();
                let mut g = vec![DMatrix::zeros(n1, n2); 3];
                for j in 0..n2 {
                    for i in 0..n1 {
                        let (mut ss, mut sca) = (0.0, 0.0);
                        for dd in 0..d {
                            let arg = PI * (x1[(i, dd)] - x2[(j, dd)]) / p;
                            let s = arg.sin();
                            ss += s * s;
                            sca += s * arg.cos() * arg;
                        }
                        let kij = s2 * (-2.0 * ss / l2).exp();
                        g[0][(i, j)] = kij;
                        g[1][(i, j)] = kij * 4.0 * ss / l2;
                        g[2][(i, j)] = kij * 4.0 / l2 * sca;
                    }
                }
                out.extend(g);
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                let per = 1 + 2 * d;
                let mut g = vec![DMatrix::zeros(n1, n2); log_weights.len() * per];
                let mut tau = vec![0.0; d];
                let mut cosv = vec![0.0; d];
                let mut sinv = vec![0.0; d];
                for j in 0..n2 {
                    for i in 0..n1 {
                        for dd in 0..d {
                            tau[dd] = x1[(i, dd)] - x2[(j, dd)];
                        }
                        for q in 0..log_weights.len() {
                            let w = log_weights[q].exp();
                            let mut expo = 0.0;
                            for dd in 0..d {
                                let v = log_variances[q][dd].exp();
                                expo += -2.0 * PI * PI * tau[dd] * tau[dd] * v;
                                let a = 2.0 * PI * tau[dd] * means[q][dd];
                                cosv[dd] = a.cos();
                                sinv[dd] = a.sin();
                            }
                            let e = expo.exp();
                            let cprod: f64 = cosv.iter().product();
                            let kq = w * e * cprod;
                            let base = q * per;
                            g[base][(i, j)] = kq;
                            for dd in 0..d {
                                let others: f64 = (0..d).filter(|&e2| e2 != dd).map(|e2| cosv[e2]).product();
                                g[base + 1 + dd][(i, j)] =
                                    -w * e * others * sinv[dd] * 2.0 * PI * tau[dd];
                                let v = log_variances[q][dd].exp();
                                g[base + 1 + d + dd][(i, j)] =
                                    kq * (-2.0 * PI * PI * tau[dd] * tau[dd] * v);
                            }
                        }
                    }
                }
                out.extend(g);
            }
            KernelSpec::Sum(parts) => parts.iter().for_each(|p| p.push_grads(x1, x2, out)),
        }
    }
}

fn sm_component(log_w: f64, mean: &[f64], log_var: &[f64], tau: &[f64]) -> f64 {
    let mut expo = 0.0;
    let mut c = 1.0;
    for d in 0..tau.len() {
        expo += -2.0 * PI * PI * tau[d] * tau[d] * log_var[d].exp();
        c *= (2.0 * PI * tau[d] * mean[d]).cos();
    }
    log_w.exp() * expo.exp() * c
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Kernel together with the Gaussian observation noise.
///
/// The flattened vector is the kernel parameters followed by the log noise
/// variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GpParams {
    pub kernel: KernelSpec,
    pub log_noise: f64,
}

impl GpParams {
    pub fn new(kernel: KernelSpec, noise_variance: f64) -> Result<Self> {
        let p = GpParams {
            kernel,
            log_noise: noise_variance.ln(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !self.log_noise.is_finite() {
            return Err(CpoeError::param("noise variance must be positive and finite"));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn n_params(&self) -> usize {
        self.kernel.n_params() + 1
    }

    pub fn noise_index(&self) -> usize {
        self.kernel.n_params()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.kernel.params();
        v.push(self.log_noise);
        v
    }

    pub fn with_vec(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.n_params() {
            return Err(CpoeError::dims(format!(
                "expected {} hyperparameters, got {}",
                self.n_params(),
                theta.len()
            )));
        }
        let k = self.kernel.n_params();
        let p = GpParams {
            kernel: self.kernel.with_params(&theta[..k])?,
            log_noise: theta[k],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.kernel.param_names();
        n.push("log_noise".to_string());
        n
    }

    /// Writes the kernel and noise as flat `key = value` pairs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = kernel_to_kv(&self.kernel);
        out.push(("noise.variance".to_string(), fmt_f64(self.noise_variance())));
        out
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let kernel = kernel_from_kv(map)?;
        let noise = match map.get("noise.variance") {
            Some(_) => map.f64("noise.variance")?,
            None => 1.0,
        };
        GpParams::new(kernel, noise)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_nested(v: &[Vec<f64>]) -> String {
    v.iter().map(|r| fmt_list(r)).collect::<Vec<_>>().join(";")
}

/// Serialises a kernel as `kernel.*` keys. A sum becomes a component list.
pub fn kernel_to_kv(kernel: &KernelSpec) -> Vec<(String, String)> {
    let parts: Vec<&KernelSpec> = match kernel {
        KernelSpec::Sum(p) => p.iter().collect(),
        other => vec![other],
    };
    let names: Vec<&str> = parts
        .iter()
        .map(|p| match p {
            KernelSpec::SquaredExponential { .. } => "se",
            KernelSpec::Periodic { .. } => "periodic",
            KernelSpec::SpectralMixture { .. } => "spectral",
            KernelSpec::Sum(_) => "sum",
        })
        .collect();
    let mut out = vec![("kernel.components".to_string(), names.join(","))];
    for (i, p) in parts.iter().enumerate() {
        let key = |k: &str| format!("kernel.{i}.{k}");
        match p {
            KernelSpec::SquaredExponential {
                log_amplitude,
                log_lengthscales,
            } => {
                out.push((key("amplitude"), fmt_f64(log_amplitude.exp())));
                let ls: Vec<f64> = log_lengthscales.iter().map(|l| l.exp()).collect();
                out.push((key("lengthscales"), fmt_list(&ls)));
            }
            KernelSpec::Periodic {
                log_amplitude,
                log_lengthscale,
                log_period,
            } => {
                out.push((key("amplitude"), fmt_f64(log_amplitude.exp())));
                out.push((key("lengthscale"), fmt_f64(log_lengthscale.exp())));
                out.push((key("period"), fmt_f64(log_period.exp())));
            }
            KernelSpec::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                let w: Vec<f64> = log_weights.iter().map(|x| x.exp()).collect();
                let v: Vec<Vec<f64>> = log_variances
                    .iter()
                    .map(|r| r.iter().map(|x| x.exp()).collect())
                    .collect();
                out.push((key("weights"), fmt_list(&w)));
                out.push((key("means"), fmt_nested(means)));
                out.push((key("variances"), fmt_nested(&v)));
            }
            KernelSpec::Sum(_) => unreachable!("sums are flattened on construction"),
        }
    }
    out
}

/// Builds a kernel from `kernel.*` keys. One component gives a plain kernel,
/// several give a sum.
pub fn kernel_from_kv(map: &KvMap) -> Result<KernelSpec> {
    let comps = map.str("kernel.components")?;
    let names: Vec<&str> = comps.split(',').map(|s| s.trim()).collect();
    if names.is_empty() || names.iter().any(|n| n.is_empty()) {
        return Err(map.err_at("kernel.components", "empty component name"));
    }
    let mut parts = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let key = |k: &str| format!("kernel.{i}.{k}");
        let part = match *name {
            "se" | "rbf" | "squared_exponential" => {
                let amp = map.f64_or(&key("amplitude"), 1.0)?;
                let ls = match map.get(&key("lengthscales")) {
                    Some(_) => map.f64_list(&key("lengthscales"))?,
                    None => vec![map.f64_or(&key("lengthscale"), 1.0)?],
                };
                KernelSpec::se_ard(amp, &ls)
            }
            "periodic" => KernelSpec::periodic(
                map.f64_or(&key("amplitude"), 1.0)?,
                map.f64_or(&key("lengthscale"), 1.0)?,
                map.f64_or(&key("period"), 1.0)?,
            ),
            "spectral" | "sm" => {
                let w = map.f64_list(&key("weights"))?;
                let m = map.f64_nested(&key("means"))?;
                let v = map.f64_nested(&key("variances"))?;
                KernelSpec::spectral_mixture(&w, &m, &v)
            }
            other => {
                return Err(map.err_at(
                    "kernel.components",
                    &format!("unknown kernel component '{other}'"),
                ))
            }
        };
        part.validate()
            .map_err(|e| map.err_at(&key(name), &e.to_string()))?;
        parts.push(part);
    }
    Ok(if parts.len() == 1 {
        parts.pop().unwrap()
    } else {
        KernelSpec::Sum(parts)
    })
}

/// Parses kernel and noise settings from flat `key = value` text.
pub fn parse_kernel_config(text: &str) -> Result<GpParams> {
    let map = KvMap::parse(text)?;
    GpParams::from_kv(&map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows[0].len();
        DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
    }

    fn kernels() -> Vec<KernelSpec> {
        vec![
            KernelSpec::se_ard(1.3, &[0.4, 0.9]),
            KernelSpec::periodic(0.8, 0.7, 1.3),
            KernelSpec::spectral_mixture(&[0.6, 0.3], &[vec![0.5, 1.0], vec![0.2, 0.1]], &[vec![0.3, 0.2], vec![1.0, 0.5]]),
            KernelSpec::sum(vec![
                KernelSpec::se_ard(0.2, &[0.125, 0.125]),
                KernelSpec::se_ard(1.1, &[0.5, 0.5]),
            ]),
        ]
    }

    fn sample_x() -> DMatrix<f64> {
        pts(&[&[0.1, 0.2], &[0.5, -0.3], &[1.2, 0.7], &[-0.4, 0.05]])
    }

    #[test]
    fn se_matches_closed_form() {
        let k = KernelSpec::se_ard(2.0, &[0.5, 2.0]);
        let x = pts(&[&[0.0, 0.0]]);
        let z = pts(&[&[1.0, 2.0]]);
        let v = k.eval(&x, &z).unwrap()[(0, 0)];
        let expect = 2.0 * (-0.5 * (4.0 + 1.0_f64)).exp();
        assert!((v - expect).abs() < 1e-15);
    }

    #[test]
    fn periodic_repeats_with_period() {
        let k = KernelSpec::periodic(1.0, 0.6, 0.75);
        let x = pts(&[&[0.1]]);
        let a = k.eval(&x, &pts(&[&[0.4]])).unwrap()[(0, 0)];
        let b = k.eval(&x, &pts(&[&[0.4 + 3.0 * 0.75]])).unwrap()[(0, 0)];
        assert!((a - b).abs() < 1e-12);
        assert!((k.eval(&x, &x).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_mixture_matches_spectral_integral() {
        // k(t) = w * int N(s; m, v) cos(2 pi s t) ds for a 1-d component.
        let (w, m, v) = (0.7, 1.3, 0.4);
        let k = KernelSpec::spectral_mixture(&[w], &[vec![m]], &[vec![v]]);
        let sd = v.sqrt();
        let n = 200_000;
        let (lo, hi) = (m - 12.0 * sd, m + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        for &t in &[0.0, 0.15, 0.4, 0.9, 1.7] {
            let mut acc = 0.0;
            for i in 0..=n {
                let s = lo + i as f64 * h;
                let dens = (-(s - m) * (s - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                let f = dens * (2.0 * PI * s * t).cos();
                acc += if i == 0 || i == n { 0.5 * f } else { f };
            }
            let oracle = w * acc * h;
            let got = k.eval(&pts(&[&[t]]), &pts(&[&[0.0]])).unwrap()[(0, 0)];
            assert!((got - oracle).abs() < 1e-8, "t={t}: {got} vs {oracle}");
        }
    }

    #[test]
    fn eval_is_symmetric_and_psd() {
        let x = sample_x();
        for k in kernels() {
            let m = k.eval(&x, &x).unwrap();
            assert!((&m - m.transpose()).amax() < 1e-14);
            let eig = m.symmetric_eigenvalues();
            assert!(eig.min() > -1e-12, "{k:?}: {eig}");
            let diag = k.eval_diag(&x).unwrap();
            for i in 0..x.nrows() {
                assert!((diag[i] - m[(i, i)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let x = sample_x();
        let z = pts(&[&[0.3, 0.3], &[-0.2, 1.1], &[0.0, 0.0]]);
        for k in kernels() {
            let theta = k.params();
            let g = k.grad_all(&x, &z).unwrap();
            assert_eq!(g.len(), theta.len());
            for p in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta.clone();
                tp[p] += h;
                let mut tm = theta.clone();
                tm[p] -= h;
                let fp = k.with_params(&tp).unwrap().eval(&x, &z).unwrap();
                let fm = k.with_params(&tm).unwrap().eval(&x, &z).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((&fd - &g[p]).amax() < 1e-7, "{k:?} param {p}");
            }
            let gd = k.prior_variance_grad();
            let g0 = k.grad_all(&x, &x).unwrap();
            for p in 0..theta.len() {
                assert!((g0[p][(0, 0)] - gd[p]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters_and_dimensions() {
        let x = sample_x();
        assert!(KernelSpec::se_ard(-1.0, &[1.0, 1.0]).eval(&x, &x).is_err());
        assert!(KernelSpec::se_ard(1.0, &[1.0, 0.0]).eval(&x, &x).is_err());
        assert!(KernelSpec::se_ard(1.0, &[1.0]).eval(&x, &x).is_err());
        assert!(KernelSpec::se_ard(1.0, &[1.0, 1.0]).grad(&x, &x, 3).is_err());
        assert!(GpParams::new(KernelSpec::se_ard(1.0, &[1.0]), 0.0).is_err());
    }

    #[test]
    fn param_vector_round_trips() {
        for k in kernels() {
            let p = GpParams::new(k, 0.05).unwrap();
            let v = p.to_vec();
            assert_eq!(v.len(), p.n_params());
            assert_eq!(p.param_names().len(), v.len());
            let q = p.with_vec(&v).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn kv_round_trip() {
        for k in kernels() {
            let p = GpParams::new(k, 0.05).unwrap();
            let text: String = p
                .to_kv()
                .iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            let q = parse_kernel_config(&text).unwrap();
            for (a, b) in p.to_vec().iter().zip(q.to_vec()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_expands_single_lengthscale() {
        let p = parse_kernel_config("kernel.components = se\nkernel.0.lengthscales = 0.3\n").unwrap();
        let k = p.kernel.broadcast_to(3);
        assert_eq!(k.input_dim(), Some(3));
        assert_eq!(k.n_params(), 4);
    }
}
