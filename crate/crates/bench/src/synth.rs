//! Synthetic GP regression data.

use anyhow::{bail, Result};
use cpoe::kernels::{GpParams, KernelSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Largest sample drawn through a dense Cholesky factor.
pub const SYNTH_DENSE_CAP: usize = 4096;

/// Random features per squared exponential component above the cap.
pub const FOURIER_FEATURES: usize = 4096;

/// Two squared exponential components, one short and one long lengthscale.
pub fn two_scale_kernel(d: usize) -> KernelSpec {
    KernelSpec::sum(vec![
        KernelSpec::se_ard(0.2, &vec![0.125; d]),
        KernelSpec::se_ard(1.1, &vec![0.5; d]),
    ])
}

/// Inputs uniform on the unit cube, `y = f + eps` with `f` a GP sample under
/// `params.kernel` and `eps` white noise of variance `params.noise_variance()`.
pub fn synth_gp_data(params: &GpParams, n: usize, d: usize, seed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    synth_gp_data_with_cap(params, n, d, seed, SYNTH_DENSE_CAP)
}

pub fn synth_gp_data_with_cap(
    params: &GpParams,
    n: usize,
    d: usize,
    seed: u64,
    cap: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if n == 0 || d == 0 {
        bail!("need at least one point and one input dimension");
    }
    let kernel = params.kernel.broadcast_to(d);
    if let Some(kd) = kernel.input_dim() {
        if kd != d {
            bail!("kernel has {kd} input dimensions, requested {d}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
    let f = if n <= cap {
        exact_draw(&kernel, &x, &mut rng)?
    } else {
        fourier_draw(&kernel, &x, &mut rng)?
    };
    let sd = params.noise_variance().sqrt();
    let y = DVector::from_fn(n, |i, _| f[i] + sd * rng.sample::<f64, _>(StandardNormal));
    Ok((x, y))
}

fn exact_draw(kernel: &KernelSpec, x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let k = kernel.eval_symmetric(x)?;
    let k0 = kernel.prior_variance();
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    for nugget in [1e-10, 1e-8, 1e-6] {
        let mut kj = k.clone();
        for i in 0..x.nrows() {
            kj[(i, i)] += nugget * k0;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(c.l() * z);
        }
    }
    bail!("kernel matrix of the synthetic inputs is not positive definite")
}

fn fourier_draw(kernel: &KernelSpec, x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let parts: Vec<&KernelSpec> = match kernel {
        KernelSpec::Sum(p) => p.iter().collect(),
        k => vec![k],
    };
    let mut f = DVector::zeros(x.nrows());
    for part in parts {
        let KernelSpec::SquaredExponential {
            log_amplitude,
            log_lengthscales,
        } = part
        else {
            bail!("sampling above {SYNTH_DENSE_CAP} points supports squared exponential kernels only");
        };
        let r = FOURIER_FEATURES;
        let scale = (2.0 * log_amplitude.exp() / r as f64).sqrt();
        for _ in 0..r {
            let omega: Vec<f64> = log_lengthscales
                .iter()
                .map(|l| rng.sample::<f64, _>(StandardNormal) / l.exp())
                .collect();
            let b = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
            let w = rng.sample::<f64, _>(StandardNormal) * scale;
            for i in 0..x.nrows() {
                let phase: f64 = omega.iter().enumerate().map(|(k, o)| o * x[(i, k)]).sum();
                f[i] += w * (phase + b).cos();
            }
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let p = GpParams::new(KernelSpec::se_ard(1.0, &[0.3]), 1e-12).unwrap();
        let a = synth_gp_data(&p, 30, 2, 5).unwrap();
        let b = synth_gp_data(&p, 30, 2, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_gp_data(&p, 30, 2, 6).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn fourier_path_rejects_other_kernels() {
        let p = GpParams::new(KernelSpec::periodic(1.0, 1.0, 1.0), 0.1).unwrap();
        assert!(synth_gp_data_with_cap(&p, 20, 1, 0, 10).is_err());
        assert!(synth_gp_data_with_cap(&p, 20, 1, 0, 100).is_ok());
    }
}
