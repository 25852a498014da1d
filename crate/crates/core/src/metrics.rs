//! Scores for Gaussian predictive distributions.
//!
//! All functions take predictive means and variances, plus the observed test
//! targets or a reference prediction, and return averages over test points.

use std::f64::consts::PI;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{CpoeError, Result};

fn check_lens(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(CpoeError::dims(format!("metric inputs have lengths {a}, {b}, {c}")));
    }
    if a == 0 {
        return Err(CpoeError::dims("metrics need at least one test point"));
    }
    Ok(())
}

fn check_var(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(CpoeError::param("predictive variances must be positive and finite"));
    }
    Ok(())
}

/// `KL(N(m_ref, v_ref) || N(m, v))` averaged over points.
pub fn kl_gaussian(m_ref: &[f64], v_ref: &[f64], m: &[f64], v: &[f64]) -> Result<f64> {
    check_lens(m_ref.len(), v_ref.len(), m.len())?;
    check_lens(m.len(), v.len(), v.len())?;
    check_var(v_ref)?;
    check_var(v)?;
    let s: f64 = (0..m.len())
        .map(|i| {
            let d = m[i] - m_ref[i];
            0.5 * ((v[i] / v_ref[i]).ln() + (v_ref[i] + d * d) / v[i] - 1.0)
        })
        .sum();
    Ok(s / m.len() as f64)
}

/// Closed-form continuous ranked probability score of a Gaussian.
pub fn crps_gaussian(m: &[f64], v: &[f64], y: &[f64]) -> Result<f64> {
    check_lens(m.len(), v.len(), y.len())?;
    check_var(v)?;
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let s: f64 = (0..m.len())
        .map(|i| {
            let sd = v[i].sqrt();
            let z = (y[i] - m[i]) / sd;
            sd * (z * (2.0 * n01.cdf(z) - 1.0) + 2.0 * n01.pdf(z) - 1.0 / PI.sqrt())
        })
        .sum();
    Ok(s / m.len() as f64)
}

/// Fraction of targets inside `m +- 1.96 sqrt(v)`.
pub fn coverage95(m: &[f64], v: &[f64], y: &[f64]) -> Result<f64> {
    check_lens(m.len(), v.len(), y.len())?;
    check_var(v)?;
    let hits = (0..m.len())
        .filter(|&i| (y[i] - m[i]).abs() <= 1.96 * v[i].sqrt())
        .count();
    Ok(hits as f64 / m.len() as f64)
}

/// Mean negative log predictive density.
pub fn nlp(m: &[f64], v: &[f64], y: &[f64]) -> Result<f64> {
    check_lens(m.len(), v.len(), y.len())?;
    check_var(v)?;
    let s: f64 = (0..m.len())
        .map(|i| {
            let d = y[i] - m[i];
            0.5 * ((2.0 * PI * v[i]).ln() + d * d / v[i])
        })
        .sum();
    Ok(s / m.len() as f64)
}

pub fn rmse(m: &[f64], y: &[f64]) -> Result<f64> {
    check_lens(m.len(), y.len(), y.len())?;
    let s: f64 = m.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / m.len() as f64).sqrt())
}

/// Mean absolute error.
pub fn abse(m: &[f64], y: &[f64]) -> Result<f64> {
    check_lens(m.len(), y.len(), y.len())?;
    Ok(m.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / m.len() as f64)
}

/// Mean squared deviation of the means from a reference prediction.
pub fn mean_error(m_ref: &[f64], m: &[f64]) -> Result<f64> {
    check_lens(m.len(), m_ref.len(), m_ref.len())?;
    Ok(m.iter().zip(m_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m.len() as f64)
}

/// All scores for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// KL from the reference prediction, if one was given.
    pub kl: Option<f64>,
    /// Mean squared deviation of the means from the reference.
    pub err: Option<f64>,
    pub crps: f64,
    pub rmse: f64,
    pub abse: f64,
    pub nlp: f64,
    pub cov95: f64,
}

impl MetricReport {
    pub fn compute(
        m: &[f64],
        v: &[f64],
        y: &[f64],
        reference: Option<(&[f64], &[f64])>,
    ) -> Result<Self> {
        let (kl, err) = match reference {
            Some((mr, vr)) => (Some(kl_gaussian(mr, vr, m, v)?), Some(mean_error(mr, m)?)),
            None => (None, None),
        };
        Ok(MetricReport {
            kl,
            err,
            crps: crps_gaussian(m, v, y)?,
            rmse: rmse(m, y)?,
            abse: abse(m, y)?,
            nlp: nlp(m, v, y)?,
            cov95: coverage95(m, v, y)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            acc += f(lo + i as f64 * h);
        }
        acc * h
    }

    fn pdf(x: f64, m: f64, v: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt()
    }

    #[test]
    fn crps_matches_quadrature() {
        let n01 = Normal::new(0.0, 1.0).unwrap();
        for &(m, v, y) in &[(0.0f64, 1.0f64, 0.3f64), (1.5, 0.2, -0.4), (-2.0, 3.0, -2.5)] {
            // CRPS = int (F(x) - 1{x >= y})^2 dx
            let sd: f64 = v.sqrt();
            let below = |x: f64| n01.cdf((x - m) / sd).powi(2);
            let above = |x: f64| (1.0 - n01.cdf((x - m) / sd)).powi(2);
            let lo = m.min(y) - 12.0 * sd;
            let hi = m.max(y) + 12.0 * sd;
            let q = trapezoid(below, lo, y, 200_000) + trapezoid(above, y, hi, 200_000);
            let c = crps_gaussian(&[m], &[v], &[y]).unwrap();
            assert!((c - q).abs() < 1e-6, "{c} vs {q}");
        }
    }

    #[test]
    fn kl_matches_quadrature() {
        let (m0, v0, m1, v1) = (0.3, 0.5, -0.2, 1.7);
        let q = trapezoid(
            |x| {
                let p = pdf(x, m0, v0);
                if p < 1e-300 {
                    0.0
                } else {
                    p * (p / pdf(x, m1, v1)).ln()
                }
            },
            -15.0,
            15.0,
            400_000,
        );
        let k = kl_gaussian(&[m0], &[v0], &[m1], &[v1]).unwrap();
        assert!((k - q).abs() < 1e-8);
        assert_eq!(kl_gaussian(&[m0], &[v0], &[m0], &[v0]).unwrap(), 0.0);
    }

    #[test]
    fn nlp_is_negative_log_density() {
        let v = nlp(&[0.5], &[0.3], &[1.0]).unwrap();
        assert!((v + pdf(1.0, 0.5, 0.3).ln()).abs() < 1e-12);
    }

    #[test]
    fn coverage_counts_interval_hits() {
        let c = coverage95(&[0.0, 0.0, 0.0, 0.0], &[1.0; 4], &[0.5, 1.9, 2.0, -3.0]).unwrap();
        assert_eq!(c, 0.5);
    }

    #[test]
    fn simple_errors() {
        assert!((rmse(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(abse(&[1.0, -3.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert!(rmse(&[], &[]).is_err());
        assert!(nlp(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(crps_gaussian(&[0.0], &[1.0, 2.0], &[0.0]).is_err());
    }
}
