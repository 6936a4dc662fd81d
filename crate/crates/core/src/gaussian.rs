//! Diagonal and Cholesky-factored Gaussians.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;
use crate::VAR_FLOOR;

/// Gaussian with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim("gaussian variance", mean.len(), var.len())?;
        if let Some((j, v)) = var.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Domain(format!("variance[{j}] = {v} is not positive")));
        }
        Ok(Self { mean, var })
    }

    /// Variances below [`VAR_FLOOR`] are raised to it.
    pub fn with_floor(mean: Vec<f64>, mut var: Vec<f64>) -> Result<Self> {
        for v in &mut var {
            *v = v.max(VAR_FLOOR);
        }
        Self::new(mean, var)
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], var: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        diag_log_density(z, &self.mean, &self.var)
    }

    /// `mean + sqrt(var) ⊙ eps`.
    pub fn transform(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.var).zip(eps).map(|((m, v), e)| m + v.sqrt() * e).collect()
    }
}

pub fn diag_log_density(z: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    z.iter().zip(mean).zip(var).map(|((z, m), v)| -0.5 * ((2.0 * PI * v).ln() + (z - m) * (z - m) / v)).sum()
}

/// `ln N(z; 0, I)`.
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    z.iter().map(|z| -0.5 * ((2.0 * PI).ln() + z * z)).sum()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians, in nats.
pub fn kl_diag_gaussians(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("kl operands", q.dim(), p.dim())?;
    let mut kl = 0.0;
    for j in 0..q.dim() {
        let (mq, vq, mp, vp) = (q.mean[j], q.var[j], p.mean[j], p.var[j]);
        let dm = mq - mp;
        kl += 0.5 * (vq / vp + dm * dm / vp - 1.0 + (vp / vq).ln());
    }
    Ok(kl)
}

/// `KL(N(mean, var) ‖ N(0, I))` with `var` floored.
pub fn kl_to_standard(mean: &[f64], var: &[f64]) -> f64 {
    mean.iter()
        .zip(var)
        .map(|(m, v)| {
            let v = v.max(VAR_FLOOR);
            0.5 * (v + m * m - 1.0 - v.ln())
        })
        .sum()
}

/// Second-order moment matching of a diagonal Gaussian mixture.
///
/// Returns the Gaussian with the mixture's mean and per-dimension variance
/// `Σᵢ αᵢ (vᵢ + (mᵢ - m)²)`, which equals `Σᵢ αᵢ (mᵢ² + vᵢ) - m²` but does not
/// cancel catastrophically.
pub fn moment_match(weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<DiagGaussian> {
    check_dim("mixture means", weights.len(), means.len())?;
    check_dim("mixture variances", weights.len(), vars.len())?;
    if weights.is_empty() {
        return Err(Error::Contract("mixture has no components".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Contract(format!("mixture weight {w} is negative")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("mixture weights sum to {total}, not 1")));
    }
    let d = means[0].len();
    for (m, v) in means.iter().zip(vars) {
        check_dim("mixture component mean", d, m.len())?;
        check_dim("mixture component variance", d, v.len())?;
    }
    let mut mean = vec![0.0; d];
    for (w, m) in weights.iter().zip(means) {
        for j in 0..d {
            mean[j] += w * m[j];
        }
    }
    let mut var = vec![0.0; d];
    for ((w, m), v) in weights.iter().zip(means).zip(vars) {
        for j in 0..d {
            let dm = m[j] - mean[j];
            var[j] += w * (v[j] + dm * dm);
        }
    }
    DiagGaussian::with_floor(mean, var)
}

/// `n` reparametrized draws `mean + sqrt(var) ⊙ ε`.
pub fn reparam_sample(g: &DiagGaussian, rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
    let mut eps = vec![0.0; g.dim()];
    (0..n)
        .map(|_| {
            rng.fill_normal(&mut eps);
            g.transform(&eps)
        })
        .collect()
}

/// Lower-triangular factor `L` with positive diagonal; represents `L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyPsd {
    p: usize,
    lower: Vec<f64>,
}

impl CholeskyPsd {
    /// `lower` is row-major `p × p`; entries above the diagonal must be zero.
    pub fn new(p: usize, lower: Vec<f64>) -> Result<Self> {
        check_dim("cholesky factor", p * p, lower.len())?;
        for i in 0..p {
            let d = lower[i * p + i];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Domain(format!("cholesky diagonal [{i}] = {d} is not positive")));
            }
            for k in i + 1..p {
                if lower[i * p + k] != 0.0 {
                    return Err(Error::Domain(format!("cholesky factor has entry above diagonal at ({i},{k})")));
                }
            }
        }
        Ok(Self { p, lower })
    }

    pub fn scaled_identity(p: usize, scale: f64) -> Result<Self> {
        let mut lower = vec![0.0; p * p];
        for i in 0..p {
            lower[i * p + i] = scale;
        }
        Self::new(p, lower)
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// Dense `L Lᵀ`, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let p = self.p;
        let mut m = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.lower[i * p + k] * self.lower[j * p + k]).sum();
                m[i * p + j] = s;
                m[j * p + i] = s;
            }
        }
        m
    }

    /// `Lᵀ x`.
    pub fn lt_mul(&self, x: &[f64]) -> Vec<f64> {
        let p = self.p;
        (0..p).map(|k| (k..p).map(|i| self.lower[i * p + k] * x[i]).sum()).collect()
    }

    /// `L ξ`.
    pub fn l_mul(&self, xi: &[f64]) -> Vec<f64> {
        let p = self.p;
        (0..p).map(|i| (0..=i).map(|k| self.lower[i * p + k] * xi[k]).sum()).collect()
    }

    /// `xᵀ (L Lᵀ) x = ‖Lᵀ x‖²`.
    pub fn quad_form(&self, x: &[f64]) -> Result<f64> {
        check_dim("quadratic form argument", self.p, x.len())?;
        Ok(self.lt_mul(x).iter().map(|v| v * v).sum())
    }

    pub fn trace(&self) -> f64 {
        self.lower.iter().map(|v| v * v).sum()
    }

    pub fn log_det(&self) -> f64 {
        (0..self.p).map(|i| 2.0 * self.lower[i * self.p + i].ln()).sum()
    }
}

/// Full-covariance `KL(N(mean, L Lᵀ) ‖ N(0, I)) = ½(tr Σ + ‖μ‖² - p - ln det Σ)`.
pub fn kl_full_to_standard(mean: &[f64], cov: &CholeskyPsd) -> Result<f64> {
    check_dim("full-covariance mean", cov.dim(), mean.len())?;
    let p = cov.dim() as f64;
    let mm: f64 = mean.iter().map(|m| m * m).sum();
    Ok(0.5 * (cov.trace() + mm - p - cov.log_det()))
}
