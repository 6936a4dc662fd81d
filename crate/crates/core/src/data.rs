//! In-memory datasets, seeded splits and synthetic generators.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{tags, RngStream};
use crate::stats::log_sum_exp;

/// `N × D` inputs with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Matrix,
    pub labels: Option<Vec<u8>>,
}

/// Disjoint train/validation/test parts of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(v) = inputs.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("input value {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            crate::error::check_dim("labels", inputs.rows(), l.len())?;
        }
        Ok(Self { name: name.into(), inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize], suffix: &str) -> Self {
        Self {
            name: format!("{}/{suffix}", self.name),
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded random split into `n_train + n_val + n_test` rows; the rest is dropped.
    pub fn split(&self, seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Splits> {
        let total = n_train + n_val + n_test;
        if total > self.len() {
            return Err(Error::Config(format!("split needs {total} rows, dataset {} has {}", self.name, self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed).split(tags::SPLIT).shuffle(&mut order);
        Ok(Splits {
            train: self.subset(&order[..n_train], "train"),
            val: self.subset(&order[n_train..n_train + n_val], "val"),
            test: self.subset(&order[n_train + n_val..total], "test"),
        })
    }

    /// Holds out `n_test` rows for testing and 10% of the remainder for validation.
    pub fn holdout(&self, seed: u64, n_test: usize) -> Result<Splits> {
        let rest = self.len().saturating_sub(n_test);
        let n_val = rest / 10;
        self.split(seed, rest - n_val, n_val, n_test)
    }
}

/// Isotropic Gaussian mixture in `[0, 1]^D`.
///
/// Samples are clamped to the unit box. The default components sit more
/// than six standard deviations inside it, so the clamped mass is negligible
/// and [`GaussianMixture::log_density`] stays the true log-marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub std: f64,
}

impl GaussianMixture {
    /// Two equally weighted clusters on the diagonal of the unit square.
    pub fn two_cluster() -> Self {
        Self {
            weights: alloc::vec![0.5, 0.5],
            means: alloc::vec![alloc::vec![0.3, 0.3], alloc::vec![0.7, 0.7]],
            std: 0.05,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let var = self.std * self.std;
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w.ln() + crate::model::gaussian_log_lik(x, m, var))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (ci, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = ci;
                    break;
                }
            }
            for (o, m) in out.row_mut(i).iter_mut().zip(&self.means[k]) {
                *o = (m + self.std * rng.normal()).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Five-armed pinwheel in the unit square.
pub fn pinwheel(n: usize, rng: &mut RngStream) -> Matrix {
    let (arms, radial_std, tangential_std, rate) = (5usize, 0.3, 0.05, 0.25);
    let mut out = Matrix::zeros(n, 2);
    for i in 0..n {
        let arm = rng.below(arms);
        let a = radial_std * rng.normal() + 1.0;
        let b = tangential_std * rng.normal();
        let angle = arm as f64 * 2.0 * PI / arms as f64 + rate * a.exp();
        let (s, c) = angle.sin_cos();
        let (x, y) = (c * a - s * b, s * a + c * b);
        out.set(i, 0, ((x + 4.0) / 8.0).clamp(0.0, 1.0));
        out.set(i, 1, ((y + 4.0) / 8.0).clamp(0.0, 1.0));
    }
    out
}

/// Synthetic dataset by kind name: `gaussian-mixture` or `pinwheel`.
pub fn gen_synthetic(kind: &str, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("synthetic dataset needs n ≥ 1".into()));
    }
    let mut rng = RngStream::new(seed).split(tags::DATA);
    let inputs = match kind {
        "gaussian-mixture" => GaussianMixture::two_cluster().sample(n, &mut rng),
        "pinwheel" => pinwheel(n, &mut rng),
        other => return Err(Error::Config(format!("unknown synthetic kind {other:?}"))),
    };
    Dataset::new(kind.to_string(), inputs, None)
}
