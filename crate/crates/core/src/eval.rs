//! Importance-weighted bounds, grid posteriors for two latent dimensions and
//! the uncertainty study.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::linalg::Matrix;
use crate::model::{log_prior, Decoder};
use crate::rng::RngStream;
use crate::stats::{log_sum_exp, spearman};
use crate::train::Model;

/// `ln (1/K) Σₖ p(x, zₖ) / q(zₖ|x)` with `zₖ ~ q`.
pub fn iwae(x: &[f64], q: &DiagGaussian, decoder: &Decoder, k: usize, rng: &mut RngStream) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("IWAE needs K ≥ 1".into()));
    }
    let d = q.dim();
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let chunk = 1024.min(k);
    let mut log_w = Vec::with_capacity(k);
    let mut eps = vec![0.0; d];
    let mut done = 0;
    while done < k {
        let n = chunk.min(k - done);
        let mut z = Matrix::zeros(n, d);
        for i in 0..n {
            rng.fill_normal(&mut eps);
            z.row_mut(i).copy_from_slice(&q.transform(&eps));
        }
        let ll = decoder.log_lik_batch(&xm, &z)?;
        for (i, l) in ll.into_iter().enumerate() {
            let zi = z.row(i);
            log_w.push(l + log_prior(zi) - q.log_density(zi));
        }
        done += n;
    }
    if log_w.iter().any(|v| v.is_nan()) || log_w.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::NonFinite { term: "importance weights" });
    }
    Ok(log_sum_exp(&log_w) - (k as f64).ln())
}

/// Per-row IWAE of a model's amortized posterior; row `i` uses `rng.split(i)`.
pub fn iwae_dataset(model: &Model, x: &Matrix, k: usize, rng: &RngStream) -> Result<Vec<f64>> {
    let enc = model.encode_batch(x)?;
    (0..x.rows())
        .map(|i| {
            let q = DiagGaussian::new(enc.mean.row(i).to_vec(), enc.var.row(i).to_vec())?;
            iwae(x.row(i), &q, &model.decoder, k, &mut rng.split(i as u64))
        })
        .collect()
}

/// Square cell-centred grid over `[lo, hi]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: -6.0, hi: 6.0, resolution: 200 }
    }
}

impl GridSpec {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.step()
    }

    pub fn cell_area(&self) -> f64 {
        self.step() * self.step()
    }
}

/// Normalized log-density table on a [`GridSpec`]. Entry `i * res + j` is the
/// cell at `(center(i), center(j))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub spec: GridSpec,
    pub table: Vec<f64>,
}

impl Grid2D {
    /// Tabulates an unnormalized log-density and normalizes it.
    pub fn from_log_density(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let r = spec.resolution;
        let mut table = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                table.push(f(spec.center(i), spec.center(j)));
            }
        }
        Self::normalized(spec, table)
    }

    pub fn normalized(spec: GridSpec, mut table: Vec<f64>) -> Result<Self> {
        crate::error::check_dim("grid table", spec.resolution * spec.resolution, table.len())?;
        let z = log_sum_exp(&table) + spec.cell_area().ln();
        if !z.is_finite() {
            return Err(Error::NonFinite { term: "grid normalizer" });
        }
        table.iter_mut().for_each(|v| *v -= z);
        Ok(Self { spec, table })
    }

    /// `Σ exp(table) · cell area`.
    pub fn total_mass(&self) -> f64 {
        self.table.iter().map(|v| v.exp()).sum::<f64>() * self.spec.cell_area()
    }

    /// Mean and covariance `[[c11, c12], [c12, c22]]` of the grid density.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let (s, r, a) = (&self.spec, self.spec.resolution, self.spec.cell_area());
        let mut mean = [0.0; 2];
        for i in 0..r {
            for j in 0..r {
                let w = self.table[i * r + j].exp() * a;
                mean[0] += w * s.center(i);
                mean[1] += w * s.center(j);
            }
        }
        let mut cov = [[0.0; 2]; 2];
        for i in 0..r {
            for j in 0..r {
                let w = self.table[i * r + j].exp() * a;
                let (u, v) = (s.center(i) - mean[0], s.center(j) - mean[1]);
                cov[0][0] += w * u * u;
                cov[0][1] += w * u * v;
                cov[1][1] += w * v * v;
            }
        }
        cov[1][0] = cov[0][1];
        (mean, cov)
    }

    /// Grid with the two axes exchanged.
    pub fn transpose(&self) -> Self {
        let r = self.spec.resolution;
        let mut table = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                table[j * r + i] = self.table[i * r + j];
            }
        }
        Self { spec: self.spec, table }
    }
}

/// `ln p(x|z) + ln p(z)` on the grid, normalized.
pub fn true_posterior_grid(x: &[f64], decoder: &Decoder, spec: GridSpec) -> Result<Grid2D> {
    if decoder.latent_dim() != 2 {
        return Err(Error::Contract(alloc::format!(
            "grid posterior needs a 2-D latent space, got d = {}",
            decoder.latent_dim()
        )));
    }
    let r = spec.resolution;
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let mut table = Vec::with_capacity(r * r);
    let rows_per_chunk = (2048 / r).max(1);
    let mut i0 = 0;
    while i0 < r {
        let i1 = (i0 + rows_per_chunk).min(r);
        let mut z = Matrix::zeros((i1 - i0) * r, 2);
        for i in i0..i1 {
            for j in 0..r {
                z.row_mut((i - i0) * r + j).copy_from_slice(&[spec.center(i), spec.center(j)]);
            }
        }
        let ll = decoder.log_lik_batch(&xm, &z)?;
        for (k, l) in ll.into_iter().enumerate() {
            table.push(l + log_prior(z.row(k)));
        }
        i0 = i1;
    }
    Grid2D::normalized(spec, table)
}

/// `KL(grid ‖ N(mean, cov))` for the moment-matched Gaussian, by quadrature.
pub fn non_gaussianity(grid: &Grid2D) -> f64 {
    let (mean, cov) = grid.moments();
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let log_norm = -(2.0 * core::f64::consts::PI).ln() - 0.5 * det.ln();
    let (s, r, a) = (&grid.spec, grid.spec.resolution, grid.spec.cell_area());
    let mut kl = 0.0;
    for i in 0..r {
        for j in 0..r {
            let lp = grid.table[i * r + j];
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let (u, v) = (s.center(i) - mean[0], s.center(j) - mean[1]);
            let quad = u * (inv[0][0] * u + inv[0][1] * v) + v * (inv[1][0] * u + inv[1][1] * v);
            kl += lp.exp() * a * (lp - (log_norm - 0.5 * quad));
        }
    }
    kl.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyRow {
    pub id: usize,
    pub uncertainty_f: f64,
    pub uncertainty_h: f64,
    pub uncertainty: f64,
    pub non_gaussianity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyStudy {
    pub rows: Vec<UncertaintyRow>,
    /// Spearman correlation of gauge and non-Gaussianity; `None` when undefined.
    pub spearman: Option<f64>,
}

/// Uncertainty gauge against grid non-Gaussianity for every row of `x`.
/// Grids are handed to `on_grid` as they are computed.
pub fn uncertainty_study(
    model: &Model,
    x: &Matrix,
    spec: GridSpec,
    mut on_grid: impl FnMut(usize, &Grid2D),
) -> Result<UncertaintyStudy> {
    let enc = model.encode_batch(x)?;
    let Some((unc_f, unc_h)) = enc.uncertainty else {
        return Err(Error::Contract("uncertainty study needs the GP model".into()));
    };
    let mut rows = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let grid = true_posterior_grid(x.row(i), &model.decoder, spec)?;
        on_grid(i, &grid);
        rows.push(UncertaintyRow {
            id: i,
            uncertainty_f: unc_f[i],
            uncertainty_h: unc_h[i],
            uncertainty: unc_f[i] + unc_h[i],
            non_gaussianity: non_gaussianity(&grid),
        });
    }
    let u: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.non_gaussianity).collect();
    Ok(UncertaintyStudy { spearman: spearman(&u, &g), rows })
}
