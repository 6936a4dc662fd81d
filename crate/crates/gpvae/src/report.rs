//! CSV tables and grid exports.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use gpvae_core::eval::Grid2D;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub weight_kl: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwaeRow {
    pub batch: usize,
    pub rows: usize,
    pub k: usize,
    pub mean_iwae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCsvRow {
    pub id: usize,
    pub elbo_amortized: f64,
    pub elbo_svi: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyCsvRow {
    pub id: usize,
    pub uncertainty: f64,
    pub uncertainty_f: f64,
    pub uncertainty_h: f64,
    pub non_gaussianity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub k: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub mean_ms: f64,
    pub min_rep_ms: f64,
    pub max_rep_ms: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// A JSON header line with bounds and resolution, then the normalized log
/// density as little-endian `f32`, row index `z₁`, column index `z₂`.
pub fn write_grid(path: &Path, grid: &Grid2D) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let s = grid.spec;
    writeln!(w, r#"{{"lo":{},"hi":{},"resolution":{}}}"#, s.lo, s.hi, s.resolution)?;
    for v in &grid.table {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
