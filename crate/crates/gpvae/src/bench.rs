//! Per-batch inference timing.

use std::time::Instant;

use gpvae_core::baselines::sa_refine;
use gpvae_core::linalg::Matrix;
use gpvae_core::rng::{tags, RngStream};
use gpvae_core::train::Model;

use crate::config::BenchSettings;
use crate::report::BenchRow;

/// Mean milliseconds per batch for each of `reps` passes over `batches`.
pub fn time_per_batch(reps: usize, batches: &[Matrix], mut f: impl FnMut(usize, &Matrix)) -> Vec<f64> {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            for (i, b) in batches.iter().enumerate() {
                f(i, b);
            }
            start.elapsed().as_secs_f64() * 1e3 / batches.len().max(1) as f64
        })
        .collect()
}

fn row(method: &str, k: usize, settings: &BenchSettings, batches: usize, reps: &[f64]) -> BenchRow {
    BenchRow {
        method: method.to_owned(),
        k,
        batch_size: settings.batch_size,
        batches,
        mean_ms: reps.iter().sum::<f64>() / reps.len() as f64,
        min_rep_ms: reps.iter().copied().fold(f64::INFINITY, f64::min),
        max_rep_ms: reps.iter().copied().fold(0.0, f64::max),
    }
}

/// Splits `x` into timed batches of the configured size.
pub fn make_batches(x: &Matrix, settings: &BenchSettings) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = (0..x.rows())
        .step_by(settings.batch_size)
        .map(|s| x.row_range(s, (s + settings.batch_size).min(x.rows())))
        .collect();
    if settings.max_batches > 0 {
        out.truncate(settings.max_batches);
    }
    out
}

/// Times the amortized encoder of `model` (a single forward pass) and
/// semi-amortized refinement of its base encoder for every configured `k`.
/// Only encoder-path computation is inside the timed region.
pub fn bench_inference(model: &Model, x: &Matrix, settings: &BenchSettings) -> Vec<BenchRow> {
    let batches = make_batches(x, settings);
    let reps = settings.repetitions;
    let mut rows = Vec::new();
    let name = match model.mode {
        gpvae_core::train::Mode::Gpvae => "gpvae",
        gpvae_core::train::Mode::Vae => "vae",
    };
    let t = time_per_batch(reps, &batches, |_, b| {
        std::hint::black_box(model.encode_batch(b).expect("encoder input width"));
    });
    rows.push(row(name, 0, settings, batches.len(), &t));
    let root = RngStream::new(0).split(tags::SVI);
    for &k in &settings.sa_steps {
        let streams: Vec<Vec<RngStream>> = batches
            .iter()
            .enumerate()
            .map(|(bi, b)| (0..b.rows()).map(|i| root.split(bi as u64).split(i as u64)).collect())
            .collect();
        let t = time_per_batch(reps, &batches, |bi, b| {
            let mut s = streams[bi].clone();
            std::hint::black_box(sa_refine(model, b, k, gpvae_core::baselines::SA_STEP_SIZE, &mut s).ok());
        });
        rows.push(row("sa", k, settings, batches.len(), &t));
    }
    rows
}
