//! Subcommand implementations. Each writes into its own directory under the
//! configured output root together with the resolved config and seed.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gpvae_core::baselines::{amortization_gap, GapConfig, StepSchedule};
use gpvae_core::data::{gen_synthetic, Splits};
use gpvae_core::eval::{iwae_dataset, uncertainty_study, GridSpec};
use gpvae_core::gaussian::DiagGaussian;
use gpvae_core::rng::{tags, RngStream};
use gpvae_core::stats::mean_se;
use gpvae_core::train::{train_from, Model, TrainState};

use crate::checkpoint::{self, save_state};
use crate::config::{DataSource, RunConfig};
use crate::idx::load_idx;
use crate::report::{read_csv, write_csv, write_grid, write_text, GapCsvRow, IwaeRow, TrainLogRow, UncertaintyCsvRow};

pub const TRAIN_DIR: &str = "train";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";

pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let ds = match d.source {
        DataSource::Idx => {
            let images = d.images.as_deref().expect("validated");
            load_idx(images, d.labels.as_deref())?
        }
        DataSource::Synthetic => {
            let kind = d.kind.as_deref().expect("validated");
            gen_synthetic(kind, d.n_train + d.n_val + d.n_test, d.seed)?
        }
    };
    Ok(ds.split(d.seed, d.n_train, d.n_val, d.n_test)?)
}

/// Creates `<output_dir>/<name>` holding the resolved config and seed.
pub fn artifact_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.json"), &(serde_json::to_string_pretty(cfg)? + "\n"))?;
    write_text(&dir.join("seed.txt"), &format!("{}\n", cfg.train.seed))?;
    Ok(dir)
}

pub fn load_best(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.output_dir.join(TRAIN_DIR).join(BEST_CHECKPOINT);
    if !path.exists() {
        bail!("missing checkpoint {}; run `train` first", path.display());
    }
    Ok(checkpoint::load(&path, Some(&cfg.train))?.model)
}

pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_elbo: Option<f64>,
    pub dir: PathBuf,
}

/// Trains, writing `train_log.csv`, `state.ckpt` after every epoch and
/// `best.ckpt` whenever validation improves. With `resume` set an existing
/// `state.ckpt` is continued.
pub fn run_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    let splits = load_data(cfg)?;
    let dir = artifact_dir(cfg, TRAIN_DIR)?;
    let (state_path, best_path, log_path) =
        (dir.join(STATE_CHECKPOINT), dir.join(BEST_CHECKPOINT), dir.join("train_log.csv"));
    let train_x = &splits.train.inputs;
    let (state, best, mut log) = if resume && state_path.exists() {
        let mut state = checkpoint::load(&state_path, Some(&cfg.train))?.into_state()?;
        state.config.epochs = cfg.train.epochs;
        let best = checkpoint::load(&best_path, Some(&cfg.train))?.model;
        let log: Vec<TrainLogRow> =
            read_csv::<TrainLogRow>(&log_path)?.into_iter().filter(|r| r.epoch <= state.epoch).collect();
        (state, Some(best), log)
    } else {
        let state = TrainState::new(&cfg.train, train_x.cols(), train_x.rows())?;
        save_state(&state_path, &state)?;
        checkpoint::save(&best_path, &cfg.train, &state.model, None, state.n_train, 0, None)?;
        (state, None, Vec::new())
    };
    write_csv(&log_path, &log)?;
    let mut io_error = None;
    let mut clock = Instant::now();
    let outcome = train_from(state, best, train_x, &splits.val.inputs, |rec, st, best| {
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        eprintln!("epoch {:>4}  train {:>12.4}  val {:>12.4}", rec.epoch, rec.train_elbo, rec.val_elbo);
        log.push(TrainLogRow {
            epoch: rec.epoch,
            train_elbo: rec.train_elbo,
            val_elbo: rec.val_elbo,
            weight_kl: rec.weight_kl,
            wall_ms,
        });
        let improved = st.best.is_some_and(|b| b.epoch == rec.epoch);
        let res =
            write_csv(&log_path, &log).and_then(|_| save_state(&state_path, st).map_err(Into::into)).and_then(|_| {
                if improved {
                    checkpoint::save(&best_path, &st.config, best, None, st.n_train, rec.epoch, st.best)?;
                }
                Ok(())
            });
        if let Err(e) = res {
            io_error.get_or_insert(e);
        }
        clock = Instant::now();
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match outcome {
        Ok(out) => Ok(TrainSummary {
            epochs: out.state.epoch,
            best_epoch: out.state.best.map(|b| b.epoch),
            best_val_elbo: out.state.best.map(|b| b.val_elbo),
            dir,
        }),
        Err(d) => bail!("training stopped: {} (last good state kept in {})", d.error, state_path.display()),
    }
}

pub struct EvalSummary {
    /// `(K, mean, standard error)` over the test set.
    pub iwae: Vec<(usize, f64, f64)>,
}

/// Per-batch IWAE table for every configured `K`.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let model = load_best(cfg)?;
    let splits = load_data(cfg)?;
    let dir = artifact_dir(cfg, "eval")?;
    let x = &splits.test.inputs;
    let root = RngStream::new(cfg.train.seed).split(tags::EVAL);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &k in &cfg.eval.iwae_samples {
        let values = iwae_dataset(&model, x, k, &root.split(k as u64))?;
        for (b, chunk) in values.chunks(cfg.eval.batch_size).enumerate() {
            rows.push(IwaeRow {
                batch: b,
                rows: chunk.len(),
                k,
                mean_iwae: chunk.iter().sum::<f64>() / chunk.len() as f64,
            });
        }
        let (m, se) = mean_se(&values);
        eprintln!("IWAE K={k}: {m:.4} ± {se:.4}");
        summary.push((k, m, se));
    }
    write_csv(&dir.join("iwae.csv"), &rows)?;
    Ok(EvalSummary { iwae: summary })
}

pub struct GapSummary {
    pub mean: f64,
    pub se: f64,
    pub aborted: usize,
}

/// Amortization gap of the model's own encoder on the first test instances.
pub fn run_gap(cfg: &RunConfig) -> Result<GapSummary> {
    let model = load_best(cfg)?;
    let splits = load_data(cfg)?;
    let dir = artifact_dir(cfg, "gap")?;
    let n = cfg.gap.instances.min(splits.test.len());
    let x = splits.test.inputs.row_range(0, n);
    let enc = model.encode_batch(&x)?;
    let q = (0..n)
        .map(|i| DiagGaussian::new(enc.mean.row(i).to_vec(), enc.var.row(i).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let g = &cfg.gap;
    let gap_cfg = GapConfig {
        steps: g.steps,
        schedule: StepSchedule { step_size: g.step_size, decay: Some(g.decay) },
        eval_samples: g.eval_samples,
    };
    let report = amortization_gap(&x, &model.decoder, &q, &gap_cfg, &RngStream::new(cfg.train.seed).split(tags::EVAL))?;
    let rows: Vec<GapCsvRow> = report
        .rows
        .iter()
        .map(|r| GapCsvRow { id: r.id, elbo_amortized: r.elbo_amortized, elbo_svi: r.elbo_svi, gap: r.gap })
        .collect();
    write_csv(&dir.join("gap.csv"), &rows)?;
    eprintln!("mean gap {:.4} ± {:.4} over {n} instances", report.mean, report.se);
    Ok(GapSummary { mean: report.mean, se: report.se, aborted: report.aborted })
}

pub struct UncertaintySummary {
    pub spearman: Option<f64>,
    pub instances: usize,
}

/// Uncertainty gauge against grid non-Gaussianity, with optional grid exports.
pub fn run_uncertainty(cfg: &RunConfig) -> Result<UncertaintySummary> {
    let model = load_best(cfg)?;
    if model.lambda.is_none() || model.latent_dim() != 2 {
        bail!("the uncertainty study needs a GP model with latent_dim = 2");
    }
    let splits = load_data(cfg)?;
    let dir = artifact_dir(cfg, "uncertainty")?;
    let u = &cfg.uncertainty;
    let n = u.instances.min(splits.test.len());
    let x = splits.test.inputs.row_range(0, n);
    let spec = GridSpec { lo: u.grid_lo, hi: u.grid_hi, resolution: u.resolution };
    let grid_dir = dir.join("grids");
    if u.export_grids {
        fs::create_dir_all(&grid_dir)?;
    }
    let mut export_error = None;
    let study = uncertainty_study(&model, &x, spec, |i, g| {
        if u.export_grids {
            if let Err(e) = write_grid(&grid_dir.join(format!("{i:05}.grid")), g) {
                export_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = export_error {
        return Err(e);
    }
    let rows: Vec<UncertaintyCsvRow> = study
        .rows
        .iter()
        .map(|r| UncertaintyCsvRow {
            id: r.id,
            uncertainty: r.uncertainty,
            uncertainty_f: r.uncertainty_f,
            uncertainty_h: r.uncertainty_h,
            non_gaussianity: r.non_gaussianity,
        })
        .collect();
    write_csv(&dir.join("uncertainty.csv"), &rows)?;
    let rho = study.spearman.map_or_else(|| "undefined".to_owned(), |r| format!("{r}"));
    write_text(&dir.join("summary.csv"), &format!("instances,spearman\n{n},{rho}\n"))?;
    eprintln!("Spearman correlation over {n} instances: {rho}");
    Ok(UncertaintySummary { spearman: study.spearman, instances: n })
}

/// Inference timing on the test set.
pub fn run_bench(cfg: &RunConfig) -> Result<Vec<crate::report::BenchRow>> {
    let model = load_best(cfg)?;
    let splits = load_data(cfg)?;
    let dir = artifact_dir(cfg, "bench")?;
    let rows = crate::bench::bench_inference(&model, &splits.test.inputs, &cfg.bench);
    for r in &rows {
        eprintln!("{:<6} k={:<2} {:>10.3} ms/batch", r.method, r.k, r.mean_ms);
    }
    write_csv(&dir.join("bench.csv"), &rows)?;
    Ok(rows)
}
