use std::path::Path;

use gpvae::commands::{run_bench, run_eval, run_train, run_uncertainty};
use gpvae::config::RunConfig;
use gpvae::report::{read_csv, BenchRow, IwaeRow, TrainLogRow};

fn config(dir: &Path, epochs: usize, latent_dim: usize) -> RunConfig {
    let text = serde_json::json!({
        "output_dir": dir.join("out"),
        "data": {"source": "synthetic", "kind": "gaussian-mixture", "n_train": 60, "n_val": 20, "n_test": 12, "seed": 1},
        "train": {"latent_dim": latent_dim, "hidden": 8, "feature_dim": 4, "epochs": epochs, "batch_size": 16, "seed": 2},
        "eval": {"iwae_samples": [1, 5]},
        "uncertainty": {"instances": 4, "resolution": 20, "export_grids": true},
        "bench": {"repetitions": 1, "batch_size": 8, "sa_steps": [1, 2]}
    })
    .to_string();
    RunConfig::from_json(&text, &dir.join("c.json")).unwrap()
}

#[test]
fn eval_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_eval(&config(dir.path(), 0, 2)).err().unwrap().to_string();
    assert!(err.contains("run `train` first"), "{err}");
}

#[test]
fn untrained_checkpoint_gives_finite_iwae() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0, 2);
    let s = run_train(&cfg, false).unwrap();
    assert_eq!(s.epochs, 0);
    let summary = run_eval(&cfg).unwrap();
    assert_eq!(summary.iwae.len(), 2);
    assert!(summary.iwae.iter().all(|(_, m, se)| m.is_finite() && se.is_finite()));
    let rows: Vec<IwaeRow> = read_csv(&cfg.output_dir.join("eval/iwae.csv")).unwrap();
    assert!(!rows.is_empty());
    for sub in ["train", "eval"] {
        assert!(cfg.output_dir.join(sub).join("config.json").exists());
        assert_eq!(std::fs::read_to_string(cfg.output_dir.join(sub).join("seed.txt")).unwrap(), "2\n");
    }
}

#[test]
fn train_log_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3, 2);
    run_train(&cfg, false).unwrap();
    let log: Vec<TrainLogRow> = read_csv(&cfg.output_dir.join("train/train_log.csv")).unwrap();
    assert_eq!(log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(log.iter().all(|r| r.val_elbo.is_finite() && r.weight_kl >= 0.0));
}

#[test]
fn uncertainty_exports_grids_and_rejects_wide_latents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 1, 2);
    run_train(&cfg, false).unwrap();
    let s = run_uncertainty(&cfg).unwrap();
    assert_eq!(s.instances, 4);
    assert_eq!(std::fs::read_dir(cfg.output_dir.join("uncertainty/grids")).unwrap().count(), 4);

    let wide = tempfile::tempdir().unwrap();
    let cfg = config(wide.path(), 0, 3);
    run_train(&cfg, false).unwrap();
    assert!(run_uncertainty(&cfg).is_err());
}

#[test]
fn bench_lists_encoder_then_refinement_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0, 2);
    run_train(&cfg, false).unwrap();
    run_bench(&cfg).unwrap();
    let rows: Vec<BenchRow> = read_csv(&cfg.output_dir.join("bench/bench.csv")).unwrap();
    let methods: Vec<(String, usize)> = rows.iter().map(|r| (r.method.clone(), r.k)).collect();
    assert_eq!(methods, vec![("gpvae".into(), 0), ("sa".into(), 1), ("sa".into(), 2)]);
    assert!(rows.iter().all(|r| r.mean_ms >= 0.0));
}
