//! Binary checkpoints: a JSON manifest followed by little-endian `f64` blocks.
//!
//! Layout: `GPVAECKP`, format version (`u32`), manifest length (`u64`),
//! manifest, then every block of the manifest in order.

use std::fs;
use std::path::{Path, PathBuf};

use gpvae_core::adam::{AdamConfig, AdamState};
use gpvae_core::gp::GpVarParams;
use gpvae_core::nn::Mlp;
use gpvae_core::train::{BestRecord, Model, ParamGroup, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"GPVAECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlockInfo {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: TrainConfig,
    pub input_dim: usize,
    pub n_train: usize,
    pub epoch: usize,
    pub best: Option<BestRecord>,
    /// Adam step counters by group; empty for model-only checkpoints.
    pub adam_steps: Vec<(String, u64)>,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: PathBuf },
    #[error("{path}: format version {found}, expected {FORMAT_VERSION}")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: unreadable manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {found} bytes, expected {expected}")]
    Length { path: PathBuf, expected: usize, found: usize },
    #[error("block {block}: shape {found:?} in checkpoint, expected {expected:?}")]
    Shape { block: String, expected: Option<Vec<usize>>, found: Option<Vec<usize>> },
    #[error("checkpoint has no optimizer state")]
    NoOptimizerState,
    #[error("invalid checkpoint contents: {0}")]
    Invalid(#[from] gpvae_core::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub optim: Option<Vec<(ParamGroup, AdamState)>>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState, CheckpointError> {
        let optim = self.optim.ok_or(CheckpointError::NoOptimizerState)?;
        let m = self.manifest;
        Ok(TrainState { config: m.config, model: self.model, optim, epoch: m.epoch, n_train: m.n_train, best: m.best })
    }
}

fn mlp_blocks(prefix: &str, net: &Mlp, out: &mut Vec<(BlockInfo, Vec<f64>)>) {
    for l in 0..net.num_layers() {
        let (w, b) = net.layer(l);
        let (fi, fo) = (net.widths()[l], net.widths()[l + 1]);
        out.push((BlockInfo { name: format!("{prefix}.{l}.weight"), shape: vec![fi, fo] }, w.to_vec()));
        out.push((BlockInfo { name: format!("{prefix}.{l}.bias"), shape: vec![fo] }, b.to_vec()));
    }
}

fn model_blocks(model: &Model) -> Vec<(BlockInfo, Vec<f64>)> {
    let mut out = Vec::new();
    mlp_blocks(ParamGroup::Trunk.name(), &model.encoder.trunk, &mut out);
    mlp_blocks(ParamGroup::HeadBc.name(), &model.encoder.head_bc, &mut out);
    if let Some(psi) = &model.encoder.head_psi {
        mlp_blocks(ParamGroup::HeadPsi.name(), psi, &mut out);
    }
    mlp_blocks(ParamGroup::Decoder.name(), &model.decoder.net, &mut out);
    if let Some(l) = &model.lambda {
        let (d, p, f) = (l.latent_dim(), l.feature_dim(), l.factor_len());
        let names = ["lambda.mu", "lambda.sigma_factor", "lambda.eta", "lambda.gamma_factor"];
        let widths = [p, f, p, f];
        for ((name, w), seg) in names.into_iter().zip(widths).zip(l.segments()) {
            out.push((BlockInfo { name: name.into(), shape: vec![d, w] }, seg));
        }
    }
    out
}

fn optim_blocks(optim: &[(ParamGroup, AdamState)]) -> Vec<(BlockInfo, Vec<f64>)> {
    let mut out = Vec::new();
    for (g, s) in optim {
        for (tag, v) in [("m", &s.m), ("v", &s.v)] {
            out.push((BlockInfo { name: format!("adam.{}.{tag}", g.name()), shape: vec![v.len()] }, v.clone()));
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_owned(), source };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn encode(manifest: &Manifest, data: &[(BlockInfo, Vec<f64>)]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * data.iter().map(|d| d.1.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, values) in data {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Saves a model, optionally with optimizer state.
pub fn save(
    path: &Path,
    config: &TrainConfig,
    model: &Model,
    optim: Option<&[(ParamGroup, AdamState)]>,
    n_train: usize,
    epoch: usize,
    best: Option<BestRecord>,
) -> Result<(), CheckpointError> {
    let mut data = model_blocks(model);
    let mut adam_steps = Vec::new();
    if let Some(o) = optim {
        data.extend(optim_blocks(o));
        adam_steps = o.iter().map(|(g, s)| (g.name().to_owned(), s.step)).collect();
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: config.clone(),
        input_dim: model.input_dim(),
        n_train,
        epoch,
        best,
        adam_steps,
        blocks: data.iter().map(|(b, _)| b.clone()).collect(),
    };
    write_atomic(path, &encode(&manifest, &data))
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    save(path, &state.config, &state.model, Some(&state.optim), state.n_train, state.epoch, state.best)
}

/// First difference between the checkpoint's blocks and those implied by `config`.
fn check_layout(found: &[BlockInfo], config: &TrainConfig, input_dim: usize) -> Result<(), CheckpointError> {
    let model = Model::new(config, input_dim)?;
    let expected: Vec<BlockInfo> = model_blocks(&model).into_iter().map(|(b, _)| b).collect();
    let found: Vec<&BlockInfo> = found.iter().filter(|b| !b.name.starts_with("adam.")).collect();
    for i in 0..expected.len().max(found.len()) {
        let (e, f) = (expected.get(i), found.get(i).copied());
        if e != f {
            let block = e.or(f).map(|b| b.name.clone()).unwrap_or_default();
            let f = found.iter().find(|b| b.name == block).map(|b| b.shape.clone());
            let e = expected.iter().find(|b| b.name == block).map(|b| b.shape.clone());
            return Err(CheckpointError::Shape { block, expected: e, found: f });
        }
    }
    Ok(())
}

/// Loads a checkpoint. With `expected` set, the stored blocks must match the
/// shapes that configuration produces.
pub fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint, CheckpointError> {
    let p = || path.to_owned();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: p(), source })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(if bytes.len() < 20 && MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
            CheckpointError::Truncated { path: p(), expected: 20, found: bytes.len() }
        } else {
            CheckpointError::BadMagic { path: p() }
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { path: p(), found: version });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mend = 20usize.saturating_add(mlen);
    if bytes.len() < mend {
        return Err(CheckpointError::Truncated { path: p(), expected: mend, found: bytes.len() });
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..mend]).map_err(|source| CheckpointError::Manifest { path: p(), source })?;
    let total = mend + 8 * manifest.blocks.iter().map(BlockInfo::len).sum::<usize>();
    if bytes.len() < total {
        return Err(CheckpointError::Truncated { path: p(), expected: total, found: bytes.len() });
    }
    if bytes.len() > total {
        return Err(CheckpointError::Length { path: p(), expected: total, found: bytes.len() });
    }
    if let Some(cfg) = expected {
        check_layout(&manifest.blocks, cfg, manifest.input_dim)?;
    }
    check_layout(&manifest.blocks, &manifest.config, manifest.input_dim)?;

    let mut values: Vec<(&BlockInfo, Vec<f64>)> = Vec::with_capacity(manifest.blocks.len());
    let mut at = mend;
    for b in &manifest.blocks {
        let n = b.len();
        let v = bytes[at..at + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push((b, v));
        at += 8 * n;
    }
    let mut model = Model::new(&manifest.config, manifest.input_dim)?;
    let mut it = values.iter();
    let mut fill_mlp = |net: &mut Mlp| {
        for l in 0..net.num_layers() {
            let (w, b) = net.layer_mut(l);
            w.copy_from_slice(&it.next().expect("layout checked").1);
            b.copy_from_slice(&it.next().expect("layout checked").1);
        }
    };
    fill_mlp(&mut model.encoder.trunk);
    fill_mlp(&mut model.encoder.head_bc);
    if let Some(psi) = model.encoder.head_psi.as_mut() {
        fill_mlp(psi);
    }
    fill_mlp(&mut model.decoder.net);
    let mut rest: Vec<&(&BlockInfo, Vec<f64>)> = it.collect();
    if let Some(l) = model.lambda.as_mut() {
        let segs: Vec<&[f64]> = rest.drain(..4).map(|(_, v)| v.as_slice()).collect();
        *l = GpVarParams::from_segments(
            l.latent_dim(),
            l.feature_dim(),
            l.mode(),
            [segs[0], segs[1], segs[2], segs[3]],
        )?;
    }

    let optim = if manifest.adam_steps.is_empty() {
        None
    } else {
        let adam = AdamConfig { learning_rate: manifest.config.learning_rate, ..AdamConfig::default() };
        let mut out = Vec::new();
        for (name, step) in &manifest.adam_steps {
            let g = ParamGroup::from_name(name).ok_or_else(|| CheckpointError::Shape {
                block: format!("adam.{name}"),
                expected: None,
                found: None,
            })?;
            let want = model.group(g).map(<[f64]>::len);
            let mut pair = rest.drain(..2.min(rest.len()));
            let (m, v) = (pair.next(), pair.next());
            drop(pair);
            let (Some(m), Some(v)) = (m, v) else {
                return Err(CheckpointError::Shape {
                    block: format!("adam.{name}"),
                    expected: want.map(|n| vec![n]),
                    found: None,
                });
            };
            if Some(m.1.len()) != want || Some(v.1.len()) != want {
                return Err(CheckpointError::Shape {
                    block: m.0.name.clone(),
                    expected: want.map(|n| vec![n]),
                    found: Some(m.0.shape.clone()),
                });
            }
            out.push((g, AdamState { config: adam, step: *step, m: m.1.clone(), v: v.1.clone() }));
        }
        Some(out)
    };
    Ok(Checkpoint { manifest, model, optim })
}
