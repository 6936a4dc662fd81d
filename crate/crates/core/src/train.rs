//! Per-datapoint ELBO with gradients and the training loop.
//!
//! For the GP model the objective per datapoint is
//!
//! ```text
//! ELBO(x) = E_{q(z|x)}[ln p(x|z)] - E_{q(W,U)}[KL(q(z|x,W,U) ‖ p(z))] - KL(q(W,U) ‖ N(0,I)) / N
//! ```
//!
//! with `q(z|x)` the moment-matched marginal encoder. The plain VAE uses
//! `N(b(x), Diag c(x)²)` and drops the weight term.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::DiagGaussian;
use crate::gp::{
    weight_kl, weight_kl_grad, CovarianceMode, EncoderHeads, EncoderStats, FeaturePair, GpVarParams, MarginalBatch,
};
use crate::linalg::Matrix;
use crate::model::Decoder;
use crate::nn::{Activation, Mlp};
use crate::rng::{tags, RngStream};
use crate::VAR_FLOOR;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Gpvae,
    Vae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Deep-kernel feature dimension `p`.
    pub feature_dim: usize,
    /// Hidden width of the encoder trunk and the decoder.
    pub hidden: usize,
    /// Fixed observation variance `σₓ²`.
    pub obs_var: f64,
    pub covariance: CovarianceMode,
    /// Initial Cholesky scale of `Σⱼ`, `Γⱼ`.
    pub lambda_init_scale: f64,
    /// Keep `Λ` at its initial value.
    pub freeze_lambda: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Squared-log Monte Carlo samples per datapoint during training.
    pub mc_train: usize,
    /// Same during evaluation.
    pub mc_eval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gpvae,
            latent_dim: 10,
            feature_dim: 32,
            hidden: 256,
            obs_var: 0.1,
            covariance: CovarianceMode::Full,
            lambda_init_scale: 0.01,
            freeze_lambda: false,
            batch_size: 128,
            learning_rate: 5e-4,
            epochs: 50,
            mc_train: 8,
            mc_eval: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("mc_train", self.mc_train),
            ("mc_eval", self.mc_eval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(alloc::format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("obs_var", self.obs_var),
            ("learning_rate", self.learning_rate),
            ("lambda_init_scale", self.lambda_init_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(alloc::format!("{name} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Trainable parameter groups, each with its own Adam state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Trunk,
    HeadBc,
    HeadPsi,
    Decoder,
    Lambda,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] =
        [ParamGroup::Trunk, ParamGroup::HeadBc, ParamGroup::HeadPsi, ParamGroup::Decoder, ParamGroup::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Trunk => "encoder.trunk",
            ParamGroup::HeadBc => "encoder.head_bc",
            ParamGroup::HeadPsi => "encoder.head_psi",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Lambda => "lambda",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

/// Shared trunk with a `(b, c)` head and, for the GP model, a `(ψᵐ, ψˢ)` head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub trunk: Mlp,
    pub head_bc: Mlp,
    pub head_psi: Option<Mlp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mode: Mode,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub lambda: Option<GpVarParams>,
}

/// Encoder outputs for a batch.
pub struct BatchEncoding {
    pub mean: Matrix,
    pub var: Matrix,
    /// Per-row `(uncertainty_f, uncertainty_h)` for the GP model.
    pub uncertainty: Option<(Vec<f64>, Vec<f64>)>,
}

impl Model {
    /// Freshly initialized model. Each group draws from its own sub-stream,
    /// so the VAE and the GP model share trunk, `(b, c)` head and decoder
    /// initialization for the same seed.
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let (d, p, h) = (config.latent_dim, config.feature_dim, config.hidden);
        let init = RngStream::new(config.seed).split(tags::INIT);
        let mut trunk = Mlp::new(&[input_dim, h, h], Activation::LeakyRelu, Activation::LeakyRelu)?;
        trunk.init(&mut init.split(ParamGroup::Trunk.index() as u64));
        let mut head_bc = Mlp::new(&[h, 2 * d], Activation::Identity, Activation::Identity)?;
        head_bc.init(&mut init.split(ParamGroup::HeadBc.index() as u64));
        let mut dec = Mlp::new(&[d, h, h, input_dim], Activation::LeakyRelu, Activation::Identity)?;
        dec.init(&mut init.split(ParamGroup::Decoder.index() as u64));
        let decoder = Decoder::new(dec, config.obs_var)?;
        let (head_psi, lambda) = match config.mode {
            Mode::Vae => (None, None),
            Mode::Gpvae => {
                let mut psi = Mlp::new(&[h, 2 * p], Activation::Identity, Activation::Identity)?;
                psi.init(&mut init.split(ParamGroup::HeadPsi.index() as u64));
                let lambda = GpVarParams::new(d, p, config.covariance, config.lambda_init_scale)?;
                (Some(psi), Some(lambda))
            }
        };
        Ok(Self { mode: config.mode, encoder: Encoder { trunk, head_bc, head_psi }, decoder, lambda })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.head_bc.output_dim() / 2
    }

    pub fn group(&self, g: ParamGroup) -> Option<&[f64]> {
        match g {
            ParamGroup::Trunk => Some(self.encoder.trunk.params()),
            ParamGroup::HeadBc => Some(self.encoder.head_bc.params()),
            ParamGroup::HeadPsi => self.encoder.head_psi.as_ref().map(Mlp::params),
            ParamGroup::Decoder => Some(self.decoder.net.params()),
            ParamGroup::Lambda => self.lambda.as_ref().map(GpVarParams::params),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> Option<&mut [f64]> {
        match g {
            ParamGroup::Trunk => Some(self.encoder.trunk.params_mut()),
            ParamGroup::HeadBc => Some(self.encoder.head_bc.params_mut()),
            ParamGroup::HeadPsi => self.encoder.head_psi.as_mut().map(Mlp::params_mut),
            ParamGroup::Decoder => Some(self.decoder.net.params_mut()),
            ParamGroup::Lambda => self.lambda.as_mut().map(GpVarParams::params_mut),
        }
    }

    /// Head outputs for a single input. Features are empty for the VAE.
    pub fn heads(&self, x: &[f64]) -> Result<EncoderHeads> {
        check_dim("encoder input", self.input_dim(), x.len())?;
        let t = self.encoder.trunk.forward(x)?;
        let bc = self.encoder.head_bc.forward(&t)?;
        let d = bc.len() / 2;
        let features = match &self.encoder.head_psi {
            Some(psi) => {
                let f = psi.forward(&t)?;
                let p = f.len() / 2;
                FeaturePair { phi_m: f[..p].to_vec(), phi_s: f[p..].to_vec() }
            }
            None => FeaturePair { phi_m: Vec::new(), phi_s: Vec::new() },
        };
        Ok(EncoderHeads { b: bc[..d].to_vec(), c: bc[d..].to_vec(), features })
    }

    /// Marginal encoder statistics (GP model only).
    pub fn encoder_stats(&self, x: &[f64]) -> Result<EncoderStats> {
        let lambda = self.lambda.as_ref().ok_or_else(|| Error::Contract("the VAE has no GP posterior".into()))?;
        crate::gp::marginal_encoder(&self.heads(x)?, lambda)
    }

    /// The amortized `q(z|x)`: the marginal encoder for the GP model, `N(b, c²)` for the VAE.
    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        let e = self.encode_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        DiagGaussian::new(e.mean.row(0).to_vec(), e.var.row(0).to_vec())
    }

    /// The VAE encoder `N(b(x), Diag c(x)²)` of any model.
    pub fn base_encode_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let t = self.encoder.trunk.predict(x)?;
        let bc = self.encoder.head_bc.predict(&t)?;
        let d = bc.cols() / 2;
        let b = bc.col_range(0, d);
        let mut v = bc.col_range(d, 2 * d);
        v.as_mut_slice().iter_mut().for_each(|c| *c = (*c * *c).max(VAR_FLOOR));
        Ok((b, v))
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<BatchEncoding> {
        let t = self.encoder.trunk.predict(x)?;
        let bc = self.encoder.head_bc.predict(&t)?;
        let d = bc.cols() / 2;
        let b = bc.col_range(0, d);
        let c = bc.col_range(d, 2 * d);
        match (&self.encoder.head_psi, &self.lambda) {
            (Some(psi), Some(lambda)) => {
                let f = psi.predict(&t)?;
                let p = f.cols() / 2;
                let mb = MarginalBatch::forward(lambda, &b, &c, &f.col_range(0, p), &f.col_range(p, 2 * p));
                let unc = (mb.uncertainty_f.clone(), mb.uncertainty_h.clone());
                Ok(BatchEncoding { mean: mb.m, var: mb.v, uncertainty: Some(unc) })
            }
            _ => {
                let mut v = c;
                v.as_mut_slice().iter_mut().for_each(|c| *c = (*c * *c).max(VAR_FLOOR));
                Ok(BatchEncoding { mean: b, var: v, uncertainty: None })
            }
        }
    }
}

/// Gradients for every parameter group present in a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    groups: [Option<Vec<f64>>; 5],
}

impl Gradients {
    fn zeros_like(model: &Model) -> Self {
        let groups = ParamGroup::ALL.map(|g| model.group(g).map(|p| vec![0.0; p.len()]));
        Self { groups }
    }

    pub fn group(&self, g: ParamGroup) -> Option<&[f64]> {
        self.groups[g.index()].as_deref()
    }

    fn group_mut(&mut self, g: ParamGroup) -> Option<&mut [f64]> {
        self.groups[g.index()].as_deref_mut()
    }
}

/// Frozen noise for one ELBO evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    /// Reconstruction noise, `B × d`.
    pub eps: Matrix,
    /// Squared-log noise, `B × d × samples`.
    pub zeta: Vec<f64>,
    pub samples: usize,
}

impl ElboNoise {
    /// Reconstruction and squared-log noise come from separate sub-streams.
    pub fn draw(rng: &RngStream, rows: usize, d: usize, samples: usize) -> Self {
        let mut eps = Matrix::zeros(rows, d);
        rng.split(tags::RECON).fill_normal(eps.as_mut_slice());
        let mut zeta = vec![0.0; rows * d * samples];
        rng.split(tags::ESL).fill_normal(&mut zeta);
        Self { eps, zeta, samples }
    }
}

/// Batch means of the ELBO and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub weight_kl: f64,
}

/// Mean ELBO over the rows of `x` and, optionally, its gradient.
///
/// `n_total` is the training-set size dividing the weight KL. With
/// `lambda_grad` unset the GP parameters are treated as constants.
pub fn elbo_batch(
    model: &Model,
    x: &Matrix,
    noise: &ElboNoise,
    n_total: usize,
    want_grad: bool,
    lambda_grad: bool,
) -> Result<(ElboTerms, Option<Gradients>)> {
    let n = x.rows();
    let d = model.latent_dim();
    check_dim("noise rows", n, noise.eps.rows())?;
    check_dim("noise width", d, noise.eps.cols())?;
    let inv_n = 1.0 / n as f64;
    let enc = &model.encoder;
    let (t, tape_t) = enc.trunk.forward_batch(x)?;
    let (bc, tape_bc) = enc.head_bc.forward_batch(&t)?;
    let b = bc.col_range(0, d);
    let c = bc.col_range(d, 2 * d);

    let gp = match (&enc.head_psi, &model.lambda) {
        (Some(psi), Some(lambda)) => {
            check_dim("squared-log noise", n * d * noise.samples, noise.zeta.len())?;
            let (f, tape_psi) = psi.forward_batch(&t)?;
            let p = f.cols() / 2;
            let phi_m = f.col_range(0, p);
            let phi_s = f.col_range(p, 2 * p);
            let mb = MarginalBatch::forward(lambda, &b, &c, &phi_m, &phi_s);
            Some((psi, lambda, tape_psi, phi_m, phi_s, mb))
        }
        _ => None,
    };

    let (m, v, kl_rows, sq_parts) = match &gp {
        Some((_, _, _, _, _, mb)) => {
            let (kl, parts) = mb.expected_kl(&noise.zeta, noise.samples);
            (mb.m.clone(), mb.v.clone(), kl, Some(parts))
        }
        None => {
            let mut v = c.clone();
            v.as_mut_slice().iter_mut().for_each(|c| *c = (*c * *c).max(VAR_FLOOR));
            let kl = (0..n).map(|i| crate::gaussian::kl_to_standard(b.row(i), v.row(i))).collect();
            (b.clone(), v, kl, None)
        }
    };

    let mut z = m.clone();
    for ((zv, vv), e) in z.as_mut_slice().iter_mut().zip(v.as_slice()).zip(noise.eps.as_slice()) {
        *zv += vv.sqrt() * e;
    }
    let mut grads = want_grad.then(|| Gradients::zeros_like(model));
    let (ll, dz) =
        model.decoder.log_lik_grad(x, &z, inv_n, grads.as_mut().and_then(|g| g.group_mut(ParamGroup::Decoder)))?;

    let recon = ll.iter().sum::<f64>() * inv_n;
    let kl = kl_rows.iter().sum::<f64>() * inv_n;
    let wkl = match (&model.lambda, model.mode) {
        (Some(l), Mode::Gpvae) => weight_kl(l),
        _ => 0.0,
    };
    if !recon.is_finite() {
        return Err(Error::NonFinite { term: "reconstruction" });
    }
    if !kl.is_finite() {
        return Err(Error::NonFinite { term: "expected kl" });
    }
    if !wkl.is_finite() {
        return Err(Error::NonFinite { term: "weight kl" });
    }
    let terms = ElboTerms { elbo: recon - kl - wkl / n_total as f64, recon, kl, weight_kl: wkl };
    let Some(mut grads) = grads else {
        return Ok((terms, None));
    };

    // objective gradients w.r.t. m and the floored v
    let mut dm = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let (mv, vv, e, g) = (m.get(i, j), v.get(i, j), noise.eps.get(i, j), dz.get(i, j));
            dm.set(i, j, g - inv_n * mv);
            let recon_part = g * e / (2.0 * vv.sqrt());
            // the -ln v part of the KL is handled with the squared-log term
            dv.set(i, j, recon_part - 0.5 * inv_n);
        }
    }

    let mut d_trunk_out = Matrix::zeros(n, t.cols());
    let d_bc = match &gp {
        Some((psi, lambda, tape_psi, phi_m, phi_s, mb)) => {
            let mut d_sq = Matrix::zeros(n, d);
            d_sq.fill(0.5 * inv_n);
            let lg = if lambda_grad { grads.group_mut(ParamGroup::Lambda) } else { None };
            let hg = mb.backward(lambda, phi_m, phi_s, &dm, &dv, &d_sq, sq_parts.as_deref().unwrap(), lg);
            if lambda_grad {
                if let Some(g) = grads.group_mut(ParamGroup::Lambda) {
                    weight_kl_grad(lambda, -1.0 / n_total as f64, g);
                }
            }
            let p = phi_m.cols();
            let mut d_f = Matrix::zeros(n, 2 * p);
            for i in 0..n {
                d_f.row_mut(i)[..p].copy_from_slice(hg.phi_m.row(i));
                d_f.row_mut(i)[p..].copy_from_slice(hg.phi_s.row(i));
            }
            let dt = psi.backward(tape_psi, d_f, grads.group_mut(ParamGroup::HeadPsi), true).unwrap();
            d_trunk_out = dt;
            concat_cols(&hg.b, &hg.c)
        }
        None => {
            let mut dc = Matrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    let cv = c.get(i, j);
                    let c2 = cv * cv;
                    let quad = if c2 >= VAR_FLOOR { dv.get(i, j) * 2.0 * cv } else { 0.0 };
                    let log = if c2 > VAR_FLOOR { 0.5 * inv_n * (2.0 / cv) } else { 0.0 };
                    dc.set(i, j, quad + log);
                }
            }
            concat_cols(&dm, &dc)
        }
    };
    let dt = enc.head_bc.backward(&tape_bc, d_bc, grads.group_mut(ParamGroup::HeadBc), true).unwrap();
    for (a, b) in d_trunk_out.as_mut_slice().iter_mut().zip(dt.as_slice()) {
        *a += b;
    }
    enc.trunk.backward(&tape_t, d_trunk_out, grads.group_mut(ParamGroup::Trunk), false);
    Ok((terms, Some(grads)))
}

fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        out.row_mut(i)[..a.cols()].copy_from_slice(a.row(i));
        out.row_mut(i)[a.cols()..].copy_from_slice(b.row(i));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_elbo: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: Vec<(ParamGroup, AdamState)>,
    /// Completed epochs.
    pub epoch: usize,
    /// Training-set size `N`.
    pub n_train: usize,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, input_dim: usize, n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Contract("training set is empty".into()));
        }
        let model = Model::new(config, input_dim)?;
        let adam = AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() };
        let optim = ParamGroup::ALL
            .into_iter()
            .filter_map(|g| model.group(g).map(|p| (g, AdamState::new(p.len(), adam))))
            .collect();
        Ok(Self { config: config.clone(), model, optim, epoch: 0, n_train, best: None })
    }

    /// Sub-stream for batch `batch` of epoch `epoch` (0-based).
    pub fn batch_stream(&self, epoch: usize, batch: usize) -> RngStream {
        RngStream::new(self.config.seed).split(tags::TRAIN).split(epoch as u64).split(batch as u64)
    }

    /// One Adam step on the batch; returns the batch ELBO before the step.
    pub fn step(&mut self, x: &Matrix, noise: &ElboNoise) -> Result<ElboTerms> {
        let train_lambda = !self.config.freeze_lambda && self.model.mode == Mode::Gpvae;
        let (terms, grads) = elbo_batch(&self.model, x, noise, self.n_train, true, train_lambda)?;
        let grads = grads.expect("gradients requested");
        for (g, state) in &mut self.optim {
            if *g == ParamGroup::Lambda && !train_lambda {
                continue;
            }
            let grad: Vec<f64> = grads.group(*g).expect("group present").iter().map(|v| -v).collect();
            let params = self.model.group_mut(*g).expect("group present");
            state.step(params, &grad)?;
            if *g == ParamGroup::Lambda {
                if let Some(l) = self.model.lambda.as_mut() {
                    l.canonicalize(Some(&mut state.m));
                }
            }
        }
        Ok(terms)
    }

    /// One pass over `x` in shuffled mini-batches; returns the mean batch ELBO.
    pub fn train_epoch(&mut self, x: &Matrix) -> Result<f64> {
        let n = x.rows();
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(self.config.seed).split(tags::SHUFFLE).split(epoch as u64).shuffle(&mut order);
        let bs = self.config.batch_size.min(n);
        let d = self.model.latent_dim();
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(bs).enumerate() {
            let xb = x.select_rows(idx);
            let noise = ElboNoise::draw(&self.batch_stream(epoch, bi), idx.len(), d, self.config.mc_train);
            total += self.step(&xb, &noise)?.elbo;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

/// Mean ELBO over a dataset with noise from `rng`, evaluated in chunks.
pub fn evaluate_elbo(model: &Model, x: &Matrix, n_total: usize, rng: &RngStream, samples: usize) -> Result<ElboTerms> {
    let chunk = 256;
    let d = model.latent_dim();
    let mut acc = ElboTerms { elbo: 0.0, recon: 0.0, kl: 0.0, weight_kl: 0.0 };
    let mut start = 0;
    let mut ci = 0;
    while start < x.rows() {
        let end = (start + chunk).min(x.rows());
        let xb = x.row_range(start, end);
        let noise = ElboNoise::draw(&rng.split(ci as u64), end - start, d, samples);
        let (t, _) = elbo_batch(model, &xb, &noise, n_total, false, false)?;
        let w = (end - start) as f64 / x.rows() as f64;
        acc.elbo += w * t.elbo;
        acc.recon += w * t.recon;
        acc.kl += w * t.kl;
        acc.weight_kl = t.weight_kl;
        start = end;
        ci += 1;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub weight_kl: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Model with the best validation ELBO seen so far (the initial model if
    /// no epoch ran).
    pub best_model: Model,
}

/// Training stopped early. After a non-finite value `last_good` holds the
/// state at the end of the last completed epoch.
#[derive(Debug)]
pub struct Diverged {
    pub error: Error,
    pub last_good: Option<Box<TrainState>>,
}

/// Runs epochs until `state.config.epochs` are complete.
///
/// `observer` sees every finished epoch together with the new state and
/// the current best model. Pass the previous best model when resuming.
pub fn train_from(
    mut state: TrainState,
    best_model: Option<Model>,
    train: &Matrix,
    val: &Matrix,
    mut observer: impl FnMut(&EpochRecord, &TrainState, &Model),
) -> core::result::Result<TrainOutcome, Diverged> {
    let mut best_model = best_model.unwrap_or_else(|| state.model.clone());
    let val_stream = RngStream::new(state.config.seed).split(tags::VALIDATION);
    while state.epoch < state.config.epochs {
        let last_good = state.clone();
        let fail = |error| Diverged { error, last_good: Some(Box::new(last_good.clone())) };
        let train_elbo = state.train_epoch(train).map_err(fail)?;
        let val_terms = if val.rows() > 0 {
            evaluate_elbo(&state.model, val, state.n_train, &val_stream, state.config.mc_eval).map_err(fail)?
        } else {
            ElboTerms { elbo: train_elbo, recon: 0.0, kl: 0.0, weight_kl: 0.0 }
        };
        if !train_elbo.is_finite() || !val_terms.elbo.is_finite() {
            return Err(fail(Error::NonFinite { term: "elbo" }));
        }
        if state.best.map_or(true, |b| val_terms.elbo > b.val_elbo) {
            state.best = Some(BestRecord { epoch: state.epoch, val_elbo: val_terms.elbo });
            best_model = state.model.clone();
        }
        let wkl = state.model.lambda.as_ref().map_or(0.0, weight_kl);
        let record = EpochRecord { epoch: state.epoch, train_elbo, val_elbo: val_terms.elbo, weight_kl: wkl };
        observer(&record, &state, &best_model);
    }
    Ok(TrainOutcome { state, best_model })
}

/// Initializes and trains a model from scratch.
pub fn train(
    config: &TrainConfig,
    train: &Matrix,
    val: &Matrix,
    observer: impl FnMut(&EpochRecord, &TrainState, &Model),
) -> core::result::Result<TrainOutcome, Diverged> {
    let state =
        TrainState::new(config, train.cols(), train.rows()).map_err(|error| Diverged { error, last_good: None })?;
    train_from(state, None, train, val, observer)
}
