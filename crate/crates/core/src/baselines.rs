//! Comparison inference schemes: the plain VAE encoder, per-instance SVI,
//! semi-amortized refinement and the amortization gap.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{kl_to_standard, DiagGaussian};
use crate::linalg::Matrix;
use crate::model::Decoder;
use crate::rng::RngStream;
use crate::stats::mean_se;
use crate::train::Model;
use crate::VAR_FLOOR;

/// `N(b(x), Diag c(x)²)` with the variance floor, for any trained model.
pub fn vae_encoder(model: &Model, x: &[f64]) -> Result<DiagGaussian> {
    let (b, v) = model.base_encode_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
    DiagGaussian::new(b.into_vec(), v.into_vec())
}

/// Per-datapoint variational parameters `(mean, ln std)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceVarParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl InstanceVarParams {
    pub fn from_gaussian(q: &DiagGaussian) -> Self {
        Self { mean: q.mean().to_vec(), log_std: q.var().iter().map(|v| 0.5 * v.max(VAR_FLOOR).ln()).collect() }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn to_gaussian(&self) -> DiagGaussian {
        let var = self.log_std.iter().map(|l| (2.0 * l).exp()).collect();
        DiagGaussian::with_floor(self.mean.clone(), var).expect("floored variance is positive")
    }

    /// Finite mean and a variance that neither overflows nor vanishes.
    fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.log_std.iter().all(|l| {
                let v = (2.0 * l).exp();
                v.is_finite() && v > 0.0
            })
    }
}

/// Step size `step_size / (1 + t / decay)`; no decay when `decay` is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub step_size: f64,
    pub decay: Option<f64>,
}

impl StepSchedule {
    pub fn constant(step_size: f64) -> Self {
        Self { step_size, decay: None }
    }

    pub fn at(&self, t: usize) -> f64 {
        match self.decay {
            Some(d) => self.step_size / (1.0 + t as f64 / d),
            None => self.step_size,
        }
    }
}

/// SVI stopped on a non-finite value.
#[derive(Debug)]
pub struct SviAbort {
    pub error: Error,
    /// Step at which the non-finite value appeared.
    pub step: usize,
    pub last_finite: Vec<InstanceVarParams>,
}

/// Gradient ascent on the per-instance ELBO
/// `E_q[ln p(x|z)] - KL(q ‖ N(0, I))`, one reparametrized sample per step.
///
/// Row `i` of `x` draws its noise from `streams[i]`; step `t` always uses the
/// `t`-th draw, so runs with different step counts share random numbers.
pub fn svi_optimize_batch(
    x: &Matrix,
    decoder: &Decoder,
    init: &[InstanceVarParams],
    steps: usize,
    schedule: StepSchedule,
    streams: &mut [RngStream],
) -> core::result::Result<Vec<InstanceVarParams>, SviAbort> {
    let n = x.rows();
    let d = decoder.latent_dim();
    let abort = |error, step, last: &[InstanceVarParams]| SviAbort { error, step, last_finite: last.to_vec() };
    let shape = check_dim("svi initial values", n, init.len())
        .and_then(|_| check_dim("svi streams", n, streams.len()))
        .and_then(|_| init.iter().try_for_each(|p| check_dim("svi latent dim", d, p.dim())));
    if let Err(e) = shape {
        return Err(abort(e, 0, init));
    }
    let mut params = init.to_vec();
    let mut eps = Matrix::zeros(n, d);
    let mut z = Matrix::zeros(n, d);
    for t in 0..steps {
        for (i, s) in streams.iter_mut().enumerate() {
            s.fill_normal(eps.row_mut(i));
            for j in 0..d {
                let sd = params[i].log_std[j].exp();
                z.set(i, j, params[i].mean[j] + sd * eps.get(i, j));
            }
        }
        let (ll, dz) = match decoder.log_lik_grad(x, &z, 1.0, None) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, t, &params)),
        };
        if ll.iter().any(|v| !v.is_finite()) {
            return Err(abort(Error::NonFinite { term: "svi reconstruction" }, t, &params));
        }
        let lr = schedule.at(t);
        let mut next = params.clone();
        for (i, p) in next.iter_mut().enumerate() {
            for j in 0..d {
                let sd = p.log_std[j].exp();
                let g = dz.get(i, j);
                p.mean[j] += lr * (g - p.mean[j]);
                p.log_std[j] += lr * (g * eps.get(i, j) * sd - (sd * sd - 1.0));
            }
        }
        if next.iter().any(|p| !p.is_finite()) {
            return Err(abort(Error::NonFinite { term: "svi parameters" }, t, &params));
        }
        params = next;
    }
    Ok(params)
}

/// Single-instance form of [`svi_optimize_batch`].
pub fn svi_optimize(
    x: &[f64],
    decoder: &Decoder,
    init: &InstanceVarParams,
    steps: usize,
    schedule: StepSchedule,
    rng: &mut RngStream,
) -> core::result::Result<InstanceVarParams, SviAbort> {
    let xm = Matrix::from_vec(1, x.len(), x.to_vec()).map_err(|error| SviAbort {
        error,
        step: 0,
        last_finite: vec![init.clone()],
    })?;
    let mut streams = [rng.clone()];
    let out = svi_optimize_batch(&xm, decoder, core::slice::from_ref(init), steps, schedule, &mut streams)?;
    *rng = streams[0].clone();
    Ok(out.into_iter().next().expect("one instance"))
}

/// Semi-amortized refinement step size.
pub const SA_STEP_SIZE: f64 = 1e-3;

/// `k` SVI steps starting from the VAE encoder output of every row of `x`.
pub fn sa_refine(
    model: &Model,
    x: &Matrix,
    k: usize,
    step_size: f64,
    streams: &mut [RngStream],
) -> core::result::Result<Vec<InstanceVarParams>, SviAbort> {
    let init = match model.base_encode_batch(x) {
        Ok((b, v)) => (0..x.rows())
            .map(|i| InstanceVarParams {
                mean: b.row(i).to_vec(),
                log_std: v.row(i).iter().map(|v| 0.5 * v.ln()).collect(),
            })
            .collect::<Vec<_>>(),
        Err(error) => return Err(SviAbort { error, step: 0, last_finite: Vec::new() }),
    };
    svi_optimize_batch(x, &model.decoder, &init, k, StepSchedule::constant(step_size), streams)
}

/// `samples`-sample reconstruction estimate minus the analytic KL, one value
/// per row. Row `i` takes its noise from `rng.split(i)`, so two parameter
/// sets evaluated with the same `rng` share random numbers.
pub fn instance_elbos(
    x: &Matrix,
    decoder: &Decoder,
    params: &[InstanceVarParams],
    rng: &RngStream,
    samples: usize,
) -> Result<Vec<f64>> {
    check_dim("instances", x.rows(), params.len())?;
    if samples == 0 {
        return Err(Error::Contract("at least one Monte Carlo sample is required".into()));
    }
    let d = decoder.latent_dim();
    let mut out = Vec::with_capacity(x.rows());
    let mut z = Matrix::zeros(samples, d);
    for (i, p) in params.iter().enumerate() {
        check_dim("latent dim", d, p.dim())?;
        let mut s = rng.split(i as u64);
        s.fill_normal(z.as_mut_slice());
        for r in 0..samples {
            for (j, zv) in z.row_mut(r).iter_mut().enumerate() {
                *zv = p.mean[j] + p.log_std[j].exp() * *zv;
            }
        }
        let ll = decoder.log_lik_batch(&x.row_range(i, i + 1), &z)?;
        let q = p.to_gaussian();
        let elbo = ll.iter().sum::<f64>() / samples as f64 - kl_to_standard(q.mean(), q.var());
        if !elbo.is_finite() {
            return Err(Error::NonFinite { term: "instance elbo" });
        }
        out.push(elbo);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapConfig {
    pub steps: usize,
    pub schedule: StepSchedule,
    /// Monte Carlo samples for each ELBO evaluation.
    pub eval_samples: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { steps: 500, schedule: StepSchedule { step_size: 1e-2, decay: Some(100.0) }, eval_samples: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRow {
    pub id: usize,
    pub elbo_amortized: f64,
    pub elbo_svi: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    pub mean: f64,
    pub se: f64,
    /// Instances whose SVI run stopped early on a non-finite value.
    pub aborted: usize,
}

/// Amortization gap `ELBO(λ_SVI) - ELBO(λ_amortized)` per row of `x`, with SVI
/// started at the amortized solution. Both ELBOs use the same evaluation noise.
pub fn amortization_gap(
    x: &Matrix,
    decoder: &Decoder,
    amortized: &[DiagGaussian],
    config: &GapConfig,
    rng: &RngStream,
) -> Result<GapReport> {
    check_dim("amortized posteriors", x.rows(), amortized.len())?;
    let init: Vec<InstanceVarParams> = amortized.iter().map(InstanceVarParams::from_gaussian).collect();
    let svi_rng = rng.split(crate::rng::tags::SVI);
    let mut streams: Vec<RngStream> = (0..x.rows()).map(|i| svi_rng.split(i as u64)).collect();
    let mut aborted = 0;
    let mut refined = Vec::with_capacity(x.rows());
    // one instance at a time so a divergent row keeps the others intact
    for (i, s) in streams.iter_mut().enumerate() {
        let xi = x.row_range(i, i + 1);
        match svi_optimize_batch(&xi, decoder, &init[i..i + 1], config.steps, config.schedule, core::slice::from_mut(s))
        {
            Ok(mut p) => refined.push(p.pop().expect("one instance")),
            Err(a) => {
                aborted += 1;
                refined.push(a.last_finite.into_iter().next().expect("one instance"));
            }
        }
    }
    let eval = rng.split(crate::rng::tags::EVAL);
    let before = instance_elbos(x, decoder, &init, &eval, config.eval_samples)?;
    let after = instance_elbos(x, decoder, &refined, &eval, config.eval_samples)?;
    let rows: Vec<GapRow> = before
        .iter()
        .zip(&after)
        .enumerate()
        .map(|(id, (&a, &s))| GapRow { id, elbo_amortized: a, elbo_svi: s, gap: s - a })
        .collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let (mean, se) = mean_se(&gaps);
    Ok(GapReport { rows, mean, se, aborted })
}
