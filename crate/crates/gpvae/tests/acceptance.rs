//! Acceptance criteria. Prints one PASS/FAIL line per criterion followed by a
//! tally; the process exits non-zero only if the harness itself breaks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use gpvae::bench::bench_inference;
use gpvae::config::BenchSettings;
use gpvae::idx::load_idx;
use gpvae_core::baselines::{amortization_gap, svi_optimize, GapConfig, InstanceVarParams, StepSchedule};
use gpvae_core::data::{gen_synthetic, Splits};
use gpvae_core::eval::iwae;
use gpvae_core::eval::iwae_dataset;
use gpvae_core::gaussian::{kl_to_standard, moment_match, DiagGaussian};
use gpvae_core::gp::{
    conditional_encoder, expected_kl_to_prior, marginal_encoder, weight_kl, CovarianceMode, EncoderHeads, FeaturePair,
    GpVarParams,
};
use gpvae_core::linalg::Matrix;
use gpvae_core::model::{Decoder, LinearGaussian};
use gpvae_core::nn::{Activation, Mlp};
use gpvae_core::rng::{tags, RngStream};
use gpvae_core::stats::{mean_se, spearman};
use gpvae_core::train::{elbo_batch, train, ElboNoise, Mode, Model, ParamGroup, TrainConfig, TrainState};

type Oracle = fn(&mut RngStream) -> Result<(usize, f64)>;
type Criterion = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn mnist_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist/images-idx3-ubyte.gz")
}

fn mnist_splits() -> Result<&'static Splits> {
    static SPLITS: OnceLock<Splits> = OnceLock::new();
    if let Some(s) = SPLITS.get() {
        return Ok(s);
    }
    let ds = load_idx(&mnist_path(), None)?;
    Ok(SPLITS.get_or_init(|| ds.split(0, 5000, 500, 1000).expect("10k rows available")))
}

/// `|a - b| ≤ 3 · se`.
fn within(a: f64, b: f64, se: f64) -> bool {
    (a - b).abs() <= 3.0 * se
}

// 1. oracle suite

const INSTANCES: usize = 20;

fn random_lambda(d: usize, p: usize, rng: &mut RngStream) -> GpVarParams {
    let mut lambda = GpVarParams::new(d, p, CovarianceMode::Full, 1.0).unwrap();
    let params: Vec<f64> = lambda.params().iter().map(|v| 0.3 * v + 0.25 * rng.normal()).collect();
    lambda.set_params(&params).unwrap();
    lambda.canonicalize(None);
    lambda
}

fn random_heads(d: usize, p: usize, rng: &mut RngStream) -> EncoderHeads {
    let mut v = |n: usize, scale: f64, shift: f64| (0..n).map(|_| shift + scale * rng.normal()).collect::<Vec<_>>();
    EncoderHeads {
        b: v(d, 1.0, 0.0),
        c: v(d, 0.2, 1.0),
        features: FeaturePair { phi_m: v(p, 0.7, 0.0), phi_s: v(p, 0.5, 0.0) },
    }
}

/// `Σⱼ aⱼ zⱼ + bⱼ zⱼ²`; its mean under a distribution with per-dimension
/// moments `(m, v)` is `Σⱼ aⱼ mⱼ + bⱼ (vⱼ + mⱼ²)`.
struct Probe {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Probe {
    fn new(d: usize, rng: &mut RngStream) -> Self {
        Self { a: (0..d).map(|_| rng.normal()).collect(), b: (0..d).map(|_| rng.normal()).collect() }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        z.iter().enumerate().map(|(j, z)| self.a[j] * z + self.b[j] * z * z).sum()
    }

    fn expected(&self, m: &[f64], v: &[f64]) -> f64 {
        (0..m.len()).map(|j| self.a[j] * m[j] + self.b[j] * (v[j] + m[j] * m[j])).sum()
    }
}

fn solve_lower(l: &[f64], p: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * p + i];
    }
    x
}

fn cholesky(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    l
}

fn oracle_moment_matching(rng: &mut RngStream) -> Result<(usize, f64)> {
    let mut fails = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = 1 + rng.below(4);
        let k = 1 + rng.below(4);
        let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 2.0 * rng.normal()).collect()).collect();
        let vars: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 0.1 + rng.uniform()).collect()).collect();
        let g = moment_match(&weights, &means, &vars)?;
        let probe = Probe::new(d, rng);
        let n = 200_000;
        let mut vals = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        for _ in 0..n {
            let u = rng.uniform();
            let mut c = k - 1;
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    c = i;
                    break;
                }
            }
            for j in 0..d {
                z[j] = means[c][j] + vars[c][j].sqrt() * rng.normal();
            }
            vals.push(probe.eval(&z));
        }
        let (m, se) = mean_se(&vals);
        let target = probe.expected(g.mean(), g.var());
        worst = worst.max((m - target).abs() / se);
        if !within(m, target, se) {
            fails += 1;
        }
    }
    Ok((fails, worst))
}

fn oracle_encoders(rng: &mut RngStream) -> Result<(usize, f64)> {
    let mut fails = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = 1 + rng.below(4);
        let p = 1 + rng.below(8);
        let lambda = random_lambda(d, p, rng);
        let heads = random_heads(d, p, rng);
        let stats = marginal_encoder(&heads, &lambda)?;
        let probe = Probe::new(d, rng);
        let n = 100_000;
        let mut vals = Vec::with_capacity(n);
        let mut eps = vec![0.0; d];
        for _ in 0..n {
            let (w, u) = lambda.sample_weights(rng);
            let q = conditional_encoder(&heads, &w, &u)?;
            rng.fill_normal(&mut eps);
            vals.push(probe.eval(&q.transform(&eps)));
        }
        let (m, se) = mean_se(&vals);
        let target = probe.expected(&stats.m, &stats.v);
        worst = worst.max((m - target).abs() / se);
        if !within(m, target, se) {
            fails += 1;
        }
    }
    Ok((fails, worst))
}

fn oracle_expected_kl(rng: &mut RngStream) -> Result<(usize, f64)> {
    let mut fails = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = 1 + rng.below(4);
        let p = 1 + rng.below(8);
        let lambda = random_lambda(d, p, rng);
        let heads = random_heads(d, p, rng);
        let nested: Vec<f64> = (0..50_000)
            .map(|_| {
                let (w, u) = lambda.sample_weights(rng);
                let q = conditional_encoder(&heads, &w, &u).unwrap();
                kl_to_standard(q.mean(), q.var())
            })
            .collect();
        let (m1, se1) = mean_se(&nested);
        let reps: Vec<f64> = (0..20).map(|_| expected_kl_to_prior(&heads, &lambda, rng, 20_000).unwrap()).collect();
        let (m2, se2) = mean_se(&reps);
        let se = se1.hypot(se2);
        worst = worst.max((m1 - m2).abs() / se);
        if !within(m1, m2, se) {
            fails += 1;
        }
    }
    Ok((fails, worst))
}

fn oracle_weight_kl(rng: &mut RngStream) -> Result<(usize, f64)> {
    let mut fails = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = 1 + rng.below(4);
        let p = 1 + rng.below(8);
        let lambda = random_lambda(d, p, rng);
        let vals: Vec<f64> = (0..100_000)
            .map(|_| {
                let (w, u) = lambda.sample_weights(rng);
                let mut log_ratio = 0.0;
                for j in 0..d {
                    for (x, mu, l) in [
                        (w.row(j), lambda.mu(j), lambda.sigma_lower(j)),
                        (u.row(j), lambda.eta(j), lambda.gamma_lower(j)),
                    ] {
                        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
                        let xi = solve_lower(&l, p, &diff);
                        let log_det: f64 = (0..p).map(|i| l[i * p + i].ln()).sum();
                        let log_q = -0.5 * xi.iter().map(|v| v * v).sum::<f64>() - log_det;
                        let log_p = -0.5 * x.iter().map(|v| v * v).sum::<f64>();
                        log_ratio += log_q - log_p;
                    }
                }
                log_ratio
            })
            .collect();
        let (m, se) = mean_se(&vals);
        let exact = weight_kl(&lambda);
        worst = worst.max((m - exact).abs() / se);
        if !within(m, exact, se) {
            fails += 1;
        }
    }
    Ok((fails, worst))
}

/// Linear decoder `x = zᵀA + c` with isotropic noise.
fn linear_decoder(d: usize, big_d: usize, obs_var: f64, rng: &mut RngStream) -> Decoder {
    let mut net = Mlp::new(&[d, big_d], Activation::Identity, Activation::Identity).unwrap();
    let (w, b) = net.layer_mut(0);
    w.iter_mut().for_each(|v| *v = rng.normal());
    b.iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    Decoder::new(net, obs_var).unwrap()
}

fn oracle_iwae(rng: &mut RngStream) -> Result<(usize, f64)> {
    let mut fails = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let d = 1 + rng.below(4);
        let big_d = 1 + rng.below(4);
        let obs_var = 0.5 + rng.uniform();
        let dec = linear_decoder(d, big_d, obs_var, rng);
        let (a, c) = dec.net.layer(0);
        // x ~ N(c, AᵀA + σ²I)
        let mut cov = vec![0.0; big_d * big_d];
        for r in 0..big_d {
            for s in 0..big_d {
                cov[r * big_d + s] = (0..d).map(|k| a[k * big_d + r] * a[k * big_d + s]).sum::<f64>()
                    + if r == s { obs_var } else { 0.0 };
            }
        }
        let l = cholesky(&cov, big_d);
        let xi: Vec<f64> = (0..big_d).map(|_| rng.normal()).collect();
        let x: Vec<f64> = (0..big_d).map(|r| c[r] + (0..=r).map(|k| l[r * big_d + k] * xi[k]).sum::<f64>()).collect();
        let diff: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
        let y = solve_lower(&l, big_d, &diff);
        let log_px = -0.5 * y.iter().map(|v| v * v).sum::<f64>()
            - (0..big_d).map(|i| l[i * big_d + i].ln()).sum::<f64>()
            - 0.5 * big_d as f64 * (2.0 * std::f64::consts::PI).ln();
        // posterior precision I + A Aᵀ/σ², mean from the normal equations
        let mut prec = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                prec[i * d + k] = (0..big_d).map(|r| a[i * big_d + r] * a[k * big_d + r]).sum::<f64>() / obs_var
                    + if i == k { 1.0 } else { 0.0 };
            }
        }
        let lp = cholesky(&prec, d);
        let rhs: Vec<f64> =
            (0..d).map(|i| (0..big_d).map(|r| a[i * big_d + r] * diff[r]).sum::<f64>() / obs_var).collect();
        let t = solve_lower(&lp, d, &rhs);
        let mut mean = vec![0.0; d];
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| lp[k * d + i] * mean[k]).sum();
            mean[i] = (t[i] - s) / lp[i * d + i];
        }
        // diagonal proposal at 1.5x the posterior marginal variances
        let var: Vec<f64> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                1.5 * solve_lower(&lp, d, &e).iter().map(|v| v * v).sum::<f64>()
            })
            .collect();
        let q = DiagGaussian::new(mean, var)?;
        let reps: Vec<f64> = (0..10).map(|_| iwae(&x, &q, &dec, 10_000, rng).unwrap()).collect();
        let (m, se) = mean_se(&reps);
        worst = worst.max((m - log_px).abs());
        if (m - log_px).abs() > 0.01 || m > log_px + 3.0 * se.max(1e-12) + 1e-9 {
            fails += 1;
        }
    }
    Ok((fails, worst))
}

fn criterion_1() -> Result<Outcome> {
    let rng = RngStream::new(2020).split(101);
    let checks: [(&str, Oracle); 5] = [
        ("moment matching", oracle_moment_matching),
        ("conditional/marginal encoder", oracle_encoders),
        ("expected KL", oracle_expected_kl),
        ("weight KL", oracle_weight_kl),
        ("IWAE", oracle_iwae),
    ];
    let mut parts = Vec::new();
    let mut total_fails = 0;
    for (i, (name, f)) in checks.into_iter().enumerate() {
        let (fails, worst) = f(&mut rng.split(i as u64))?;
        total_fails += fails;
        let unit = if name == "IWAE" { "nats" } else { "SE" };
        parts.push(format!("{name} {}/{INSTANCES} (worst {worst:.3} {unit})", INSTANCES - fails));
    }
    outcome(total_fails == 0, parts.join("; "))
}

// 2. gradient integrity

fn criterion_2() -> Result<Outcome> {
    let cfg = TrainConfig { latent_dim: 2, feature_dim: 4, hidden: 8, mc_train: 4, seed: 11, ..TrainConfig::default() };
    let mut model = Model::new(&cfg, 6)?;
    let mut rng = RngStream::new(12);
    // move away from the initialization so every term is exercised
    for g in ParamGroup::ALL {
        if let Some(p) = model.group_mut(g) {
            p.iter_mut().for_each(|v| *v += 0.2 * rng.normal());
        }
    }
    model.lambda.as_mut().unwrap().canonicalize(None);
    let x = Matrix::from_vec(2, 6, (0..12).map(|_| rng.uniform()).collect())?;
    let noise = ElboNoise::draw(&RngStream::new(13), 2, 2, 4);
    let n_total = 50;
    let grads = elbo_batch(&model, &x, &noise, n_total, true, true)?.1.unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_strict: f64 = 0.0;
    let mut count = 0;
    for g in ParamGroup::ALL {
        let analytic = grads.group(g).unwrap();
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.group_mut(g).unwrap()[k] += h;
            let mut minus = model.clone();
            minus.group_mut(g).unwrap()[k] -= h;
            let fp = elbo_batch(&plus, &x, &noise, n_total, false, false)?.0.elbo;
            let fm = elbo_batch(&minus, &x, &noise, n_total, false, false)?.0.elbo;
            let numeric = (fp - fm) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            worst = worst.max((a - numeric).abs() / scale.max(1e-3));
            if scale > 1e-3 {
                worst_strict = worst_strict.max((a - numeric).abs() / scale);
            }
            count += 1;
        }
    }
    outcome(
        worst < 1e-4,
        format!(
            "{count} parameters over 5 groups; max rel err {worst:.2e} (|g| floored at 1e-3), \
             {worst_strict:.2e} over gradients above 1e-3"
        ),
    )
}

// 3. VAE reduction

fn criterion_3() -> Result<Outcome> {
    let splits = mnist_splits()?;
    let x = &splits.train.inputs;
    let vae_cfg = TrainConfig { mode: Mode::Vae, seed: 5, ..TrainConfig::default() };
    // factors far below double precision relative to the encoder outputs
    let gp_cfg = TrainConfig { mode: Mode::Gpvae, freeze_lambda: true, lambda_init_scale: 1e-30, ..vae_cfg.clone() };
    let mut a = TrainState::new(&vae_cfg, x.cols(), x.rows())?;
    let mut b = TrainState::new(&gp_cfg, x.cols(), x.rows())?;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    RngStream::new(5).split(tags::SHUFFLE).shuffle(&mut order);
    let bs = vae_cfg.batch_size;
    let mut elbo_diff: f64 = 0.0;
    for t in 0..100 {
        let start = (t * bs) % (x.rows() - bs);
        let xb = x.select_rows(&order[start..start + bs]);
        let noise = ElboNoise::draw(&a.batch_stream(0, t), bs, vae_cfg.latent_dim, vae_cfg.mc_train);
        let ea = a.step(&xb, &noise)?;
        let eb = b.step(&xb, &noise)?;
        elbo_diff = elbo_diff.max((ea.elbo - (eb.elbo + eb.weight_kl / x.rows() as f64)).abs());
    }
    let mut param_diff: f64 = 0.0;
    for g in [ParamGroup::Trunk, ParamGroup::HeadBc, ParamGroup::Decoder] {
        let (u, v) = (a.model.group(g).unwrap(), b.model.group(g).unwrap());
        param_diff = u.iter().zip(v).map(|(p, q)| (p - q).abs()).fold(param_diff, f64::max);
    }
    outcome(
        param_diff < 1e-10,
        format!(
            "MNIST, d=10, 100 Adam steps: max |Δθ| {param_diff:.2e}; max per-step ELBO difference \
             (constant weight term removed) {elbo_diff:.2e}"
        ),
    )
}

// 4. conjugate ground truth

fn criterion_4() -> Result<Outcome> {
    let lg = LinearGaussian { slope: 1.5, obs_var: 0.5 };
    let dec = lg.decoder();
    let mut worst_iwae: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for (i, &x) in [-2.0, -0.7, 0.0, 0.8, 2.5].iter().enumerate() {
        let (pm, pv) = lg.posterior(x);
        let q = DiagGaussian::new(vec![pm + 0.2], vec![1.5 * pv])?;
        let est = iwae(&[x], &q, &dec, 10_000, &mut RngStream::new(40 + i as u64))?;
        worst_iwae = worst_iwae.max((est - lg.log_evidence(x)).abs());
        let init = InstanceVarParams { mean: vec![0.0], log_std: vec![0.0] };
        let schedule = StepSchedule { step_size: 0.05, decay: Some(50.0) };
        let out = svi_optimize(&[x], &dec, &init, 200_000, schedule, &mut RngStream::new(50 + i as u64))
            .map_err(|a| a.error)?;
        worst_mean = worst_mean.max((out.mean[0] - pm).abs());
        worst_std = worst_std.max((out.log_std[0].exp() - pv.sqrt()).abs());
    }
    outcome(
        worst_iwae < 0.01 && worst_mean < 1e-2 && worst_std < 1e-2,
        format!(
            "5 observations: max |IWAE(10⁴) - log p(x)| {worst_iwae:.4} nats; SVI (2·10⁵ steps) max \
             |Δmean| {worst_mean:.4}, max |Δstd| {worst_std:.4}"
        ),
    )
}

// 5 and 9. MNIST d=10 runs

struct MnistRun {
    seed: u64,
    mode: Mode,
    /// Per-test-instance IWAE for K = 1, 10, 100.
    iwae: [Vec<f64>; 3],
}

const MNIST_EPOCHS: usize = 60;

fn mnist_runs() -> Result<&'static [MnistRun]> {
    static RUNS: OnceLock<Vec<MnistRun>> = OnceLock::new();
    if let Some(r) = RUNS.get() {
        return Ok(r);
    }
    let splits = mnist_splits()?;
    let mut runs = Vec::new();
    for seed in 1..=3 {
        for mode in [Mode::Gpvae, Mode::Vae] {
            let cfg = TrainConfig { mode, latent_dim: 10, epochs: MNIST_EPOCHS, seed, ..TrainConfig::default() };
            let out = train(&cfg, &splits.train.inputs, &splits.val.inputs, |_, _, _| {})
                .map_err(|d| d.error)
                .with_context(|| format!("training {mode:?} seed {seed}"))?;
            let eval = RngStream::new(seed).split(tags::EVAL);
            let mut iwae = [Vec::new(), Vec::new(), Vec::new()];
            for (slot, k) in iwae.iter_mut().zip([1, 10, 100]) {
                *slot = iwae_dataset(&out.best_model, &splits.test.inputs, k, &eval.split(k as u64))?;
            }
            runs.push(MnistRun { seed, mode, iwae });
        }
    }
    Ok(RUNS.get_or_init(|| runs))
}

fn criterion_5() -> Result<Outcome> {
    let runs = mnist_runs()?;
    let mut wins = 0;
    let (mut gp_total, mut vae_total) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 1..=3 {
        let get = |mode| runs.iter().find(|r| r.seed == seed && r.mode == mode).unwrap();
        let gp = mean_se(&get(Mode::Gpvae).iwae[2]).0;
        let vae = mean_se(&get(Mode::Vae).iwae[2]).0;
        gp_total += gp / 3.0;
        vae_total += vae / 3.0;
        if gp >= vae {
            wins += 1;
        }
        per_seed.push(format!("seed {seed}: {gp:.2} vs {vae:.2}"));
    }
    outcome(
        gp_total >= vae_total && wins >= 2,
        format!(
            "IWAE-100 GPVAE vs VAE, {MNIST_EPOCHS} epochs, 5k train: {}; mean {gp_total:.2} vs {vae_total:.2}, \
             GPVAE wins {wins}/3",
            per_seed.join(", ")
        ),
    )
}

fn criterion_9() -> Result<Outcome> {
    let runs = mnist_runs()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let mut worst_z = f64::INFINITY;
        for (lo, hi) in [(0, 1), (1, 2)] {
            let diffs: Vec<f64> = r.iwae[hi].iter().zip(&r.iwae[lo]).map(|(a, b)| a - b).collect();
            let (m, se) = mean_se(&diffs);
            worst_z = worst_z.min(m / se);
            if m < -3.0 * se {
                ok = false;
            }
        }
        let means: Vec<String> = r.iwae.iter().map(|v| format!("{:.2}", mean_se(v).0)).collect();
        parts.push(format!("{:?} s{}: {} (min z {worst_z:.1})", r.mode, r.seed, means.join(" ≤ ")));
    }
    outcome(ok, format!("K = 1, 10, 100 on 6 models: {}", parts.join("; ")))
}

// 6. amortization gap

fn criterion_6() -> Result<Outcome> {
    let mut gp_gaps = Vec::new();
    let mut vae_gaps = Vec::new();
    let mut aborted = 0;
    let mut parts = Vec::new();
    let mut paired = Vec::new();
    for seed in 1..=3u64 {
        let ds = gen_synthetic("pinwheel", 2400, 0)?;
        let splits = ds.split(0, 2000, 200, 200)?;
        let x = splits.test.inputs.row_range(0, 100);
        let mut row = Vec::new();
        for mode in [Mode::Gpvae, Mode::Vae] {
            let cfg = TrainConfig {
                mode,
                latent_dim: 2,
                hidden: 64,
                obs_var: 0.01,
                epochs: 200,
                seed,
                ..TrainConfig::default()
            };
            let out = train(&cfg, &splits.train.inputs, &splits.val.inputs, |_, _, _| {}).map_err(|d| d.error)?;
            let enc = out.best_model.encode_batch(&x)?;
            let q = (0..x.rows())
                .map(|i| DiagGaussian::new(enc.mean.row(i).to_vec(), enc.var.row(i).to_vec()))
                .collect::<Result<Vec<_>, _>>()?;
            // same SVI and evaluation noise for both schemes
            let report = amortization_gap(
                &x,
                &out.best_model.decoder,
                &q,
                &GapConfig::default(),
                &RngStream::new(seed).split(tags::EVAL),
            )?;
            aborted += report.aborted;
            row.push(report.mean);
            let gaps: Vec<f64> = report.rows.iter().map(|r| r.gap).collect();
            match mode {
                Mode::Gpvae => paired.extend(gaps),
                Mode::Vae => {
                    let base = paired.len() - gaps.len();
                    paired[base..].iter_mut().zip(&gaps).for_each(|(g, v)| *g -= v);
                }
            }
            match mode {
                Mode::Gpvae => gp_gaps.push(report.mean),
                Mode::Vae => vae_gaps.push(report.mean),
            }
        }
        parts.push(format!("seed {seed}: {:.4} vs {:.4}", row[0], row[1]));
    }
    let (diff, diff_se) = mean_se(&paired);
    let gp = gp_gaps.iter().sum::<f64>() / 3.0;
    let vae = vae_gaps.iter().sum::<f64>() / 3.0;
    outcome(
        gp <= vae && aborted == 0,
        format!(
            "pinwheel, d=2, σx²=0.01, 100 test points, 500-step SVI: gap GPVAE vs VAE {}; mean {gp:.4} vs {vae:.4}; \
             paired difference {diff:.4} ± {diff_se:.4} (SE); {aborted} aborted SVI runs",
            parts.join(", ")
        ),
    )
}

// 7. uncertainty alignment

fn criterion_7() -> Result<Outcome> {
    let splits = mnist_splits()?;
    let x = splits.test.inputs.row_range(0, 100);
    let mut positive = 0;
    let mut parts = Vec::new();
    for seed in 1..=3u64 {
        let cfg = TrainConfig { latent_dim: 2, epochs: MNIST_EPOCHS, seed, ..TrainConfig::default() };
        let out = train(&cfg, &splits.train.inputs, &splits.val.inputs, |_, _, _| {}).map_err(|d| d.error)?;
        let study = gpvae_core::eval::uncertainty_study(&out.best_model, &x, Default::default(), |_, _| {})?;
        let u: Vec<f64> = study.rows.iter().map(|r| r.uncertainty).collect();
        let g: Vec<f64> = study.rows.iter().map(|r| r.non_gaussianity).collect();
        ensure!(study.spearman == spearman(&u, &g));
        match study.spearman {
            Some(r) if r > 0.0 => {
                positive += 1;
                parts.push(format!("seed {seed}: {r:.3}"));
            }
            Some(r) => parts.push(format!("seed {seed}: {r:.3}")),
            None => parts.push(format!("seed {seed}: undefined")),
        }
    }
    outcome(
        positive >= 2,
        format!("MNIST, d=2, 100 test points, 200² grid: Spearman {}; positive in {positive}/3", parts.join(", ")),
    )
}

// 8. timing

fn criterion_8() -> Result<Outcome> {
    let splits = mnist_splits()?;
    let gp_cfg = TrainConfig { latent_dim: 50, seed: 3, ..TrainConfig::default() };
    let vae_cfg = TrainConfig { mode: Mode::Vae, ..gp_cfg.clone() };
    let dim = splits.test.dim();
    let (gp, vae) = (Model::new(&gp_cfg, dim)?, Model::new(&vae_cfg, dim)?);
    let settings = BenchSettings::default();
    let gp_row = bench_inference(&gp, &splits.test.inputs, &BenchSettings { sa_steps: vec![], ..settings.clone() });
    let sa_rows = bench_inference(&vae, &splits.test.inputs, &settings);
    let gp_ms = gp_row[0].mean_ms;
    let sa: Vec<(usize, f64)> = sa_rows.iter().filter(|r| r.method == "sa").map(|r| (r.k, r.mean_ms)).collect();
    let sa4 = sa.iter().find(|(k, _)| *k == 4).map(|s| s.1).context("SA(4) timed")?;
    let monotone = sa.windows(2).all(|w| w[1].1 > w[0].1);
    let listing: Vec<String> = sa.iter().map(|(k, ms)| format!("SA({k}) {ms:.2}")).collect();
    outcome(
        gp_ms < sa4 && monotone,
        format!("d=50, batch 128, 5 reps, ms/batch: GPVAE {gp_ms:.2}; {}", listing.join(", ")),
    )
}

// 10. CLI reproducibility

fn run_cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_gpvae")).args(args).output()?;
    ensure!(out.status.success(), "gpvae {:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn write_config(dir: &Path, epochs: usize) -> Result<PathBuf> {
    let cfg = serde_json::json!({
        "output_dir": "out",
        "data": {"source": "synthetic", "kind": "pinwheel", "n_train": 400, "n_val": 50, "n_test": 40, "seed": 3},
        "train": {"latent_dim": 2, "hidden": 32, "obs_var": 0.01, "epochs": epochs, "batch_size": 64, "seed": 9},
        "eval": {"iwae_samples": [1, 10]},
        "gap": {"instances": 10},
        "uncertainty": {"instances": 10, "resolution": 60}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg)?)?;
    Ok(path)
}

/// CSV text with timing columns removed.
fn csv_without_timing(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| header[i] != "wall_ms").collect();
    let mut out = String::new();
    for line in text.lines() {
        let cells: Vec<&str> = line.split(',').collect();
        out.push_str(&keep.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    Ok(out)
}

const ARTIFACTS: [&str; 6] = [
    "train/train_log.csv",
    "eval/iwae.csv",
    "gap/gap.csv",
    "uncertainty/uncertainty.csv",
    "uncertainty/summary.csv",
    "train/best.ckpt",
];

fn criterion_10() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let mut roots = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir)?;
        let cfg = write_config(&dir, 6)?;
        let cfg = cfg.to_str().unwrap();
        for cmd in ["train", "eval", "gap", "uncertainty"] {
            run_cli(&[cmd, "--config", cfg])?;
        }
        roots.push(dir.join("out"));
    }
    let mut mismatches = Vec::new();
    for rel in ARTIFACTS {
        let (a, b) = (roots[0].join(rel), roots[1].join(rel));
        let same = if rel.ends_with(".csv") {
            csv_without_timing(&a)? == csv_without_timing(&b)?
        } else {
            std::fs::read(&a)? == std::fs::read(&b)?
        };
        if !same {
            mismatches.push(rel);
        }
    }
    // interrupted run: 3 epochs, then resumed to 6
    let dir = tmp.path().join("c");
    std::fs::create_dir_all(&dir)?;
    let cfg = write_config(&dir, 3)?;
    run_cli(&["train", "--config", cfg.to_str().unwrap()])?;
    let cfg = write_config(&dir, 6)?;
    run_cli(&["train", "--config", cfg.to_str().unwrap(), "--resume"])?;
    let resumed = dir.join("out");
    for rel in ["train/state.ckpt", "train/best.ckpt"] {
        if std::fs::read(resumed.join(rel))? != std::fs::read(roots[0].join(rel))? {
            mismatches.push(rel);
        }
    }
    if csv_without_timing(&resumed.join("train/train_log.csv"))?
        != csv_without_timing(&roots[0].join("train/train_log.csv"))?
    {
        mismatches.push("resumed train_log.csv");
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "train/eval/gap/uncertainty twice: identical CSVs (wall_ms excluded) and checkpoints; resumed run bit-identical"
                .to_owned()
        } else {
            format!("differences in {mismatches:?}")
        },
    )
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("oracle suite", criterion_1),
        ("gradient integrity", criterion_2),
        ("VAE reduction", criterion_3),
        ("conjugate ground truth", criterion_4),
        ("likelihood direction", criterion_5),
        ("amortization gap", criterion_6),
        ("uncertainty alignment", criterion_7),
        ("timing direction", criterion_8),
        ("IWAE monotonicity", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut passed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".to_owned()),
        };
        passed += usize::from(pass);
        println!("{} [{id}] {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {passed}/{ran} criteria passed");
}
