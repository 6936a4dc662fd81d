//! GP-priored encoder noise with the linear deep kernel.
//!
//! The encoder mean and standard deviation are `b(x) + W φᵐ` and
//! `c(x) + U φˢ`, where `φᵐ = ψᵐ(x)`, `φˢ = ψˢ(x)` are learned features and
//! the rows of `W`, `U` carry independent Gaussian posteriors
//! `wⱼ ~ N(μⱼ, Σⱼ)`, `uⱼ ~ N(ηⱼ, Γⱼ)`. Marginalizing `W`, `U` and
//! moment-matching the resulting scale mixture gives the closed-form
//! encoder `N(m(x), Diag v(x))` with
//!
//! ```text
//! mⱼ = bⱼ + μⱼᵀφᵐ
//! vⱼ = (cⱼ + ηⱼᵀφˢ)² + φˢᵀΓⱼφˢ + φᵐᵀΣⱼφᵐ
//! ```
//!
//! which expands to `cⱼ² + 2ηⱼᵀφˢ cⱼ + φᵐᵀΣⱼφᵐ + φˢᵀ(ηⱼηⱼᵀ + Γⱼ)φˢ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{CholeskyPsd, DiagGaussian};
use crate::linalg::{dot, gemm, Matrix, View};
use crate::nn::Mlp;
use crate::rng::RngStream;
use crate::VAR_FLOOR;

/// Whether the weight posteriors carry full or diagonal covariance factors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Full,
    Diagonal,
}

/// The variational parameters `Λ = {μⱼ, Σⱼ, ηⱼ, Γⱼ}`.
///
/// Stored flat, one block per latent dimension laid out as
/// `[μⱼ | Lⱼ | ηⱼ | Kⱼ]` with `Σⱼ = LⱼLⱼᵀ`, `Γⱼ = KⱼKⱼᵀ`. Factors are packed
/// row-major lower triangles (full mode) or diagonals (diagonal mode). The
/// diagonal of every factor is kept positive by [`GpVarParams::canonicalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct GpVarParams {
    d: usize,
    p: usize,
    mode: CovarianceMode,
    data: Vec<f64>,
}

/// The two feature vectors `(ψᵐ(x), ψˢ(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub phi_m: Vec<f64>,
    pub phi_s: Vec<f64>,
}

/// Network outputs for one input: GP mean functions and features.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderHeads {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub features: FeaturePair,
}

/// Moment-matched marginal encoder output with the uncertainty gauge.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStats {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Sum over `j` of `φᵐᵀΣⱼφᵐ`: the trace of the posterior covariance of `f(x)`.
    pub uncertainty_f: f64,
    /// Sum over `j` of `φˢᵀΓⱼφˢ`, the same for `h(x)`.
    pub uncertainty_h: f64,
}

impl EncoderStats {
    pub fn uncertainty(&self) -> f64 {
        self.uncertainty_f + self.uncertainty_h
    }

    pub fn to_gaussian(&self) -> DiagGaussian {
        DiagGaussian::with_floor(self.m.clone(), self.v.clone()).expect("floored variances are positive")
    }
}

fn factor_len(p: usize, mode: CovarianceMode) -> usize {
    match mode {
        CovarianceMode::Full => p * (p + 1) / 2,
        CovarianceMode::Diagonal => p,
    }
}

#[inline]
fn packed_index(i: usize, k: usize) -> usize {
    i * (i + 1) / 2 + k
}

impl GpVarParams {
    /// `μ = η = 0` and both factors `init_scale · I`.
    pub fn new(d: usize, p: usize, mode: CovarianceMode, init_scale: f64) -> Result<Self> {
        if d == 0 || p == 0 {
            return Err(Error::Contract("latent and feature dimensions must be positive".into()));
        }
        if !(init_scale > 0.0) {
            return Err(Error::Domain(format!("factor scale {init_scale} is not positive")));
        }
        let mut s = Self { d, p, mode, data: vec![0.0; d * (2 * p + 2 * factor_len(p, mode))] };
        for j in 0..d {
            for i in 0..p {
                let k = s.diag_index(i);
                let off = s.sigma_offset(j);
                s.data[off + k] = init_scale;
                let off = s.gamma_offset(j);
                s.data[off + k] = init_scale;
            }
        }
        Ok(s)
    }

    /// Full-covariance parameters from explicit blocks.
    pub fn from_blocks(
        mu: &[Vec<f64>],
        sigma: &[CholeskyPsd],
        eta: &[Vec<f64>],
        gamma: &[CholeskyPsd],
    ) -> Result<Self> {
        let d = mu.len();
        let p = mu.first().map_or(0, Vec::len);
        check_dim("sigma blocks", d, sigma.len())?;
        check_dim("eta blocks", d, eta.len())?;
        check_dim("gamma blocks", d, gamma.len())?;
        let mut s = Self::new(d, p, CovarianceMode::Full, 1.0)?;
        for j in 0..d {
            check_dim("mu", p, mu[j].len())?;
            check_dim("eta", p, eta[j].len())?;
            check_dim("sigma", p, sigma[j].dim())?;
            check_dim("gamma", p, gamma[j].dim())?;
            let off = s.mu_offset(j);
            s.data[off..off + p].copy_from_slice(&mu[j]);
            let off = s.eta_offset(j);
            s.data[off..off + p].copy_from_slice(&eta[j]);
            for i in 0..p {
                for k in 0..=i {
                    let so = s.sigma_offset(j);
                    s.data[so + packed_index(i, k)] = sigma[j].lower()[i * p + k];
                    let go = s.gamma_offset(j);
                    s.data[go + packed_index(i, k)] = gamma[j].lower()[i * p + k];
                }
            }
        }
        Ok(s)
    }

    /// The four parameter segments `(μ, L_Σ, η, L_Γ)`, each concatenated over `j`.
    pub fn segments(&self) -> [Vec<f64>; 4] {
        let mut out: [Vec<f64>; 4] = Default::default();
        for j in 0..self.d {
            out[0].extend_from_slice(self.mu(j));
            out[1].extend_from_slice(self.sigma_packed(j));
            out[2].extend_from_slice(self.eta(j));
            out[3].extend_from_slice(self.gamma_packed(j));
        }
        out
    }

    /// Inverse of [`GpVarParams::segments`].
    pub fn from_segments(d: usize, p: usize, mode: CovarianceMode, segments: [&[f64]; 4]) -> Result<Self> {
        let mut s = Self::new(d, p, mode, 1.0)?;
        let f = s.factor_len();
        check_dim("lambda.mu", d * p, segments[0].len())?;
        check_dim("lambda.sigma_factor", d * f, segments[1].len())?;
        check_dim("lambda.eta", d * p, segments[2].len())?;
        check_dim("lambda.gamma_factor", d * f, segments[3].len())?;
        for j in 0..d {
            for (off, seg, w) in [
                (s.mu_offset(j), segments[0], p),
                (s.sigma_offset(j), segments[1], f),
                (s.eta_offset(j), segments[2], p),
                (s.gamma_offset(j), segments[3], f),
            ] {
                s.data[off..off + w].copy_from_slice(&seg[j * w..(j + 1) * w]);
            }
        }
        Ok(s)
    }

    pub fn latent_dim(&self) -> usize {
        self.d
    }

    pub fn feature_dim(&self) -> usize {
        self.p
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn factor_len(&self) -> usize {
        factor_len(self.p, self.mode)
    }

    fn block_len(&self) -> usize {
        2 * self.p + 2 * self.factor_len()
    }

    fn mu_offset(&self, j: usize) -> usize {
        j * self.block_len()
    }

    fn sigma_offset(&self, j: usize) -> usize {
        self.mu_offset(j) + self.p
    }

    fn eta_offset(&self, j: usize) -> usize {
        self.sigma_offset(j) + self.factor_len()
    }

    fn gamma_offset(&self, j: usize) -> usize {
        self.eta_offset(j) + self.p
    }

    fn diag_index(&self, i: usize) -> usize {
        match self.mode {
            CovarianceMode::Full => packed_index(i, i),
            CovarianceMode::Diagonal => i,
        }
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("gp variational parameters", self.data.len(), params.len())?;
        self.data.copy_from_slice(params);
        Ok(())
    }

    pub fn mu(&self, j: usize) -> &[f64] {
        let o = self.mu_offset(j);
        &self.data[o..o + self.p]
    }

    pub fn eta(&self, j: usize) -> &[f64] {
        let o = self.eta_offset(j);
        &self.data[o..o + self.p]
    }

    /// Packed factor of `Σⱼ` (see the type docs for the layout).
    pub fn sigma_packed(&self, j: usize) -> &[f64] {
        let o = self.sigma_offset(j);
        &self.data[o..o + self.factor_len()]
    }

    pub fn gamma_packed(&self, j: usize) -> &[f64] {
        let o = self.gamma_offset(j);
        &self.data[o..o + self.factor_len()]
    }

    fn dense_lower(&self, packed: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut l = vec![0.0; p * p];
        match self.mode {
            CovarianceMode::Full => {
                for i in 0..p {
                    for k in 0..=i {
                        l[i * p + k] = packed[packed_index(i, k)];
                    }
                }
            }
            CovarianceMode::Diagonal => {
                for i in 0..p {
                    l[i * p + i] = packed[i];
                }
            }
        }
        l
    }

    pub fn sigma_lower(&self, j: usize) -> Vec<f64> {
        self.dense_lower(self.sigma_packed(j))
    }

    pub fn gamma_lower(&self, j: usize) -> Vec<f64> {
        self.dense_lower(self.gamma_packed(j))
    }

    pub fn sigma(&self, j: usize) -> Result<CholeskyPsd> {
        CholeskyPsd::new(self.p, self.sigma_lower(j))
    }

    pub fn gamma(&self, j: usize) -> Result<CholeskyPsd> {
        CholeskyPsd::new(self.p, self.gamma_lower(j))
    }

    /// Restores positive factor diagonals.
    ///
    /// `Σ = LLᵀ` is unchanged when a column of `L` is negated, so a factor
    /// whose diagonal entry crossed zero during an update is reflected back.
    /// `first_moment`, if given, is an optimizer moment aligned with
    /// [`GpVarParams::params`] and is reflected along with the parameters.
    pub fn canonicalize(&mut self, mut first_moment: Option<&mut [f64]>) {
        let p = self.p;
        for j in 0..self.d {
            for off in [self.sigma_offset(j), self.gamma_offset(j)] {
                for col in 0..p {
                    let di = off + self.diag_index(col);
                    if self.data[di] > 0.0 {
                        continue;
                    }
                    if self.data[di] == 0.0 {
                        self.data[di] = f64::MIN_POSITIVE;
                        continue;
                    }
                    let rows: Vec<usize> = match self.mode {
                        CovarianceMode::Full => (col..p).map(|i| off + packed_index(i, col)).collect(),
                        CovarianceMode::Diagonal => vec![di],
                    };
                    for idx in rows {
                        self.data[idx] = -self.data[idx];
                        if let Some(m) = first_moment.as_deref_mut() {
                            m[idx] = -m[idx];
                        }
                    }
                }
            }
        }
    }

    /// Draws `(W, U)`, each `d × p`, from `q(W, U; Λ)`.
    pub fn sample_weights(&self, rng: &mut RngStream) -> (Matrix, Matrix) {
        let (d, p) = (self.d, self.p);
        let mut w = Matrix::zeros(d, p);
        let mut u = Matrix::zeros(d, p);
        let mut xi = vec![0.0; p];
        for j in 0..d {
            rng.fill_normal(&mut xi);
            let l = self.sigma_lower(j);
            for i in 0..p {
                w.set(j, i, self.mu(j)[i] + (0..=i).map(|k| l[i * p + k] * xi[k]).sum::<f64>());
            }
            rng.fill_normal(&mut xi);
            let k = self.gamma_lower(j);
            for i in 0..p {
                u.set(j, i, self.eta(j)[i] + (0..=i).map(|t| k[i * p + t] * xi[t]).sum::<f64>());
            }
        }
        (w, u)
    }
}

fn lower_quad(l: &[f64], p: usize, x: &[f64]) -> f64 {
    // ‖Lᵀx‖²
    (0..p)
        .map(|k| {
            let s: f64 = (k..p).map(|i| l[i * p + k] * x[i]).sum();
            s * s
        })
        .sum()
}

fn check_heads(heads: &EncoderHeads, lambda: &GpVarParams) -> Result<()> {
    check_dim("b(x)", lambda.d, heads.b.len())?;
    check_dim("c(x)", lambda.d, heads.c.len())?;
    check_dim("psi_m(x)", lambda.p, heads.features.phi_m.len())?;
    check_dim("psi_s(x)", lambda.p, heads.features.phi_s.len())
}

/// The GP-posterior-marginalized encoder `q(z|x) ≈ N(m(x), Diag v(x))`.
pub fn marginal_encoder(heads: &EncoderHeads, lambda: &GpVarParams) -> Result<EncoderStats> {
    check_heads(heads, lambda)?;
    let (d, p) = (lambda.d, lambda.p);
    let (phi_m, phi_s) = (&heads.features.phi_m, &heads.features.phi_s);
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let (mut unc_f, mut unc_h) = (0.0, 0.0);
    for j in 0..d {
        let qm = lower_quad(&lambda.sigma_lower(j), p, phi_m);
        let qs = lower_quad(&lambda.gamma_lower(j), p, phi_s);
        let r = heads.c[j] + dot(lambda.eta(j), phi_s);
        m[j] = heads.b[j] + dot(lambda.mu(j), phi_m);
        v[j] = (r * r + qs + qm).max(VAR_FLOOR);
        unc_f += qm;
        unc_h += qs;
    }
    Ok(EncoderStats { m, v, uncertainty_f: unc_f, uncertainty_h: unc_h })
}

/// `q(z | x, W, U) = N(b + Wφᵐ, Diag(c + Uφˢ)²)`.
pub fn conditional_encoder(heads: &EncoderHeads, w: &Matrix, u: &Matrix) -> Result<DiagGaussian> {
    let d = heads.b.len();
    check_dim("c(x)", d, heads.c.len())?;
    check_dim("W rows", d, w.rows())?;
    check_dim("U rows", d, u.rows())?;
    check_dim("W columns", heads.features.phi_m.len(), w.cols())?;
    check_dim("U columns", heads.features.phi_s.len(), u.cols())?;
    let mean = (0..d).map(|j| heads.b[j] + dot(w.row(j), &heads.features.phi_m)).collect();
    let var = (0..d)
        .map(|j| {
            let s = heads.c[j] + dot(u.row(j), &heads.features.phi_s);
            s * s
        })
        .collect();
    DiagGaussian::with_floor(mean, var)
}

/// `E_{q(W,U)}[KL(q(z|x,W,U) ‖ N(0, I))]`.
///
/// Everything is closed form except `E[ln (cⱼ + uⱼᵀφˢ)²]`, which is
/// estimated with `samples` reparametrized draws. Since
/// `uⱼᵀφˢ ~ N(ηⱼᵀφˢ, φˢᵀΓⱼφˢ)`, each draw is the scalar
/// `cⱼ + ηⱼᵀφˢ + ‖Kⱼᵀφˢ‖ ζ` with `ζ ~ N(0, 1)`.
pub fn expected_kl_to_prior(
    heads: &EncoderHeads,
    lambda: &GpVarParams,
    rng: &mut RngStream,
    samples: usize,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("at least one Monte Carlo sample is required".into()));
    }
    let mut zeta = vec![0.0; lambda.d * samples];
    rng.fill_normal(&mut zeta);
    expected_kl_to_prior_with_noise(heads, lambda, &zeta)
}

/// As [`expected_kl_to_prior`] with explicit standard-normal noise, `d × S` row-major.
pub fn expected_kl_to_prior_with_noise(heads: &EncoderHeads, lambda: &GpVarParams, zeta: &[f64]) -> Result<f64> {
    check_heads(heads, lambda)?;
    let d = lambda.d;
    if zeta.is_empty() || zeta.len() % d != 0 {
        return Err(Error::Contract(format!("noise length {} is not a positive multiple of d = {d}", zeta.len())));
    }
    let samples = zeta.len() / d;
    let stats = marginal_encoder(heads, lambda)?;
    let mut total = 0.0;
    for j in 0..d {
        let r = heads.c[j] + dot(lambda.eta(j), &heads.features.phi_s);
        let sd = lower_quad(&lambda.gamma_lower(j), lambda.p, &heads.features.phi_s).sqrt();
        let esl = expected_sq_log(r, sd, &zeta[j * samples..(j + 1) * samples]).value;
        total += 0.5 * (stats.v[j] + stats.m[j] * stats.m[j] - 1.0 - esl);
    }
    Ok(total)
}

/// Monte Carlo estimate of `E[ln max(s², floor)]`, `s = r + sd · ζ`, with
/// its derivatives in `r` and `sd`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SqLog {
    pub value: f64,
    pub d_r: f64,
    pub d_sd: f64,
}

pub(crate) fn expected_sq_log(r: f64, sd: f64, zeta: &[f64]) -> SqLog {
    let n = zeta.len() as f64;
    if r != 0.0 {
        // relative to ln r², so a negligible sd leaves the deterministic value exact
        let t = sd / r;
        let inv = 2.0 / r;
        let (mut regular, mut rel, mut sum_inv, mut sum_z) = (0usize, 0.0, 0.0, 0.0);
        for &z in zeta {
            let s = r + sd * z;
            if s * s > VAR_FLOOR {
                let w = t * z;
                rel += 2.0 * if w > -1.0 { w.ln_1p() } else { (-1.0 - w).ln() };
                sum_inv += 1.0 / (1.0 + w);
                sum_z += z / (1.0 + w);
                regular += 1;
            } else {
                rel += VAR_FLOOR.ln();
            }
        }
        let value = (r * r).ln() * (regular as f64 / n) + rel / n;
        return SqLog { value, d_r: inv * (sum_inv / n), d_sd: inv * (sum_z / n) };
    }
    let (mut value, mut d_r, mut d_sd) = (0.0, 0.0, 0.0);
    for &z in zeta {
        let s = r + sd * z;
        let s2 = s * s;
        if s2 > VAR_FLOOR {
            value += s2.ln();
            d_r += 2.0 / s;
            d_sd += 2.0 * z / s;
        } else {
            value += VAR_FLOOR.ln();
        }
    }
    SqLog { value: value / n, d_r: d_r / n, d_sd: d_sd / n }
}

/// `Σⱼ KL(N(μⱼ, Σⱼ) ‖ N(0, I)) + KL(N(ηⱼ, Γⱼ) ‖ N(0, I))`.
pub fn weight_kl(lambda: &GpVarParams) -> f64 {
    let p = lambda.p as f64;
    let mut total = 0.0;
    for j in 0..lambda.d {
        for (mean, packed) in [(lambda.mu(j), lambda.sigma_packed(j)), (lambda.eta(j), lambda.gamma_packed(j))] {
            let trace: f64 = packed.iter().map(|v| v * v).sum();
            let log_det: f64 = (0..lambda.p).map(|i| 2.0 * packed[lambda.diag_index(i)].abs().ln()).sum();
            let mm: f64 = mean.iter().map(|v| v * v).sum();
            total += 0.5 * (trace + mm - p - log_det);
        }
    }
    total
}

/// Gradient of [`weight_kl`] w.r.t. the flat parameters, accumulated with `scale`.
pub(crate) fn weight_kl_grad(lambda: &GpVarParams, scale: f64, grad: &mut [f64]) {
    for (g, v) in grad.iter_mut().zip(&lambda.data) {
        *g += scale * v;
    }
    for j in 0..lambda.d {
        for off in [lambda.sigma_offset(j), lambda.gamma_offset(j)] {
            for i in 0..lambda.p {
                let k = off + lambda.diag_index(i);
                grad[k] -= scale / lambda.data[k];
            }
        }
    }
}

/// Linear deep kernel `k(x, x') = ψ(x)ᵀψ(x')`.
pub fn deep_kernel_cov(psi: &Mlp, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    let a = psi.forward(x)?;
    let b = psi.forward(x_prime)?;
    Ok(dot(&a, &b))
}

/// Batched evaluation of the marginal encoder, the expected KL and their
/// gradients. Rows index datapoints; `b, c` are `B × d`, `phi_m, phi_s` are `B × p`.
pub(crate) struct MarginalBatch {
    pub m: Matrix,
    /// Floored variance.
    pub v: Matrix,
    /// `c + Hφˢ`.
    r: Matrix,
    /// `φˢᵀΓⱼφˢ`.
    qs: Matrix,
    /// Per latent dimension, `Φᵐ Lⱼ` and `Φˢ Kⱼ`.
    a_m: Vec<Matrix>,
    a_s: Vec<Matrix>,
    sigma: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    floored: Vec<bool>,
    pub uncertainty_f: Vec<f64>,
    pub uncertainty_h: Vec<f64>,
}

/// Gradients w.r.t. the encoder head outputs.
pub(crate) struct HeadGrads {
    pub b: Matrix,
    pub c: Matrix,
    pub phi_m: Matrix,
    pub phi_s: Matrix,
}

fn stacked(lambda: &GpVarParams, f: impl Fn(usize) -> Vec<f64>) -> Matrix {
    let mut out = Matrix::zeros(lambda.d, lambda.p);
    for j in 0..lambda.d {
        out.row_mut(j).copy_from_slice(&f(j));
    }
    out
}

impl MarginalBatch {
    pub fn forward(lambda: &GpVarParams, b: &Matrix, c: &Matrix, phi_m: &Matrix, phi_s: &Matrix) -> Self {
        let (n, d, p) = (b.rows(), lambda.d, lambda.p);
        let mu = stacked(lambda, |j| lambda.mu(j).to_vec());
        let eta = stacked(lambda, |j| lambda.eta(j).to_vec());
        let mut m = b.clone();
        gemm(1.0, phi_m.view(), mu.view().t(), 1.0, m.as_mut_slice());
        let mut r = c.clone();
        gemm(1.0, phi_s.view(), eta.view().t(), 1.0, r.as_mut_slice());
        let sigma: Vec<Vec<f64>> = (0..d).map(|j| lambda.sigma_lower(j)).collect();
        let gamma: Vec<Vec<f64>> = (0..d).map(|j| lambda.gamma_lower(j)).collect();
        let mut a_m = Vec::with_capacity(d);
        let mut a_s = Vec::with_capacity(d);
        let mut qm = Matrix::zeros(n, d);
        let mut qs = Matrix::zeros(n, d);
        for j in 0..d {
            let mut am = Matrix::zeros(n, p);
            gemm(1.0, phi_m.view(), View::new(&sigma[j], p, p), 0.0, am.as_mut_slice());
            let mut as_ = Matrix::zeros(n, p);
            gemm(1.0, phi_s.view(), View::new(&gamma[j], p, p), 0.0, as_.as_mut_slice());
            for i in 0..n {
                qm.set(i, j, am.row(i).iter().map(|v| v * v).sum());
                qs.set(i, j, as_.row(i).iter().map(|v| v * v).sum());
            }
            a_m.push(am);
            a_s.push(as_);
        }
        let mut v = Matrix::zeros(n, d);
        let mut floored = vec![false; n * d];
        let mut unc_f = vec![0.0; n];
        let mut unc_h = vec![0.0; n];
        for i in 0..n {
            for j in 0..d {
                let rr = r.get(i, j);
                let raw = rr * rr + qs.get(i, j) + qm.get(i, j);
                if raw < VAR_FLOOR {
                    floored[i * d + j] = true;
                    v.set(i, j, VAR_FLOOR);
                } else {
                    v.set(i, j, raw);
                }
                unc_f[i] += qm.get(i, j);
                unc_h[i] += qs.get(i, j);
            }
        }
        Self { m, v, r, qs, a_m, a_s, sigma, gamma, floored, uncertainty_f: unc_f, uncertainty_h: unc_h }
    }

    /// Expected KL per row and the partial derivatives of the squared-log
    /// estimate. `zeta` is `B × d × S`.
    pub fn expected_kl(&self, zeta: &[f64], samples: usize) -> (Vec<f64>, Vec<SqLog>) {
        let (n, d) = (self.m.rows(), self.m.cols());
        let mut kl = vec![0.0; n];
        let mut parts = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let off = (i * d + j) * samples;
                let sd = self.qs.get(i, j).sqrt();
                let sl = expected_sq_log(self.r.get(i, j), sd, &zeta[off..off + samples]);
                let (m, v) = (self.m.get(i, j), self.v.get(i, j));
                kl[i] += 0.5 * (v + m * m - 1.0 - sl.value);
                parts.push(sl);
            }
        }
        (kl, parts)
    }

    /// Back-propagates objective gradients `dm`, `dv` (w.r.t. the floored
    /// variance) and `d_sq_log` (coefficient on each squared-log estimate).
    pub fn backward(
        &self,
        lambda: &GpVarParams,
        phi_m: &Matrix,
        phi_s: &Matrix,
        dm: &Matrix,
        dv: &Matrix,
        d_sq_log: &Matrix,
        sq_log: &[SqLog],
        lambda_grad: Option<&mut [f64]>,
    ) -> HeadGrads {
        let (n, d, p) = (self.m.rows(), lambda.d, lambda.p);
        let mut dr = Matrix::zeros(n, d);
        let mut dqs = Matrix::zeros(n, d);
        let mut dqm = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let k = i * d + j;
                let dvv = if self.floored[k] { 0.0 } else { dv.get(i, j) };
                let ds = d_sq_log.get(i, j);
                let r = self.r.get(i, j);
                dr.set(i, j, dvv * 2.0 * r + ds * sq_log[k].d_r);
                let sd = self.qs.get(i, j).sqrt();
                let via_sd = if sd > 0.0 { ds * sq_log[k].d_sd / (2.0 * sd) } else { 0.0 };
                dqs.set(i, j, dvv + via_sd);
                dqm.set(i, j, dvv);
            }
        }
        let mu = stacked(lambda, |j| lambda.mu(j).to_vec());
        let eta = stacked(lambda, |j| lambda.eta(j).to_vec());
        let mut d_phi_m = Matrix::zeros(n, p);
        let mut d_phi_s = Matrix::zeros(n, p);
        gemm(1.0, dm.view(), mu.view(), 0.0, d_phi_m.as_mut_slice());
        gemm(1.0, dr.view(), eta.view(), 0.0, d_phi_s.as_mut_slice());

        let mut d_mu = Matrix::zeros(d, p);
        let mut d_eta = Matrix::zeros(d, p);
        let want_lambda = lambda_grad.is_some();
        if want_lambda {
            gemm(1.0, dm.view().t(), phi_m.view(), 0.0, d_mu.as_mut_slice());
            gemm(1.0, dr.view().t(), phi_s.view(), 0.0, d_eta.as_mut_slice());
        }
        let mut d_sigma = vec![vec![0.0; p * p]; if want_lambda { d } else { 0 }];
        let mut d_gamma = vec![vec![0.0; p * p]; if want_lambda { d } else { 0 }];
        let mut scaled = Matrix::zeros(n, p);
        for j in 0..d {
            for (a, dq, factor, phi, d_phi, d_factor) in [
                (&self.a_m[j], &dqm, &self.sigma[j], phi_m, &mut d_phi_m, d_sigma.get_mut(j)),
                (&self.a_s[j], &dqs, &self.gamma[j], phi_s, &mut d_phi_s, d_gamma.get_mut(j)),
            ] {
                for i in 0..n {
                    let w = 2.0 * dq.get(i, j);
                    for (s, av) in scaled.row_mut(i).iter_mut().zip(a.row(i)) {
                        *s = w * av;
                    }
                }
                gemm(1.0, scaled.view(), View::new(factor, p, p).t(), 1.0, d_phi.as_mut_slice());
                if let Some(df) = d_factor {
                    gemm(1.0, phi.view().t(), scaled.view(), 0.0, df);
                }
            }
        }
        if let Some(g) = lambda_grad {
            for j in 0..d {
                let o = lambda.mu_offset(j);
                for (gi, v) in g[o..o + p].iter_mut().zip(d_mu.row(j)) {
                    *gi += v;
                }
                let o = lambda.eta_offset(j);
                for (gi, v) in g[o..o + p].iter_mut().zip(d_eta.row(j)) {
                    *gi += v;
                }
                for (off, dense) in [(lambda.sigma_offset(j), &d_sigma[j]), (lambda.gamma_offset(j), &d_gamma[j])] {
                    match lambda.mode {
                        CovarianceMode::Full => {
                            for i in 0..p {
                                for k in 0..=i {
                                    g[off + packed_index(i, k)] += dense[i * p + k];
                                }
                            }
                        }
                        CovarianceMode::Diagonal => {
                            for i in 0..p {
                                g[off + i] += dense[i * p + i];
                            }
                        }
                    }
                }
            }
        }
        HeadGrads { b: dm.clone(), c: dr, phi_m: d_phi_m, phi_s: d_phi_s }
    }
}
