//! Generative side: prior, homoscedastic Gaussian decoder and the
//! surrogate likelihood `L(W, U; x)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{std_normal_log_density, DiagGaussian};
use crate::gp::{conditional_encoder, EncoderHeads};
use crate::linalg::Matrix;
use crate::nn::{Activation, Mlp, Tape};
use crate::rng::RngStream;

/// `p(x|z) = N(x; g(z), σₓ² I)` with fixed `σₓ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub net: Mlp,
    obs_var: f64,
}

impl Decoder {
    pub fn new(net: Mlp, obs_var: f64) -> Result<Self> {
        if !(obs_var > 0.0) || !obs_var.is_finite() {
            return Err(Error::Domain(format!("observation variance {obs_var} is not positive")));
        }
        Ok(Self { net, obs_var })
    }

    pub fn obs_var(&self) -> f64 {
        self.obs_var
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// `ln p(x|z)` in nats.
    pub fn log_lik(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        check_dim("decoder input", self.latent_dim(), z.len())?;
        check_dim("observation", self.data_dim(), x.len())?;
        let g = self.net.forward(z)?;
        Ok(gaussian_log_lik(x, &g, self.obs_var))
    }

    /// `ln p(xᵢ|zᵢ)` for every row. `x` may have one row, broadcast over `z`.
    pub fn log_lik_batch(&self, x: &Matrix, z: &Matrix) -> Result<Vec<f64>> {
        let g = self.net.predict(z)?;
        check_dim("observation width", self.data_dim(), x.cols())?;
        Ok((0..z.rows())
            .map(|i| gaussian_log_lik(x.row(if x.rows() == 1 { 0 } else { i }), g.row(i), self.obs_var))
            .collect())
    }

    /// Batched `ln p(xᵢ|zᵢ)` together with the gradient of
    /// `weight · Σᵢ ln p(xᵢ|zᵢ)` w.r.t. `z`. The matching parameter gradient is
    /// accumulated into `grad` when given.
    pub fn log_lik_grad(
        &self,
        x: &Matrix,
        z: &Matrix,
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<(Vec<f64>, Matrix)> {
        check_dim("observation width", self.data_dim(), x.cols())?;
        let (g, tape): (Matrix, Tape) = self.net.forward_batch(z)?;
        let n = z.rows();
        let mut ll = Vec::with_capacity(n);
        let mut d_out = Matrix::zeros(n, self.data_dim());
        let scale = weight / self.obs_var;
        for i in 0..n {
            let xi = x.row(if x.rows() == 1 { 0 } else { i });
            ll.push(gaussian_log_lik(xi, g.row(i), self.obs_var));
            for ((d, xv), gv) in d_out.row_mut(i).iter_mut().zip(xi).zip(g.row(i)) {
                *d = scale * (xv - gv);
            }
        }
        let dz = self.net.backward(&tape, d_out, grad, true).expect("input gradient requested");
        Ok((ll, dz))
    }
}

pub fn gaussian_log_lik(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let c = -0.5 * (2.0 * PI * var).ln();
    x.iter().zip(mean).map(|(x, g)| c - (x - g) * (x - g) / (2.0 * var)).sum()
}

/// `ln N(z; 0, I)`.
pub fn log_prior(z: &[f64]) -> f64 {
    std_normal_log_density(z)
}

/// `n`-sample estimate of `E_{q(z|x,W,U)}[ln p(x, z) - ln q(z|x,W,U)]`.
pub fn surrogate_elbo(
    x: &[f64],
    heads: &EncoderHeads,
    w: &Matrix,
    u: &Matrix,
    decoder: &Decoder,
    rng: &mut RngStream,
    n: usize,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("at least one Monte Carlo sample is required".into()));
    }
    let q = conditional_encoder(heads, w, u)?;
    mc_elbo(x, &q, decoder, rng, n)
}

/// Plain `n`-sample ELBO estimate for an arbitrary diagonal Gaussian `q`.
pub fn mc_elbo(x: &[f64], q: &DiagGaussian, decoder: &Decoder, rng: &mut RngStream, n: usize) -> Result<f64> {
    let d = q.dim();
    let mut z = Matrix::zeros(n, d);
    let mut eps = vec![0.0; d];
    for i in 0..n {
        rng.fill_normal(&mut eps);
        z.row_mut(i).copy_from_slice(&q.transform(&eps));
    }
    let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let ll = decoder.log_lik_batch(&xm, &z)?;
    let mut total = 0.0;
    for (i, l) in ll.iter().enumerate() {
        let zi = z.row(i);
        total += l + log_prior(zi) - q.log_density(zi);
    }
    let est = total / n as f64;
    if !est.is_finite() {
        return Err(Error::NonFinite { term: "surrogate likelihood" });
    }
    Ok(est)
}

/// One-dimensional linear-Gaussian model `z ~ N(0,1)`, `x | z ~ N(a z, σ²)`,
/// whose evidence and posterior are available in closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussian {
    pub slope: f64,
    pub obs_var: f64,
}

impl LinearGaussian {
    pub fn log_evidence(&self, x: f64) -> f64 {
        let var = self.slope * self.slope + self.obs_var;
        -0.5 * ((2.0 * PI * var).ln() + x * x / var)
    }

    /// Exact posterior `(mean, variance)` of `z | x`.
    pub fn posterior(&self, x: f64) -> (f64, f64) {
        let denom = self.slope * self.slope + self.obs_var;
        (self.slope * x / denom, self.obs_var / denom)
    }

    pub fn decoder(&self) -> Decoder {
        let mut net = Mlp::new(&[1, 1], Activation::Identity, Activation::Identity).expect("valid widths");
        net.params_mut()[0] = self.slope;
        Decoder::new(net, self.obs_var).expect("positive variance")
    }

    /// Closed-form ELBO of a Gaussian `q = N(m, s²)`.
    pub fn elbo(&self, x: f64, m: f64, s2: f64) -> f64 {
        let a = self.slope;
        let recon = -0.5 * (2.0 * PI * self.obs_var).ln() - ((x - a * m).powi(2) + a * a * s2) / (2.0 * self.obs_var);
        recon - 0.5 * (s2 + m * m - 1.0 - s2.ln())
    }
}
