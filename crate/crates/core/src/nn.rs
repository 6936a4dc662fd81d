//! Multilayer perceptrons with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector, laid out layer by layer as a
//! row-major `fan_in × fan_out` weight block followed by the bias. Batched
//! evaluation records a [`Tape`] which [`Mlp::backward`] consumes.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{gemm, Matrix, View};
use crate::rng::RngStream;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// LeakyReLU with negative slope 0.01.
    LeakyRelu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative; at the kink the positive-side slope is used.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

impl Mlp {
    /// Zero-initialized network; `widths` includes input and output sizes.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract("an mlp needs at least two nonzero widths".into()));
        }
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { widths: widths.to_vec(), hidden, output, params: vec![0.0; n] })
    }

    /// Weights ~ N(0, 2/fan_in), biases zero.
    pub fn init(&mut self, rng: &mut RngStream) {
        let mut offset = 0;
        for w in self.widths.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            for v in &mut self.params[offset..offset + fan_in * fan_out] {
                *v = std * rng.normal();
            }
            offset += fan_in * fan_out;
            self.params[offset..offset + fan_out].iter_mut().for_each(|b| *b = 0.0);
            offset += fan_out;
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flat parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Inverse of [`Mlp::params`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("mlp parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weight block (`fan_in × fan_out`, row-major) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (fi, fo) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        (&self.params[off..off + fi * fo], &self.params[off + fi * fo..off + fi * fo + fo])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (fi, fo) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.params[off..off + fi * fo + fo].split_at_mut(fi * fo);
        (w, rest)
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Single-input evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.input_dim(), x.len())?;
        let out = self.predict(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        Ok(out.into_vec())
    }

    /// Batched evaluation without recording a tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("mlp input width", self.input_dim(), x.cols())?;
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &h);
            let act = self.activation(l);
            if act != Activation::Identity {
                z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Batched evaluation that records what [`Mlp::backward`] needs.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        check_dim("mlp input width", self.input_dim(), x.cols())?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let z = self.affine(l, &h);
            let act = self.activation(l);
            let mut a = z.clone();
            if act != Activation::Identity {
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok((h, Tape { inputs, pre }))
    }

    fn affine(&self, layer: usize, h: &Matrix) -> Matrix {
        let (fi, fo) = (self.widths[layer], self.widths[layer + 1]);
        let (w, b) = self.layer(layer);
        let mut z = Matrix::zeros(h.rows(), fo);
        for i in 0..h.rows() {
            z.row_mut(i).copy_from_slice(b);
        }
        gemm(1.0, h.view(), View::new(w, fi, fo), 1.0, z.as_mut_slice());
        z
    }

    /// Back-propagates `d_out` (gradient w.r.t. the network output).
    ///
    /// Parameter gradients are accumulated into `grad` when given. The
    /// gradient w.r.t. the input is returned when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: Matrix,
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Matrix> {
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "gradient buffer length");
        }
        let mut delta = d_out;
        for l in (0..self.num_layers()).rev() {
            let act = self.activation(l);
            if act != Activation::Identity {
                for (d, z) in delta.as_mut_slice().iter_mut().zip(tape.pre[l].as_slice()) {
                    *d *= act.derivative(*z);
                }
            }
            let (fi, fo) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[off..off + fi * fo + fo].split_at_mut(fi * fo);
                gemm(1.0, tape.inputs[l].view().t(), delta.view(), 1.0, gw);
                for i in 0..delta.rows() {
                    for (b, d) in gb.iter_mut().zip(delta.row(i)) {
                        *b += d;
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let (w, _) = self.layer(l);
            let mut d_in = Matrix::zeros(delta.rows(), fi);
            gemm(1.0, delta.view(), View::new(w, fi, fo).t(), 0.0, d_in.as_mut_slice());
            delta = d_in;
        }
        Some(delta)
    }
}
