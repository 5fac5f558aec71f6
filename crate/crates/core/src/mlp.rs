//! Conditioner network: a ReLU MLP with one residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer `y = x·W + b`, with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// PyTorch-style default: weights and bias uniform in ±1/√in.
    pub fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let w = Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out));
        let b = Tensor::from_vec(1, fan_out, draw(fan_out));
        Self { w, b }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Tensor::zeros(fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        y
    }
}

/// MLP `[in, h, …, h, out]` with ReLU activations. The output of the first
/// hidden layer is added to the pre-activation of the last hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// Hidden layers get the default uniform init; the output layer starts
    /// at zero so the network initially outputs exactly zero.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidArgument("mlp needs at least one hidden layer".into()));
        }
        if hidden.first() != hidden.last() {
            return Err(Error::InvalidArgument(
                "first and last hidden widths must match for the residual connection".into(),
            ));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Linear::uniform(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(Linear::zeros(fan_in, output));
        Ok(Self { layers })
    }

    /// Re-draws the output layer with the default uniform init.
    pub fn randomize_output<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let last = self.layers.last_mut().expect("mlp has layers");
        *last = Linear::uniform(last.w.rows(), last.w.cols(), rng);
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").w.cols()
    }

    pub fn output_bias_mut(&mut self) -> &mut Tensor {
        &mut self.layers.last_mut().expect("mlp has layers").b
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")])
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = self.layers.len();
        let mut first: Option<Tensor> = None;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if i == n - 1 {
                return y;
            }
            if i == n - 2 && i > 0 {
                y.add_assign(first.as_ref().expect("first hidden kept"));
            }
            let y = y.map(|v| v.max(0.0));
            if i == 0 {
                first = Some(y.clone());
            }
            h = y;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Records the forward pass; `params` are the tape handles of
    /// [`Mlp::params`], in the same order.
    pub fn forward_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let n = self.layers.len();
        debug_assert_eq!(params.len(), 2 * n);
        let mut first = None;
        let mut h = x;
        for i in 0..n {
            let y = tape.matmul(h, params[2 * i]);
            let mut y = tape.add_row_bias(y, params[2 * i + 1]);
            if i == n - 1 {
                return y;
            }
            if i == n - 2 && i > 0 {
                y = tape.add(y, first.expect("first hidden kept"));
            }
            let y = tape.relu(y);
            if i == 0 {
                first = Some(y);
            }
            h = y;
        }
        unreachable!("loop returns at the output layer")
    }
}
