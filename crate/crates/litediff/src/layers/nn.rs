use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::layers::store::{he_normal, Binding, ParamId, ParamStore};

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Largest group count <= min(8, channels) that divides the channel count.
pub fn default_groups(channels: usize) -> usize {
    let cap = channels.min(8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

pub fn activation(tape: &mut Tape, kind: Activation, x: Var) -> Result<Var> {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Mean of squared differences over all elements.
pub fn mse_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.mse(a, b)
}

/// Mean binary cross-entropy against a scalar target in [0,1]. Inputs are
/// expected to come from the clamped sigmoid, which keeps them inside (0,1).
pub fn bce_loss(tape: &mut Tape, p: Var, target: f64) -> Result<Var> {
    tape.bce(p, target)
}

/// 2-D convolution layer owning its kernel and bias entries.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = store.register(
            &format!("{name}.w"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            trainable,
        )?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[out_ch]), trainable)?;
        Ok(Self { w, b, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, bind.var(self.w), bind.var(self.b), self.stride, self.pad)
    }
}

/// Fully connected layer: (N, in) -> (N, out).
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
        trainable: bool,
    ) -> Result<Self> {
        let w = store.register(
            &format!("{name}.w"),
            he_normal(rng, &[in_f, out_f], in_f),
            trainable,
        )?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[out_f]), trainable)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind.var(self.w))?;
        tape.add_row_bias(y, bind.var(self.b))
    }
}

/// Group normalization with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        trainable: bool,
    ) -> Result<Self> {
        let gamma = store.register(
            &format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            trainable,
        )?;
        let beta = store.register(&format!("{name}.beta"), Tensor::zeros(&[channels]), trainable)?;
        Ok(Self {
            gamma,
            beta,
            groups: default_groups(channels),
            eps: GROUP_NORM_EPS,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        tape.group_norm(x, bind.var(self.gamma), bind.var(self.beta), self.groups, self.eps)
    }
}
