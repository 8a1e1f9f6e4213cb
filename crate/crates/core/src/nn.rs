//! Parameter containers shared by every network in the crate.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sapnet_autograd::{ConvOptions, Tape, Tensor, Var};

/// How a network's tensors enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Parameters receive gradients.
    Trainable,
    /// Parameters are constants; gradients still pass through to the inputs.
    Frozen,
}

impl Binding {
    pub fn bind<'t>(self, tape: &'t Tape, tensor: &Tensor) -> Var<'t> {
        match self {
            Binding::Trainable => tape.param(tensor),
            Binding::Frozen => tape.constant(tensor),
        }
    }
}

/// Square convolution kernel `[out, in, k, k]` with an `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros([out_ch]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for weight and bias, the usual default for
    /// freshly constructed conv layers.
    pub fn uniform(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Tensor::from_fn([out_ch, in_ch, kernel, kernel], |_| dist.sample(rng)),
            bias: Tensor::from_fn([out_ch], |_| dist.sample(rng)),
        }
    }

    /// Weights from `N(0, std^2)`, zero bias.
    pub fn gaussian(in_ch: usize, out_ch: usize, kernel: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Tensor::from_fn([out_ch, in_ch, kernel, kernel], |_| dist.sample(rng)),
            bias: Tensor::zeros([out_ch]),
        }
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero bias.
    pub fn he_normal(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Self::gaussian(in_ch, out_ch, kernel, std, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward<'t>(&self, x: Var<'t>, opts: ConvOptions, binding: Binding) -> Var<'t> {
        let tape = x.tape();
        x.conv2d(
            binding.bind(tape, &self.weight),
            Some(binding.bind(tape, &self.bias)),
            opts,
        )
    }
}

/// Dense layer `[out, in]` plus `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_dim, in_dim]),
            bias: Tensor::zeros([out_dim]),
        }
    }

    pub fn uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Tensor::from_fn([out_dim, in_dim], |_| dist.sample(rng)),
            bias: Tensor::from_fn([out_dim], |_| dist.sample(rng)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward<'t>(&self, x: Var<'t>, binding: Binding) -> Var<'t> {
        let tape = x.tape();
        x.linear(binding.bind(tape, &self.weight), binding.bind(tape, &self.bias))
    }
}
