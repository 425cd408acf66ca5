//! Parameterized layers shared by the context modules.

use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::param::{InitSpec, ParamId, ParamKind, ParamRegistry, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Shape;

/// Joins a parameter path segment onto a prefix.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.into()
    } else {
        format!("{prefix}/{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, variance-preserving through a ReLU.
    HeUniform,
    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, variance-preserving for a linear map.
    LecunUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, bias-on convolution with "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weights(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }

    pub fn params(&self) -> u64 {
        self.weights()
            + if self.bias {
                self.out_channels as u64
            } else {
                0
            }
    }

    /// Multiply-accumulates for one image whose output map is `h_out x w_out`.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        self.weights() * (h_out * w_out) as u64
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |s| {
            crate::ops::conv2d_output_size(s, self.kernel, self.stride, self.padding).unwrap_or(0)
        };
        (f(h), f(w))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        spec: ConvSpec,
        init: WeightInit,
    ) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let winit = match init {
            WeightInit::FanInUniform => InitSpec::fan_in_uniform(fan_in),
            WeightInit::HeUniform => InitSpec::Uniform {
                bound: libm::sqrt(6.0 / fan_in.max(1) as f64),
            },
            WeightInit::LecunUniform => InitSpec::Uniform {
                bound: libm::sqrt(3.0 / fan_in.max(1) as f64),
            },
            WeightInit::Zeros => InitSpec::Zeros,
        };
        let weight = reg.register(
            path(prefix, "weight"),
            Shape::new([
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
            ]),
            ParamKind::Weight,
            winit,
        )?;
        let bias = if spec.bias {
            Some(reg.register(
                path(prefix, "bias"),
                Shape::new([spec.out_channels]),
                ParamKind::Bias,
                InitSpec::Zeros,
            )?)
        } else {
            None
        };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

/// Per-channel `x * scale + shift` with no running statistics; frozen by default.
#[derive(Clone, Debug)]
pub struct FrozenAffine {
    pub channels: usize,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl FrozenAffine {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, channels: usize) -> Result<Self> {
        let scale = reg.register_frozen(
            path(prefix, "scale"),
            Shape::new([channels]),
            ParamKind::NormAffine,
            InitSpec::Constant { value: 1.0 },
        )?;
        let shift = reg.register_frozen(
            path(prefix, "shift"),
            Shape::new([channels]),
            ParamKind::NormAffine,
            InitSpec::Zeros,
        )?;
        Ok(FrozenAffine {
            channels,
            scale,
            shift,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = self.channels;
        let s = tape.param(store, self.scale);
        let s = tape.reshape(s, [1, c, 1, 1])?;
        let b = tape.param(store, self.shift);
        let b = tape.reshape(b, [1, c, 1, 1])?;
        let y = tape.mul(x, s)?;
        tape.add(y, b)
    }
}
