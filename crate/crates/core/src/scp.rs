//! Spatial context pyramid: one gated global-context block per level.
//!
//! For a level map `P` with pixels `j`:
//!
//! ```text
//! alpha = softmax_j(w_k . P_j)                  attention over all pixels
//! ctx   = Refine(sum_j alpha_j * (w_v . P_j))   one C-vector per sample
//! a     = softmax_j(w_a . P_j)                  spatial gate
//! Q_j   = P_j + a_j * ctx
//! ```
//!
//! so `Q - P` is the rank-1 outer product of `ctx` and `a` for every sample.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{path, Conv2d, ConvSpec, FrozenAffine, WeightInit};
use crate::param::{ParamRegistry, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScpConfig {
    pub channels: usize,
    /// Pyramid levels that get a block; others pass through.
    pub levels: Vec<usize>,
    /// Channel reduction of the refinement path; 1 means a single C->C conv.
    pub reduction: usize,
}

impl Default for ScpConfig {
    fn default() -> Self {
        ScpConfig {
            channels: 256,
            levels: vec![2, 3, 4, 5, 6],
            reduction: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Refinement {
    Single(Conv2d),
    /// `C -> C/r`, frozen affine, ReLU, `C/r -> C`.
    Bottleneck {
        down: Conv2d,
        norm: FrozenAffine,
        up: Conv2d,
    },
}

impl Refinement {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Refinement::Single(conv) => conv.forward(tape, store, x),
            Refinement::Bottleneck { down, norm, up } => {
                let x = down.forward(tape, store, x)?;
                let x = norm.forward(tape, store, x)?;
                let x = tape.relu(x);
                up.forward(tape, store, x)
            }
        }
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        match self {
            Refinement::Single(c) => vec![c],
            Refinement::Bottleneck { down, up, .. } => vec![down, up],
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaBlock {
    pub channels: usize,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gate: Conv2d,
    pub refine: Refinement,
}

/// Intermediate maps of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CaBlockTrace {
    /// `N x 1 x HW` pooling weights.
    pub attention: Var,
    /// `N x 1 x H x W` spatial gate.
    pub gate: Var,
    /// `N x C x 1 x 1` refined context vector.
    pub context: Var,
    pub output: Var,
}

/// Softmax over every pixel of an `N x 1 x H x W` logit map, returned as `N x 1 x HW`.
fn spatial_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (n, _, h, w) = tape.shape(logits).nchw().expect("conv output is NCHW");
    let flat = tape.reshape(logits, [n, 1, h * w])?;
    tape.softmax(flat, 2)
}

impl CaBlock {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "cablock",
                format!("channels {channels} must be a positive multiple of reduction {reduction}"),
            ));
        }
        let c = channels;
        let key = Conv2d::new(
            reg,
            &path(prefix, "key"),
            ConvSpec::same(c, 1, 1),
            WeightInit::FanInUniform,
        )?;
        let value = Conv2d::new(
            reg,
            &path(prefix, "value"),
            ConvSpec::same(c, c, 1),
            WeightInit::FanInUniform,
        )?;
        let gate = Conv2d::new(
            reg,
            &path(prefix, "gate"),
            ConvSpec::same(c, 1, 1),
            WeightInit::FanInUniform,
        )?;
        // the last refinement conv starts at zero so a new block is an identity map
        let refine = if reduction == 1 {
            Refinement::Single(Conv2d::new(
                reg,
                &path(prefix, "refine"),
                ConvSpec::same(c, c, 1),
                WeightInit::Zeros,
            )?)
        } else {
            let r = c / reduction;
            Refinement::Bottleneck {
                down: Conv2d::new(
                    reg,
                    &path(prefix, "refine/down"),
                    ConvSpec::same(c, r, 1),
                    WeightInit::FanInUniform,
                )?,
                norm: FrozenAffine::new(reg, &path(prefix, "refine/norm"), r)?,
                up: Conv2d::new(
                    reg,
                    &path(prefix, "refine/up"),
                    ConvSpec::same(r, c, 1),
                    WeightInit::Zeros,
                )?,
            }
        };
        Ok(CaBlock {
            channels,
            key,
            value,
            gate,
            refine,
        })
    }

    /// Pooling weights `alpha`, `N x 1 x HW`, summing to one per sample.
    pub fn attention_map(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let logits = self.key.forward(tape, store, p)?;
        spatial_softmax(tape, logits)
    }

    /// `Refine(sum_j alpha_j * (w_v . P_j))`, `N x C x 1 x 1`.
    pub fn context_vector(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: Var,
        alpha: Var,
    ) -> Result<Var> {
        let (n, c, h, w) = tape
            .shape(p)
            .nchw()
            .ok_or_else(|| Error::invalid("cablock", "input must be NxCxHxW"))?;
        let v = self.value.forward(tape, store, p)?;
        let v = tape.reshape(v, [n, c, h * w])?;
        let weighted = tape.mul(v, alpha)?;
        let pooled = tape.sum_trailing(weighted, 2)?;
        let pooled = tape.reshape(pooled, [n, c, 1, 1])?;
        self.refine.forward(tape, store, pooled)
    }

    /// Spatial gate `a`, `N x 1 x H x W`, summing to one per sample.
    pub fn gate_map(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let logits = self.gate.forward(tape, store, p)?;
        let shape = tape.shape(logits).clone();
        let a = spatial_softmax(tape, logits)?;
        tape.reshape(a, shape)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: Var,
    ) -> Result<CaBlockTrace> {
        let c = tape.shape(p).nchw().map(|s| s.1);
        if c != Some(self.channels) {
            return Err(Error::invalid(
                "cablock",
                format!(
                    "expected {} channels, got shape {}",
                    self.channels,
                    tape.shape(p)
                ),
            ));
        }
        let attention = self.attention_map(tape, store, p)?;
        let context = self.context_vector(tape, store, p, attention)?;
        let gate = self.gate_map(tape, store, p)?;
        let injected = tape.mul(gate, context)?;
        let output = tape.add(p, injected)?;
        Ok(CaBlockTrace {
            attention,
            gate,
            context,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, store, p)?.output)
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.key, &self.value, &self.gate];
        v.extend(self.refine.convs());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Scp {
    pub config: ScpConfig,
    /// `(level, block)` in ascending level order.
    pub blocks: Vec<(usize, CaBlock)>,
}

impl Scp {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, config: ScpConfig) -> Result<Self> {
        let mut levels = config.levels.clone();
        levels.sort_unstable();
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("scp", "duplicate levels"));
        }
        let blocks = levels
            .iter()
            .map(|&l| {
                Ok((
                    l,
                    CaBlock::new(
                        reg,
                        &path(prefix, &format!("l{l}")),
                        config.channels,
                        config.reduction,
                    )?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scp { config, blocks })
    }

    pub fn block(&self, level: usize) -> Option<&CaBlock> {
        self.blocks
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, b)| b)
    }

    fn check(&self, pyr: &FeaturePyramid<Var>) -> Result<()> {
        for (l, _) in &self.blocks {
            if pyr.get(*l).is_none() {
                return Err(Error::invalid(
                    "scp",
                    format!("configured level {l} missing from pyramid"),
                ));
            }
        }
        Ok(())
    }

    /// Independent block per configured level; other levels pass through unchanged.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        self.check(pyr)?;
        pyr.map(|l, &x| match self.block(l) {
            Some(b) => b.forward(tape, store, x),
            None => Ok(x),
        })
    }

    /// Like [`Scp::forward`], also returning each wrapped level's trace.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
    ) -> Result<(FeaturePyramid<Var>, Vec<(usize, CaBlockTrace)>)> {
        self.check(pyr)?;
        let mut traces = Vec::new();
        let out = pyr.map(|l, &x| match self.block(l) {
            Some(b) => {
                let t = b.forward_traced(tape, store, x)?;
                traces.push((l, t));
                Ok(t.output)
            }
            None => Ok(x),
        })?;
        Ok((out, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn fresh_block_is_identity() {
        let mut store = ParamStore::new(1);
        let b = CaBlock::new(&mut store, "b", 4, 1).unwrap();
        let mut tape = Tape::new();
        let x = Tensor::from_fn([2, 4, 3, 2], |i| (i as f64 * 0.3).cos());
        let p = tape.constant(x.clone());
        let q = b.forward(&mut tape, &store, p).unwrap();
        assert_eq!(tape.value(q), &x);
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::new(0);
        assert!(CaBlock::new(&mut store, "b", 6, 4).is_err());
        let b = CaBlock::new(&mut store, "c", 8, 4).unwrap();
        assert!(matches!(b.refine, Refinement::Bottleneck { .. }));
    }

    #[test]
    fn empty_level_set_is_identity() {
        let mut store = ParamStore::new(0);
        let scp = Scp::new(
            &mut store,
            "scp",
            ScpConfig {
                channels: 2,
                levels: vec![],
                reduction: 1,
            },
        )
        .unwrap();
        let pyr = crate::pyramid::make_synthetic_pyramid(0, 1, 2, 16, 16, 2, 3).unwrap();
        let mut tape = Tape::new();
        let p = pyr.to_tape(&mut tape, false);
        let q = scp.forward(&mut tape, &store, &p).unwrap();
        assert_eq!(q.values(&tape), pyr);
    }

    #[test]
    fn missing_level_rejected() {
        let mut store = ParamStore::new(0);
        let scp = Scp::new(
            &mut store,
            "scp",
            ScpConfig {
                channels: 2,
                levels: vec![2, 6],
                reduction: 1,
            },
        )
        .unwrap();
        let pyr = crate::pyramid::make_synthetic_pyramid(0, 1, 2, 16, 16, 2, 3).unwrap();
        let mut tape = Tape::new();
        let p = pyr.to_tape(&mut tape, false);
        assert!(scp.forward(&mut tape, &store, &p).is_err());
    }
}
