//! Dense feature pyramid blocks.
//!
//! One block runs a top-down pass, where every level fuses all coarser levels,
//! followed by a bottom-up pass, where every level fuses its own input, its
//! top-down output, and all finer top-down outputs. Cross-level terms are
//! scaled by softmax-normalized learnable weights, and each fused sum goes
//! through a [`TransformBlock`]. Blocks stack without sharing parameters.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{path, Conv2d, ConvSpec, WeightInit};
use crate::param::{InitSpec, ParamId, ParamKind, ParamRegistry, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseFpnConfig {
    pub depth: usize,
    pub channels: usize,
    pub mid_channels: usize,
    /// `[l_min, l_max]`.
    pub levels: [usize; 2],
}

impl Default for DenseFpnConfig {
    fn default() -> Self {
        DenseFpnConfig {
            depth: 5,
            channels: 256,
            mid_channels: 192,
            levels: [2, 6],
        }
    }
}

impl DenseFpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.channels == 0
            || self.mid_channels == 0
            || self.levels[1] < self.levels[0]
        {
            return Err(Error::invalid(
                "densefpn",
                format!("invalid config {self:?}"),
            ));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels[1] - self.levels[0] + 1
    }
}

/// ReLU, then a 1x1 reduce / 3x3 / 1x1 expand bottleneck with no further activations.
#[derive(Clone, Debug)]
pub struct TransformBlock {
    pub reduce: Conv2d,
    pub conv: Conv2d,
    pub expand: Conv2d,
}

impl TransformBlock {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        channels: usize,
        mid: usize,
    ) -> Result<Self> {
        Ok(TransformBlock {
            reduce: Conv2d::new(
                reg,
                &path(prefix, "reduce"),
                ConvSpec::same(channels, mid, 1),
                WeightInit::HeUniform,
            )?,
            conv: Conv2d::new(
                reg,
                &path(prefix, "conv"),
                ConvSpec::same(mid, mid, 3),
                WeightInit::LecunUniform,
            )?,
            expand: Conv2d::new(
                reg,
                &path(prefix, "expand"),
                ConvSpec::same(mid, channels, 1),
                WeightInit::LecunUniform,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let x = tape.relu(x);
        let x = self.reduce.forward(tape, store, x)?;
        let x = self.conv.forward(tape, store, x)?;
        self.expand.forward(tape, store, x)
    }

    pub fn convs(&self) -> [&Conv2d; 3] {
        [&self.reduce, &self.conv, &self.expand]
    }
}

/// Raw re-weighting logits for one target level in one direction.
#[derive(Clone, Debug)]
pub struct ReweightVector {
    pub raw: ParamId,
    /// Source level of each entry, in order.
    pub sources: Vec<usize>,
}

impl ReweightVector {
    fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        sources: Vec<usize>,
    ) -> Result<Option<Self>> {
        if sources.is_empty() {
            return Ok(None);
        }
        let raw = reg.register(
            path(prefix, "reweight"),
            Shape::new([sources.len()]),
            ParamKind::Reweight,
            InitSpec::Zeros,
        )?;
        Ok(Some(ReweightVector { raw, sources }))
    }
}

/// Softmax of the raw re-weighting vector; gradients flow back to the raw values.
pub fn normalize_weights(tape: &mut Tape, store: &ParamStore, raw: ParamId) -> Result<Var> {
    let v = tape.param(store, raw);
    tape.softmax(v, 0)
}

/// Resamples a map to `(h, w)`: bilinear when enlarging, max pooling when shrinking by an
/// integer factor, identity at equal size.
pub fn resize_to(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let (_, _, xh, xw) = tape
        .shape(x)
        .nchw()
        .ok_or_else(|| Error::invalid("resize_to", "map must be NxCxHxW"))?;
    if (xh, xw) == (h, w) {
        return Ok(x);
    }
    if xh >= h && xw >= w {
        let (fy, fx) = (xh / h, xw / w);
        if fy == fx && xh == h * fy && xw == w * fx {
            return tape.maxpool2d(x, fy, fy);
        }
        return Err(Error::invalid(
            "resize_to",
            format!("cannot pool {xh}x{xw} down to {h}x{w} by an integer factor"),
        ));
    }
    tape.bilinear_resize(x, h, w)
}

/// Weighted sum of `sources` resized to `(h, w)`, added onto `base`.
fn fuse_weighted(
    tape: &mut Tape,
    store: &ParamStore,
    base: Var,
    weights: &ReweightVector,
    sources: &[Var],
    hw: (usize, usize),
) -> Result<Var> {
    let w = normalize_weights(tape, store, weights.raw)?;
    let w = tape.reshape(w, [sources.len(), 1, 1, 1])?;
    let mut acc = base;
    for (k, &src) in sources.iter().enumerate() {
        let r = resize_to(tape, src, hw.0, hw.1)?;
        let wk = tape.gather_rows(w, &[k])?;
        let term = tape.mul(r, wk)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub l_min: usize,
    pub l_max: usize,
    pub topdown: Vec<TransformBlock>,
    pub bottomup: Vec<TransformBlock>,
    pub topdown_weights: Vec<Option<ReweightVector>>,
    pub bottomup_weights: Vec<Option<ReweightVector>>,
}

impl DenseBlock {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, cfg: &DenseFpnConfig) -> Result<Self> {
        let [l_min, l_max] = cfg.levels;
        let mut block = DenseBlock {
            l_min,
            l_max,
            topdown: Vec::new(),
            bottomup: Vec::new(),
            topdown_weights: Vec::new(),
            bottomup_weights: Vec::new(),
        };
        for i in l_min..=l_max {
            let p = path(prefix, &format!("topdown/l{i}"));
            block.topdown.push(TransformBlock::new(
                reg,
                &p,
                cfg.channels,
                cfg.mid_channels,
            )?);
            block
                .topdown_weights
                .push(ReweightVector::new(reg, &p, (i + 1..=l_max).collect())?);
        }
        for i in l_min..=l_max {
            let p = path(prefix, &format!("bottomup/l{i}"));
            block.bottomup.push(TransformBlock::new(
                reg,
                &p,
                cfg.channels,
                cfg.mid_channels,
            )?);
            block
                .bottomup_weights
                .push(ReweightVector::new(reg, &p, (l_min..i).collect())?);
        }
        Ok(block)
    }

    fn check(&self, tape: &Tape, pyr: &FeaturePyramid<Var>) -> Result<()> {
        if pyr.l_min() != self.l_min || pyr.l_max() != self.l_max {
            return Err(Error::invalid(
                "densefpn",
                format!(
                    "pyramid levels {}..={} do not match block levels {}..={}",
                    pyr.l_min(),
                    pyr.l_max(),
                    self.l_min,
                    self.l_max
                ),
            ));
        }
        let (_, c) = pyr.validate(tape)?;
        let expected = self.topdown[0].expand.spec.out_channels;
        if c != expected {
            return Err(Error::invalid(
                "densefpn",
                format!("pyramid has {c} channels, block expects {expected}"),
            ));
        }
        Ok(())
    }

    /// `C_i_down = T(C_i + sum_{j > i} w_j * resize(C_j))`.
    pub fn topdown_aggregate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        self.check(tape, input)?;
        input.map(|i, &x| {
            let k = i - self.l_min;
            let hw = input.level_hw(i);
            let sum = match &self.topdown_weights[k] {
                Some(rw) => {
                    let sources: Vec<Var> = rw.sources.iter().map(|&j| *input.level(j)).collect();
                    fuse_weighted(tape, store, x, rw, &sources, hw)?
                }
                None => x,
            };
            self.topdown[k].forward(tape, store, sum)
        })
    }

    /// `C_i_up = T(C_i + C_i_down + sum_{j < i} w_j * resize(C_j_down))`.
    pub fn bottomup_aggregate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &FeaturePyramid<Var>,
        topdown: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        self.check(tape, input)?;
        self.check(tape, topdown)?;
        input.map(|i, &x| {
            let k = i - self.l_min;
            let hw = input.level_hw(i);
            let base = tape.add(x, *topdown.level(i))?;
            let sum = match &self.bottomup_weights[k] {
                Some(rw) => {
                    let sources: Vec<Var> = rw.sources.iter().map(|&j| *topdown.level(j)).collect();
                    fuse_weighted(tape, store, base, rw, &sources, hw)?
                }
                None => base,
            };
            self.bottomup[k].forward(tape, store, sum)
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        let td = self.topdown_aggregate(tape, store, input)?;
        self.bottomup_aggregate(tape, store, input, &td)
    }

    pub fn reweights(&self) -> impl Iterator<Item = &ReweightVector> {
        self.topdown_weights
            .iter()
            .chain(&self.bottomup_weights)
            .flatten()
    }

    pub fn transforms(&self) -> impl Iterator<Item = &TransformBlock> {
        self.topdown.iter().chain(&self.bottomup)
    }
}

#[derive(Clone, Debug)]
pub struct DenseFpn {
    pub config: DenseFpnConfig,
    pub blocks: Vec<DenseBlock>,
}

impl DenseFpn {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, config: DenseFpnConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.depth)
            .map(|d| DenseBlock::new(reg, &path(prefix, &format!("block{d}")), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseFpn { config, blocks })
    }

    /// Applies the blocks in sequence; output shapes equal input shapes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        let mut x = input.clone();
        for block in &self.blocks {
            x = block.forward(tape, store, &x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(levels: [usize; 2], c: usize, m: usize, depth: usize) -> DenseFpnConfig {
        DenseFpnConfig {
            depth,
            channels: c,
            mid_channels: m,
            levels,
        }
    }

    #[test]
    fn reweight_lengths() {
        let mut store = ParamStore::new(0);
        let b = DenseBlock::new(&mut store, "b", &cfg([2, 6], 4, 2, 1)).unwrap();
        let td: Vec<usize> = b
            .topdown_weights
            .iter()
            .map(|w| w.as_ref().map_or(0, |w| w.sources.len()))
            .collect();
        let bu: Vec<usize> = b
            .bottomup_weights
            .iter()
            .map(|w| w.as_ref().map_or(0, |w| w.sources.len()))
            .collect();
        assert_eq!(td, [4, 3, 2, 1, 0]);
        assert_eq!(bu, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_init_weights_are_uniform() {
        let mut store = ParamStore::new(0);
        let b = DenseBlock::new(&mut store, "b", &cfg([2, 5], 4, 2, 1)).unwrap();
        let mut tape = Tape::new();
        let rw = b.topdown_weights[0].as_ref().unwrap();
        let w = normalize_weights(&mut tape, &store, rw.raw).unwrap();
        for v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn resize_directions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let down = resize_to(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(down).data(), &[5.0, 7.0, 13.0, 15.0]);
        let up = resize_to(&mut tape, x, 8, 8).unwrap();
        assert_eq!(tape.shape(up).dims(), &[1, 1, 8, 8]);
        assert_eq!(resize_to(&mut tape, x, 4, 4).unwrap(), x);
        assert!(resize_to(&mut tape, x, 3, 3).is_err());
    }

    #[test]
    fn level_mismatch_rejected() {
        let mut store = ParamStore::new(0);
        let net = DenseFpn::new(&mut store, "d", cfg([2, 4], 4, 2, 1)).unwrap();
        let pyr = crate::pyramid::make_synthetic_pyramid(0, 1, 4, 32, 32, 2, 3).unwrap();
        let mut tape = Tape::new();
        let p = pyr.to_tape(&mut tape, false);
        assert!(net.forward(&mut tape, &store, &p).is_err());
    }
}
