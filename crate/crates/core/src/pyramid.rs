//! Level-indexed feature pyramids and the lateral reducer that builds them.
//!
//! Level `i` has spatial size `ceil(input / 2^i)`; inputs divisible by
//! `2^l_max` make every level exact.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{path, Conv2d, ConvSpec, WeightInit};
use crate::param::{ParamRegistry, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// `ceil(input / 2^level)`.
pub fn level_size(input: usize, level: usize) -> usize {
    input.div_ceil(1 << level)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    l_min: usize,
    levels: Vec<T>,
    input_hw: (usize, usize),
}

impl<T> FeaturePyramid<T> {
    pub fn new(l_min: usize, levels: Vec<T>, input_hw: (usize, usize)) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid", "at least one level is required"));
        }
        Ok(FeaturePyramid {
            l_min,
            levels,
            input_hw,
        })
    }

    pub fn l_min(&self) -> usize {
        self.l_min
    }

    pub fn l_max(&self) -> usize {
        self.l_min + self.levels.len() - 1
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn get(&self, level: usize) -> Option<&T> {
        level
            .checked_sub(self.l_min)
            .and_then(|i| self.levels.get(i))
    }

    /// Panics when `level` is outside `l_min..=l_max`.
    pub fn level(&self, level: usize) -> &T {
        self.get(level)
            .unwrap_or_else(|| panic!("level {level} not in pyramid"))
    }

    pub fn level_indices(&self) -> core::ops::RangeInclusive<usize> {
        self.l_min..=self.l_max()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &T)> {
        self.levels
            .iter()
            .enumerate()
            .map(move |(i, t)| (self.l_min + i, t))
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<T> {
        self.levels
    }

    /// Expected `(h, w)` of `level`.
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (
            level_size(self.input_hw.0, level),
            level_size(self.input_hw.1, level),
        )
    }

    pub fn map<U>(&self, mut f: impl FnMut(usize, &T) -> Result<U>) -> Result<FeaturePyramid<U>> {
        let levels = self
            .iter()
            .map(|(i, t)| f(i, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeaturePyramid {
            l_min: self.l_min,
            levels,
            input_hw: self.input_hw,
        })
    }
}

fn validate_shapes<'a>(
    input_hw: (usize, usize),
    shapes: impl Iterator<Item = (usize, &'a Shape)>,
) -> Result<(usize, usize)> {
    let mut nc = None;
    for (level, shape) in shapes {
        let (n, c, h, w) = shape.nchw().ok_or_else(|| {
            Error::invalid("pyramid", format!("level {level} is not NxCxHxW: {shape}"))
        })?;
        match nc {
            None => nc = Some((n, c)),
            Some(prev) if prev != (n, c) => {
                return Err(Error::invalid(
                    "pyramid",
                    format!(
                        "level {level} has batch/channels {:?}, expected {prev:?}",
                        (n, c)
                    ),
                ))
            }
            _ => {}
        }
        let expected = (level_size(input_hw.0, level), level_size(input_hw.1, level));
        if (h, w) != expected {
            return Err(Error::invalid(
                "pyramid",
                format!(
                    "level {level} is {h}x{w}, expected {}x{}",
                    expected.0, expected.1
                ),
            ));
        }
    }
    Ok(nc.expect("non-empty pyramid"))
}

impl FeaturePyramid<Tensor> {
    /// Returns the common `(batch, channels)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        validate_shapes(self.input_hw, self.iter().map(|(i, t)| (i, t.shape())))
    }

    /// Puts every level on `tape`, as gradient-tracked leaves when `track` is set.
    pub fn to_tape(&self, tape: &mut Tape, track: bool) -> FeaturePyramid<Var> {
        FeaturePyramid {
            l_min: self.l_min,
            levels: self
                .levels
                .iter()
                .map(|t| {
                    if track {
                        tape.variable(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
            input_hw: self.input_hw,
        }
    }
}

impl FeaturePyramid<Var> {
    pub fn validate(&self, tape: &Tape) -> Result<(usize, usize)> {
        validate_shapes(self.input_hw, self.iter().map(|(i, v)| (i, tape.shape(*v))))
    }

    pub fn values(&self, tape: &Tape) -> FeaturePyramid<Tensor> {
        FeaturePyramid {
            l_min: self.l_min,
            levels: self.levels.iter().map(|v| tape.value(*v).clone()).collect(),
            input_hw: self.input_hw,
        }
    }
}

/// Deterministic unit-normal pyramid for fixtures; `h` and `w` are input-image sizes and
/// must be divisible by `2^l_max`.
pub fn make_synthetic_pyramid(
    seed: u64,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    l_min: usize,
    l_max: usize,
) -> Result<FeaturePyramid<Tensor>> {
    if l_max < l_min {
        return Err(Error::invalid("make_synthetic_pyramid", "l_max < l_min"));
    }
    let div = 1usize << l_max;
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::invalid(
            "make_synthetic_pyramid",
            format!("{h}x{w} is not divisible by 2^{l_max}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = (l_min..=l_max)
        .map(|l| {
            let shape = [n, c, level_size(h, l), level_size(w, l)];
            Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
        })
        .collect();
    FeaturePyramid::new(l_min, levels, (h, w))
}

/// Per-level 1x1 reduction to a common width, plus stride-2 3x3 convs stacked on the
/// top level to add extra coarser levels.
#[derive(Clone, Debug)]
pub struct LateralReducer {
    pub l_min: usize,
    pub in_channels: Vec<usize>,
    pub channels: usize,
    pub laterals: Vec<Conv2d>,
    pub extra: Vec<Conv2d>,
}

impl LateralReducer {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        l_min: usize,
        in_channels: &[usize],
        channels: usize,
        extra_levels: usize,
    ) -> Result<Self> {
        if in_channels.is_empty() {
            return Err(Error::invalid("lateral_reducer", "no input levels"));
        }
        let laterals = in_channels
            .iter()
            .enumerate()
            .map(|(k, &cin)| {
                Conv2d::new(
                    reg,
                    &path(prefix, &format!("lateral/l{}", l_min + k)),
                    ConvSpec::same(cin, channels, 1),
                    WeightInit::LecunUniform,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let top = l_min + in_channels.len() - 1;
        let extra = (1..=extra_levels)
            .map(|k| {
                Conv2d::new(
                    reg,
                    &path(prefix, &format!("extra/l{}", top + k)),
                    ConvSpec::same(channels, channels, 3).with_stride(2),
                    WeightInit::LecunUniform,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LateralReducer {
            l_min,
            in_channels: in_channels.to_vec(),
            channels,
            laterals,
            extra,
        })
    }

    pub fn out_l_max(&self) -> usize {
        self.l_min + self.laterals.len() + self.extra.len() - 1
    }

    /// Maps backbone levels `l_min..` to a uniform-width pyramid with the extra levels appended.
    pub fn reduce_laterals(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        backbone: &FeaturePyramid<Var>,
    ) -> Result<FeaturePyramid<Var>> {
        if backbone.l_min() != self.l_min || backbone.len() != self.laterals.len() {
            return Err(Error::invalid(
                "reduce_laterals",
                format!(
                    "expected levels {}..={}, got {}..={}",
                    self.l_min,
                    self.l_min + self.laterals.len() - 1,
                    backbone.l_min(),
                    backbone.l_max()
                ),
            ));
        }
        let mut prev: Option<(usize, usize)> = None;
        for (level, &v) in backbone.iter() {
            let (_, c, h, w) = tape.shape(v).nchw().ok_or_else(|| {
                Error::invalid("reduce_laterals", "backbone maps must be NxCxHxW")
            })?;
            if c != self.in_channels[level - self.l_min] {
                return Err(Error::invalid(
                    "reduce_laterals",
                    format!(
                        "level {level} has {c} channels, expected {}",
                        self.in_channels[level - self.l_min]
                    ),
                ));
            }
            if let Some((ph, pw)) = prev {
                if h != ph.div_ceil(2) || w != pw.div_ceil(2) || ph == h {
                    return Err(Error::invalid(
                        "reduce_laterals",
                        format!("level {level} is {h}x{w}, which does not halve {ph}x{pw}"),
                    ));
                }
            }
            prev = Some((h, w));
        }
        let mut levels = Vec::with_capacity(self.laterals.len() + self.extra.len());
        for (conv, &v) in self.laterals.iter().zip(backbone.levels()) {
            levels.push(conv.forward(tape, store, v)?);
        }
        for conv in &self.extra {
            let top = *levels.last().expect("non-empty");
            levels.push(conv.forward(tape, store, top)?);
        }
        FeaturePyramid::new(self.l_min, levels, backbone.input_hw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_sizes_and_determinism() {
        let a = make_synthetic_pyramid(0, 1, 4, 64, 64, 2, 6).unwrap();
        let b = make_synthetic_pyramid(0, 1, 4, 64, 64, 2, 6).unwrap();
        assert_eq!(a, b);
        let sizes: Vec<usize> = a.iter().map(|(_, t)| t.dims()[2]).collect();
        assert_eq!(sizes, [16, 8, 4, 2, 1]);
        assert_eq!(a.validate().unwrap(), (1, 4));
    }

    #[test]
    fn indivisible_sizes_rejected() {
        assert!(make_synthetic_pyramid(0, 1, 4, 48, 64, 2, 6).is_err());
    }

    #[test]
    fn sample_mean_near_zero() {
        let p = make_synthetic_pyramid(3, 1, 16, 64, 64, 2, 3).unwrap();
        let n: usize = p.levels().iter().map(|t| t.numel()).sum();
        let mean: f64 = p.levels().iter().map(|t| t.sum()).sum::<f64>() / n as f64;
        assert!(n >= 4096);
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn level_sizes_for_512() {
        let sizes: Vec<usize> = (2..=6).map(|l| level_size(512, l)).collect();
        assert_eq!(sizes, [128, 64, 32, 16, 8]);
    }
}
