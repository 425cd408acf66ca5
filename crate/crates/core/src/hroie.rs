//! Hierarchical RoI extraction.
//!
//! Each roi is cropped from every extraction level, then the crops are folded
//! into one feature with a gated recurrence
//!
//! ```text
//! F <- 0
//! F <- F + R_i * sigmoid(W_i [F ; R_i] + b_i)     for each level i in path order
//! ```
//!
//! Detection walks the levels fine to coarse, mask coarse to fine, and each
//! task owns its gates.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{path, Conv2d, ConvSpec, WeightInit};
use crate::ops::{RoiAlignParams, RoiBox};
use crate::param::{ParamRegistry, ParamStore};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HroieConfig {
    pub channels: usize,
    /// Inclusive extraction range.
    pub levels: [usize; 2],
    pub det_size: usize,
    pub mask_size: usize,
    pub sampling_ratio: usize,
}

impl Default for HroieConfig {
    fn default() -> Self {
        HroieConfig {
            channels: 256,
            levels: [2, 5],
            det_size: 7,
            mask_size: 14,
            sampling_ratio: 2,
        }
    }
}

impl HroieConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.det_size == 0
            || self.mask_size == 0
            || self.sampling_ratio == 0
        {
            return Err(Error::invalid(
                "hroie",
                "channels, sizes and sampling ratio must be positive",
            ));
        }
        if self.levels[0] > self.levels[1] {
            return Err(Error::invalid(
                "hroie",
                format!("empty level range {:?}", self.levels),
            ));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels[1] - self.levels[0] + 1
    }

    pub fn output_size(&self, task: Task) -> usize {
        match task {
            Task::Detection => self.det_size,
            Task::Mask => self.mask_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPath {
    /// Ascending level index.
    BottomUp,
    /// Descending level index.
    TopDown,
}

impl Task {
    pub fn path(self) -> FusionPath {
        match self {
            Task::Detection => FusionPath::BottomUp,
            Task::Mask => FusionPath::TopDown,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Task::Detection => "det",
            Task::Mask => "mask",
        }
    }
}

/// Pixelwise `2C -> C` gate for one level of one path.
#[derive(Clone, Debug)]
pub struct FusionCell {
    pub level: usize,
    pub conv: Conv2d,
}

impl FusionCell {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        level: usize,
        channels: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            reg,
            prefix,
            ConvSpec::same(2 * channels, channels, 1),
            WeightInit::Zeros,
        )?;
        Ok(FusionCell { level, conv })
    }
}

#[derive(Clone, Debug)]
pub struct FusionTrace {
    /// Levels in the order they were folded in.
    pub order: Vec<usize>,
    /// Gate activations, one per visited level.
    pub gates: Vec<Var>,
    pub output: Var,
}

/// Folds `crops` (one `R x C x S x S` tensor per level) into a single feature.
///
/// `crops` and `cells` are keyed by level; both must cover the same levels.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    path: FusionPath,
    crops: &[(usize, Var)],
    cells: &[FusionCell],
) -> Result<FusionTrace> {
    if crops.is_empty() || crops.len() != cells.len() {
        return Err(Error::invalid(
            "fuse",
            format!("{} crops for {} fusion cells", crops.len(), cells.len()),
        ));
    }
    let mut order: Vec<usize> = crops.iter().map(|(l, _)| *l).collect();
    order.sort_unstable();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("fuse", "duplicate crop level"));
    }
    if path == FusionPath::TopDown {
        order.reverse();
    }
    let shape = tape.shape(crops[0].1).clone();
    let mut f = tape.constant(Tensor::zeros(shape));
    let mut gates = Vec::with_capacity(order.len());
    for &level in &order {
        let r = crops
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, v)| *v)
            .expect("level taken from crops");
        let cell = cells
            .iter()
            .find(|c| c.level == level)
            .ok_or_else(|| Error::invalid("fuse", format!("no fusion cell for level {level}")))?;
        let joined = tape.concat_channels(&[f, r])?;
        let logits = cell.conv.forward(tape, store, joined)?;
        let gate = tape.sigmoid(logits);
        let contrib = tape.mul(r, gate)?;
        f = tape.add(f, contrib)?;
        gates.push(gate);
    }
    Ok(FusionTrace {
        order,
        gates,
        output: f,
    })
}

/// Clamps rois to the image and rejects any that collapse.
pub fn clip_rois(rois: &[RoiBox], image_hw: (usize, usize)) -> Result<Vec<RoiBox>> {
    rois.iter()
        .enumerate()
        .map(|(i, r)| {
            let c = r.clipped(image_hw.0 as f64, image_hw.1 as f64);
            if c.is_degenerate() {
                Err(Error::invalid(
                    "roi",
                    format!(
                        "roi {i} ({}, {}, {}, {}) is empty inside the image",
                        r.x1, r.y1, r.x2, r.y2
                    ),
                ))
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// Aligned crops of every roi from each listed level, `R x C x S x S` per level.
pub fn crop_levels(
    tape: &mut Tape,
    pyr: &FeaturePyramid<Var>,
    rois: &[RoiBox],
    levels: core::ops::RangeInclusive<usize>,
    out_size: usize,
    sampling_ratio: usize,
) -> Result<Vec<(usize, Var)>> {
    let rois = clip_rois(rois, pyr.input_hw())?;
    levels
        .map(|l| {
            let x = *pyr.get(l).ok_or_else(|| {
                Error::invalid(
                    "hroie",
                    format!("extraction level {l} missing from pyramid"),
                )
            })?;
            let params = RoiAlignParams {
                out_size,
                sampling_ratio,
                spatial_scale: 1.0 / (1u64 << l) as f64,
            };
            Ok((l, tape.roi_align(x, &rois, params)?))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Hroie {
    pub config: HroieConfig,
    pub detection: Vec<FusionCell>,
    pub mask: Vec<FusionCell>,
}

impl Hroie {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, config: HroieConfig) -> Result<Self> {
        config.validate()?;
        let mut cells = |task: Task| -> Result<Vec<FusionCell>> {
            (config.levels[0]..=config.levels[1])
                .map(|l| {
                    FusionCell::new(
                        reg,
                        &path(prefix, &format!("{}/l{l}", task.name())),
                        l,
                        config.channels,
                    )
                })
                .collect()
        };
        let detection = cells(Task::Detection)?;
        let mask = cells(Task::Mask)?;
        Ok(Hroie {
            config,
            detection,
            mask,
        })
    }

    pub fn cells(&self, task: Task) -> &[FusionCell] {
        match task {
            Task::Detection => &self.detection,
            Task::Mask => &self.mask,
        }
    }

    pub fn crops(
        &self,
        tape: &mut Tape,
        pyr: &FeaturePyramid<Var>,
        rois: &[RoiBox],
        task: Task,
    ) -> Result<Vec<(usize, Var)>> {
        crop_levels(
            tape,
            pyr,
            rois,
            self.config.levels[0]..=self.config.levels[1],
            self.config.output_size(task),
            self.config.sampling_ratio,
        )
    }

    /// Fused per-roi features `R x C x S x S` for `task`.
    pub fn extract(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
        rois: &[RoiBox],
        task: Task,
    ) -> Result<FusionTrace> {
        if rois.is_empty() {
            return Err(Error::invalid("hroie", "no rois"));
        }
        let crops = self.crops(tape, pyr, rois, task)?;
        fuse(tape, store, task.path(), &crops, self.cells(task))
    }
}

/// Scale-based level for a single-level extractor:
/// `floor(base + log2(sqrt(w h) / canonical))`, clamped to `[lo, hi]`.
pub fn assign_level(roi: &RoiBox, canonical: f64, base: usize, lo: usize, hi: usize) -> usize {
    let side = libm::sqrt(roi.width().max(0.0) * roi.height().max(0.0)).max(1e-6);
    let k = libm::floor(base as f64 + libm::log2(side / canonical));
    (k.max(lo as f64).min(hi as f64)) as usize
}

/// Crops each roi from its one assigned level; rows keep the input order.
pub fn extract_single_level(
    tape: &mut Tape,
    pyr: &FeaturePyramid<Var>,
    rois: &[RoiBox],
    levels: [usize; 2],
    canonical: f64,
    out_size: usize,
    sampling_ratio: usize,
) -> Result<Var> {
    if rois.is_empty() {
        return Err(Error::invalid("single_level", "no rois"));
    }
    let rois = clip_rois(rois, pyr.input_hw())?;
    let mut parts = Vec::new();
    let mut origin = Vec::with_capacity(rois.len());
    for l in levels[0]..=levels[1] {
        let idx: Vec<usize> = (0..rois.len())
            .filter(|&i| {
                assign_level(&rois[i], canonical, levels[0] + 2, levels[0], levels[1]) == l
            })
            .collect();
        if idx.is_empty() {
            continue;
        }
        let x = *pyr.get(l).ok_or_else(|| {
            Error::invalid("single_level", format!("level {l} missing from pyramid"))
        })?;
        let sub: Vec<RoiBox> = idx.iter().map(|&i| rois[i]).collect();
        let params = RoiAlignParams {
            out_size,
            sampling_ratio,
            spatial_scale: 1.0 / (1u64 << l) as f64,
        };
        parts.push(tape.roi_align(x, &sub, params)?);
        origin.extend(idx);
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)?
    };
    let mut inverse = alloc::vec![0; origin.len()];
    for (row, &i) in origin.iter().enumerate() {
        inverse[i] = row;
    }
    tape.gather_rows(stacked, &inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::make_synthetic_pyramid;

    fn small() -> HroieConfig {
        HroieConfig {
            channels: 2,
            levels: [2, 4],
            det_size: 2,
            mask_size: 3,
            sampling_ratio: 2,
        }
    }

    #[test]
    fn paths_visit_levels_in_opposite_orders() {
        let mut store = ParamStore::new(3);
        let h = Hroie::new(&mut store, "hroie", small()).unwrap();
        let pyr = make_synthetic_pyramid(1, 1, 2, 32, 32, 2, 4).unwrap();
        let mut tape = Tape::new();
        let p = pyr.to_tape(&mut tape, false);
        let rois = [RoiBox::new(0, 2.0, 3.0, 20.0, 25.0)];
        let det = h
            .extract(&mut tape, &store, &p, &rois, Task::Detection)
            .unwrap();
        let mask = h.extract(&mut tape, &store, &p, &rois, Task::Mask).unwrap();
        assert_eq!(det.order, [2, 3, 4]);
        assert_eq!(mask.order, [4, 3, 2]);
        assert_eq!(tape.shape(det.output).dims(), [1, 2, 2, 2]);
        assert_eq!(tape.shape(mask.output).dims(), [1, 2, 3, 3]);
    }

    #[test]
    fn zero_gates_halve_a_single_level() {
        let mut store = ParamStore::new(0);
        let cells = [FusionCell::new(&mut store, "c", 3, 2).unwrap()];
        let mut tape = Tape::new();
        let r = Tensor::from_fn([1, 2, 2, 2], |i| i as f64 - 3.0);
        let rv = tape.constant(r.clone());
        let t = fuse(&mut tape, &store, FusionPath::BottomUp, &[(3, rv)], &cells).unwrap();
        for (a, b) in tape.value(t.output).data().iter().zip(r.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn cell_count_mismatch_rejected() {
        let mut store = ParamStore::new(0);
        let cells = [FusionCell::new(&mut store, "c", 3, 1).unwrap()];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros([1, 1, 1, 1]));
        assert!(fuse(
            &mut tape,
            &store,
            FusionPath::TopDown,
            &[(2, a), (3, b)],
            &cells
        )
        .is_err());
    }

    #[test]
    fn rois_are_clipped_and_degenerate_rejected() {
        let c = clip_rois(&[RoiBox::new(0, -4.0, 2.0, 40.0, 9.0)], (16, 32)).unwrap();
        assert_eq!(c[0], RoiBox::new(0, 0.0, 2.0, 32.0, 9.0));
        assert!(clip_rois(&[RoiBox::new(0, 40.0, 2.0, 50.0, 9.0)], (16, 32)).is_err());
    }

    #[test]
    fn level_assignment_tracks_scale() {
        let r = |s: f64| RoiBox::new(0, 0.0, 0.0, s, s);
        assert_eq!(assign_level(&r(224.0), 224.0, 4, 2, 5), 4);
        assert_eq!(assign_level(&r(112.0), 224.0, 4, 2, 5), 3);
        assert_eq!(assign_level(&r(10.0), 224.0, 4, 2, 5), 2);
        assert_eq!(assign_level(&r(2000.0), 224.0, 4, 2, 5), 5);
    }

    #[test]
    fn single_level_rows_keep_input_order() {
        let pyr = make_synthetic_pyramid(5, 1, 1, 64, 64, 2, 4).unwrap();
        let mut tape = Tape::new();
        let p = pyr.to_tape(&mut tape, false);
        let rois = [
            RoiBox::new(0, 0.0, 0.0, 60.0, 60.0),
            RoiBox::new(0, 4.0, 4.0, 12.0, 12.0),
        ];
        let out = extract_single_level(&mut tape, &p, &rois, [2, 4], 32.0, 2, 2).unwrap();
        let one = |t: &mut Tape, r: RoiBox, l: usize| {
            let params = RoiAlignParams {
                out_size: 2,
                sampling_ratio: 2,
                spatial_scale: 1.0 / (1u64 << l) as f64,
            };
            crate::ops::roi_align_tensor(t.value(*p.level(l)), &[r], params).unwrap()
        };
        let big = one(&mut tape, rois[0], assign_level(&rois[0], 32.0, 4, 2, 4));
        let small = one(&mut tape, rois[1], assign_level(&rois[1], 32.0, 4, 2, 4));
        let got = tape.value(out).data();
        assert_eq!(&got[..4], big.data());
        assert_eq!(&got[4..], small.data());
    }
}
