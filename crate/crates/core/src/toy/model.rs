//! The toy detector: backbone, lateral reduction, optional context modules,
//! roi extraction, and the box/class and mask heads.

use alloc::format;
use alloc::vec::Vec;

use super::scene::NUM_CLASSES;
use super::ToyConfig;
use crate::densefpn::DenseFpn;
use crate::error::Result;
use crate::hroie::{extract_single_level, Hroie, Task};
use crate::nn::{path, Conv2d, ConvSpec, WeightInit};
use crate::ops::RoiBox;
use crate::param::{ParamRegistry, ParamStore};
use crate::pyramid::{FeaturePyramid, LateralReducer};
use crate::scp::Scp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Strided stem followed by four stages of (stride-2 conv, conv), each with ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Conv2d,
    pub stages: Vec<[Conv2d; 2]>,
}

impl Backbone {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, widths: [usize; 5]) -> Result<Self> {
        let stem = Conv2d::new(
            reg,
            &path(prefix, "stem"),
            ConvSpec::same(3, widths[0], 3).with_stride(2),
            WeightInit::HeUniform,
        )?;
        let stages = (1..5)
            .map(|k| {
                let p = path(prefix, &format!("c{}", k + 1));
                Ok([
                    Conv2d::new(
                        reg,
                        &path(&p, "down"),
                        ConvSpec::same(widths[k - 1], widths[k], 3).with_stride(2),
                        WeightInit::HeUniform,
                    )?,
                    Conv2d::new(
                        reg,
                        &path(&p, "conv"),
                        ConvSpec::same(widths[k], widths[k], 3),
                        WeightInit::HeUniform,
                    )?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone { stem, stages })
    }

    /// Levels 2..=5 of the image batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: Var,
    ) -> Result<FeaturePyramid<Var>> {
        let (_, _, h, w) = tape.shape(images).nchw().expect("images are NCHW");
        let x = self.stem.forward(tape, store, images)?;
        let mut x = tape.relu(x);
        let mut levels = Vec::with_capacity(4);
        for [down, conv] in &self.stages {
            let y = down.forward(tape, store, x)?;
            let y = tape.relu(y);
            let y = conv.forward(tape, store, y)?;
            x = tape.relu(y);
            levels.push(x);
        }
        FeaturePyramid::new(2, levels, (h, w))
    }
}

/// Flattened roi feature -> hidden FC -> class logits and box deltas.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub fc: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl BoxHead {
    pub fn new(
        reg: &mut impl ParamRegistry,
        prefix: &str,
        in_features: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BoxHead {
            fc: Conv2d::new(
                reg,
                &path(prefix, "fc"),
                ConvSpec::same(in_features, hidden, 1),
                WeightInit::HeUniform,
            )?,
            cls: Conv2d::new(
                reg,
                &path(prefix, "cls"),
                ConvSpec::same(hidden, NUM_CLASSES + 1, 1),
                WeightInit::Zeros,
            )?,
            reg: Conv2d::new(
                reg,
                &path(prefix, "reg"),
                ConvSpec::same(hidden, 4, 1),
                WeightInit::Zeros,
            )?,
        })
    }

    /// `R x C x S x S` features to `(R x (K+1), R x 4)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let dims = tape.shape(f).dims().to_vec();
        let r = dims[0];
        let flat = tape.reshape(f, [r, dims[1..].iter().product(), 1, 1])?;
        let h = self.fc.forward(tape, store, flat)?;
        let h = tape.relu(h);
        let cls = self.cls.forward(tape, store, h)?;
        let cls = tape.reshape(cls, [r, NUM_CLASSES + 1])?;
        let reg = self.reg.forward(tape, store, h)?;
        let reg = tape.reshape(reg, [r, 4])?;
        Ok((cls, reg))
    }
}

/// 3x3 conv to half width, ReLU, 1x1 to one mask logit per cell.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub conv: Conv2d,
    pub out: Conv2d,
}

impl MaskHead {
    pub fn new(reg: &mut impl ParamRegistry, prefix: &str, channels: usize) -> Result<Self> {
        Ok(MaskHead {
            conv: Conv2d::new(
                reg,
                &path(prefix, "conv"),
                ConvSpec::same(channels, channels / 2, 3),
                WeightInit::HeUniform,
            )?,
            out: Conv2d::new(
                reg,
                &path(prefix, "out"),
                ConvSpec::same(channels / 2, 1, 1),
                WeightInit::HeUniform,
            )?,
        })
    }

    /// `R x C x S x S` features to `R x S x S` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let dims = tape.shape(f).dims().to_vec();
        let x = self.conv.forward(tape, store, f)?;
        let x = tape.relu(x);
        let x = self.out.forward(tape, store, x)?;
        tape.reshape(x, [dims[0], dims[2], dims[3]])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectorOutput {
    /// `R x (K+1)`.
    pub class_logits: Var,
    /// `R x 4`.
    pub box_deltas: Var,
    /// `R x S x S`.
    pub mask_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ToyDetector {
    pub config: ToyConfig,
    pub backbone: Backbone,
    pub reducer: LateralReducer,
    pub densefpn: Option<DenseFpn>,
    pub scp: Option<Scp>,
    pub hroie: Option<Hroie>,
    pub box_head: BoxHead,
    pub mask_head: MaskHead,
}

impl ToyDetector {
    pub fn new(reg: &mut impl ParamRegistry, config: &ToyConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let backbone = Backbone::new(reg, "backbone", config.backbone_widths)?;
        let reducer = LateralReducer::new(
            reg,
            "reducer",
            2,
            &config.backbone_widths[1..],
            c,
            config.levels[1] - 5,
        )?;
        let on = config.modules;
        let densefpn = if on.densefpn {
            Some(DenseFpn::new(reg, "densefpn", config.densefpn.clone())?)
        } else {
            None
        };
        let scp = if on.scp {
            Some(Scp::new(reg, "scp", config.scp.clone())?)
        } else {
            None
        };
        let hroie = if on.hroie {
            Some(Hroie::new(reg, "hroie", config.hroie.clone())?)
        } else {
            None
        };
        let s = config.hroie.det_size;
        let box_head = BoxHead::new(reg, "box_head", c * s * s, config.head_hidden)?;
        let mask_head = MaskHead::new(reg, "mask_head", c)?;
        Ok(ToyDetector {
            config: config.clone(),
            backbone,
            reducer,
            densefpn,
            scp,
            hroie,
            box_head,
            mask_head,
        })
    }

    /// Context-enriched pyramid for an `N x 3 x H x W` batch.
    pub fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: Var,
    ) -> Result<FeaturePyramid<Var>> {
        let c = self.backbone.forward(tape, store, images)?;
        let mut p = self.reducer.reduce_laterals(tape, store, &c)?;
        if let Some(d) = &self.densefpn {
            p = d.forward(tape, store, &p)?;
        }
        if let Some(s) = &self.scp {
            p = s.forward(tape, store, &p)?;
        }
        Ok(p)
    }

    /// Per-roi features for `task`, `R x C x S x S`.
    pub fn roi_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
        rois: &[RoiBox],
        task: Task,
    ) -> Result<Var> {
        let cfg = &self.config.hroie;
        match &self.hroie {
            Some(h) => Ok(h.extract(tape, store, pyr, rois, task)?.output),
            None => extract_single_level(
                tape,
                pyr,
                rois,
                cfg.levels,
                self.config.single_level_canonical,
                cfg.output_size(task),
                cfg.sampling_ratio,
            ),
        }
    }

    /// Class logits and box deltas for each roi.
    pub fn detect(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
        rois: &[RoiBox],
    ) -> Result<(Var, Var)> {
        let f = self.roi_features(tape, store, pyr, rois, Task::Detection)?;
        self.box_head.forward(tape, store, f)
    }

    pub fn mask_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyr: &FeaturePyramid<Var>,
        rois: &[RoiBox],
    ) -> Result<Var> {
        let f = self.roi_features(tape, store, pyr, rois, Task::Mask)?;
        self.mask_head.forward(tape, store, f)
    }

    /// All head outputs for every proposal of an image batch.
    pub fn forward_detector(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &Tensor,
        proposals: &[RoiBox],
    ) -> Result<DetectorOutput> {
        let x = tape.constant(images.clone());
        let pyr = self.features(tape, store, x)?;
        let (class_logits, box_deltas) = self.detect(tape, store, &pyr, proposals)?;
        let mask_logits = self.mask_logits(tape, store, &pyr, proposals)?;
        Ok(DetectorOutput {
            class_logits,
            box_deltas,
            mask_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_tensor;

    #[test]
    fn shape_contract() {
        let cfg = ToyConfig::default();
        let mut store = ParamStore::new(0);
        let m = ToyDetector::new(&mut store, &cfg).unwrap();
        let mut tape = Tape::new();
        let rois: Vec<RoiBox> = (0..7)
            .map(|i| RoiBox::new(0, 4.0 * i as f64, 3.0, 30.0 + 10.0 * i as f64, 50.0))
            .collect();
        let img = Tensor::zeros([1, 3, 128, 128]);
        let out = m.forward_detector(&mut tape, &store, &img, &rois).unwrap();
        assert_eq!(tape.shape(out.class_logits).dims(), [7, 4]);
        assert_eq!(tape.shape(out.box_deltas).dims(), [7, 4]);
        assert_eq!(tape.shape(out.mask_logits).dims(), [7, 14, 14]);
        let p = softmax_tensor(tape.value(out.class_logits), 1).unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
