//! Synthetic instance segmentation at desk scale.
//!
//! Scenes are small images of colored shapes with exact boxes and masks. The
//! detector is a tiny convolutional backbone feeding the context modules, with
//! a classification/box head and a mask head on top. Training uses jittered
//! ground-truth boxes as proposals; inference scores a sliding grid of boxes and
//! suppresses duplicates with Soft-NMS.

use alloc::format;
use alloc::vec;

use serde::{Deserialize, Serialize};

use crate::densefpn::DenseFpnConfig;
use crate::error::{Error, Result};
use crate::hroie::HroieConfig;
use crate::scp::ScpConfig;

pub mod boxes;
pub mod eval;
pub mod loss;
pub mod model;
pub mod scene;
pub mod train;

pub use boxes::{iou, soft_nms, Bbox, NmsMode, SoftNmsConfig};
pub use eval::{evaluate, evaluate_predictions, EvalConfig, EvalMetrics, Prediction, ProposalMode};
pub use loss::{assign_targets, compute_losses, LossBreakdown, RoiTargets};
pub use model::{DetectorOutput, ToyDetector};
pub use scene::{generate_scene, Instance, Scene, SceneConfig, ShapeKind, NUM_CLASSES};
pub use train::{train, IterationRecord, TrainConfig, TrainLog, TrainOutcome, Trainer};

/// Which context modules the detector uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleToggles {
    pub densefpn: bool,
    pub scp: bool,
    /// Hierarchical extraction; when off, each roi is cropped from one level chosen by its size.
    pub hroie: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles {
            densefpn: true,
            scp: true,
            hroie: true,
        }
    }
}

impl ModuleToggles {
    pub const NONE: ModuleToggles = ModuleToggles {
        densefpn: false,
        scp: false,
        hroie: false,
    };

    /// All eight on/off combinations, baseline first.
    pub fn all() -> [ModuleToggles; 8] {
        core::array::from_fn(|i| ModuleToggles {
            densefpn: i & 1 != 0,
            scp: i & 2 != 0,
            hroie: i & 4 != 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub scene: SceneConfig,
    /// Stem width followed by the C2..C5 stage widths.
    pub backbone_widths: [usize; 5],
    /// Pyramid width after lateral reduction.
    pub channels: usize,
    /// Pyramid levels after reduction; levels above 5 are added by strided convs.
    pub levels: [usize; 2],
    pub modules: ModuleToggles,
    pub densefpn: DenseFpnConfig,
    pub scp: ScpConfig,
    pub hroie: HroieConfig,
    /// Box side that maps to `levels[0] + 2` in the single-level extractor.
    pub single_level_canonical: f64,
    pub head_hidden: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let channels = 64;
        ToyConfig {
            scene: SceneConfig::default(),
            backbone_widths: [16, 16, 32, 64, 64],
            channels,
            levels: [2, 6],
            modules: ModuleToggles::default(),
            densefpn: DenseFpnConfig {
                depth: 2,
                channels,
                mid_channels: 32,
                levels: [2, 6],
            },
            scp: ScpConfig {
                channels,
                levels: vec![2, 3, 4, 5, 6],
                reduction: 1,
            },
            hroie: HroieConfig {
                channels,
                ..HroieConfig::default()
            },
            single_level_canonical: 64.0,
            head_hidden: 128,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: alloc::string::String| Err(Error::invalid("toy config", reason));
        let [lo, hi] = self.levels;
        if lo != 2 || hi < 5 {
            return bad(format!(
                "pyramid levels must run from 2 to at least 5, got {lo}..={hi}"
            ));
        }
        let size = self.scene.size;
        if size == 0 || size % (1 << hi) != 0 {
            return bad(format!(
                "image size {size} must be a positive multiple of {}",
                1 << hi
            ));
        }
        if self.channels == 0 || self.head_hidden == 0 || self.backbone_widths.contains(&0) {
            return bad("widths must be positive".into());
        }
        if self.densefpn.channels != self.channels || self.densefpn.levels != self.levels {
            return bad("densefpn channels/levels must match the pyramid".into());
        }
        self.densefpn.validate()?;
        if self.scp.channels != self.channels
            || self.scp.levels.iter().any(|l| !(lo..=hi).contains(l))
        {
            return bad("scp channels/levels must match the pyramid".into());
        }
        if self.hroie.channels != self.channels
            || self.hroie.levels[0] < lo
            || self.hroie.levels[1] > hi
        {
            return bad("hroie channels/levels must match the pyramid".into());
        }
        self.hroie.validate()?;
        if self.channels % 2 != 0 {
            return bad("channels must be even for the mask head".into());
        }
        if !(self.single_level_canonical > 0.0) {
            return bad("single_level_canonical must be positive".into());
        }
        self.scene.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ToyConfig::default().validate().unwrap();
    }

    #[test]
    fn toggles_cover_all_combinations() {
        let all = ModuleToggles::all();
        assert_eq!(all[0], ModuleToggles::NONE);
        assert_eq!(all[7], ModuleToggles::default());
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut c = ToyConfig::default();
        c.scp.channels = 32;
        assert!(c.validate().is_err());
    }
}
