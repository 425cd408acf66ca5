//! Proposal labeling and the detection/mask losses.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::boxes::{encode, iou, Bbox};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::ops::RoiBox;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Training targets for a set of proposals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    /// Class per proposal, 0 for background.
    pub labels: Vec<usize>,
    /// Indices of foreground proposals.
    pub positives: Vec<usize>,
    /// Encoded box targets, one per positive.
    pub box_targets: Vec<[f64; 4]>,
    /// `S x S` binary targets per positive, row-major and concatenated.
    pub mask_targets: Vec<f64>,
    pub mask_size: usize,
}

pub fn roi_bbox(r: &RoiBox) -> Bbox {
    [r.x1, r.y1, r.x2, r.y2]
}

/// Samples `mask` at the `size x size` cell centers of `b`.
pub fn crop_mask(mask: &[bool], image_size: usize, b: &Bbox, size: usize, out: &mut Vec<f64>) {
    let last = (image_size - 1) as f64;
    for v in 0..size {
        let y = (b[1] + (v as f64 + 0.5) / size as f64 * (b[3] - b[1])).clamp(0.0, last) as usize;
        for u in 0..size {
            let x =
                (b[0] + (u as f64 + 0.5) / size as f64 * (b[2] - b[0])).clamp(0.0, last) as usize;
            out.push(if mask[y * image_size + x] { 1.0 } else { 0.0 });
        }
    }
}

/// Labels each proposal with the class of its best-overlapping instance when
/// that IoU reaches `fg_iou`, and builds box and mask targets for the positives.
pub fn assign_targets(
    proposals: &[RoiBox],
    scenes: &[&Scene],
    fg_iou: f64,
    mask_size: usize,
) -> Result<RoiTargets> {
    let mut t = RoiTargets {
        mask_size,
        ..RoiTargets::default()
    };
    for (i, r) in proposals.iter().enumerate() {
        let scene = scenes
            .get(r.batch_index)
            .ok_or_else(|| Error::invalid("assign_targets", "proposal batch index out of range"))?;
        let b = roi_bbox(r);
        let best = scene
            .instances
            .iter()
            .map(|inst| (iou(&b, &inst.bbox), inst))
            .fold(None, |acc: Option<(f64, _)>, cur| match acc {
                Some(a) if a.0 >= cur.0 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((o, inst)) if o >= fg_iou => {
                t.labels.push(inst.class);
                t.positives.push(i);
                t.box_targets.push(encode(&b, &inst.bbox));
                crop_mask(&inst.mask, scene.size, &b, mask_size, &mut t.mask_targets);
            }
            _ => t.labels.push(0),
        }
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub box_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub bbox: Var,
    pub mask: Var,
    pub total: Var,
}

/// Cross-entropy over all proposals, smooth L1 over positive box deltas and
/// per-pixel BCE over positive masks, summed with unit weights.
///
/// `mask_logits` holds one `S x S` map per positive, in `positives` order. The
/// box and mask terms are zero when there are no positives.
pub fn compute_losses(
    tape: &mut Tape,
    class_logits: Var,
    box_deltas: Var,
    mask_logits: Option<Var>,
    targets: &RoiTargets,
) -> Result<(LossVars, LossBreakdown)> {
    let cls = tape.cross_entropy(class_logits, &targets.labels)?;
    let npos = targets.positives.len();
    let (bbox, mask) = if npos == 0 {
        let z = tape.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let d = tape.gather_rows(box_deltas, &targets.positives)?;
        let flat: Vec<f64> = targets.box_targets.iter().flatten().copied().collect();
        let bbox = tape.smooth_l1(d, &flat, 1.0, npos as f64)?;
        let m = mask_logits.ok_or_else(|| {
            Error::invalid("compute_losses", "positives present but no mask logits")
        })?;
        let s = targets.mask_size;
        let mask = tape.bce_with_logits(m, &targets.mask_targets, (npos * s * s) as f64)?;
        (bbox, mask)
    };
    let partial = tape.add(cls, bbox)?;
    let total = tape.add(partial, mask)?;
    let v = |t: &Tape, x: Var| t.value(x).data()[0];
    let breakdown = LossBreakdown {
        cls_loss: v(tape, cls),
        box_loss: v(tape, bbox),
        mask_loss: v(tape, mask),
        total: v(tape, total),
    };
    Ok((
        LossVars {
            cls,
            bbox,
            mask,
            total,
        },
        breakdown,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::{generate_scene, SceneConfig};

    #[test]
    fn ground_truth_proposals_are_positive() {
        let s = generate_scene(&SceneConfig::default(), 4);
        let rois: Vec<RoiBox> = s
            .instances
            .iter()
            .map(|i| RoiBox::new(0, i.bbox[0], i.bbox[1], i.bbox[2], i.bbox[3]))
            .collect();
        let t = assign_targets(&rois, &[&s], 0.5, 14).unwrap();
        assert_eq!(t.positives.len(), rois.len());
        assert!(t.box_targets.iter().all(|d| *d == [0.0; 4]));
        assert_eq!(t.mask_targets.len(), rois.len() * 196);
        for (k, inst) in s.instances.iter().enumerate() {
            assert_eq!(t.labels[k], inst.class);
        }
    }

    #[test]
    fn perfect_outputs_give_near_zero_loss() {
        let mut tape = Tape::new();
        let targets = RoiTargets {
            labels: alloc::vec![2, 0],
            positives: alloc::vec![0],
            box_targets: alloc::vec![[0.5, -0.25, 0.0, 1.0]],
            mask_targets: alloc::vec![1.0, 0.0, 0.0, 1.0],
            mask_size: 2,
        };
        let mut logits = Tensor::zeros([2, 4]);
        logits.data_mut()[2] = 30.0;
        logits.data_mut()[4] = 30.0;
        let cls = tape.variable(logits);
        let deltas = tape.variable(
            Tensor::new(
                [2, 4],
                alloc::vec![0.5, -0.25, 0.0, 1.0, 9.0, 9.0, 9.0, 9.0],
            )
            .unwrap(),
        );
        let mask =
            tape.variable(Tensor::new([1, 2, 2], alloc::vec![30.0, -30.0, -30.0, 30.0]).unwrap());
        let (_, l) = compute_losses(&mut tape, cls, deltas, Some(mask), &targets).unwrap();
        assert!(l.cls_loss < 1e-6);
        assert_eq!(l.box_loss, 0.0);
        assert!(l.mask_loss < 1e-6);
        assert_eq!(l.total, l.cls_loss + l.box_loss + l.mask_loss);
    }

    #[test]
    fn no_positives_zero_box_and_mask() {
        let mut tape = Tape::new();
        let targets = RoiTargets {
            labels: alloc::vec![0],
            mask_size: 2,
            ..RoiTargets::default()
        };
        let cls = tape.variable(Tensor::zeros([1, 4]));
        let deltas = tape.variable(Tensor::zeros([1, 4]));
        let (_, l) = compute_losses(&mut tape, cls, deltas, None, &targets).unwrap();
        assert_eq!((l.box_loss, l.mask_loss), (0.0, 0.0));
        assert!((l.cls_loss - libm::log(4.0)).abs() < 1e-12);
    }
}
