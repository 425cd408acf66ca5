//! Inference and recall / mask-IoU evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{clip, decode, iou, jitter, soft_nms, Bbox, SoftNmsConfig};
use super::model::ToyDetector;
use super::scene::{generate_scene, Scene, NUM_CLASSES};
use super::ToyConfig;
use crate::error::{Error, Result};
use crate::ops::{sigmoid, softmax_tensor, RoiBox};
use crate::param::ParamStore;
use crate::pyramid::FeaturePyramid;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenes: usize,
    /// Held-out scenes use seeds `first_seed..first_seed + scenes`.
    pub first_seed: u64,
    pub grid_scales: Vec<f64>,
    /// Height / width ratios.
    pub grid_aspects: Vec<f64>,
    /// Grid step as a fraction of the box scale.
    pub grid_step: f64,
    /// Minimum foreground probability for a box to become a detection.
    pub score_threshold: f64,
    pub max_detections: usize,
    pub match_iou: f64,
    pub nms: SoftNmsConfig,
    /// Proposals scored per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenes: 16,
            first_seed: 1 << 40,
            grid_scales: vec![16.0, 28.0, 44.0],
            grid_aspects: vec![0.5, 1.0, 2.0],
            grid_step: 0.5,
            score_threshold: 0.5,
            max_detections: 50,
            match_iou: 0.5,
            nms: SoftNmsConfig::default(),
            chunk: 128,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self
            .grid_scales
            .iter()
            .chain(&self.grid_aspects)
            .any(|&v| !(v > 0.0))
            || !(self.grid_step > 0.0)
        {
            return Err(Error::invalid(
                "eval config",
                "grid scales, aspects and step must be positive",
            ));
        }
        if self.chunk == 0 {
            return Err(Error::invalid("eval config", "chunk must be positive"));
        }
        Ok(())
    }
}

/// How inference proposals are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ProposalMode {
    /// Sliding grid of boxes over the image.
    Grid,
    /// Ground-truth boxes with edges jittered by up to `fraction` of their size.
    Jitter { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub bbox: Bbox,
    pub score: f64,
    /// Row-major image-sized occupancy.
    pub mask: Vec<bool>,
}

/// Boxes of every scale and aspect, centered on a regular grid.
pub fn grid_proposals(size: usize, scales: &[f64], aspects: &[f64], step: f64) -> Vec<Bbox> {
    let s = size as f64;
    let mut out = Vec::new();
    for &scale in scales {
        let stride = (scale * step).max(1.0);
        for &aspect in aspects {
            let w = scale / libm::sqrt(aspect);
            let h = scale * libm::sqrt(aspect);
            let mut cy = stride / 2.0;
            while cy < s {
                let mut cx = stride / 2.0;
                while cx < s {
                    let b = clip(&[cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], s);
                    if b[2] - b[0] >= 2.0 && b[3] - b[1] >= 2.0 {
                        out.push(b);
                    }
                    cx += stride;
                }
                cy += stride;
            }
        }
    }
    out
}

fn to_rois(boxes: &[Bbox]) -> Vec<RoiBox> {
    boxes
        .iter()
        .map(|b| RoiBox::new(0, b[0], b[1], b[2], b[3]))
        .collect()
}

/// Pastes `S x S` mask probabilities into the image inside `b`, thresholded at 0.5.
pub fn paste_mask(probs: &[f64], s: usize, b: &Bbox, size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let y0 = libm::floor(b[1]).max(0.0) as usize;
    let x0 = libm::floor(b[0]).max(0.0) as usize;
    let y1 = (libm::ceil(b[3]) as usize).min(size);
    let x1 = (libm::ceil(b[2]) as usize).min(size);
    for y in y0..y1 {
        let v = (y as f64 + 0.5 - b[1]) / h;
        if !(0.0..1.0).contains(&v) {
            continue;
        }
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b[0]) / w;
            if !(0.0..1.0).contains(&u) {
                continue;
            }
            let cell = (v * s as f64) as usize * s + (u * s as f64) as usize;
            out[y * size + x] = probs[cell] >= 0.5;
        }
    }
    out
}

/// Runs the detector on one scene.
pub fn predict(
    model: &ToyDetector,
    store: &ParamStore,
    config: &ToyConfig,
    scene: &Scene,
    proposals: &[Bbox],
) -> Result<Vec<Prediction>> {
    let cfg = &config.eval;
    let n = scene.size;
    let mut tape = Tape::new();
    let img = tape.constant(scene.image.clone().reshape([1, 3, n, n])?);
    let pyr = model.features(&mut tape, store, img)?.values(&tape);
    let on_fresh_tape = |tape: &mut Tape, pyr: &FeaturePyramid<Tensor>| pyr.to_tape(tape, false);

    // per class candidates
    let mut cand: Vec<Vec<(Bbox, f64)>> = vec![Vec::new(); NUM_CLASSES + 1];
    for chunk in proposals.chunks(cfg.chunk) {
        let mut t = Tape::new();
        let p = on_fresh_tape(&mut t, &pyr);
        let (cls, deltas) = model.detect(&mut t, store, &p, &to_rois(chunk))?;
        let probs = softmax_tensor(t.value(cls), 1)?;
        let k1 = NUM_CLASSES + 1;
        for (i, b) in chunk.iter().enumerate() {
            let row = &probs.data()[i * k1..(i + 1) * k1];
            let (class, &score) =
                row.iter()
                    .enumerate()
                    .skip(1)
                    .fold((0, &0.0), |a, c| if c.1 > a.1 { c } else { a });
            if class == 0 || score < cfg.score_threshold {
                continue;
            }
            let d = &t.value(deltas).data()[i * 4..i * 4 + 4];
            let db = clip(&decode(b, d), n as f64);
            if db[2] - db[0] >= 1.0 && db[3] - db[1] >= 1.0 {
                cand[class].push((db, score));
            }
        }
    }

    let mut kept: Vec<(usize, Bbox, f64)> = Vec::new();
    for (class, c) in cand.iter().enumerate().skip(1) {
        let boxes: Vec<Bbox> = c.iter().map(|x| x.0).collect();
        let scores: Vec<f64> = c.iter().map(|x| x.1).collect();
        for (i, s) in soft_nms(&boxes, &scores, &cfg.nms) {
            kept.push((class, boxes[i], s));
        }
    }
    kept.sort_by(|a, b| b.2.total_cmp(&a.2));
    kept.truncate(cfg.max_detections);

    let s = config.hroie.mask_size;
    let mut out = Vec::with_capacity(kept.len());
    let boxes: Vec<Bbox> = kept.iter().map(|k| k.1).collect();
    for (chunk_idx, chunk) in boxes.chunks(cfg.chunk).enumerate() {
        let mut t = Tape::new();
        let p = on_fresh_tape(&mut t, &pyr);
        let m = model.mask_logits(&mut t, store, &p, &to_rois(chunk))?;
        let logits = t.value(m).data();
        for (i, b) in chunk.iter().enumerate() {
            let probs: Vec<f64> = logits[i * s * s..(i + 1) * s * s]
                .iter()
                .map(|&l| sigmoid(l))
                .collect();
            let (class, _, score) = kept[chunk_idx * cfg.chunk + i];
            out.push(Prediction {
                class,
                bbox: *b,
                score,
                mask: paste_mask(&probs, s, b, n),
            });
        }
    }
    Ok(out)
}

/// Proposals for `scene` under `mode`.
pub fn proposals_for(config: &ToyConfig, scene: &Scene, mode: ProposalMode) -> Vec<Bbox> {
    match mode {
        ProposalMode::Grid => grid_proposals(
            scene.size,
            &config.eval.grid_scales,
            &config.eval.grid_aspects,
            config.eval.grid_step,
        ),
        ProposalMode::Jitter { fraction, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.seed);
            scene
                .instances
                .iter()
                .map(|i| clip(&jitter(&i.bbox, fraction, &mut rng), scene.size as f64))
                .filter(|b| b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0)
                .collect()
        }
    }
}

/// Matching statistics for one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub ground_truth: usize,
    pub matched: usize,
    pub mask_iou_sum: f64,
    pub detections: usize,
}

/// Greedy one-to-one matching in descending score order: each prediction takes
/// the unmatched same-class instance of highest box IoU, if that IoU reaches
/// `match_iou`.
pub fn score_scene(scene: &Scene, preds: &[Prediction], match_iou: f64) -> SceneStats {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; scene.instances.len()];
    let mut stats = SceneStats {
        ground_truth: scene.instances.len(),
        detections: preds.len(),
        ..SceneStats::default()
    };
    for &p in &order {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, inst) in scene.instances.iter().enumerate() {
            if taken[g] || inst.class != pred.class {
                continue;
            }
            let o = iou(&pred.bbox, &inst.bbox);
            if o >= match_iou && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            stats.matched += 1;
            stats.mask_iou_sum += mask_iou(&pred.mask, &scene.instances[g].mask);
        }
    }
    stats
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub scenes: usize,
    pub ground_truth: usize,
    pub matched: usize,
    pub detections: usize,
    /// Matched instances over all instances.
    pub recall: f64,
    /// Mask IoU averaged over all instances; unmatched instances count as 0.
    pub mean_mask_iou: f64,
}

impl EvalMetrics {
    pub fn from_stats(stats: &[SceneStats]) -> Self {
        let gt: usize = stats.iter().map(|s| s.ground_truth).sum();
        let matched: usize = stats.iter().map(|s| s.matched).sum();
        let iou: f64 = stats.iter().map(|s| s.mask_iou_sum).sum();
        let denom = gt.max(1) as f64;
        EvalMetrics {
            scenes: stats.len(),
            ground_truth: gt,
            matched,
            detections: stats.iter().map(|s| s.detections).sum(),
            recall: matched as f64 / denom,
            mean_mask_iou: iou / denom,
        }
    }
}

/// Scores externally supplied predictions, one list per scene.
pub fn evaluate_predictions(
    scenes: &[Scene],
    preds: &[Vec<Prediction>],
    match_iou: f64,
) -> Result<EvalMetrics> {
    if scenes.len() != preds.len() {
        return Err(Error::invalid(
            "evaluate_predictions",
            "one prediction list per scene",
        ));
    }
    let stats: Vec<SceneStats> = scenes
        .iter()
        .zip(preds)
        .map(|(s, p)| score_scene(s, p, match_iou))
        .collect();
    Ok(EvalMetrics::from_stats(&stats))
}

/// Held-out scene `k` of the evaluation range.
pub fn eval_scene(config: &ToyConfig, k: usize) -> Scene {
    generate_scene(&config.scene, config.eval.first_seed + k as u64)
}

/// Statistics for held-out scene `k`; independent across `k`.
pub fn evaluate_scene(
    model: &ToyDetector,
    store: &ParamStore,
    config: &ToyConfig,
    k: usize,
    mode: ProposalMode,
) -> Result<SceneStats> {
    let scene = eval_scene(config, k);
    let proposals = proposals_for(config, &scene, mode);
    let preds = if proposals.is_empty() {
        Vec::new()
    } else {
        predict(model, store, config, &scene, &proposals)?
    };
    Ok(score_scene(&scene, &preds, config.eval.match_iou))
}

/// Recall and mean mask IoU over the held-out scenes.
pub fn evaluate(
    model: &ToyDetector,
    store: &ParamStore,
    config: &ToyConfig,
    mode: ProposalMode,
) -> Result<EvalMetrics> {
    let stats = (0..config.eval.scenes)
        .map(|k| evaluate_scene(model, store, config, k, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalMetrics::from_stats(&stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::scene::SceneConfig;

    fn oracle(scene: &Scene) -> Vec<Prediction> {
        scene
            .instances
            .iter()
            .map(|i| Prediction {
                class: i.class,
                bbox: i.bbox,
                score: 1.0,
                mask: i.mask.clone(),
            })
            .collect()
    }

    #[test]
    fn oracle_predictions_are_perfect() {
        let scenes: Vec<Scene> = (0..5)
            .map(|s| generate_scene(&SceneConfig::default(), s))
            .collect();
        let preds: Vec<_> = scenes.iter().map(oracle).collect();
        let m = evaluate_predictions(&scenes, &preds, 0.5).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.mean_mask_iou, 1.0);
    }

    #[test]
    fn duplicates_do_not_change_recall() {
        let scenes: Vec<Scene> = (0..5)
            .map(|s| generate_scene(&SceneConfig::default(), s))
            .collect();
        let single: Vec<_> = scenes.iter().map(oracle).collect();
        let doubled: Vec<_> = single
            .iter()
            .map(|p| p.iter().chain(p).cloned().collect())
            .collect();
        let a = evaluate_predictions(&scenes, &single, 0.5).unwrap();
        let b = evaluate_predictions(&scenes, &doubled, 0.5).unwrap();
        assert_eq!(a.recall, b.recall);
        assert_eq!(a.mean_mask_iou, b.mean_mask_iou);
    }

    #[test]
    fn wrong_class_is_unmatched() {
        let s = generate_scene(&SceneConfig::default(), 1);
        let mut p = oracle(&s);
        for x in &mut p {
            x.class = x.class % NUM_CLASSES + 1;
        }
        assert_eq!(score_scene(&s, &p, 0.5).matched, 0);
    }

    #[test]
    fn grid_covers_image() {
        let g = grid_proposals(128, &[16.0], &[1.0], 0.5);
        assert_eq!(g.len(), 16 * 16);
        assert!(g.iter().all(|b| b[0] >= 0.0 && b[3] <= 128.0));
    }

    #[test]
    fn full_mask_pastes_box() {
        let m = paste_mask(&[1.0; 4], 2, &[2.0, 3.0, 6.0, 5.0], 8);
        assert_eq!(m.iter().filter(|&&v| v).count(), 8);
        assert!(m[3 * 8 + 2] && !m[3 * 8 + 6]);
    }
}
