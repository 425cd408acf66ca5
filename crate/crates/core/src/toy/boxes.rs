//! Axis-aligned boxes, box-delta coding and Soft-NMS.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// `[x1, y1, x2, y2]` in pixel-edge coordinates.
pub type Bbox = [f64; 4];

/// Divisors applied to `(dx, dy, dw, dh)` targets.
pub const BOX_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn area(b: &Bbox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn clip(b: &Bbox, size: f64) -> Bbox {
    [
        b[0].clamp(0.0, size),
        b[1].clamp(0.0, size),
        b[2].clamp(0.0, size),
        b[3].clamp(0.0, size),
    ]
}

fn center_size(b: &Bbox) -> (f64, f64, f64, f64) {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    (b[0] + 0.5 * w, b[1] + 0.5 * h, w, h)
}

/// Regression target taking `proposal` to `target`.
pub fn encode(proposal: &Bbox, target: &Bbox) -> [f64; 4] {
    let (px, py, pw, ph) = center_size(proposal);
    let (gx, gy, gw, gh) = center_size(target);
    [
        (gx - px) / pw / BOX_STDS[0],
        (gy - py) / ph / BOX_STDS[1],
        libm::log(gw / pw) / BOX_STDS[2],
        libm::log(gh / ph) / BOX_STDS[3],
    ]
}

/// Inverse of [`encode`], with the size terms clamped.
pub fn decode(proposal: &Bbox, deltas: &[f64]) -> Bbox {
    let (px, py, pw, ph) = center_size(proposal);
    let cx = px + deltas[0] * BOX_STDS[0] * pw;
    let cy = py + deltas[1] * BOX_STDS[1] * ph;
    let w = pw * libm::exp((deltas[2] * BOX_STDS[2]).min(MAX_LOG_SCALE));
    let h = ph * libm::exp((deltas[3] * BOX_STDS[3]).min(MAX_LOG_SCALE));
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

/// Moves each edge by up to `fraction` of the box's width or height.
pub fn jitter(b: &Bbox, fraction: f64, rng: &mut impl Rng) -> Bbox {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let mut d = |s: f64| {
        if fraction > 0.0 {
            rng.random_range(-fraction..=fraction) * s
        } else {
            0.0
        }
    };
    [b[0] + d(w), b[1] + d(h), b[2] + d(w), b[3] + d(h)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    /// `s <- s * (1 - iou)` when `iou > threshold`.
    Linear,
    /// `s <- s * exp(-iou^2 / sigma)`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftNmsConfig {
    pub iou_threshold: f64,
    pub mode: NmsMode,
    pub sigma: f64,
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            iou_threshold: 0.5,
            mode: NmsMode::Linear,
            sigma: 0.5,
            score_floor: 0.001,
        }
    }
}

/// Soft-NMS. Returns `(index, decayed score)` in selection order; boxes whose
/// score falls below the floor are dropped.
pub fn soft_nms(boxes: &[Bbox], scores: &[f64], cfg: &SoftNmsConfig) -> Vec<(usize, f64)> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut live: Vec<(usize, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= cfg.score_floor)
        .map(|(i, &s)| (i, s))
        .collect();
    let mut kept = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let mut best = 0;
        for (k, &(i, s)) in live.iter().enumerate() {
            let (bi, bs) = live[best];
            if s > bs || (s == bs && i < bi) {
                best = k;
            }
        }
        let (top, score) = live.swap_remove(best);
        kept.push((top, score));
        for (i, s) in live.iter_mut() {
            let o = iou(&boxes[top], &boxes[*i]);
            match cfg.mode {
                NmsMode::Linear => {
                    if o > cfg.iou_threshold {
                        *s *= 1.0 - o;
                    }
                }
                NmsMode::Gaussian => *s *= libm::exp(-o * o / cfg.sigma),
            }
        }
        live.retain(|&(_, s)| s >= cfg.score_floor);
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn iou_values() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[2.0, 0.0, 4.0, 2.0]), 0.0);
        assert!((iou(&a, &[1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn delta_roundtrip() {
        let p = [10.0, 12.0, 30.0, 40.0];
        let g = [8.0, 15.0, 35.0, 38.0];
        let d = decode(&p, &encode(&p, &g));
        for k in 0..4 {
            assert!((d[k] - g[k]).abs() < 1e-12);
        }
        assert_eq!(encode(&p, &p), [0.0; 4]);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(jitter(&b, 0.0, &mut rng), b);
        let j = jitter(&b, 0.1, &mut rng);
        for k in 0..4 {
            assert!((j[k] - b[k]).abs() <= 0.3 + 1e-12);
        }
    }

    #[test]
    fn disjoint_boxes_keep_scores_in_order() {
        let boxes = [
            [0.0, 0.0, 1.0, 1.0],
            [5.0, 5.0, 6.0, 6.0],
            [10.0, 0.0, 11.0, 1.0],
        ];
        let kept = soft_nms(&boxes, &[0.3, 0.9, 0.6], &SoftNmsConfig::default());
        assert_eq!(kept, [(1, 0.9), (2, 0.6), (0, 0.3)]);
    }

    #[test]
    fn identical_duplicate_dropped() {
        let b = [0.0, 0.0, 4.0, 4.0];
        let kept = soft_nms(&[b, b], &[0.9, 0.8], &SoftNmsConfig::default());
        assert_eq!(kept, [(0, 0.9)]);
    }

    #[test]
    fn below_threshold_untouched() {
        // overlap 4 of union 10 -> iou 0.4
        let a = [0.0, 0.0, 7.0, 1.0];
        let b = [3.0, 0.0, 10.0, 1.0];
        assert!((iou(&a, &b) - 0.4).abs() < 1e-15);
        let kept = soft_nms(&[a, b], &[0.9, 0.8], &SoftNmsConfig::default());
        assert_eq!(kept, [(0, 0.9), (1, 0.8)]);
    }

    #[test]
    fn partial_overlap_decays_linearly() {
        let a = [0.0, 0.0, 4.0, 1.0];
        let b = [1.0, 0.0, 4.0, 1.0];
        let o = iou(&a, &b);
        let kept = soft_nms(&[a, b], &[0.9, 0.8], &SoftNmsConfig::default());
        assert_eq!(kept[1], (1, 0.8 * (1.0 - o)));
    }
}
