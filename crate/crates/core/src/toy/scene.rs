//! Synthetic scenes: colored shapes on a textured background.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::Bbox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Foreground categories; label 0 is background.
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle = 1,
    Ellipse = 2,
    Diamond = 3,
}

impl ShapeKind {
    pub fn from_class(class: usize) -> Option<Self> {
        match class {
            1 => Some(ShapeKind::Rectangle),
            2 => Some(ShapeKind::Ellipse),
            3 => Some(ShapeKind::Diamond),
            _ => None,
        }
    }

    /// Whether the normalized offset `(u, v)` in `[-1, 1]^2` is inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Diamond => libm::fabs(u) + libm::fabs(v) <= 1.0,
        }
    }

    fn tint(self) -> [f64; 3] {
        match self {
            ShapeKind::Rectangle => [0.9, 0.25, 0.2],
            ShapeKind::Ellipse => [0.2, 0.85, 0.3],
            ShapeKind::Diamond => [0.25, 0.35, 0.95],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bounds on the side of a shape's bounding square before rasterization.
    pub min_side: usize,
    pub max_side: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 128,
            min_objects: 1,
            max_objects: 5,
            min_side: 12,
            max_side: 40,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid(
                "scene",
                "need 1 <= min_objects <= max_objects",
            ));
        }
        if self.min_side < 4 || self.min_side > self.max_side || self.max_side > self.size {
            return Err(Error::invalid(
                "scene",
                format!(
                    "need 4 <= min_side <= max_side <= size, got {}..{} in {}",
                    self.min_side, self.max_side, self.size
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// `1..=NUM_CLASSES`.
    pub class: usize,
    /// Tight box around the mask, in pixel-edge coordinates.
    pub bbox: Bbox,
    /// Row-major `size x size` occupancy.
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub size: usize,
    /// `3 x size x size`, values roughly in `[0, 1]`.
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

fn overlaps(a: &Bbox, b: &Bbox, margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let mut image = vec![0.0; 3 * n * n];
    for c in 0..3 {
        let base = rng.random_range(0.3..0.5);
        let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
        let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
        for y in 0..n {
            for x in 0..n {
                let texture = 0.08 * libm::sin(fx * x as f64 + px) * libm::sin(fy * y as f64 + py);
                image[(c * n + y) * n + x] = base + texture + rng.random_range(-0.04..0.04);
            }
        }
    }

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..=NUM_CLASSES);
        let kind = ShapeKind::from_class(class).expect("class drawn in range");
        let w = rng.random_range(cfg.min_side..=cfg.max_side);
        let h = rng.random_range(cfg.min_side..=cfg.max_side);
        let mut placed = None;
        for _ in 0..50 {
            let x0 = rng.random_range(0..=n - w);
            let y0 = rng.random_range(0..=n - h);
            let frame = [x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64];
            if instances.iter().all(|i| !overlaps(&i.bbox, &frame, 2.0)) {
                placed = Some((x0, y0));
                break;
            }
        }
        let Some((x0, y0)) = placed else { continue };
        let tint = kind.tint();
        let color: [f64; 3] =
            core::array::from_fn(|c| (tint[c] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
        let mut mask = vec![false; n * n];
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let u = ((x - x0) as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                let v = ((y - y0) as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                if !kind.contains(u, v) {
                    continue;
                }
                mask[y * n + x] = true;
                for c in 0..3 {
                    image[(c * n + y) * n + x] = color[c] + rng.random_range(-0.03..0.03);
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
        instances.push(Instance {
            class,
            bbox: [bx0 as f64, by0 as f64, bx1 as f64, by1 as f64],
            mask,
        });
    }

    Scene {
        seed,
        size: n,
        image: Tensor::new([3, n, n], image).expect("length matches"),
        instances,
    }
}

/// Stacks scene images into `N x 3 x H x W`.
pub fn stack_images(scenes: &[&Scene]) -> Result<Tensor> {
    let Some(first) = scenes.first() else {
        return Err(Error::invalid("stack_images", "no scenes"));
    };
    let n = first.size;
    let mut data = Vec::with_capacity(scenes.len() * 3 * n * n);
    for s in scenes {
        if s.size != n {
            return Err(Error::invalid("stack_images", "scenes differ in size"));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new([scenes.len(), 3, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = SceneConfig::default();
        assert_eq!(generate_scene(&c, 9), generate_scene(&c, 9));
        assert_ne!(generate_scene(&c, 9).image, generate_scene(&c, 10).image);
    }

    #[test]
    fn masks_inside_boxes() {
        let c = SceneConfig::default();
        for seed in 0..50 {
            let s = generate_scene(&c, seed);
            assert!(!s.instances.is_empty());
            for inst in &s.instances {
                for (i, &m) in inst.mask.iter().enumerate() {
                    if m {
                        let (x, y) = ((i % s.size) as f64, (i / s.size) as f64);
                        assert!(x >= inst.bbox[0] && x + 1.0 <= inst.bbox[2]);
                        assert!(y >= inst.bbox[1] && y + 1.0 <= inst.bbox[3]);
                    }
                }
            }
        }
    }
}
