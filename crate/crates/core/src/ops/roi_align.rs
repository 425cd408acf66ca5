//! RoIAlign: bilinear-sampled, bin-averaged crops.
//!
//! Box corners are scaled to the level and shifted by half a pixel so that
//! sample coordinates follow the same pixel-center convention as
//! [`bilinear_resize`](crate::tape::Tape::bilinear_resize).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// A box in input-image pixel coordinates, tagged with the batch entry it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub batch_index: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(batch_index: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        RoiBox {
            batch_index,
            x1,
            y1,
            x2,
            y2,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Clamps the corners to `[0, width] x [0, height]`.
    pub fn clipped(&self, height: f64, width: f64) -> Self {
        RoiBox {
            batch_index: self.batch_index,
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x2 > self.x1 && self.y2 > self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiAlignParams {
    pub out_size: usize,
    pub sampling_ratio: usize,
    pub spatial_scale: f64,
}

/// Per-roi interpolation taps: `(bin, pixel, weight)` with bin averaging folded in.
struct Plan {
    batch: Vec<usize>,
    offsets: Vec<usize>,
    taps: Vec<(u32, u32, f64)>,
}

fn plan(rois: &[RoiBox], n: usize, h: usize, w: usize, p: RoiAlignParams) -> Result<Plan> {
    if p.out_size == 0 || p.sampling_ratio == 0 {
        return Err(Error::invalid(
            "roi_align",
            "out_size and sampling_ratio must be positive",
        ));
    }
    let s = p.out_size;
    let r = p.sampling_ratio;
    let norm = 1.0 / (r * r) as f64;
    let mut out = Plan {
        batch: Vec::with_capacity(rois.len()),
        offsets: vec![0],
        taps: Vec::with_capacity(rois.len() * s * s * r * r * 4),
    };
    for roi in rois {
        if roi.is_degenerate() {
            return Err(Error::invalid(
                "roi_align",
                format!("degenerate box {roi:?}"),
            ));
        }
        if roi.batch_index >= n {
            return Err(Error::invalid(
                "roi_align",
                format!("batch index {} out of range for batch {n}", roi.batch_index),
            ));
        }
        let x0 = roi.x1 * p.spatial_scale - 0.5;
        let y0 = roi.y1 * p.spatial_scale - 0.5;
        let bin_w = roi.width() * p.spatial_scale / s as f64;
        let bin_h = roi.height() * p.spatial_scale / s as f64;
        for by in 0..s {
            for bx in 0..s {
                let bin = (by * s + bx) as u32;
                for iy in 0..r {
                    let y = y0 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / r as f64;
                    for ix in 0..r {
                        let x = x0 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / r as f64;
                        push_bilinear(&mut out.taps, bin, y, x, h, w, norm);
                    }
                }
            }
        }
        out.batch.push(roi.batch_index);
        out.offsets.push(out.taps.len());
    }
    Ok(out)
}

fn axis(v: f64, len: usize) -> Option<(usize, usize, f64)> {
    if v < -1.0 || v > len as f64 {
        return None;
    }
    let v = v.max(0.0);
    let lo = libm::floor(v) as usize;
    if lo + 1 >= len {
        Some((len - 1, len - 1, 0.0))
    } else {
        Some((lo, lo + 1, v - lo as f64))
    }
}

fn push_bilinear(
    taps: &mut Vec<(u32, u32, f64)>,
    bin: u32,
    y: f64,
    x: f64,
    h: usize,
    w: usize,
    norm: f64,
) {
    let (Some((y0, y1, ly)), Some((x0, x1, lx))) = (axis(y, h), axis(x, w)) else {
        return;
    };
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (py, px, wt) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        taps.push((bin, (py * w + px) as u32, wt * norm));
    }
}

fn apply(x: &Tensor, rois: &[RoiBox], p: RoiAlignParams) -> Result<(Tensor, Plan)> {
    let (n, c, h, w) = x.shape().nchw().ok_or_else(|| {
        Error::invalid(
            "roi_align",
            format!("input must be NxCxHxW, got {}", x.shape()),
        )
    })?;
    let plan = plan(rois, n, h, w, p)?;
    let bins = p.out_size * p.out_size;
    let mut out = vec![0.0; rois.len() * c * bins];
    let data = x.data();
    for (r, &b) in plan.batch.iter().enumerate() {
        let taps = &plan.taps[plan.offsets[r]..plan.offsets[r + 1]];
        for ch in 0..c {
            let src = &data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let dst = &mut out[(r * c + ch) * bins..(r * c + ch + 1) * bins];
            for &(bin, pix, wt) in taps {
                dst[bin as usize] += wt * src[pix as usize];
            }
        }
    }
    Ok((
        Tensor::new([rois.len(), c, p.out_size, p.out_size], out)?,
        plan,
    ))
}

/// RoIAlign on a plain tensor; output is `R x C x S x S`.
pub fn roi_align_tensor(x: &Tensor, rois: &[RoiBox], params: RoiAlignParams) -> Result<Tensor> {
    apply(x, rois, params).map(|(t, _)| t)
}

pub(crate) struct RoiAlignOp {
    pub(crate) input: Var,
    plan: Plan,
    bins: usize,
}

impl Tape {
    pub fn roi_align(
        &mut self,
        input: Var,
        rois: &[RoiBox],
        params: RoiAlignParams,
    ) -> Result<Var> {
        let (value, plan) = apply(self.value(input), rois, params)?;
        let bins = params.out_size * params.out_size;
        Ok(self.push(value, Op::RoiAlign(RoiAlignOp { input, plan, bins })))
    }
}

impl RoiAlignOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let (_, c, h, w) = nodes[self.input.0].value.shape().nchw().unwrap();
        let Some(dx) = sink.slot(self.input) else {
            return;
        };
        for (r, &b) in self.plan.batch.iter().enumerate() {
            let taps = &self.plan.taps[self.plan.offsets[r]..self.plan.offsets[r + 1]];
            for ch in 0..c {
                let dst = &mut dx[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let src = &g[(r * c + ch) * self.bins..(r * c + ch + 1) * self.bins];
                for &(bin, pix, wt) in taps {
                    dst[pix as usize] += wt * src[bin as usize];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(s: usize, scale: f64) -> RoiAlignParams {
        RoiAlignParams {
            out_size: s,
            sampling_ratio: 2,
            spatial_scale: scale,
        }
    }

    #[test]
    fn constant_map() {
        let x = Tensor::full([1, 3, 8, 8], 5.0);
        for roi in [
            RoiBox::new(0, 0.0, 0.0, 32.0, 32.0),
            RoiBox::new(0, 1.3, 7.7, 2.1, 30.0),
            RoiBox::new(0, 31.0, 31.0, 32.0, 32.0),
        ] {
            let y = roi_align_tensor(&x, &[roi], params(3, 0.25)).unwrap();
            assert!(y.data().iter().all(|v| (v - 5.0).abs() < 1e-12), "{roi:?}");
        }
    }

    #[test]
    fn aligned_box_is_average_pool() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| (i * i) as f64);
        // box covers cells [0,4)x[0,4); with S = 2 and ratio 2 the samples land on cell centers
        let y =
            roi_align_tensor(&x, &[RoiBox::new(0, 0.0, 0.0, 4.0, 4.0)], params(2, 1.0)).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        acc += x.at4(0, 0, by * 2 + i, bx * 2 + j);
                    }
                }
                assert!((y.at4(0, 0, by, bx) - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_rejected() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        let err = roi_align_tensor(&x, &[RoiBox::new(0, 2.0, 1.0, 2.0, 3.0)], params(2, 1.0));
        assert!(err.is_err());
        let err = roi_align_tensor(&x, &[RoiBox::new(1, 0.0, 0.0, 2.0, 3.0)], params(2, 1.0));
        assert!(err.is_err());
    }
}
