//! Naive reference implementations written as plain loops, independent of the
//! GEMM, tap-table and tape machinery in the core crate.

use ctxagg_core::toy::boxes::{iou, Bbox};
use ctxagg_core::toy::{NmsMode, SoftNmsConfig};
use ctxagg_core::Tensor;

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    x.shape().nchw().expect("oracle inputs are NxCxHxW")
}

/// Direct 7-deep loop cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, w) = dims4(x);
    let (cout, kcin, kh, kw) = dims4(k);
    assert_eq!(cin, kcin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let o = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += k.at4(co, ci, i, j) * x.at4(b, ci, y as usize, xx as usize);
                            }
                        }
                    }
                    o[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let o = out.data_mut();
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..window {
                        for j in 0..window {
                            m = m.max(x.at4(b, ch, oy * stride + i, ox * stride + j));
                        }
                    }
                    o[idx] = m;
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Half-pixel bilinear sample of one plane at `(y, x)`, clamping the source
/// coordinate into the image and reading border pixels beyond it.
fn half_pixel(x: &Tensor, b: usize, ch: usize, sy: f64, sx: f64) -> f64 {
    let (_, _, h, w) = dims4(x);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let v00 = x.at4(b, ch, y0, x0);
    let v01 = x.at4(b, ch, y0, x1);
    let v10 = x.at4(b, ch, y1, x0);
    let v11 = x.at4(b, ch, y1, x1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// `align_corners = false` resampling: output pixel `o` reads source coordinate
/// `(o + 0.5) * in / out - 0.5`.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let o = out.data_mut();
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                    let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                    o[idx] = half_pixel(x, b, ch, sy, sx);
                    idx += 1;
                }
            }
        }
    }
    out
}

/// Bilinear read with the RoIAlign boundary rule: samples more than one pixel
/// outside the map contribute zero.
fn roi_sample(x: &Tensor, b: usize, ch: usize, y: f64, xx: f64) -> f64 {
    let (_, _, h, w) = dims4(x);
    if y < -1.0 || y > h as f64 || xx < -1.0 || xx > w as f64 {
        return 0.0;
    }
    half_pixel(x, b, ch, y.max(0.0), xx.max(0.0))
}

/// RoIAlign with the half-pixel offset: box `(x1, y1, x2, y2)` in image pixels on
/// batch item `b`, `s x s` bins of `ratio x ratio` samples each. Returns `C x s x s`.
pub fn roi_align(
    x: &Tensor,
    b: usize,
    roi: [f64; 4],
    s: usize,
    ratio: usize,
    scale: f64,
) -> Tensor {
    let (_, c, _, _) = dims4(x);
    let [x1, y1, x2, y2] = roi;
    let (sx, sy) = (x1 * scale - 0.5, y1 * scale - 0.5);
    let bw = (x2 - x1) * scale / s as f64;
    let bh = (y2 - y1) * scale / s as f64;
    let mut out = Tensor::zeros([c, s, s]);
    let o = out.data_mut();
    for ch in 0..c {
        for py in 0..s {
            for px in 0..s {
                let mut acc = 0.0;
                for iy in 0..ratio {
                    for ix in 0..ratio {
                        let y = sy + (py as f64 + (iy as f64 + 0.5) / ratio as f64) * bh;
                        let xx = sx + (px as f64 + (ix as f64 + 0.5) / ratio as f64) * bw;
                        acc += roi_sample(x, b, ch, y, xx);
                    }
                }
                o[(ch * s + py) * s + px] = acc / (ratio * ratio) as f64;
            }
        }
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Soft-NMS by repeated full re-sorting: at each round the highest live score
/// (lowest index on ties) is emitted and every other live score is decayed.
pub fn soft_nms(boxes: &[Bbox], scores: &[f64], cfg: &SoftNmsConfig) -> Vec<(usize, f64)> {
    let mut live: Vec<(usize, f64)> = scores.iter().cloned().enumerate().collect();
    let mut kept = Vec::new();
    loop {
        live.retain(|&(_, s)| s >= cfg.score_floor);
        if live.is_empty() {
            return kept;
        }
        live.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let (top, score) = live.remove(0);
        kept.push((top, score));
        for (i, s) in live.iter_mut() {
            let o = iou(&boxes[top], &boxes[*i]);
            let decay = match cfg.mode {
                NmsMode::Linear if o > cfg.iou_threshold => 1.0 - o,
                NmsMode::Linear => 1.0,
                NmsMode::Gaussian => (-o * o / cfg.sigma).exp(),
            };
            *s *= decay;
        }
    }
}

/// Plain weights of one gated context block with a single refinement conv.
#[derive(Clone, Debug)]
pub struct CaWeights {
    /// `C` key weights and the key bias.
    pub key: Vec<f64>,
    pub key_bias: f64,
    /// `C x C`, row = output channel.
    pub value: Vec<f64>,
    pub value_bias: Vec<f64>,
    pub gate: Vec<f64>,
    pub gate_bias: f64,
    pub refine: Vec<f64>,
    pub refine_bias: Vec<f64>,
}

/// Per-sample maps of the context block.
#[derive(Clone, Debug)]
pub struct CaMaps {
    /// Pooling weights over the `HW` pixels.
    pub attention: Vec<f64>,
    pub gate: Vec<f64>,
    pub context: Vec<f64>,
    /// `C x H x W`.
    pub output: Vec<f64>,
}

/// Context block on one `C x H x W` sample stored channel-major in `p`.
pub fn cablock(p: &[f64], c: usize, hw: usize, wt: &CaWeights) -> CaMaps {
    let px = |ch: usize, m: usize| p[ch * hw + m];
    let key: Vec<f64> = (0..hw)
        .map(|m| wt.key_bias + (0..c).map(|ch| wt.key[ch] * px(ch, m)).sum::<f64>())
        .collect();
    let attention = softmax(&key);
    let mut pooled = vec![0.0; c];
    for (co, slot) in pooled.iter_mut().enumerate() {
        for (m, a) in attention.iter().enumerate() {
            let mut v = wt.value_bias[co];
            for ci in 0..c {
                v += wt.value[co * c + ci] * px(ci, m);
            }
            *slot += a * v;
        }
    }
    let context: Vec<f64> = (0..c)
        .map(|co| {
            wt.refine_bias[co]
                + (0..c)
                    .map(|ci| wt.refine[co * c + ci] * pooled[ci])
                    .sum::<f64>()
        })
        .collect();
    let gl: Vec<f64> = (0..hw)
        .map(|m| wt.gate_bias + (0..c).map(|ch| wt.gate[ch] * px(ch, m)).sum::<f64>())
        .collect();
    let gate = softmax(&gl);
    let mut output = p.to_vec();
    for ch in 0..c {
        for m in 0..hw {
            output[ch * hw + m] += gate[m] * context[ch];
        }
    }
    CaMaps {
        attention,
        gate,
        context,
        output,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([1, 1, 3, 3], |i| i as f64);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, None, 1, 1).data(), x.data());
    }

    #[test]
    fn resize_doubling_row() {
        // 2 -> 4 samples at source coordinates -0.25, 0.25, 0.75, 1.25
        let x = Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn roi_align_aligned_cells_average() {
        // box [1,3)x[1,3) at scale 1, one bin, 2x2 samples land on pixel centers
        let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
        let y = roi_align(&x, 0, [1.0, 1.0, 3.0, 3.0], 1, 2, 1.0);
        let mean =
            (x.at4(0, 0, 1, 1) + x.at4(0, 0, 1, 2) + x.at4(0, 0, 2, 1) + x.at4(0, 0, 2, 2)) / 4.0;
        assert_eq!(y.data(), &[mean]);
    }
}
