//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Source taps `(lo, hi, weight_hi)` for every output coordinate along one axis.
pub(crate) fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_len - 1);
            let hi = if lo + 1 < in_len { lo + 1 } else { lo };
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) struct ResizeOp {
    pub(crate) input: Var,
}

pub fn bilinear_resize_tensor(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.shape().nchw().ok_or_else(|| {
        Error::invalid(
            "bilinear_resize",
            format!("input must be NxCxHxW, got {}", x.shape()),
        )
    })?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "bilinear_resize",
            "sizes must be at least 1",
        ));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = x.data();
    let mut out = vec![0.0; n * c * out_h * out_w];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bottom = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                o[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

impl Tape {
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = bilinear_resize_tensor(self.value(input), out_h, out_w)?;
        Ok(self.push(value, Op::Resize(ResizeOp { input })))
    }
}

impl ResizeOp {
    pub(crate) fn backward(
        &self,
        nodes: &[Node],
        out: &Tensor,
        g: &[f64],
        sink: &mut GradSink<'_>,
    ) {
        let (_, _, h, w) = nodes[self.input.0].value.shape().nchw().unwrap();
        let (n, c, out_h, out_w) = out.shape().nchw().unwrap();
        let Some(dx) = sink.slot(self.input) else {
            return;
        };
        let ty = axis_taps(h, out_h);
        let tx = axis_taps(w, out_w);
        for plane in 0..n * c {
            let d = &mut dx[plane * h * w..(plane + 1) * h * w];
            let gp = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gp[oy * out_w + ox];
                    d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    d[y1 * w + x0] += gv * fy * (1.0 - fx);
                    d[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_bit_identical() {
        let x = Tensor::from_fn([1, 2, 3, 5], |i| libm::sin(i as f64 * 1.7) * 1e3);
        assert_eq!(bilinear_resize_tensor(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::full([1, 1, 3, 3], -2.25);
        for (h, w) in [(1, 1), (7, 2), (9, 13)] {
            let y = bilinear_resize_tensor(&x, h, w).unwrap();
            assert!(y.data().iter().all(|&v| (v + 2.25).abs() < 1e-15));
        }
    }

    #[test]
    fn upsample_two_by_two() {
        // src = (o + 0.5) / 2 - 0.5 -> taps -0.25(clamped 0), 0.25, 0.75, 1.25(clamped hi)
        let x = Tensor::new([1, 1, 2, 2], alloc::vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize_tensor(&x, 4, 4).unwrap();
        let row = [0.0, 0.25, 0.75, 1.0];
        let col = [0.0, 0.5, 1.5, 2.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((y.data()[i * 4 + j] - (col[i] + row[j])).abs() < 1e-12);
            }
        }
    }
}
