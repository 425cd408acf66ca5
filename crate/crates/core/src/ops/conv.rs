//! 2-D convolution lowered to im2col + GEMM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Layout};
use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` if the window does not fit.
pub fn conv2d_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Pointwise on 1x1 maps: the whole batch is one matrix product.
    fn is_dense(&self) -> bool {
        self.is_pointwise() && self.pixels() == 1
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *out = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct Conv2dOp {
    pub(crate) input: Var,
    pub(crate) kernel: Var,
    pub(crate) bias: Option<Var>,
    geom: Geometry,
}

fn geometry(
    x: &Shape,
    k: &Shape,
    bias: Option<&Shape>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, cin, h, w) = x
        .nchw()
        .ok_or_else(|| Error::invalid("conv2d", format!("input must be NxCxHxW, got {x}")))?;
    let (cout, kcin, kh, kw) = k.nchw().ok_or_else(|| {
        Error::invalid("conv2d", format!("kernel must be CoutxCinxKhxKw, got {k}"))
    })?;
    if kcin != cin {
        return Err(Error::mismatch("conv2d", x, k));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::mismatch("conv2d bias", k, b));
        }
    }
    let ho = conv2d_output_size(h, kh, stride, padding);
    let wo = conv2d_output_size(w, kw, stride, padding);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::mismatch("conv2d window", x, k));
    };
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        },
    ))
}

impl Tape {
    /// Cross-correlation with zero padding, as in every deep-learning framework.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cout, g) = geometry(
            self.shape(input),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let (p, kc) = (g.pixels(), g.cols());
        let mut out = vec![0.0; n * cout * p];
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kc * p]
        };
        if g.is_dense() {
            // out (n x cout) = X (n x cin) * K^T
            gemm(
                n,
                kc,
                cout,
                x,
                Layout::row_major(kc),
                k,
                Layout::transposed(kc),
                0.0,
                &mut out,
                Layout::row_major(cout),
            );
            if let Some(bias) = bias {
                let bv = self.value(bias).data();
                for row in out.chunks_mut(cout) {
                    row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
                }
            }
        }
        for b in (0..n).filter(|_| !g.is_dense()) {
            let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
            let ob = &mut out[b * cout * p..(b + 1) * cout * p];
            let cols: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut col);
                &col
            };
            gemm(
                cout,
                kc,
                p,
                k,
                Layout::row_major(kc),
                cols,
                Layout::row_major(p),
                0.0,
                ob,
                Layout::row_major(p),
            );
            if let Some(bias) = bias {
                let bv = self.value(bias).data();
                for (o, plane) in ob.chunks_mut(p).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let value = Tensor::new([n, cout, g.ho, g.wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d(Conv2dOp {
                input,
                kernel,
                bias,
                geom: g,
            }),
        ))
    }
}

impl Conv2dOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let geom = self.geom;
        let x = nodes[self.input.0].value.data();
        let k = nodes[self.kernel.0].value.data();
        let cout = nodes[self.kernel.0].value.dims()[0];
        let (p, kc) = (geom.pixels(), geom.cols());
        let in_size = geom.cin * geom.h * geom.w;
        let n = x.len() / in_size.max(1);

        if let Some(bias) = self.bias {
            if let Some(db) = sink.slot(bias) {
                for b in 0..n {
                    for o in 0..cout {
                        let base = (b * cout + o) * p;
                        db[o] += g[base..base + p].iter().sum::<f64>();
                    }
                }
            }
        }

        if geom.is_dense() {
            if let Some(dk) = sink.slot(self.kernel) {
                // dK += G^T (cout x n) * X (n x cin)
                gemm(
                    cout,
                    n,
                    kc,
                    g,
                    Layout::transposed(cout),
                    x,
                    Layout::row_major(kc),
                    1.0,
                    dk,
                    Layout::row_major(kc),
                );
            }
            if let Some(dx) = sink.slot(self.input) {
                // dX += G (n x cout) * K (cout x cin)
                gemm(
                    n,
                    cout,
                    kc,
                    g,
                    Layout::row_major(cout),
                    k,
                    Layout::row_major(kc),
                    1.0,
                    dx,
                    Layout::row_major(kc),
                );
            }
            return;
        }
        let mut col = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kc * p]
        };
        if let Some(dk) = sink.slot(self.kernel) {
            for b in 0..n {
                let xb = &x[b * in_size..(b + 1) * in_size];
                let gb = &g[b * cout * p..(b + 1) * cout * p];
                let cols: &[f64] = if geom.is_pointwise() {
                    xb
                } else {
                    geom.im2col(xb, &mut col);
                    &col
                };
                // dK += G (cout x p) * cols^T (p x kc)
                gemm(
                    cout,
                    p,
                    kc,
                    gb,
                    Layout::row_major(p),
                    cols,
                    Layout::transposed(p),
                    1.0,
                    dk,
                    Layout::row_major(kc),
                );
            }
        }

        if let Some(dx) = sink.slot(self.input) {
            let mut dcol = vec![0.0; kc * p];
            for b in 0..n {
                let gb = &g[b * cout * p..(b + 1) * cout * p];
                // dcols = K^T (kc x cout) * G (cout x p)
                gemm(
                    kc,
                    cout,
                    p,
                    k,
                    Layout::transposed(kc),
                    gb,
                    Layout::row_major(p),
                    0.0,
                    &mut dcol,
                    Layout::row_major(p),
                );
                let dxb = &mut dx[b * in_size..(b + 1) * in_size];
                if geom.is_pointwise() {
                    dxb.iter_mut().zip(&dcol).for_each(|(a, v)| *a += v);
                } else {
                    geom.col2im(&dcol, dxb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, cin, h, w) = x.shape().nchw().unwrap();
        let (cout, _, kh, kw) = k.shape().nchw().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for o in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += x.at4(b, c, iy as usize, ix as usize)
                                            * k.at4(o, c, i, j);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * cout + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn pointwise_scaling() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let k = t.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let y = t.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(t.value(y), &Tensor::full([1, 1, 3, 3], 2.0));
    }

    #[test]
    fn full_window_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = t.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(t.value(y).data()[0], 10.0);
    }

    #[test]
    fn strided_matches_direct_loops() {
        let x = Tensor::from_fn([1, 2, 5, 5], lcg(1));
        let k = Tensor::from_fn([3, 2, 3, 3], lcg(2));
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(xv, kv, None, 2, 1).unwrap();
        let expected = naive(&x, &k, 2, 1);
        assert_eq!(t.shape(y).dims(), &[1, 3, 3, 3]);
        assert!(t.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = t.constant(Tensor::zeros([1, 3, 1, 1]));
        let msg = alloc::string::ToString::to_string(&t.conv2d(x, k, None, 1, 0).unwrap_err());
        assert!(
            msg.contains("[1x2x4x4]") && msg.contains("[1x3x1x1]"),
            "{msg}"
        );
    }

    #[test]
    fn batched_dense_matches_direct_loops() {
        let x = Tensor::from_fn([5, 4, 1, 1], lcg(3));
        let k = Tensor::from_fn([3, 4, 1, 1], lcg(4));
        let mut t = Tape::new();
        let (xv, kv) = (t.variable(x.clone()), t.variable(k.clone()));
        let y = t.conv2d(xv, kv, None, 1, 0).unwrap();
        assert!(t.value(y).max_abs_diff(&naive(&x, &k, 1, 0)) < 1e-12);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        // d(sum)/dx[b, c] = sum_o k[o, c]
        for b in 0..5 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|o| k.at4(o, c, 0, 0)).sum();
                assert!((g.wrt(xv).unwrap()[b * 4 + c] - want).abs() < 1e-12);
            }
        }
        // d(sum)/dk[o, c] = sum_b x[b, c]
        for o in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..5).map(|b| x.at4(b, c, 0, 0)).sum();
                assert!((g.wrt(kv).unwrap()[o * 4 + c] - want).abs() < 1e-12);
            }
        }
    }
}
