use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct MaxPoolOp {
    pub(crate) input: Var,
    /// Linear input index chosen for each output cell.
    argmax: Vec<usize>,
}

/// Max pooling over `window x window` cells, no padding.
pub fn maxpool2d_tensor(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(maxpool_forward(x, window, stride)?.0)
}

fn maxpool_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.shape().nchw().ok_or_else(|| {
        Error::invalid(
            "maxpool2d",
            format!("input must be NxCxHxW, got {}", x.shape()),
        )
    })?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            "window and stride must be positive",
        ));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {window} exceeds spatial extent {h}x{w}"),
        ));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        // strict comparison keeps the lowest linear index on ties
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, ho, wo], out)?, argmax))
}

impl Tape {
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = maxpool_forward(self.value(input), window, stride)?;
        Ok(self.push(value, Op::MaxPool(MaxPoolOp { input, argmax })))
    }
}

impl MaxPoolOp {
    pub(crate) fn backward(&self, g: &[f64], sink: &mut GradSink<'_>) {
        if let Some(dx) = sink.slot(self.input) {
            for (&src, gv) in self.argmax.iter().zip(g) {
                dx[src] += gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let x = Tensor::new([1, 1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d_tensor(&x, 2, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full([1, 2, 4, 6], 3.5);
        let y = maxpool2d_tensor(&x, 2, 2).unwrap();
        assert_eq!(y, Tensor::full([1, 2, 2, 3], 3.5));
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::full([1, 1, 2, 2], 1.0));
        let y = t.maxpool2d(x, 2, 2).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_window_rejected() {
        let x = Tensor::zeros([1, 1, 2, 3]);
        assert!(maxpool2d_tensor(&x, 3, 1).is_err());
    }
}
