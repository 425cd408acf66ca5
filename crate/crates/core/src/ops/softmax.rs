use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub(crate) struct SoftmaxOp {
    pub(crate) input: Var,
    axis: usize,
}

fn split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    (
        d[..axis].iter().product(),
        d[axis],
        d[axis + 1..].iter().product(),
    )
}

/// Max-subtracted softmax along `axis`.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape().rank() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for shape {}", x.shape()),
        ));
    }
    let (outer, len, inner) = split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len)
                .map(|k| src[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = libm::exp(src[at(k)] - max);
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape().clone(), out)
}

impl Tape {
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let value = softmax_tensor(self.value(input), axis)?;
        Ok(self.push(value, Op::Softmax(SoftmaxOp { input, axis })))
    }
}

impl SoftmaxOp {
    pub(crate) fn backward(&self, y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let (outer, len, inner) = split(y.shape(), self.axis);
        let Some(dx) = sink.slot(self.input) else {
            return;
        };
        let yv = y.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let dot: f64 = (0..len).map(|k| g[at(k)] * yv[at(k)]).sum();
                for k in 0..len {
                    dx[at(k)] += yv[at(k)] * (g[at(k)] - dot);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(v: &[f64]) -> alloc::vec::Vec<f64> {
        softmax_tensor(&Tensor::new([v.len()], v.to_vec()).unwrap(), 0)
            .unwrap()
            .into_data()
    }

    #[test]
    fn analytic_values() {
        for p in sm(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = sm(&[core::f64::consts::LN_2, 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_oracle() {
        let p = sm(&[1.0, 2.0, 3.0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| libm::exp(*v)).sum();
        for (k, v) in p.iter().enumerate() {
            assert!((v - libm::exp(k as f64 + 1.0) / z).abs() < 1e-15);
        }
        for (v, frozen) in p.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((v - frozen).abs() < 5e-9);
        }
    }

    #[test]
    fn middle_axis() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin() * 500.0);
        let y = softmax_tensor(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.data()[(o * 3 + k) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
