//! Fused scalar losses.

use alloc::format;
use alloc::vec::Vec;

use super::elementwise::sigmoid;
use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::Tensor;

enum LossKind {
    CrossEntropy {
        labels: Vec<usize>,
    },
    SmoothL1 {
        target: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    BceLogits {
        target: Vec<f64>,
        norm: f64,
    },
}

pub(crate) struct LossOp {
    pub(crate) input: Var,
    kind: LossKind,
}

fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    (max, lse)
}

impl Tape {
    /// Mean cross-entropy of `R x K` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let [r, k] = x.dims() else {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits must be RxK, got {}", x.shape()),
            ));
        };
        let (r, k) = (*r, *k);
        if labels.len() != r || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                "labels do not match logits",
            ));
        }
        let mut total = 0.0;
        for (row, &l) in x.data().chunks(k).zip(labels) {
            let (_, lse) = log_softmax_row(row);
            total += lse - row[l];
        }
        let value = Tensor::scalar(if r == 0 { 0.0 } else { total / r as f64 });
        Ok(self.push(
            value,
            Op::Loss(LossOp {
                input: logits,
                kind: LossKind::CrossEntropy {
                    labels: labels.to_vec(),
                },
            }),
        ))
    }

    /// `sum(huber_beta(pred - target)) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64, norm: f64) -> Result<Var> {
        let x = self.value(pred);
        if target.len() != x.numel() || !(beta > 0.0) || !(norm > 0.0) {
            return Err(Error::invalid(
                "smooth_l1",
                "target length, beta or norm invalid",
            ));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = libm::fabs(p - t);
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::Loss(LossOp {
                input: pred,
                kind: LossKind::SmoothL1 {
                    target: target.to_vec(),
                    beta,
                    norm,
                },
            }),
        ))
    }

    /// `sum(bce(sigmoid(logit), target)) / norm`, evaluated stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64], norm: f64) -> Result<Var> {
        let x = self.value(logits);
        if target.len() != x.numel() || !(norm > 0.0) {
            return Err(Error::invalid(
                "bce_with_logits",
                "target length or norm invalid",
            ));
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(target)
            .map(|(&z, &t)| z.max(0.0) - z * t + libm::log1p(libm::exp(-libm::fabs(z))))
            .sum();
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::Loss(LossOp {
                input: logits,
                kind: LossKind::BceLogits {
                    target: target.to_vec(),
                    norm,
                },
            }),
        ))
    }
}

impl LossOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let x = &nodes[self.input.0].value;
        let Some(d) = sink.slot(self.input) else {
            return;
        };
        let g = g[0];
        match &self.kind {
            LossKind::CrossEntropy { labels } => {
                let k = x.dims()[1];
                let scale = g / labels.len().max(1) as f64;
                for ((row, drow), &l) in x.data().chunks(k).zip(d.chunks_mut(k)).zip(labels) {
                    let (_, lse) = log_softmax_row(row);
                    for (j, (dv, v)) in drow.iter_mut().zip(row).enumerate() {
                        let p = libm::exp(v - lse);
                        *dv += scale * (p - if j == l { 1.0 } else { 0.0 });
                    }
                }
            }
            LossKind::SmoothL1 { target, beta, norm } => {
                for ((dv, p), t) in d.iter_mut().zip(x.data()).zip(target) {
                    let diff = p - t;
                    let local = if libm::fabs(diff) < *beta {
                        diff / beta
                    } else if diff > 0.0 {
                        1.0
                    } else {
                        -1.0
                    };
                    *dv += g * local / norm;
                }
            }
            LossKind::BceLogits { target, norm } => {
                for ((dv, &z), t) in d.iter_mut().zip(x.data()).zip(target) {
                    *dv += g * (sigmoid(z) - t) / norm;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confident_logits_have_tiny_loss() {
        let mut t = Tape::new();
        let x =
            t.constant(Tensor::new([2, 3], alloc::vec![30.0, 0.0, 0.0, 0.0, 0.0, 30.0]).unwrap());
        let l = t.cross_entropy(x, &[0, 2]).unwrap();
        assert!(t.value(l).data()[0] < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([3, 4]));
        let l = t.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((t.value(l).data()[0] - libm::log(4.0)).abs() < 1e-15);
    }

    #[test]
    fn exact_regression_is_zero() {
        let mut t = Tape::new();
        let target = [0.1, -0.4, 2.0, 0.0];
        let x = t.constant(Tensor::new([1, 4], target.to_vec()).unwrap());
        let l = t.smooth_l1(x, &target, 1.0, 1.0).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn saturated_mask_logits() {
        let mut t = Tape::new();
        let target = [1.0, 0.0, 1.0, 0.0];
        let logits: alloc::vec::Vec<f64> = target
            .iter()
            .map(|&v| if v > 0.5 { 30.0 } else { -30.0 })
            .collect();
        let x = t.constant(Tensor::new([4], logits).unwrap());
        let l = t.bce_with_logits(x, &target, 4.0).unwrap();
        assert!(t.value(l).data()[0] < 1e-6);
    }
}
