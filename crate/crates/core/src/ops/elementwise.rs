//! Pointwise maps and broadcasting binary ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Relu,
    Sigmoid,
    Scale(f64),
}

pub(crate) struct UnaryOp {
    pub(crate) input: Var,
    kind: Unary,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    fn unary(&mut self, input: Var, kind: Unary) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Relu => |v, _| if v > 0.0 { v } else { 0.0 },
            Unary::Sigmoid => |v, _| sigmoid(v),
            Unary::Scale(_) => |v, c| v * c,
        };
        let c = if let Unary::Scale(c) = kind { c } else { 0.0 };
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().clone(),
            x.data().iter().map(|&v| f(v, c)).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Unary(UnaryOp { input, kind }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Unary::Sigmoid)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, Unary::Scale(factor))
    }
}

impl UnaryOp {
    pub(crate) fn backward(&self, nodes: &[Node], y: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
        let x = nodes[self.input.0].value.data();
        let Some(dx) = sink.slot(self.input) else {
            return;
        };
        match self.kind {
            // subgradient at 0 is 0
            Unary::Relu => {
                for ((d, &xv), gv) in dx.iter_mut().zip(x).zip(g) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Unary::Sigmoid => {
                for ((d, &yv), gv) in dx.iter_mut().zip(y.data()).zip(g) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Unary::Scale(c) => dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c),
        }
    }
}

/// Index mapping of a same-rank broadcast where each axis either matches or is 1 on one side.
pub(crate) struct Broadcast {
    out: Shape,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
}

impl Broadcast {
    pub(crate) fn new(op: &'static str, lhs: &Shape, rhs: &Shape) -> Result<Self> {
        if lhs.rank() != rhs.rank() {
            return Err(Error::mismatch(op, lhs, rhs));
        }
        let mut out = Vec::with_capacity(lhs.rank());
        for (&a, &b) in lhs.dims().iter().zip(rhs.dims()) {
            out.push(match (a, b) {
                _ if a == b => a,
                (1, _) => b,
                (_, 1) => a,
                _ => return Err(Error::mismatch(op, lhs, rhs)),
            });
        }
        let masked = |s: &Shape| -> Vec<usize> {
            s.strides()
                .into_iter()
                .zip(s.dims())
                .zip(&out)
                .map(|((st, &d), &o)| if d == 1 && o != 1 { 0 } else { st })
                .collect()
        };
        let (lhs_strides, rhs_strides) = (masked(lhs), masked(rhs));
        Ok(Broadcast {
            out: Shape::new(out),
            lhs_strides,
            rhs_strides,
        })
    }

    pub(crate) fn shape(&self) -> &Shape {
        &self.out
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let dims = self.out.dims();
        let rank = dims.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = dims[rank - 1];
        let (la, lb) = (self.lhs_strides[rank - 1], self.rhs_strides[rank - 1]);
        let outer: usize = dims[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        let (mut a0, mut b0) = (0usize, 0usize);
        for o in 0..outer {
            let base = o * inner;
            for k in 0..inner {
                f(base + k, a0 + k * la, b0 + k * lb);
            }
            for ax in (0..rank - 1).rev() {
                idx[ax] += 1;
                a0 += self.lhs_strides[ax];
                b0 += self.rhs_strides[ax];
                if idx[ax] < dims[ax] {
                    break;
                }
                a0 -= self.lhs_strides[ax] * dims[ax];
                b0 -= self.rhs_strides[ax] * dims[ax];
                idx[ax] = 0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Binary {
    Add,
    Mul,
}

pub(crate) struct BinaryOp {
    pub(crate) lhs: Var,
    pub(crate) rhs: Var,
    kind: Binary,
    same_shape: bool,
}

impl Tape {
    fn binary(&mut self, lhs: Var, rhs: Var, kind: Binary) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        };
        let f = |a: f64, b: f64| match kind {
            Binary::Add => a + b,
            Binary::Mul => a * b,
        };
        let (a, b) = (self.value(lhs), self.value(rhs));
        let same_shape = a.shape() == b.shape();
        let value = if same_shape {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().clone(), data)?
        } else {
            let bc = Broadcast::new(op, a.shape(), b.shape())?;
            let mut out = vec![0.0; bc.shape().numel()];
            let (ad, bd) = (a.data(), b.data());
            bc.for_each(|o, i, j| out[o] = f(ad[i], bd[j]));
            Tensor::new(bc.shape().clone(), out)?
        };
        Ok(self.push(
            value,
            Op::Binary(BinaryOp {
                lhs,
                rhs,
                kind,
                same_shape,
            }),
        ))
    }

    /// Elementwise sum; an extent-1 axis on either side broadcasts.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, Binary::Add)
    }

    /// Elementwise product; an extent-1 axis on either side broadcasts.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(lhs, rhs, Binary::Mul)
    }
}

impl BinaryOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let (a, b) = (&nodes[self.lhs.0].value, &nodes[self.rhs.0].value);
        let (ad, bd) = (a.data(), b.data());
        if self.same_shape {
            match self.kind {
                Binary::Add => {
                    for v in [self.lhs, self.rhs] {
                        if let Some(d) = sink.slot(v) {
                            d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Binary::Mul => {
                    if let Some(d) = sink.slot(self.lhs) {
                        for i in 0..g.len() {
                            d[i] += g[i] * bd[i];
                        }
                    }
                    if let Some(d) = sink.slot(self.rhs) {
                        for i in 0..g.len() {
                            d[i] += g[i] * ad[i];
                        }
                    }
                }
            }
            return;
        }
        let bc = Broadcast::new("broadcast backward", a.shape(), b.shape())
            .expect("validated in forward");
        if let Some(d) = sink.slot(self.lhs) {
            match self.kind {
                Binary::Add => bc.for_each(|o, i, _| d[i] += g[o]),
                Binary::Mul => bc.for_each(|o, i, j| d[i] += g[o] * bd[j]),
            }
        }
        if let Some(d) = sink.slot(self.rhs) {
            match self.kind {
                Binary::Add => bc.for_each(|o, _, j| d[j] += g[o]),
                Binary::Mul => bc.for_each(|o, i, j| d[j] += g[o] * ad[i]),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([3], alloc::vec![-3.0, 0.0, 3.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[1], 0.5);
    }

    #[test]
    fn broadcast_add_and_mul() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn([2, 3, 1], |i| i as f64));
        let b = t.constant(Tensor::from_fn([1, 3, 4], |i| 10.0 * i as f64));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.shape(s).dims(), &[2, 3, 4]);
        let sv = t.value(s).data();
        // out[n, c, w] = a[n, c] + b[c, w]
        assert_eq!(sv[(1 * 3 + 2) * 4 + 3], 5.0 + 10.0 * 11.0);
        let m = t.mul(a, b).unwrap();
        assert_eq!(t.value(m).data()[(1 * 3 + 1) * 4 + 2], 4.0 * 60.0);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 4]));
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::new([2], alloc::vec![0.0, 1.0]).unwrap());
        let r = t.relu(x);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0, 1.0]);
    }
}
