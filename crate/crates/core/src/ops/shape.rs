//! Structural ops: concatenation, reductions, reshapes and row gathers.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradSink, Node, Op, Tape, Var};
use crate::tensor::{Shape, Tensor};

pub(crate) struct ConcatOp {
    pub(crate) inputs: Vec<Var>,
    axis: usize,
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    /// Sum over every axis from this one on, keeping them as extent 1.
    Trailing(usize),
}

pub(crate) struct ReduceOp {
    pub(crate) input: Var,
    kind: Reduce,
}

pub(crate) struct GatherRowsOp {
    pub(crate) input: Var,
    rows: Vec<usize>,
}

fn outer_inner(dims: &[usize], axis: usize) -> (usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis + 1..].iter().product(),
    )
}

impl Tape {
    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).clone();
        if axis >= base.rank() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.rank() == base.rank()
                && s.dims()
                    .iter()
                    .zip(base.dims())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::mismatch("concat", &base, s));
            }
            total += s.dim(axis);
        }
        let mut dims = base.dims().to_vec();
        dims[axis] = total;
        let (outer, inner) = outer_inner(&dims, axis);
        let mut out = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v).dim(axis) * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(dims, out)?;
        Ok(self.push(
            value,
            Op::Concat(ConcatOp {
                inputs: inputs.to_vec(),
                axis,
            }),
        ))
    }

    /// Channel concatenation of NCHW maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    fn reduce(&mut self, input: Var, kind: Reduce) -> Result<Var> {
        let x = self.value(input);
        let value = match kind {
            Reduce::Sum => Tensor::scalar(x.sum()),
            Reduce::Mean => Tensor::scalar(x.sum() / x.numel().max(1) as f64),
            Reduce::Trailing(axis) => {
                let dims = x.dims();
                if axis >= dims.len() {
                    return Err(Error::invalid(
                        "sum_trailing",
                        format!("axis {axis} out of range for {}", x.shape()),
                    ));
                }
                let inner: usize = dims[axis..].iter().product();
                let out: Vec<f64> = x
                    .data()
                    .chunks(inner.max(1))
                    .map(|c| c.iter().sum())
                    .collect();
                let mut od = dims.to_vec();
                od[axis..].iter_mut().for_each(|d| *d = 1);
                Tensor::new(od, out)?
            }
        };
        Ok(self.push(value, Op::Reduce(ReduceOp { input, kind })))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::Sum).expect("full reduction")
    }

    pub fn mean(&mut self, input: Var) -> Var {
        self.reduce(input, Reduce::Mean).expect("full reduction")
    }

    /// Sums over axes `axis..`, keeping them as extent 1 (e.g. spatial pooling with `axis = 2`).
    pub fn sum_trailing(&mut self, input: Var, axis: usize) -> Result<Var> {
        self.reduce(input, Reduce::Trailing(axis))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let x = self.value(input);
        if shape.numel() != x.numel() {
            return Err(Error::mismatch("reshape", x.shape(), &shape));
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Selects (possibly repeated) entries along axis 0.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims();
        if dims.is_empty() {
            return Err(Error::invalid("gather_rows", "input has no axes"));
        }
        let row = x.numel() / dims[0].max(1);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= dims[0] {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {r} out of range for {}", x.shape()),
                ));
            }
            out.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
        }
        let mut od = dims.to_vec();
        od[0] = rows.len();
        let value = Tensor::new(od, out)?;
        Ok(self.push(
            value,
            Op::GatherRows(GatherRowsOp {
                input,
                rows: rows.to_vec(),
            }),
        ))
    }
}

impl ConcatOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let dims = nodes[self.inputs[0].0].value.dims();
        let (outer, inner) = outer_inner(dims, self.axis);
        let total: usize = self
            .inputs
            .iter()
            .map(|v| nodes[v.0].value.dims()[self.axis])
            .sum();
        let mut offset = 0;
        for &v in &self.inputs {
            let len = nodes[v.0].value.dims()[self.axis] * inner;
            if let Some(d) = sink.slot(v) {
                for o in 0..outer {
                    let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                    d[o * len..(o + 1) * len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            offset += len;
        }
    }
}

impl ReduceOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let x = &nodes[self.input.0].value;
        let n = x.numel();
        let Some(d) = sink.slot(self.input) else {
            return;
        };
        match self.kind {
            Reduce::Sum => d.iter_mut().for_each(|v| *v += g[0]),
            Reduce::Mean => d.iter_mut().for_each(|v| *v += g[0] / n as f64),
            Reduce::Trailing(axis) => {
                let inner: usize = x.dims()[axis..].iter().product();
                for (chunk, gv) in d.chunks_mut(inner.max(1)).zip(g) {
                    chunk.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
}

impl GatherRowsOp {
    pub(crate) fn backward(&self, nodes: &[Node], g: &[f64], sink: &mut GradSink<'_>) {
        let x = &nodes[self.input.0].value;
        let row = x.numel() / x.dims()[0].max(1);
        let Some(d) = sink.slot(self.input) else {
            return;
        };
        for (k, &r) in self.rows.iter().enumerate() {
            d[r * row..(r + 1) * row]
                .iter_mut()
                .zip(&g[k * row..(k + 1) * row])
                .for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_keeps_channel_order() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn([1, 2, 1, 2], |i| i as f64));
        let b = t.constant(Tensor::from_fn([1, 3, 1, 2], |i| 100.0 + i as f64));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.shape(c).dims(), &[1, 5, 1, 2]);
        assert_eq!(
            t.value(c).data(),
            &[0.0, 1.0, 2.0, 3.0, 100.0, 101.0, 102.0, 103.0, 104.0, 105.0]
        );
    }

    #[test]
    fn concat_rejects_mismatched_extents() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([1, 2, 2, 2]));
        let b = t.constant(Tensor::zeros([1, 2, 3, 2]));
        assert!(t.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::from_fn([3, 2], |i| i as f64));
        let y = t.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn trailing_sum() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([2, 2, 2, 2], |i| i as f64));
        let y = t.sum_trailing(x, 2).unwrap();
        assert_eq!(t.shape(y).dims(), &[2, 2, 1, 1]);
        assert_eq!(t.value(y).data(), &[6.0, 22.0, 38.0, 54.0]);
    }
}
