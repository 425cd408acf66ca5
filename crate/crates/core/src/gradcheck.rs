//! Central-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over every checked coordinate.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar, got {}", value.shape()),
        ));
    }
    Ok(value.data()[0])
}

/// Compares the tape gradient of the scalar `f` with respect to each parameter in `ids`
/// against central differences with step `eps`.
///
/// Every coordinate is perturbed in place and restored bit-exactly afterwards.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid("grad_check", "function must be scalar"));
    }
    if let Some(i) = tape.value(out).first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("output[{i}]"),
        });
    }
    let grads = tape.backward(out)?;
    let param_vars: alloc::collections::BTreeMap<ParamId, Var> = tape.param_vars().collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        let n = store.value(id).numel();
        let analytic: alloc::vec::Vec<f64> = match param_vars.get(&id).and_then(|&v| grads.wrt(v)) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let name = store.get(id).name.clone();
        for i in 0..n {
            if !analytic[i].is_finite() {
                return Err(Error::NonFinite {
                    location: format!("grad {name}[{i}]"),
                });
            }
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + eps;
            let plus = evaluate(store, &f);
            store.value_mut(id).data_mut()[i] = original - eps;
            let minus = evaluate(store, &f);
            store.value_mut(id).data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("perturbed output at {name}[{i}]"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = 1.0f64.max(libm::fabs(analytic[i])).max(libm::fabs(numeric));
            let rel = libm::fabs(analytic[i] - numeric) / denom;
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{InitSpec, ParamKind, ParamRegistry};
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new(0);
        let x = store
            .register(
                "x".into(),
                Shape::new([3]),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .unwrap();
        store
            .set(x, Tensor::new([3], alloc::vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();

        let f = |t: &mut Tape, s: &ParamStore| {
            let v = t.param(s, x);
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let out = f(&mut tape, &store).unwrap();
        let g = tape.backward(out).unwrap();
        let xv = tape.param_vars().next().unwrap().1;
        assert_eq!(g.wrt(xv).unwrap(), &[2.0, 4.0, 6.0]);

        let report = grad_check(&mut store, &[x], DEFAULT_EPS, f).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 3);
        assert_eq!(store.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_finite_reported_with_coordinate() {
        let mut store = ParamStore::new(0);
        let x = store
            .register(
                "x".into(),
                Shape::new([2]),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .unwrap();
        store
            .set(x, Tensor::new([2], alloc::vec![1.0, f64::NAN]).unwrap())
            .unwrap();
        let err = grad_check(&mut store, &[x], DEFAULT_EPS, |t, s| {
            let v = t.param(s, x);
            Ok(t.sum(v))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
