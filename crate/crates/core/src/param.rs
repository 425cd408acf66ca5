//! Named learnable parameters and the registries modules declare them into.
//!
//! Every module constructor is generic over [`ParamRegistry`]. A [`ParamStore`]
//! materializes values (seeded, deterministic), while a [`ShapeRegistry`]
//! only records names and shapes so that full-size models can be walked for
//! parameter accounting without allocating them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What role a parameter plays; drives the accounting sub-totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormAffine,
    Reweight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Zeros,
    Constant {
        value: f64,
    },
    /// `U(-bound, bound)`.
    Uniform {
        bound: f64,
    },
    Normal {
        std: f64,
    },
}

impl InitSpec {
    /// Uniform with bound `1/sqrt(fan_in)`.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        InitSpec::Uniform {
            bound: 1.0 / libm::sqrt(fan_in.max(1) as f64),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> alloc::vec::Vec<f64> {
        match *self {
            InitSpec::Zeros => alloc::vec![0.0; n],
            InitSpec::Constant { value } => alloc::vec![value; n],
            InitSpec::Uniform { bound } => (0..n)
                .map(|_| rng.random_range(-1.0..1.0) * bound)
                .collect(),
            InitSpec::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub init: InitSpec,
    /// Frozen parameters are skipped by the optimizer.
    pub trainable: bool,
    pub value: Tensor,
    pub grad: Tensor,
}

pub trait ParamRegistry {
    fn register(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        init: InitSpec,
    ) -> Result<ParamId>;

    /// Registers a parameter the optimizer must not update.
    fn register_frozen(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        init: InitSpec,
    ) -> Result<ParamId>;
}

/// Materialized parameters, registered in a fixed order from a seeded stream.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        init: InitSpec,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let data = init.sample(&mut self.rng, shape.numel());
        let value = Tensor::new(shape.clone(), data)?;
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            init,
            trainable,
            value,
            grad: Tensor::zeros(shape),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Replaces a parameter's value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ParameterShape {
                name: p.name.clone(),
                expected: p.value.shape().clone(),
                actual: value.shape().clone(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        self.set(id, value)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalars across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Fills every parameter whose name starts with `prefix` using `f(name, index)`.
    pub fn fill_with(&mut self, prefix: &str, mut f: impl FnMut(&str, usize) -> f64) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            let name = p.name.clone();
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = f(&name, i);
            }
        }
    }
}

impl ParamRegistry for ParamStore {
    fn register(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        init: InitSpec,
    ) -> Result<ParamId> {
        self.insert(name, shape, kind, init, true)
    }

    fn register_frozen(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        init: InitSpec,
    ) -> Result<ParamId> {
        self.insert(name, shape, kind, init, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Records parameter declarations without allocating values.
#[derive(Clone, Debug, Default)]
pub struct ShapeRegistry {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ShapeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    fn insert(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape,
            kind,
            trainable,
        });
        Ok(id)
    }
}

impl ParamRegistry for ShapeRegistry {
    fn register(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        _init: InitSpec,
    ) -> Result<ParamId> {
        self.insert(name, shape, kind, true)
    }

    fn register_frozen(
        &mut self,
        name: String,
        shape: Shape,
        kind: ParamKind,
        _init: InitSpec,
    ) -> Result<ParamId> {
        self.insert(name, shape, kind, false)
    }
}

impl ParamStore {
    /// The same declarations as a [`ShapeRegistry`] would hold.
    pub fn entries(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().clone(),
                kind: p.kind,
                trainable: p.trainable,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(0);
        store
            .register(
                "a".into(),
                Shape::new([2]),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .unwrap();
        let err = store
            .register(
                "a".into(),
                Shape::new([2]),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .unwrap_err();
        assert_eq!(err, Error::DuplicateParameter("a".into()));
    }

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(7);
            s.register(
                "w".into(),
                Shape::new([3, 4]),
                ParamKind::Weight,
                InitSpec::fan_in_uniform(4),
            )
            .unwrap();
            s.register(
                "n".into(),
                Shape::new([5]),
                ParamKind::Weight,
                InitSpec::Normal { std: 0.1 },
            )
            .unwrap();
            s
        };
        let (a, b) = (build(), build());
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let bound = 0.5;
        assert!(a.value(ParamId(0)).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new(0);
        let id = s
            .register(
                "w".into(),
                Shape::new([2]),
                ParamKind::Weight,
                InitSpec::Zeros,
            )
            .unwrap();
        assert!(s.set(id, Tensor::zeros([3])).is_err());
        s.set(id, Tensor::full([2], 1.5)).unwrap();
        assert_eq!(s.value(id).data(), &[1.5, 1.5]);
    }
}
