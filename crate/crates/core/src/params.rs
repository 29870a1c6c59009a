//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngSeed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Non-trainable entries hold buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Flat registry of named tensors. Names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Same names, ids and values at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values of same-named entries; every entry here must be matched.
    pub fn load_values(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in entries {
            let Some(id) = self.id(name) else { continue };
            let slot = &mut self.params[id.0];
            if slot.value.shape() != value.shape() {
                return Err(Error::dim(
                    "load_values",
                    format!("{name}: stored {:?}, model expects {:?}", value.shape(), slot.value.shape()),
                ));
            }
            slot.value = value.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "checkpoint lacks parameter {:?}",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Registers parameters under a hierarchical name prefix. Each tensor draws
/// from its own stream keyed by its full name, so a parameter's initial value
/// depends only on the seed and its name.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    seed: RngSeed,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: RngSeed) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let full = self.full(name);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.seed.stream(&full);
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.store.insert(&full, value, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full(name);
        self.store.insert(&full, Tensor::full(shape, T::of(value)), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full(name);
        self.store.insert(&full, Tensor::full(shape, T::of(value)), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let mut ba = ParamBuilder::new(&mut a, RngSeed(3));
        ba.sub("x").uniform("w", &[4], 4).unwrap();
        ba.sub("y").uniform("w", &[4], 4).unwrap();
        let mut bb = ParamBuilder::new(&mut b, RngSeed(3));
        bb.sub("y").uniform("w", &[4], 4).unwrap();
        let ya = &a.get(a.id("y.w").unwrap()).value;
        let yb = &b.get(b.id("y.w").unwrap()).value;
        assert_eq!(ya, yb);
        assert!(ya.data().iter().all(|v| v.abs() <= 0.5));
    }
}
