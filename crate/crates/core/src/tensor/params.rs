use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::Index;

use super::{Graph, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    frozen: bool,
}

/// Named trainable tensors, owned outside of any graph.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
}

/// Graph variables for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bindings {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, v)| (ParamId(i), *v))
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Freezes (or thaws) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.name.starts_with(prefix))
        {
            e.frozen = frozen;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Registers every parameter on `g`: trainable ones as leaves, frozen ones as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.frozen {
                    g.constant(e.value.clone())
                } else {
                    g.leaf(e.value.clone())
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Bit-level checksum of the parameters whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            e.name.hash(&mut h);
            e.value.shape().hash(&mut h);
            for v in e.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}
