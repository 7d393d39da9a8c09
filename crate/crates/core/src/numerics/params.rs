use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }
}

/// Gradient buffers, one per parameter, allocated on first touch.
///
/// A parameter that no loss reached has no buffer; the optimizer skips it.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            bufs: vec![None; store.len()],
        }
    }

    pub(crate) fn buffer(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        if id.0 >= self.bufs.len() {
            self.bufs.resize(id.0 + 1, None);
        }
        self.bufs[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    /// Gradient for `id`, or zeros when the parameter was never reached.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Vec<f64> {
        self.get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.value(id).len()])
    }

    pub fn has_any(&self) -> bool {
        self.bufs.iter().any(Option::is_some)
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in self.bufs.iter_mut().flatten() {
            buf.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn zero_grad(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn is_finite(&self) -> bool {
        self.bufs
            .iter()
            .flatten()
            .all(|b| b.iter().all(|g| g.is_finite()))
    }
}
