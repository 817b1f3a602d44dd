//! Named parameter storage and the JSON checkpoint format.
//!
//! A checkpoint is one JSON object mapping dotted parameter names
//! (`module.block.layer.kind`) to `{"shape": [..], "data": [..]}` with
//! row-major data.

use std::collections::{BTreeMap, HashMap};
use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::tape::{Gradients, Tape, Value};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a requires-grad leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let values = self
            .tensors
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { values })
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, StoredTensor> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                (
                    n.as_str(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("checkpoint serialization")
    }

    /// Overwrites every parameter from a checkpoint document. The document
    /// must contain exactly this store's names with matching shapes.
    pub fn load_json(&mut self, doc: &serde_json::Value) -> Result<()> {
        let map: BTreeMap<String, StoredTensor> = serde_json::from_value(doc.clone())?;
        if let Some(extra) = map.keys().find(|k| !self.index.contains_key(*k)) {
            return Err(Error::data("checkpoint", format!("unexpected parameter {extra}")));
        }
        for (i, name) in self.names.iter().enumerate() {
            let stored = map
                .get(name)
                .ok_or_else(|| Error::data("checkpoint", format!("missing parameter {name}")))?;
            if stored.shape != self.tensors[i].shape() {
                return Err(Error::data(
                    "checkpoint",
                    format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        stored.shape,
                        self.tensors[i].shape()
                    ),
                ));
            }
            self.tensors[i] = Tensor::new(&stored.shape, stored.data.clone())
                .map_err(|e| Error::data("checkpoint", format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        self.load_json(&doc)
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct BoundParams {
    values: Vec<Value>,
}

impl Index<ParamId> for BoundParams {
    type Output = Value;
    fn index(&self, id: ParamId) -> &Value {
        &self.values[id.0]
    }
}

impl BoundParams {
    pub fn values(&self) -> &[Value] {
        &self.values
    }

    /// Gradient per parameter in store order; parameters the root does not
    /// depend on get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let mut store = ParamStore::new();
        store
            .insert("a.b.0.weight", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        store.insert("a.b.0.bias", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let doc = store.to_json();
        assert_eq!(doc["a.b.0.weight"]["shape"], serde_json::json!([2, 2]));

        let mut other = store.clone();
        other.tensors_mut()[0].data_mut()[0] = 9.0;
        other.load_json(&doc).unwrap();
        assert_eq!(other.tensors(), store.tensors());

        let mut wrong = ParamStore::new();
        wrong.insert("a.b.0.weight", Tensor::zeros(&[3, 2])).unwrap();
        wrong.insert("a.b.0.bias", Tensor::zeros(&[2])).unwrap();
        let err = wrong.load_json(&doc).unwrap_err().to_string();
        assert!(err.contains("a.b.0.weight"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("x", Tensor::scalar(2.0)).is_err());
    }
}
