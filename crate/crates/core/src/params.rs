//! Named parameter arrays, their JSON form, and binding into a [`Graph`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `{ "name": { "shape": [..], "data": [..] }, ... }`, sorted by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    /// Checks that `name` exists with the given shape.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("parameter `{name}`")));
        }
        Ok(())
    }

    /// Merges `other` into `self`, overwriting equal names.
    pub fn extend(&mut self, other: ParamStore) {
        self.arrays.extend(other.arrays);
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Registers every array as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
                .collect(),
        }
    }

    /// `self -= lr · grads` for every array present in `grads`.
    pub fn descend(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            if let Some(p) = self.arrays.get_mut(name) {
                for (w, d) in p.data.iter_mut().zip(&g.data) {
                    *w -= lr * d;
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Compact JSON; parameter files get large.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn ids(&self) -> &BTreeMap<String, NodeId> {
        &self.ids
    }
}

/// Uniform `±1/√fan_in` weight matrix and zero bias, stored as
/// `{prefix}.w` (`fan_in × fan_out`) and `{prefix}.b` (`1 × fan_out`).
pub fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, data));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, fan_out]));
}

/// Applies `{prefix}.w` / `{prefix}.b` to `x`.
pub fn apply_linear(g: &mut Graph, bound: &Bound, prefix: &str, x: NodeId) -> NodeId {
    let w = bound.id(&format!("{prefix}.w"));
    let b = bound.id(&format!("{prefix}.b"));
    g.linear(x, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_linear(&mut store, "a", 3, 5, &mut rng);
        init_linear(&mut store, "b", 2, 2, &mut rng);
        let text = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        assert_eq!(back, store);
        assert!(back.expect_shape("a.w", &[3, 5]).is_ok());
        assert!(back.expect_shape("a.w", &[5, 3]).is_err());
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn descend_applies_step() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::row_vector(vec![1.0, 2.0]));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::row_vector(vec![10.0, -10.0]));
        store.descend(&grads, 0.1);
        assert_eq!(store.get("x").unwrap().data, vec![0.0, 3.0]);
    }
}
