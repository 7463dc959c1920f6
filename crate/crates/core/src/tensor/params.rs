use std::collections::BTreeMap;
use std::path::Path;

use super::serialize::{read_file, write_file, Entry, PARAM_MAGIC};
use super::{RunningStats, Tensor};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new parameter; names are unique and values must require a gradient.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if !tensor.requires_grad() || !tensor.is_leaf() {
            return Err(Error::contract(format!("parameter {name} must be a grad-requiring leaf")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    /// Swaps in new values for an existing parameter, dropping its gradient.
    pub fn replace(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        *slot = Tensor::param(slot.shape(), data)?;
        Ok(())
    }

    /// A copy with one parameter swapped for `tensor`, keeping its graph identity.
    pub fn with_tensor(&self, name: &str, tensor: Tensor) -> Result<Self> {
        let old = self.get(name)?;
        if old.shape() != tensor.shape() {
            return Err(Error::contract(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                tensor.shape(),
                old.shape()
            )));
        }
        let mut out = self.clone();
        out.params.insert(name.to_string(), tensor);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn clear_grads(&self) {
        self.params.values().for_each(Tensor::clear_grad);
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        self.iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut store = Self::new();
        for e in entries {
            store.insert(e.name, Tensor::param(&e.shape, e.data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(PARAM_MAGIC, &self.to_entries(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_file(PARAM_MAGIC, path)?)
    }

    /// True when both stores hold the same names, shapes and bit-identical values.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Running batch-norm statistics keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BnState {
    layers: BTreeMap<String, RunningStats>,
}

impl BnState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, channels: usize) {
        self.layers.insert(name.into(), RunningStats::new(channels));
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown batch-norm layer {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown batch-norm layer {name}")))
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        self.layers
            .iter()
            .flat_map(|(name, s)| {
                [
                    Entry {
                        name: format!("{name}.running_mean"),
                        shape: vec![s.mean.len()],
                        data: s.mean.clone(),
                    },
                    Entry {
                        name: format!("{name}.running_var"),
                        shape: vec![s.var.len()],
                        data: s.var.clone(),
                    },
                ]
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut layers: BTreeMap<String, RunningStats> = BTreeMap::new();
        for e in entries {
            let (layer, field) = e
                .name
                .rsplit_once('.')
                .ok_or_else(|| Error::contract(format!("bad batch-norm entry {}", e.name)))?;
            let stats = layers
                .entry(layer.to_string())
                .or_insert_with(|| RunningStats::new(e.data.len()));
            match field {
                "running_mean" => stats.mean = e.data,
                "running_var" => stats.var = e.data,
                _ => return Err(Error::contract(format!("bad batch-norm entry {}", e.name))),
            }
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(PARAM_MAGIC, &self.to_entries(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(read_file(PARAM_MAGIC, path)?)
    }
}
