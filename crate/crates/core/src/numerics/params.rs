use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Standard deviation used for every weight matrix and embedding table.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`] or by
/// unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::filled(shape, 1.0))
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

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies values of every parameter whose name starts with `prefix` from
    /// `other` (matched by name and shape).
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::config(format!("parameter {:?} missing in source", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "copy_prefix_from",
                    left: p.value.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            p.value = src.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.zeros("w", &[2]).unwrap();
        assert!(s.zeros("w", &[3]).is_err());
    }

    #[test]
    fn normal_init_has_requested_spread() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let id = s.normal("w", &[100, 100], INIT_STD, &mut rng).unwrap();
        let d = s.value(id).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }
}
