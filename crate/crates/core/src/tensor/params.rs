use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// A named tensor plus the flag that decides whether optimizers may touch it.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub(crate) name: Arc<str>,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl AsRef<str>, tensor: Tensor, trainable: bool) -> Self {
        Self {
            name: Arc::from(name.as_ref()),
            tensor,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl AsRef<str>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.as_ref();
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name, tensor, trainable));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| self.lookup_error(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(self.lookup_error(name)),
        }
    }

    fn lookup_error(&self, name: &str) -> Error {
        Error::Lookup {
            what: "parameter",
            name: name.to_string(),
            available: format!("{} parameters", self.params.len()),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

}

impl ParamSet for ParameterStore {
    fn params(&self) -> Vec<&Parameter> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.params.iter_mut().collect()
    }
}

/// Anything that owns a fixed, ordered list of parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn param(&self, name: &str) -> Result<&Parameter> {
        let found = self.params().into_iter().find(|p| p.name() == name);
        found.ok_or_else(|| Error::Lookup {
            what: "parameter",
            name: name.to_string(),
            available: self.param_names().join(", "),
        })
    }

    fn param_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        let names = self.param_names();
        let found = self.params_mut().into_iter().find(|p| p.name() == name);
        found.ok_or_else(|| Error::Lookup {
            what: "parameter",
            name: name.to_string(),
            available: names.join(", "),
        })
    }

    fn param_names(&self) -> Vec<String> {
        self.params().iter().map(|p| p.name().to_string()).collect()
    }

    /// Total scalar count.
    fn numel(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }

    fn trainable_numel(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn all_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.trainable)
    }

    /// Adds matching gradients into the parameters' grad slots.
    /// Names that are not part of this set are ignored.
    fn accumulate_grads(&mut self, grads: &Gradients) {
        for p in self.params_mut() {
            let Some(g) = grads.get(p.name()) else {
                continue;
            };
            let t = &mut p.tensor;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// SHA-256 over names, shapes and raw little-endian value bytes.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.tensor.shape().len() as u64).to_le_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::zeros(vec![2]), true),
            Err(Error::Contract(_))
        ));
        assert!(matches!(s.get("b"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParameterStore::new();
        a.insert("w", Tensor::ones(vec![2, 2]), false).unwrap();
        let c0 = a.checksum();
        assert_eq!(c0, a.clone().checksum());
        a.get_mut("w").unwrap().tensor.data_mut()[3] = 1.0 + f64::EPSILON;
        assert_ne!(c0, a.checksum());

        let mut b = ParameterStore::new();
        b.insert("v", Tensor::ones(vec![2, 2]), false).unwrap();
        assert_ne!(c0, b.checksum());
    }
}
