//! Named parameter tensors and their deterministic initialization.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::serialize::{self, AnyTensor};
use crate::tensor::{Scalar, Tensor};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.entries.iter().map(|(n, t)| (n, t.shape()))).finish()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract_err!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.entries.iter().map(|(n, t)| (n.clone(), g.param(t.clone()))).collect() }
    }

    /// Records every parameter as a constant except `name`, which is bound
    /// to the existing node `var`.
    pub fn bind_replacing(&self, g: &mut Graph<T>, name: &str, var: Var) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), if n == name { var } else { g.constant(t.clone()) }))
            .collect();
        Bound { vars }
    }

    /// Gradients of every bound parameter in store order; unreachable
    /// parameters get zeros.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|(n, t)| {
                bound.vars.get(n).and_then(|&v| g.grad(v).cloned()).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.entries.iter().map(|(n, t)| (n.clone(), t.l2_norm())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let any: Vec<(String, AnyTensor)> = self.entries.iter().map(|(n, t)| (n.clone(), to_any(t))).collect();
        serialize::save(path, any.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads a container and checks it against `self`'s names and shapes,
    /// replacing every value. Fails without modifying `self` on mismatch.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = serialize::load(path)?;
        if loaded.len() != self.entries.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                self.entries.len()
            )));
        }
        let mut values = Vec::with_capacity(loaded.len());
        for ((name, t), (want, cur)) in loaded.iter().zip(&self.entries) {
            if name != want || t.shape() != cur.shape() {
                return Err(Error::Integrity(format!(
                    "checkpoint entry {name} {:?} does not match model parameter {want} {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
            values.push(t.to_tensor::<T>());
        }
        for ((_, cur), v) in self.entries.iter_mut().zip(values) {
            *cur = v;
        }
        Ok(())
    }
}

fn to_any<T: Scalar>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        crate::tensor::DType::F32 => AnyTensor::F32(t.cast()),
        crate::tensor::DType::F64 => AnyTensor::F64(t.cast()),
    }
}

/// Graph handles of bound parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| contract_err!("missing parameter {name}"))
    }
}

/// Deterministic per-parameter initializer.
///
/// Every tensor draws from its own stream keyed by `(seed, name)`, so adding
/// or removing parameters never shifts the values of the others.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a(name.as_bytes())))
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in_uniform<T: Scalar>(&self, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = self.rng(name);
        Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_streams_are_independent_of_order() {
        let init = Init { seed: 5 };
        let a: Tensor<f32> = init.fan_in_uniform("a", vec![4], 4);
        let _: Tensor<f32> = init.fan_in_uniform("b", vec![4], 4);
        assert_eq!(a, init.fan_in_uniform("a", vec![4], 4));
        assert_ne!(a, init.fan_in_uniform("c", vec![4], 4));
        assert!(a.data().iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![2])).is_err());
        assert_eq!(s.count(), 2);
    }

    #[test]
    fn save_load_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", Tensor::from_fn(vec![2, 3], |i| i as f32)).unwrap();
        s.insert("a.bias", Tensor::ones(vec![3])).unwrap();
        s.save(&path).unwrap();
        let mut t = s.clone();
        t.get_mut("a.bias").unwrap().data_mut()[0] = 9.0;
        t.load_into(&path).unwrap();
        assert_eq!(t.get("a.bias"), s.get("a.bias"));
        let mut other = ParamStore::<f32>::new();
        other.insert("a.weight", Tensor::zeros(vec![3, 2])).unwrap();
        other.insert("a.bias", Tensor::ones(vec![3])).unwrap();
        assert!(matches!(other.load_into(&path), Err(Error::Integrity(_))));
    }
}
