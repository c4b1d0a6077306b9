//! Named parameter storage and seeded initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }
}

/// Parameters keyed by dotted name, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills every declaration from a per-parameter stream derived from
    /// `(seed, name)`, so adding or removing one parameter never shifts the
    /// values drawn for the others.
    pub fn initialize(decls: &[ParamDecl], seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for decl in decls {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(decl.name.as_bytes()));
            let numel: usize = decl.shape.iter().product();
            let data = match decl.init {
                Init::Zeros => vec![0.0; numel],
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..numel)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect()
                }
            };
            let t = Tensor::new(decl.shape.clone(), data).expect("declared shape");
            tensors.insert(decl.name.clone(), t);
        }
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies the parameters whose names start with any of `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Overwrites existing entries with the ones in `other`.
    pub fn overwrite_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decls() -> Vec<ParamDecl> {
        vec![
            ParamDecl::new("a.weight", vec![3, 4], Init::Uniform { fan_in: 4 }),
            ParamDecl::new("a.bias", vec![3], Init::Uniform { fan_in: 4 }),
            ParamDecl::new("b.weight", vec![2, 2], Init::Zeros),
        ]
    }

    #[test]
    fn same_seed_same_values() {
        assert_eq!(
            ParamStore::initialize(&decls(), 7),
            ParamStore::initialize(&decls(), 7)
        );
    }

    #[test]
    fn different_seed_differs() {
        assert_ne!(
            ParamStore::initialize(&decls(), 7),
            ParamStore::initialize(&decls(), 8)
        );
    }

    #[test]
    fn values_do_not_depend_on_other_declarations() {
        let full = ParamStore::initialize(&decls(), 3);
        let only = ParamStore::initialize(&decls()[1..2], 3);
        assert_eq!(full.get("a.bias"), only.get("a.bias"));
    }

    #[test]
    fn uniform_respects_bound() {
        let p = ParamStore::initialize(&decls(), 11);
        assert!(p.get("a.weight").unwrap().data().iter().all(|v| v.abs() <= 0.5));
        assert!(p.get("b.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
