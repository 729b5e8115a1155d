use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// Initial value rule for a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Ordered table of named parameters.
///
/// Each parameter draws its initial values from a generator seeded by the
/// store seed and the parameter's name, so adding or removing one parameter
/// leaves every other initial value untouched.
#[derive(Clone, Debug)]
pub struct ParamStore<E: Element> {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} declared twice")));
        }
        let n = numel(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| E::from_f64(d.sample(&mut rng))).collect()
            }
            Init::Uniform(bound) => {
                let d = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| E::from_f64(d.sample(&mut rng))).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?);
        Ok(())
    }

    /// Adds or replaces a parameter with explicit values.
    pub fn insert(&mut self, name: &str, t: Tensor<E>) {
        match self.index.get(name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.to_string(), self.names.len());
                self.names.push(name.to_string());
                self.tensors.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<E> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<E> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and values (widened to `f64`).
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            seed: self.seed,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// True when both stores have the same names and shapes in the same order.
    pub fn same_layout<F: Element>(&self, other: &ParamStore<F>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
