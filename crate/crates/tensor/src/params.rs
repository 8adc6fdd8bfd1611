use indexmap::IndexMap;
use rand::Rng;

use crate::tape::{Gradients, Tape};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer; `decay` selects decoupled weight decay.
    Trainable { decay: bool },
    /// Never receives a gradient and never changes.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    tensor: Tensor,
    kind: ParamKind,
}

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) {
        let tensor = tensor.with_requires_grad(!matches!(kind, ParamKind::Frozen));
        self.entries.insert(name.into(), Entry { tensor, kind });
    }

    pub fn insert_trainable(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        self.insert(name, tensor, ParamKind::Trainable { decay });
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.insert(name, tensor, ParamKind::Frozen);
    }

    /// Gaussian-initialised trainable matrix with `std = gain / sqrt(fan_in)`.
    pub fn init_linear<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        kind: ParamKind,
        rng: &mut R,
    ) {
        let std = gain / (fan_in as f64).sqrt();
        self.insert(name, Tensor::randn(&[fan_in, fan_out], std, rng), kind);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.kind))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !matches!(e.kind, ParamKind::Frozen))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.zero_grad();
        }
    }

    /// Adds tape gradients into the `grad` buffer of every bound parameter
    /// that requires grad (zeros when the loss did not reach it).
    ///
    /// Returns the names that received a buffer, in binding order.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients) -> Vec<String> {
        let mut touched = Vec::new();
        for (name, var) in tape.bound_params() {
            let Some(entry) = self.entries.get_mut(name) else {
                continue;
            };
            if !entry.tensor.requires_grad {
                continue;
            }
            let n = entry.tensor.numel();
            let buf = entry.tensor.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = grads.get(var) {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            touched.push(name.to_string());
        }
        touched
    }

    /// Order-sensitive FNV-1a digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, e) in &self.entries {
            eat(name.as_bytes());
            for &d in e.tensor.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
