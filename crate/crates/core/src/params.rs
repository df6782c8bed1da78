//! Named parameter tensors shared by all networks.
//!
//! Iteration order is insertion order everywhere (initialization, optimizer
//! updates, serialization), which keeps runs reproducible.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    /// Non-trainable entries (running statistics, frozen extractors) are
    /// excluded from optimizer groups but still serialized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamMap<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParamMap<F> {
    pub fn new() -> Self {
        ParamMap {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>, trainable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter: {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter: {name}"))
            .value
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.entries.iter_mut().map(|(n, p)| (n, p))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Names of trainable entries under a dotted prefix (or all when empty).
    pub fn trainable_names(&self, prefix: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(n, p)| p.trainable && (prefix.is_empty() || n.starts_with(prefix)))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total number of scalar elements.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Move all entries of `other` in under `prefix.`.
    pub fn adopt(&mut self, prefix: &str, other: ParamMap<F>) {
        for (name, p) in other.entries {
            self.insert(format!("{prefix}.{name}"), p.value, p.trainable);
        }
    }

    /// Insert every entry onto a tape as a leaf, preserving order.
    pub fn bind<'t>(&self, tape: &'t Tape<F>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Deterministic content hash over names, shapes, and exact bit patterns.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, p) in &self.entries {
            for b in name.as_bytes() {
                feed(*b);
            }
            for d in p.value.shape() {
                for b in (*d as u64).to_le_bytes() {
                    feed(b);
                }
            }
            for v in p.value.iter() {
                for b in v.as_f64().to_le_bytes() {
                    feed(b);
                }
            }
        }
        h
    }
}

impl ParamMap<f32> {
    /// Exact widening for double-precision verification.
    pub fn to_f64(&self) -> ParamMap<f64> {
        let mut out = ParamMap::new();
        for (name, p) in &self.entries {
            out.insert(name.clone(), p.value.mapv(|v| v as f64), p.trainable);
        }
        out
    }
}

/// Parameter handles on a tape, looked up by name.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Fan-in-scaled uniform weights in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::of_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Zero-filled tensor (biases).
pub fn zeros_init<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}
