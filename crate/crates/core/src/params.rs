//! Named parameter storage and graph binding.

use std::collections::{BTreeMap, HashMap};

use dpmkit_autograd::{Gradients, Graph, Matrix, Var};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::archive::{ArrayData, NamedArray};
use crate::error::{Error, Result};

/// All model parameters, keyed by dotted name (`backbone.blocks.0.attn.qkv.weight`).
///
/// Iteration order is lexicographic, which fixes serialization and reduction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| matches_prefix(k, prefix))
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !matches_prefix(k, prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Matrix)> = self
            .params
            .iter()
            .filter(|(k, _)| matches_prefix(k, from))
            .map(|(k, v)| (format!("{to}{}", &k[from.len()..]), v.clone()))
            .collect();
        self.params.extend(copies);
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter
    /// under `prefix` (all parameters for `""`).
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, v) in self
            .params
            .iter()
            .filter(|(k, _)| matches_prefix(k, prefix))
        {
            h.update(k.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Registers every parameter on the graph. Names for which `trainable`
    /// returns true become gradient-tracked leaves; the rest are constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bindings { vars }
    }

    pub fn to_named_arrays(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|(k, v)| NamedArray {
                name: k.clone(),
                shape: vec![v.nrows(), v.ncols()],
                data: ArrayData::F64(v.iter().copied().collect()),
            })
            .collect()
    }

    pub fn from_named_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let mut store = ParamStore::new();
        for a in arrays {
            let (r, c) = match a.shape.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                other => {
                    return Err(Error::Validation(format!(
                        "entry `{}` has rank {} but parameters are at most 2-D",
                        a.name,
                        other.len()
                    )))
                }
            };
            let m = Array2::from_shape_vec((r, c), a.data.to_f64())
                .map_err(|e| Error::Validation(format!("entry `{}`: {e}", a.name)))?;
            store.insert(a.name.clone(), m);
        }
        Ok(store)
    }
}

/// `prefix` matches `name` when it is empty, equal, or a dotted ancestor.
pub fn matches_prefix(name: &str, prefix: &str) -> bool {
    if prefix.is_empty() {
        return true;
    }
    let prefix = prefix.strip_suffix('.').unwrap_or(prefix);
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Graph handles for the parameters of one step.
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    /// Points `name` at another graph node, e.g. a perturbed copy in a gradient check.
    pub fn set(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every bound parameter that received one.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            if let Some(gm) = grads.get(*v) {
                out.insert(k.clone(), gm.clone());
            }
        }
        out
    }
}

/// Deterministic per-purpose RNG derived from a run seed and a stream name.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, mixed into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
