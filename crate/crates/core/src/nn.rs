//! Named parameters and the small layers every block composes.
//!
//! Parameters live in a [`ParamStore`] between steps. A training step opens a
//! [`Session`] on a fresh [`Tape`], which registers each parameter as a leaf;
//! layers look their weights up through the session by [`ParamId`].
//!
//! Initialization is reproducible per parameter: the generator for a parameter
//! named `name` is ChaCha8 seeded with `splitmix64(seed ^ fnv1a64(name))`, so adding
//! or reordering parameters never shifts another parameter's draws.

use std::collections::HashMap;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Uniform on `[lo, hi)`.
    Range(f64, f64),
    /// Square identity matrix.
    Identity,
    Value(Tensor),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator dedicated to the parameter (or other stream) called `name`.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(name.as_bytes())))
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, c),
            Init::Uniform(bound) => self.sample(name, shape, -bound, bound),
            Init::Range(lo, hi) => self.sample(name, shape, lo, hi),
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::Config(format!("{name}: identity init needs a square matrix, got {shape:?}")));
                }
                Tensor::eye(shape[0])
            }
            Init::Value(t) => {
                if t.shape() != shape {
                    return Err(Error::shape("param init", t.shape(), shape));
                }
                t
            }
        };
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    fn sample(&self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        if lo == hi {
            return Tensor::full(shape, lo);
        }
        let mut rng = stream_rng(self.seed, name);
        let dist = Uniform::new(lo, hi).expect("valid uniform range");
        let data = (0..numel(shape)).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("shape matches sample count")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape("param set", value.shape(), self.values[id.0].shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }
}

/// Binds a [`ParamStore`] to a tape for one forward (and optional backward) pass.
pub struct Session<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Session<'t> {
    /// Registers every parameter as a leaf. With `trainable = false` the leaves are
    /// constants and no backward closures are recorded.
    pub fn new(tape: &'t Tape, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .values()
            .iter()
            .map(|v| tape.var(v.clone(), trainable))
            .collect();
        Session { tape, vars }
    }

    /// Uses caller-built vars (one per parameter, in store order).
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Session { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter in store order (zeros where the loss did not reach).
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Affine map over the last axis: `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from `uniform(+-1/sqrt(in))`.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b = bias.then_some(Init::Uniform(bound));
        Self::with_init(store, name, in_dim, out_dim, Init::Uniform(bound), b)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[in_dim, out_dim], weight)?;
        let bias = match bias {
            Some(init) => Some(store.add(&format!("{name}.bias"), &[out_dim], init)?),
            None => None,
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let y = x.matmul(s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(s.param(b)),
            None => Ok(y),
        }
    }
}

/// Normalization over the last axis followed by a learned per-feature scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.add(&format!("{name}.scale"), &[dim], Init::Constant(1.0))?,
            shift: store.add(&format!("{name}.shift"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        x.layer_norm(axis, self.eps)?
            .mul(s.param(self.scale))?
            .add(s.param(self.shift))
    }
}
