//! Named parameter storage and the small set of layers the model is built from.
//!
//! Layers hold parameter *names*, not tensors. The forward pass looks the
//! current tensors up in a [`ParamStore`], which lets two streams share weights
//! simply by sharing a name prefix, and lets the optimiser swap in updated
//! leaves without touching the layer structs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Inserts (or replaces) a parameter; the stored tensor is a trainable leaf.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t.requiring_grad());
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let shape = self.get(name)?.shape().to_vec();
        self.map.insert(name.to_string(), Tensor::param(data, &shape)?);
        Ok(())
    }

    pub fn zero_grads(&self) {
        self.map.values().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().requiring_grad()))
                .collect(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.map.iter().map(|(k, v)| (k, v.shape())))
            .finish()
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation, truncated at two sigma.
    TruncNormal(f64),
    /// Normal with standard deviation `sqrt(gain / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Constant(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Registers parameters into a store with deterministic initial values.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Creates `name` unless it already exists (shared weights register once).
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<String> {
        if let Some(existing) = self.store.map.get(name) {
            if existing.shape() != shape {
                return Err(Error::config(format!(
                    "parameter `{name}` registered twice with shapes {:?} and {shape:?}",
                    existing.shape()
                )));
            }
            return Ok(name.to_string());
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => self.normal(n, std),
            Init::FanIn { fan_in, gain } => self.normal(n, (gain / fan_in as f64).sqrt()),
            Init::Constant(v) => vec![T::of(v); n],
            Init::Uniform(bound) => (0..n).map(|_| T::of(self.rng.random_range(-bound..=bound))).collect(),
        };
        self.store.insert(name, Tensor::from_vec(data, shape)?);
        Ok(name.to_string())
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<T> {
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect()
    }
}

/// Joins a prefix and a leaf name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map over the last axis of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        Self::with_bias_init(b, prefix, in_dim, out_dim, init, bias.then_some(Init::Zeros))
    }

    pub fn with_bias_init<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = b.register(&join(prefix, "weight"), &[in_dim, out_dim], init)?;
        let bias = match bias_init {
            Some(bi) => Some(b.register(&join(prefix, "bias"), &[out_dim], bi)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::dim(format!(
                "linear `{}`: input {shape:?} does not end in {}",
                self.weight, self.in_dim
            )));
        }
        let rows = x.numel() / self.in_dim;
        let mut y = x.reshape(&[rows, self.in_dim])?.matmul(p.get(&self.weight)?)?;
        if let Some(b) = &self.bias {
            y = y.add_bias(p.get(b)?)?;
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.out_dim;
        if out_shape.len() == 2 {
            Ok(y)
        } else {
            y.reshape(&out_shape)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.register(&join(prefix, "weight"), &[dim], Init::Ones)?,
            beta: b.register(&join(prefix, "bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(p.get(&self.gamma)?, p.get(&self.beta)?, LN_EPS)
    }
}

/// Two-layer GELU perceptron `in → hidden → in`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &join(prefix, "fc1"), dim, hidden, true, Init::TruncNormal(0.02))?,
            fc2: Linear::new(b, &join(prefix, "fc2"), hidden, dim, true, Init::TruncNormal(0.02))?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu())
    }
}

/// 3×3 same-padding convolution on H×W×C maps, as unfold + matmul.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub lin: Linear,
}

impl Conv3x3 {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let init = Init::FanIn { fan_in: 9 * in_ch, gain: 2.0 };
        Ok(Self {
            lin: Linear::new(b, prefix, 9 * in_ch, out_ch, true, init)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        self.lin
            .forward(p, &x.unfold3x3()?)?
            .reshape(&[h, w, self.lin.out_dim])
    }
}
