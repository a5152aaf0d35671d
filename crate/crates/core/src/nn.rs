//! Named parameter sets and the basic layers built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, RunningStats, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Trained by gradient.
    Param,
    /// State that is saved but not trained (running statistics).
    Buffer,
}

/// Ordered collection of named tensors owned by a network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>, Kind)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: String, t: Tensor<T>, kind: Kind) {
        debug_assert!(self.get(&name).is_none(), "duplicate tensor name {name}");
        self.entries.push((name, t, kind));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, Kind)> {
        self.entries.iter().map(|(n, t, k)| (n.as_str(), t, *k))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|e| e.2 == Kind::Param).map(|(n, t, _)| (n, t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }

    /// Copies every value from `other` (matched by name and shape), converting element type.
    pub fn copy_from<U: Scalar>(&self, other: &ParamSet<U>, f: impl Fn(U) -> T) -> Result<()> {
        for (name, dst, _) in self.iter() {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::dim("ParamSet::copy_from", dst.shape(), src.shape()));
            }
            let vals: Vec<T> = src.data().iter().map(|&v| f(v)).collect();
            *dst.data_mut() = vals;
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> {
    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t, _) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            t.data().iter().for_each(|v| v.to_le(&mut buf));
            h.update(&buf);
        }
        format!("{:x}", h.finalize())
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform with variance `scale² / fan_in`.
    Uniform {
        scale: f64,
    },
    Zeros,
    Ones,
}

/// Creates named tensors with deterministic initial values.
pub struct ParamBuilder<T: Scalar> {
    set: ParamSet<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    trainable: bool,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64, trainable: bool) -> Self {
        Self {
            set: ParamSet::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            trainable,
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform { scale } => {
                let bound = scale * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(self.rng.gen_range(-bound..=bound)))
                    .collect()
            }
        };
        let t = if self.trainable {
            Tensor::param(data, shape)
        } else {
            Tensor::new(data, shape)
        }
        .expect("parameter shapes are non-empty");
        let full = self.full_name(name);
        self.set.push(full, t.clone(), Kind::Param);
        t
    }

    pub fn buffer(&mut self, name: &str, t: Tensor<T>) -> Tensor<T> {
        let full = self.full_name(name);
        self.set.push(full, t.clone(), Kind::Buffer);
        t
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, c_in: usize, c_out: usize, k: usize, init: Init) -> Self {
        b.scope(name, |b| Self {
            weight: b.param("weight", &[c_out, c_in, k, k], c_in * k * k, init),
            bias: b.param("bias", &[c_out], 1, Init::Zeros),
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, f_in: usize, f_out: usize, init: Init) -> Self {
        b.scope(name, |b| Self {
            weight: b.param("weight", &[f_out, f_in], f_in, init),
            bias: b.param("bias", &[f_out], 1, Init::Zeros),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub groups: usize,
}

/// Largest group count ≤ 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.param("gamma", &[channels], 1, Init::Ones),
            beta: b.param("beta", &[channels], 1, Init::Zeros),
            groups: norm_groups(channels),
        })
    }

    pub fn with_groups(b: &mut ParamBuilder<T>, name: &str, channels: usize, groups: usize) -> Self {
        let mut gn = Self::new(b, name, channels);
        gn.groups = groups;
        gn
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gamma, &self.beta, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNorm1d<T> {
    pub fn new(b: &mut ParamBuilder<T>, name: &str, features: usize) -> Self {
        b.scope(name, |b| {
            let stats = RunningStats::new(features);
            b.buffer("running_mean", stats.mean.clone());
            b.buffer("running_var", stats.var.clone());
            Self {
                gamma: b.param("gamma", &[features], 1, Init::Ones),
                beta: b.param("beta", &[features], 1, Init::Zeros),
                stats,
            }
        })
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        x.batch_norm(&self.stats, &self.gamma, &self.beta, training, 1e-5)
    }
}
