//! Named parameter declarations and storage.
//!
//! Every model component declares its parameters as [`ParamSpec`]s under a
//! dotted name (`encoder.block3.attn.qkv.weight`). Declarations are cheap, so
//! paper-scale parameter accounting never allocates; [`ParamStore`]
//! materializes the same declarations into trainable variables.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean Gaussian truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    /// Uniform on the open interval `(lo, hi)`.
    Uniform(f64, f64),
    XavierUniform { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations under a name prefix.
pub struct Decl<'a> {
    specs: &'a mut Vec<ParamSpec>,
    prefix: String,
}

impl<'a> Decl<'a> {
    pub fn root(specs: &'a mut Vec<ParamSpec>) -> Self {
        Decl {
            specs,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, sub: impl AsRef<str>) -> Decl<'_> {
        Decl {
            prefix: join(&self.prefix, sub.as_ref()),
            specs: self.specs,
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name: join(&self.prefix, name),
            shape: shape.to_vec(),
            init,
        });
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

pub fn count_prefix(specs: &[ParamSpec], prefix: &str) -> usize {
    specs
        .iter()
        .filter(|s| s.name.starts_with(prefix))
        .map(ParamSpec::numel)
        .sum()
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn sample_init(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        Init::TruncNormal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = d.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        }
        Init::Uniform(lo, hi) => (0..n)
            .map(|_| loop {
                let v = rng.random_range(lo..hi);
                if v > lo {
                    break v;
                }
            })
            .collect(),
        Init::XavierUniform { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
    }
}

/// Trainable variables keyed by name, iterated in sorted name order.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("numel", &self.num_params())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn empty(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    /// Materializes `specs`. Each parameter draws from its own stream seeded
    /// by `(seed, name)`, so values do not depend on declaration order.
    pub fn materialize(specs: &[ParamSpec], seed: u64, dtype: DType) -> Result<Self> {
        let mut store = Self::empty(dtype);
        store.extend(specs, seed)?;
        Ok(store)
    }

    pub fn extend(&mut self, specs: &[ParamSpec], seed: u64) -> Result<()> {
        for spec in specs {
            if self.vars.contains_key(&spec.name) {
                return Err(Error::config(format!("duplicate parameter `{}`", spec.name)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
            let values = sample_init(spec.init, spec.numel(), &mut rng);
            let t = Tensor::from_vec(values, spec.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            self.vars.insert(spec.name.clone(), Var::from_tensor(&t)?);
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().clone())
    }

    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.dims() != shape {
            return Err(Error::shape(
                name,
                format!("stored {:?}, expected {:?}", t.dims(), shape),
            ));
        }
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; tensors cloned from it observe the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::shape(
                name,
                format!("stored {:?}, new {:?}", var.dims(), value.dims()),
            ));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn values_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .get(name)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?)
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore {
            vars,
            dtype: self.dtype,
            device: self.device.clone(),
        })
    }
}

/// Read-only view used by components to fetch their declared parameters.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a ParamStore) -> Self {
        Scope {
            store,
            prefix: String::new(),
        }
    }

    pub fn pp(&self, sub: impl AsRef<str>) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: join(&self.prefix, sub.as_ref()),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.store.get_shaped(&join(&self.prefix, name), shape)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(&join(&self.prefix, name))
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}
