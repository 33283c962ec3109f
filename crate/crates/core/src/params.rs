//! Named, ordered parameter storage.
//!
//! Modules first *declare* their learnable tensors into a [`ParamBuilder`]
//! (path, shape, initialiser) and later *look them up* through a
//! [`ParamScope`] during the forward pass. Declaration order is the iteration
//! order everywhere: initialisation, checkpoints and optimiser state.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::Archive;
use crate::tensor::{Conv2d, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bias vectors are excluded from weight decay.
    pub fn is_bias(&self) -> bool {
        is_bias_path(&self.path)
    }
}

pub fn is_bias_path(path: &str) -> bool {
    path.ends_with(".bias")
}

/// Collects parameter declarations under a path prefix.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    prefix: String,
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        let r = f(self);
        self.prefix = saved;
        r
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) {
        let path = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        debug_assert!(self.specs.iter().all(|s| s.path != path), "duplicate parameter {path}");
        self.specs.push(ParamSpec {
            path,
            shape: shape.to_vec(),
            init,
        });
    }

    /// Declares `name.weight` `[cout, cin / groups, k, k]` and `name.bias` `[cout]`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let fan_in = cin / groups * k * k;
        self.scoped(name, |b| {
            b.declare("weight", &[cout, cin / groups, k, k], Init::FanInUniform { fan_in });
            b.declare("bias", &[cout], Init::FanInUniform { fan_in });
        });
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Learnable tensors keyed by dotted path, in declaration order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Element> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Element> ModelParams<T> {
    /// Initialises every declared tensor from a seeded ChaCha8 stream, in order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let data = match s.init {
                    Init::Zeros => vec![T::zero(); s.numel()],
                    Init::Constant(c) => vec![T::lit(c); s.numel()],
                    Init::FanInUniform { fan_in } => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..s.numel())
                            .map(|_| T::lit(rng.random_range(-bound..bound)))
                            .collect()
                    }
                };
                (s.path.clone(), Tensor::param(&s.shape, data).expect("spec shape"))
            })
            .collect();
        ModelParams { tensors }
    }

    /// Every declared tensor filled with zeros.
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let tensors = specs
            .iter()
            .map(|s| (s.path.clone(), Tensor::param(&s.shape, vec![T::zero(); s.numel()]).expect("spec shape")))
            .collect();
        ModelParams { tensors }
    }

    pub fn from_map(tensors: IndexMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors.get(path).ok_or_else(|| Error::Param {
            path: path.to_string(),
            detail: "not present in parameter set".into(),
        })
    }

    /// Replaces an existing tensor, keeping its position.
    pub fn set(&mut self, path: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.tensors.get_mut(path).ok_or_else(|| Error::Param {
            path: path.to_string(),
            detail: "not present in parameter set".into(),
        })?;
        if slot.shape() != t.shape() {
            return Err(Error::Param {
                path: path.to_string(),
                detail: format!("shape {:?} does not match {:?}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn scope(&self, name: &str) -> ParamScope<'_, T> {
        ParamScope {
            params: self,
            prefix: name.to_string(),
        }
    }

    pub fn root(&self) -> ParamScope<'_, T> {
        ParamScope {
            params: self,
            prefix: String::new(),
        }
    }

    /// Checks that the key set and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| !self.tensors.contains_key(&s.path))
            .map(|s| s.path.clone())
            .collect();
        let extra: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| !specs.iter().any(|s| &s.path == *k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        for s in specs {
            let t = &self.tensors[&s.path];
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Param {
                    path: s.path.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), s.shape),
                });
            }
        }
        Ok(())
    }

    /// Fresh leaves with the same values, gradient slots empty.
    pub fn fresh_leaves(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.requiring_grad()))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().requiring_grad()))
                .collect(),
        }
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) {
        for (k, v) in &self.tensors {
            archive.insert_tensor(format!("{prefix}{k}"), v);
        }
    }

    /// Reads tensors named `prefix + spec.path` for every spec, reporting all
    /// missing and unexpected paths together.
    pub fn read_from(archive: &Archive, prefix: &str, specs: &[ParamSpec]) -> Result<Self> {
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| archive.get(&format!("{prefix}{}", s.path)).is_none())
            .map(|s| s.path.clone())
            .collect();
        let extra: Vec<String> = archive
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix(prefix))
            .filter(|k| !specs.iter().any(|s| s.path == *k))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        let mut tensors = IndexMap::new();
        for s in specs {
            let data = archive.get(&format!("{prefix}{}", s.path)).expect("checked above");
            if data.shape() != s.shape.as_slice() {
                return Err(Error::Param {
                    path: s.path.clone(),
                    detail: format!("checkpoint shape {:?}, expected {:?}", data.shape(), s.shape),
                });
            }
            tensors.insert(s.path.clone(), data.to_tensor::<T>().requiring_grad());
        }
        Ok(ModelParams { tensors })
    }
}

/// Read-only view of a parameter set under a path prefix.
#[derive(Clone)]
pub struct ParamScope<'a, T: Element> {
    params: &'a ModelParams<T>,
    prefix: String,
}

impl<'a, T: Element> ParamScope<'a, T> {
    pub fn scope(&self, name: &str) -> ParamScope<'a, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamScope {
            params: self.params,
            prefix,
        }
    }

    pub fn get(&self, name: &str) -> Result<&'a Tensor<T>> {
        if self.prefix.is_empty() {
            self.params.get(name)
        } else {
            self.params.get(&format!("{}.{name}", self.prefix))
        }
    }

    /// Applies the convolution declared by [`ParamBuilder::conv`] under `name`.
    pub fn conv(&self, name: &str, x: &Tensor<T>, opts: Conv2d) -> Result<Tensor<T>> {
        let s = self.scope(name);
        x.conv2d(s.get("weight")?, Some(s.get("bias")?), opts)
    }
}
