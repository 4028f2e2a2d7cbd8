//! Small neural-network toolkit on top of `candle-core`: seeded parameter
//! stores, the layers used by the models, numerically safe activations, and Adam.

mod adam;
mod layers;
pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, Linear, ResBlock};

use crate::container::TensorData;
use crate::error::{Error, Result};

/// Parameter initialization schemes.
#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
    Const(f64),
    Values(Vec<f64>),
}

/// Named parameters created in a deterministic order from a seeded RNG.
///
/// A trainable store hands out [`Var`]s; a frozen store hands out plain
/// tensors, so no gradient is ever tracked for them.
pub struct ParamStore {
    dtype: DType,
    trainable: bool,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    entries: Vec<(String, Var)>,
    frozen: Vec<(String, Tensor)>,
    preset: BTreeMap<String, TensorData>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            trainable: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            entries: Vec::new(),
            frozen: Vec::new(),
            preset: BTreeMap::new(),
        }
    }

    /// A store whose parameters are taken from `values` instead of being initialized.
    pub fn from_values(values: BTreeMap<String, TensorData>, dtype: DType, trainable: bool) -> Self {
        let mut s = Self::new(0, dtype);
        s.trainable = trainable;
        s.preset = values;
        s
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn push_prefix(&mut self, p: &str) {
        self.prefix.push(p.to_string());
    }

    pub fn pop_prefix(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `p` appended to the name prefix.
    pub fn scoped<T>(&mut self, p: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push_prefix(p);
        let out = f(self);
        self.pop_prefix();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.entries.iter().any(|(n, _)| *n == full) || self.frozen.iter().any(|(n, _)| *n == full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let numel: usize = shape.iter().product();
        let t = match self.preset.get(&full) {
            // stored bits are kept exactly, whatever the on-disk dtype
            Some(td) => {
                if td.shape != shape {
                    return Err(Error::Config(format!(
                        "parameter {full} has stored shape {:?}, model expects {shape:?}",
                        td.shape
                    )));
                }
                td.to_tensor(shape)?.to_dtype(self.dtype)?
            }
            None if !self.preset.is_empty() => {
                return Err(Error::Config(format!("parameter {full} missing from stored values")))
            }
            None => {
                let values: Vec<f64> = match init {
                    Init::Uniform { fan_in, gain } => {
                        let b = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                        (0..numel).map(|_| self.rng.gen_range(-b..=b)).collect()
                    }
                    Init::Const(c) => vec![c; numel],
                    Init::Values(v) => {
                        if v.len() != numel {
                            return Err(Error::Config(format!("init for {full} has wrong length")));
                        }
                        v
                    }
                };
                Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?
            }
        };
        if self.trainable {
            let v = Var::from_tensor(&t)?;
            let out = v.as_tensor().clone();
            self.entries.push((full, v));
            Ok(out)
        } else {
            self.frozen.push((full, t.clone()));
            Ok(t)
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, v)| v.elem_count())
            .chain(self.frozen.iter().map(|(_, t)| t.elem_count()))
            .sum()
    }

    /// Snapshot of every parameter by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (n, v) in &self.entries {
            out.insert(n.clone(), TensorData::from_tensor(v.as_tensor())?);
        }
        for (n, t) in &self.frozen {
            out.insert(n.clone(), TensorData::from_tensor(t)?);
        }
        Ok(out)
    }

    /// Overwrites trainable parameters in place from a snapshot.
    pub fn restore(&self, values: &BTreeMap<String, TensorData>) -> Result<()> {
        for (n, v) in &self.entries {
            let t = values
                .get(n)
                .ok_or_else(|| Error::Config(format!("parameter {n} missing from snapshot")))?;
            v.set(&t.to_tensor(v.dims())?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
