use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::container::TensorData;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per named variable so they
/// can be checkpointed and restored exactly.
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: &[(String, Var)], config: AdamConfig) -> Result<Self> {
        let zeros = |v: &Var| v.as_tensor().zeros_like();
        Ok(Self {
            config,
            m: vars.iter().map(|(_, v)| zeros(v)).collect::<candle_core::Result<_>>()?,
            v: vars.iter().map(|(_, v)| zeros(v)).collect::<candle_core::Result<_>>()?,
            vars: vars.to_vec(),
            t: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = ((self.m[i].affine(beta1, 0.0))? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = ((self.v[i].affine(beta2, 0.0))? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// First and second moments keyed `m/<name>` and `v/<name>`.
    pub fn state(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m/{name}"), TensorData::from_tensor(&self.m[i])?);
            out.insert(format!("v/{name}"), TensorData::from_tensor(&self.v[i])?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, TensorData>, t: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let td = state
                    .get(&format!("{key}/{name}"))
                    .ok_or_else(|| Error::Config(format!("optimizer state for {name} missing")))?;
                *slot = td.to_tensor(var.dims())?.to_dtype(var.dtype())?;
            }
        }
        self.t = t;
        Ok(())
    }
}
