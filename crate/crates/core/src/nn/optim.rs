use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay over a fixed list of variables.
pub struct AdamW {
    cfg: AdamWConfig,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_detached_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Applies one update, returning the pre-clipping gradient norm.
    /// Variables without a gradient still receive weight decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut gs = Vec::with_capacity(self.vars.len());
        let mut sq = 0f64;
        for (_, var) in &self.vars {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_detached_tensor().zeros_like()?,
            };
            sq += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::data(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let g = (&gs[i] * scale)?;
            let m = ((&self.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let p = var.as_detached_tensor();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let next = ((&p * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    pub fn state_records(&self) -> Result<Vec<TensorRecord>> {
        let mut out = Vec::with_capacity(2 * self.vars.len());
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.push(TensorRecord::from_tensor(&format!("adam.m.{name}"), None, &self.m[i])?);
            out.push(TensorRecord::from_tensor(&format!("adam.v.{name}"), None, &self.v[i])?);
        }
        Ok(out)
    }

    /// Restores moments saved by [`AdamW::state_records`]; missing entries
    /// keep their zero initialization.
    pub fn load_state(&mut self, records: &[TensorRecord], step: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let dtype = var.dtype();
            let device = var.device();
            for (slot, prefix) in [(0usize, "adam.m."), (1, "adam.v.")] {
                let key = format!("{prefix}{name}");
                if let Some(r) = records.iter().find(|r| r.name == key) {
                    let t = r.to_tensor(dtype, device)?;
                    if t.dims() != var.dims() {
                        return Err(Error::checkpoint(format!("optimizer state {key} has the wrong shape")));
                    }
                    if slot == 0 {
                        self.m[i] = t;
                    } else {
                        self.v[i] = t;
                    }
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
