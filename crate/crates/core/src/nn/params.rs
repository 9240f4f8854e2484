use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::TensorRecord;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Ownership label carried by every parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Pretrained denoiser weights; frozen while fine-tuning.
    Base,
    Control,
    CrossAttn,
    Adaptor,
    Intrinsics,
    Encoder,
    Generator,
}

impl Partition {
    pub const LUMINET_TRAINABLE: [Partition; 3] = [Partition::Control, Partition::CrossAttn, Partition::Adaptor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Base => "base",
            Partition::Control => "control",
            Partition::CrossAttn => "cross_attn",
            Partition::Adaptor => "adaptor",
            Partition::Intrinsics => "intrinsics",
            Partition::Encoder => "encoder",
            Partition::Generator => "generator",
        }
    }

    pub fn parse(s: &str) -> Result<Partition> {
        Ok(match s {
            "base" => Partition::Base,
            "control" => Partition::Control,
            "cross_attn" => Partition::CrossAttn,
            "adaptor" => Partition::Adaptor,
            "intrinsics" => Partition::Intrinsics,
            "encoder" => Partition::Encoder,
            "generator" => Partition::Generator,
            other => return Err(Error::checkpoint(format!("unknown partition label {other:?}"))),
        })
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `±gain·sqrt(3 / fan_in)`: unit output variance for unit inputs at gain 1.
    Kaiming { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub partition: Partition,
    pub var: Var,
}

/// Named parameters with partition labels, deterministic init, and a set of
/// frozen partitions.
///
/// Tensors handed out for frozen partitions are detached, so no gradient is
/// ever computed for them.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Param>,
    frozen: BTreeSet<Partition>,
    rng: Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            dtype,
            device,
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
            rng: rng::seeded(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_frozen(&mut self, partitions: impl IntoIterator<Item = Partition>) {
        self.frozen = partitions.into_iter().collect();
    }

    pub fn is_frozen(&self, p: Partition) -> bool {
        self.frozen.contains(&p)
    }

    pub fn root(&mut self, partition: Partition) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            partition,
        }
    }

    /// Returns the named parameter, creating it with `init` on first use.
    pub fn get_or_init(&mut self, name: &str, partition: Partition, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(p) = self.entries.get(name) {
            if p.var.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name}: stored shape {:?}, requested {shape:?}",
                    p.var.dims()
                )));
            }
            if p.partition != partition {
                return Err(Error::checkpoint(format!(
                    "parameter {name}: stored partition {}, requested {partition}",
                    p.partition
                )));
            }
        } else {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Kaiming { fan_in, gain } => {
                    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
                }
                Init::Normal { std } => (0..n)
                    .map(|_| std * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            };
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            self.entries.insert(
                name.to_string(),
                Param {
                    partition,
                    var: Var::from_tensor(&t)?,
                },
            );
        }
        self.fetch(name)
    }

    /// The tensor for `name` as seen by a forward pass: detached when its
    /// partition is frozen.
    pub fn fetch(&self, name: &str) -> Result<Tensor> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        Ok(if self.frozen.contains(&p.partition) {
            p.var.as_detached_tensor()
        } else {
            p.var.as_tensor().clone()
        })
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// `(name, var)` pairs whose partition is in `partitions`, in name order.
    pub fn vars_in(&self, partitions: &[Partition]) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(_, p)| partitions.contains(&p.partition))
            .map(|(k, p)| (k.clone(), p.var.clone()))
            .collect()
    }

    pub fn partitions(&self) -> BTreeMap<String, Partition> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.partition)).collect()
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        Ok(p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// SHA-256 over names and raw parameter bytes of the given partitions.
    pub fn digest(&self, partitions: &[Partition]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            if !partitions.contains(&p.partition) {
                continue;
            }
            h.update(name.as_bytes());
            let vals: Vec<f64> = p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn num_scalars(&self, partitions: &[Partition]) -> usize {
        self.entries
            .values()
            .filter(|p| partitions.contains(&p.partition))
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn to_records(&self) -> Result<Vec<TensorRecord>> {
        self.entries
            .iter()
            .map(|(name, p)| TensorRecord::from_tensor(name, Some(p.partition), p.var.as_tensor()))
            .collect()
    }

    /// Installs parameters from checkpoint records. Existing names are
    /// overwritten in place; unknown names are inserted.
    pub fn load_records<'a>(&mut self, records: impl IntoIterator<Item = &'a TensorRecord>) -> Result<()> {
        for r in records {
            let partition = r
                .partition
                .ok_or_else(|| Error::checkpoint(format!("tensor {} has no partition label", r.name)))?;
            let t = r.to_tensor(self.dtype, &self.device)?;
            match self.entries.get(&r.name) {
                Some(p) => {
                    if p.partition != partition || p.var.dims() != t.dims() {
                        return Err(Error::checkpoint(format!(
                            "tensor {} does not match the model definition",
                            r.name
                        )));
                    }
                    p.var.set(&t)?;
                }
                None => {
                    self.entries.insert(
                        r.name.clone(),
                        Param {
                            partition,
                            var: Var::from_tensor(&t)?,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    /// Deep copy of all parameter values (the frozen set and rng are copied too).
    pub fn duplicate(&self) -> Result<ParamStore> {
        let mut entries = BTreeMap::new();
        for (k, p) in &self.entries {
            entries.insert(
                k.clone(),
                Param {
                    partition: p.partition,
                    var: Var::from_tensor(&p.var.as_tensor().copy()?)?,
                },
            );
        }
        Ok(ParamStore {
            dtype: self.dtype,
            device: self.device.clone(),
            entries,
            frozen: self.frozen.clone(),
            rng: self.rng.clone(),
        })
    }
}

/// A name prefix plus default partition over a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    partition: Partition,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.join(name),
            partition: self.partition,
            store: self.store,
        }
    }

    pub fn with_partition(&mut self, name: &str, partition: Partition) -> Scope<'_> {
        Scope {
            prefix: self.join(name),
            partition,
            store: self.store,
        }
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        self.store.get_or_init(&full, self.partition, shape, init)
    }

    /// Registers a parameter and returns its full name.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<String> {
        let full = self.join(name);
        self.store.get_or_init(&full, self.partition, shape, init)?;
        Ok(full)
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let mk = |seed| {
            let mut s = ParamStore::new(DType::F32, Device::Cpu, seed);
            s.root(Partition::Base)
                .tensor("w", &[4, 3], Init::Kaiming { fan_in: 3, gain: 1.0 })
                .unwrap();
            s.values("w").unwrap()
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
    }

    #[test]
    fn frozen_partitions_are_detached() {
        let mut s = ParamStore::new(DType::F32, Device::Cpu, 0);
        s.set_frozen([Partition::Base]);
        let a = s.root(Partition::Base).tensor("a", &[2], Init::Const(1.0)).unwrap();
        let b = s.root(Partition::Control).tensor("b", &[2], Init::Const(1.0)).unwrap();
        assert!(!a.track_op());
        assert!(b.track_op());
    }

    #[test]
    fn shape_or_partition_conflicts_are_rejected() {
        let mut s = ParamStore::new(DType::F32, Device::Cpu, 0);
        s.get_or_init("x", Partition::Base, &[2], Init::Zeros).unwrap();
        assert!(s.get_or_init("x", Partition::Base, &[3], Init::Zeros).is_err());
        assert!(s.get_or_init("x", Partition::Control, &[2], Init::Zeros).is_err());
    }
}
