use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `β_t` linear from `1e-4` to `2e-2`.
    Linear,
    /// `ᾱ(t) ∝ cos²(((t/T) + s)/(1 + s)·π/2)` with `s = 0.008`, per-step
    /// `β` capped at `0.999`.
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?} (linear|cosine)"))),
        }
    }
}

/// Cumulative signal fractions `ᾱ[0..=T]` with `ᾱ[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a noise schedule needs at least one step"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1e-4 + f * (2e-2 - 1e-4)
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: usize| ((t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps).map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in betas {
        let prev = *alpha_bar.last().expect("non-empty");
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    fn check_t(&self, t: &[usize], batch: usize) -> Result<()> {
        if t.len() != batch && t.len() != 1 {
            return Err(Error::shape(format!("{} timesteps for a batch of {batch}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti > self.steps()) {
            return Err(Error::invalid(format!("timestep {bad} beyond T = {}", self.steps())));
        }
        Ok(())
    }

    /// `(B, 1, …, 1)` column of `f(t_b)` broadcastable against `like`.
    fn column(&self, t: &[usize], like: &Tensor, f: impl Fn(usize) -> f64) -> Result<Tensor> {
        let b = like.dim(0)?;
        self.check_t(t, b)?;
        let vals: Vec<f64> = (0..b).map(|i| f(t[if t.len() == 1 { 0 } else { i }])).collect();
        let mut shape = vec![1usize; like.rank()];
        shape[0] = b;
        Ok(Tensor::from_vec(vals, shape, like.device())?.to_dtype(like.dtype())?)
    }

    fn combine(&self, t: &[usize], a: &Tensor, fa: impl Fn(usize) -> f64, b: &Tensor, fb: impl Fn(usize) -> f64) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
        }
        let ca = self.column(t, a, fa)?;
        let cb = self.column(t, a, fb)?;
        Ok((a.broadcast_mul(&ca)? + b.broadcast_mul(&cb)?)?)
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. `t` holds one entry per batch row, or a
    /// single entry shared by all rows.
    pub fn q_sample(&self, x0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        self.combine(t, x0, |t| self.signal(t), eps, |t| self.noise(t))
    }

    /// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x0`.
    pub fn vpred(&self, x0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.combine(t, eps, |t| self.signal(t), x0, |t| -self.noise(t))
    }

    /// `x0 = √ᾱ_t·x_t − √(1−ᾱ_t)·v`.
    pub fn x0_from(&self, v: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.combine(t, x_t, |t| self.signal(t), v, |t| -self.noise(t))
    }

    /// `ε = √(1−ᾱ_t)·x_t + √ᾱ_t·v`.
    pub fn eps_from(&self, v: &Tensor, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.combine(t, x_t, |t| self.noise(t), v, |t| self.signal(t))
    }

    /// `steps` evenly spaced timesteps from `T` down to `T/steps`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if steps == 0 || steps > big_t {
            return Err(Error::invalid(format!("sampling steps must lie in 1..={big_t}, got {steps}")));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .rev()
            .map(|i| ((i * big_t) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }

    /// One deterministic DDIM update from `t` to `t_prev` given a v
    /// prediction; returns `(x_{t_prev}, x0_hat)`. The implied clean image is
    /// clamped to `[-1, 1]` before re-noising.
    pub fn ddim_step(&self, x_t: &Tensor, v: &Tensor, t: usize, t_prev: usize) -> Result<(Tensor, Tensor)> {
        let x0 = self.x0_from(v, x_t, &[t])?.clamp(-1.0, 1.0)?;
        let eps = if self.noise(t) > 0.0 {
            // Recompute ε from the clamped estimate so the update stays on
            // the line through x_t.
            ((x_t - (&x0 * self.signal(t))?)? / self.noise(t))?
        } else {
            self.eps_from(v, x_t, &[t])?
        };
        let next = ((&x0 * self.signal(t_prev))? + (&eps * self.noise(t_prev))?)?;
        Ok((next, x0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn schedule_endpoints() {
        let lin = make_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(lin.alpha_bar()[0], 1.0);
        assert!(lin.alpha_bar()[1000] < 5e-3);
        let cos = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        for s in [&lin, &cos] {
            assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a <= 1.0));
        }
        assert!(make_schedule(0, ScheduleKind::Linear).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn t_zero_is_identity() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let x = Tensor::new(&[[0.25f32, -0.5]], &Device::Cpu).unwrap();
        let e = Tensor::new(&[[1.5f32, 2.0]], &Device::Cpu).unwrap();
        let xt = s.q_sample(&x, &[0], &e).unwrap();
        assert_eq!(xt.to_vec2::<f32>().unwrap(), x.to_vec2::<f32>().unwrap());
        assert_eq!(s.vpred(&x, &e, &[0]).unwrap().to_vec2::<f32>().unwrap(), e.to_vec2::<f32>().unwrap());
        assert!(s.q_sample(&x, &[11], &e).is_err());
    }

    #[test]
    fn sampling_timesteps_descend_to_one() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert!(s.sampling_timesteps(1001).is_err());
    }
}
