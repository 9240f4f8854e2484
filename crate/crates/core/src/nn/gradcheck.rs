use candle_core::{DType, Tensor};

use super::params::ParamStore;
use crate::rng::Rng;
use crate::{Error, Result};
use rand::seq::index::sample;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares backprop gradients of `loss` against central differences on
/// `count` randomly chosen scalars of the named parameters.
///
/// `loss` must be a deterministic function of the store; the store should be
/// float64 for the comparison to be meaningful.
pub fn check_gradients(
    ps: &ParamStore,
    names: &[String],
    count: usize,
    h: f64,
    rng: &mut Rng,
    loss: impl Fn(&ParamStore) -> Result<Tensor>,
) -> Result<Vec<GradCheckEntry>> {
    let l = loss(ps)?;
    let grads = l.backward()?;
    let mut picks = Vec::new();
    let sizes: Vec<usize> = names
        .iter()
        .map(|n| ps.get(n).map(|p| p.var.elem_count()).ok_or_else(|| Error::invalid(format!("no parameter {n}"))))
        .collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    for flat in sample(rng, total, count.min(total)).into_vec() {
        let mut rem = flat;
        for (n, &s) in names.iter().zip(&sizes) {
            if rem < s {
                picks.push((n.clone(), rem));
                break;
            }
            rem -= s;
        }
    }
    let eval = |ps: &ParamStore| -> Result<f64> { Ok(loss(ps)?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut out = Vec::with_capacity(picks.len());
    for (name, idx) in picks {
        let var = &ps.get(&name).expect("checked above").var;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[idx],
            None => 0.0,
        };
        let orig: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let shape = var.dims().to_vec();
        let set = |delta: f64| -> Result<()> {
            let mut v = orig.clone();
            v[idx] += delta;
            let t = Tensor::from_vec(v, shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
            Ok(())
        };
        set(h)?;
        let plus = eval(ps)?;
        set(-h)?;
        let minus = eval(ps)?;
        set(0.0)?;
        out.push(GradCheckEntry {
            param: name,
            index: idx,
            analytic,
            numeric: (plus - minus) / (2.0 * h),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Partition};
    use candle_core::Device;

    #[test]
    fn matches_a_closed_form_gradient() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu, 0);
        ps.get_or_init("w", Partition::Base, &[5], Init::Normal { std: 1.0 }).unwrap();
        let mut rng = crate::rng::seeded(1);
        let entries = check_gradients(&ps, &["w".to_string()], 5, 1e-5, &mut rng, |ps| {
            let w = ps.fetch("w")?;
            Ok((w.sqr()? * &w)?.sum_all()?)
        })
        .unwrap();
        let w = ps.values("w").unwrap();
        for e in entries {
            assert!((e.analytic - 3.0 * w[e.index].powi(2)).abs() < 1e-9);
            assert!(e.relative_error(1e-8) < 1e-6);
        }
    }
}
