use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_frozen, ModelParams};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, created lazily on first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

fn check_finite<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteGradient(name.clone())),
        None => Ok(()),
    }
}

fn update<T: Real>(
    name: &str,
    p: &mut Tensor<T>,
    g: &Tensor<T>,
    state: &mut OptimState<T>,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape("adamw", p.shape(), g.shape()));
    }
    let m = state
        .m
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
    let v = state
        .v
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((pi, &gi), mi), vi) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let gf = gi.to_f64().unwrap();
        let mf = b1 * mi.to_f64().unwrap() + (1.0 - b1) * gf;
        let vf = b2 * vi.to_f64().unwrap() + (1.0 - b2) * gf * gf;
        *mi = T::lit(mf);
        *vi = T::lit(vf);
        let pf = pi.to_f64().unwrap();
        let step = (mf / c1) / ((vf / c2).sqrt() + cfg.eps);
        *pi = T::lit(pf - lr * (step + cfg.weight_decay * pf));
    }
    Ok(())
}

/// One decoupled-weight-decay Adam update over the tensors named in
/// `grads`. Frozen tensors are skipped; a non-finite gradient aborts
/// before anything changes.
pub fn adamw_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_finite(grads)?;
    state.step += 1;
    let t = state.step;
    for (name, g) in grads {
        if is_frozen(name) {
            continue;
        }
        update(name, params.get_mut(name)?, g, state, t, lr, cfg)?;
    }
    Ok(())
}

/// [`adamw_step`] over a free-standing tensor map (adapters, heads).
pub fn adamw_step_map<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_finite(grads)?;
    state.step += 1;
    let t = state.step;
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown tensor `{name}`")))?;
        update(name, p, g, state, t, lr, cfg)?;
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
