//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::tensor::{GradientMap, Scalar};

pub const DEFAULT_LR: f64 = 0.00005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store, in store order.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of every parameter in `params`; parameters without a
/// gradient entry are treated as having zero gradient. Nothing is modified
/// when any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    assert!(lr > 0.0, "learning rate must be positive");
    assert_eq!(state.m.len(), params.len(), "Adam state does not match parameter store");
    for (id, name, p) in params.iter() {
        if let Some(g) = grads.get(p) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        debug_assert_eq!(state.m[id.0].len(), p.numel());
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one, lr_t, eps_t) = (T::one(), T::of(lr), T::of(eps));
    let c1 = T::of(1.0 - beta1.powi(t));
    let c2 = T::of(1.0 - beta2.powi(t));

    for i in 0..params.len() {
        let id = ParamId(i);
        let p = params.get(id);
        let g = grads.get(p).map(|g| g.data().to_vec());
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut values = p.to_vec();
        for j in 0..values.len() {
            let gj = g.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] = values[j] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
        params.set(id, values)?;
    }
    Ok(())
}
