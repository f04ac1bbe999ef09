use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{ensure_eq, Error, Result};

pub const DEFAULT_LR: f64 = 2e-4;

/// Bias-corrected Adam moments for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect()
        };
        Ok(Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }
}

/// One Adam update of every trainable entry of `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate {} must be positive", state.lr)));
    }
    ensure_eq("gradient count", params.len(), grads.len())?;
    for (i, g) in grads.iter().enumerate() {
        if params.is_trainable(i) && g.is_none() {
            return Err(Error::MissingGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step_size = T::real(state.lr / c1);
    let c2_sqrt = T::real(c2.sqrt());
    let (b1t, b2t) = (T::real(b1), T::real(b2));
    let (one, eps) = (T::one(), T::real(state.eps));
    for (i, g) in grads.iter().enumerate() {
        if !params.is_trainable(i) {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        ensure_eq("gradient size", params.value(i).len(), g.len())?;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = params.value_mut(i).data_mut();
        for (((wv, mv), vv), &gv) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *mv = b1t * *mv + (one - b1t) * gv;
            *vv = b2t * *vv + (one - b2t) * gv * gv;
            *wv -= step_size * *mv / ((*vv).sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}
