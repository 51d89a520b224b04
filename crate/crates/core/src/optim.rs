//! Adam (with bias correction) and plain SGD over parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::Params;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments for one parameter group. `step` counts updates
/// applied so far.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(p: &dyn Params) -> Self {
        let mut m = Vec::new();
        p.visit("", &mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update of every tensor in `params` (visit order) against `grads`.
pub fn adam_step(params: &mut dyn Params, grads: &[Tensor], state: &mut AdamState, hyper: &AdamConfig) -> Result<()> {
    check_shapes(params, grads)?;
    if state.m.len() != grads.len() || state.v.len() != grads.len() {
        return dim_err(format!("optimizer state holds {} tensors for {} gradients", state.m.len(), grads.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let mut i = 0;
    params.visit_mut(&mut |p| {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
        i += 1;
    });
    Ok(())
}

pub fn sgd_step(params: &mut dyn Params, grads: &[Tensor], lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    let mut i = 0;
    params.visit_mut(&mut |p| {
        for (pj, gj) in p.data_mut().iter_mut().zip(grads[i].data()) {
            *pj -= lr * gj;
        }
        i += 1;
    });
    Ok(())
}

fn check_shapes(params: &dyn Params, grads: &[Tensor]) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit("", &mut |_, t| shapes.push(t.shape().to_vec()));
    if shapes.len() != grads.len() {
        return dim_err(format!("{} gradients for {} parameters", grads.len(), shapes.len()));
    }
    for (s, g) in shapes.iter().zip(grads) {
        if s.as_slice() != g.shape() {
            return dim_err(format!("gradient shape {:?} for parameter {s:?}", g.shape()));
        }
    }
    Ok(())
}
