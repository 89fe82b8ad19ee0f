use std::f64::consts::PI;

use super::params::{GradStore, ParamStore};
use crate::error::{Error, Result};

/// SGD with momentum under a cosine-annealed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub base_lr: f64,
    pub eta_min: f64,
    /// Schedule horizon in epochs.
    pub t_max: usize,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        store: &ParamStore,
        momentum: f64,
        base_lr: f64,
        eta_min: f64,
        t_max: usize,
    ) -> Self {
        OptimizerState {
            momentum,
            base_lr,
            eta_min,
            t_max,
            velocity: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `eta_min + (base_lr − eta_min)·(1 + cos(π·t/T_max))/2`.
pub fn lr_at(t: f64, state: &OptimizerState) -> Result<f64> {
    let t_max = state.t_max as f64;
    if !(0.0..=t_max).contains(&t) {
        return Err(Error::Contract(format!(
            "schedule step {t} outside [0, {t_max}]"
        )));
    }
    if state.t_max == 0 {
        return Ok(state.base_lr);
    }
    Ok(state.eta_min + (state.base_lr - state.eta_min) * (1.0 + (PI * t / t_max).cos()) / 2.0)
}

/// `v ← momentum·v + grad; p ← p − lr·v`.
pub fn sgd_step(params: &mut ParamStore, grads: &GradStore, state: &mut OptimizerState, lr: f64) {
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for (id, g) in ids.into_iter().zip(grads.slots()) {
        let v = &mut state.velocity[id.index()];
        let p = params.get_mut(id).data_mut();
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = state.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}
