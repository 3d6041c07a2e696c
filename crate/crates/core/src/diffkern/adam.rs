//! Adam optimizer over a parameter store.

use super::store::ParameterStore;
use super::tape::GradMap;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, keyed like the store.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update for every parameter present in `grads`. Parameters
/// without a gradient entry are untouched; a gradient for an unknown or
/// mismatched parameter is an error.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    grads: &GradMap,
    params: AdamParams,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - params.beta1.powf(t);
    let bc2 = 1.0 - params.beta2.powf(t);
    for (path, g) in grads {
        let p = store
            .get_mut(path)
            .ok_or_else(|| Error::MissingGradient(path.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: gradient {:?} vs parameter {:?} for `{path}`",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..gd.len() {
            m[i] = params.beta1 * m[i] + (1.0 - params.beta1) * gd[i];
            v[i] = params.beta2 * v[i] + (1.0 - params.beta2) * gd[i] * gd[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            pd[i] -= params.lr * mh / (vh.sqrt() + params.eps);
        }
    }
    Ok(())
}
