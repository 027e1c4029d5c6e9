//! Warm-up / inverse-square-root learning rate and an adaptive-moment optimizer.

use indexmap::IndexMap;

use crate::error::{contract, Result};
use crate::params::ParameterStore;

/// `base · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`; steps start at 1.
pub fn lr_schedule(step: u64, base: f64, warmup: u64, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(contract("learning-rate schedule is 1-indexed; step 0 is invalid"));
    }
    if warmup == 0 {
        return Err(contract("warmup must be at least 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

/// Step counter and first/second moments, kept only for trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Back to step 0 with no accumulated moments.
    pub fn reset(&mut self) {
        self.step = 0;
        self.moments.clear();
    }
}

/// Clips `grads` to a global norm of `clip_norm`, then applies one
/// bias-corrected adaptive-moment update to the matching trainable
/// parameters. Gradients addressed to frozen parameters are an error.
/// Returns the pre-clipping gradient norm.
pub fn optimizer_step(
    store: &mut ParameterStore,
    grads: &[(String, Vec<f64>)],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    for (name, g) in grads {
        let entry = store
            .get(name)
            .ok_or_else(|| contract(format!("gradient for unknown parameter {name}")))?;
        if entry.frozen {
            return Err(contract(format!("gradient for frozen parameter {name}")));
        }
        if entry.tensor.len() != g.len() {
            return Err(contract(format!("gradient size mismatch for {name}")));
        }
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let clip = if norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let entry = store.get_mut(name).expect("checked above");
        let n = g.len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let p = entry.tensor.data_mut();
        for i in 0..n {
            let gi = g[i] * clip;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}
