//! Adam optimizer and gradient clipping over named parameter maps.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-parameter Adam moments. Moments and the update math run in f64 so
/// the optimizer itself never adds single-precision drift; only the stored
/// parameters are f32.
#[derive(Clone, Debug)]
pub struct OptimState {
    lr: f64,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams<f32>, lr: f64) -> OptimState {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.tensors().iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        OptimState { lr, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// L2 norm over every gradient entry of every parameter.
pub fn global_grad_norm(grads: &BTreeMap<String, Vec<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. Every parameter must have a gradient of
/// matching length; a missing or misshapen entry is a wiring bug upstream.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimState,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);

    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for name in names {
        let current = params.get(&name)?.clone();
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for parameter {name}")))?;
        if g.len() != current.len() {
            return Err(Error::Invalid(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                current.len()
            )));
        }
        let m = state.m.get_mut(&name).expect("state built from the same params");
        let v = state.v.get_mut(&name).expect("state built from the same params");

        let mut next = Vec::with_capacity(current.len());
        for (i, &p) in current.data().iter().enumerate() {
            let gi = g[i] as f64;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            next.push((p as f64 - state.lr * m_hat / (v_hat.sqrt() + state.eps)) as f32);
        }
        params.set(&name, Tensor::new(current.shape().to_vec(), next)?)?;
    }
    Ok(())
}
