//! SGD and Adam parameter updates.

use super::tensor::Tensor;

/// A named trainable tensor. Names are slash-free dotted paths
/// (e.g. `enc.3.ffn.w1`) and must be unique within one model.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Parameter {
        let tensor = tensor.requires_grad(true);
        Parameter {
            name: name.into(),
            tensor,
        }
    }
}

pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

/// Plain gradient descent: `p <- p - lr * grad`. Gradients are left
/// untouched. Panics if a parameter has no gradient.
pub fn sgd_step(params: &[Parameter], lr: f64) {
    for p in params {
        let grad = p
            .tensor
            .grad()
            .unwrap_or_else(|| panic!("sgd_step: parameter '{}' has no gradient", p.name));
        p.tensor.update_values(|values| {
            for (v, g) in values.iter_mut().zip(&grad) {
                *v -= lr * g;
            }
        });
    }
}

/// First/second moment buffers for Adam, parallel to one parameter list.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialized moments matching each parameter's element count.
    pub fn new(params: &[Parameter]) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update. `params` must be the same list (same order)
/// the state was created from. Panics if a parameter has no gradient.
pub fn adam_step(
    params: &[Parameter],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(
        params.len(),
        state.m.len(),
        "adam_step: state built for {} parameters, got {}",
        state.m.len(),
        params.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .tensor
            .grad()
            .unwrap_or_else(|| panic!("adam_step: parameter '{}' has no gradient", p.name));
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        p.tensor.update_values(|values| {
            for (((val, g), mi), vi) in values.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *val -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}
