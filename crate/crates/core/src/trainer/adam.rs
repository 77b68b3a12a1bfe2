use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numkit::Tensor;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m ← β₁m + (1−β₁)g      v ← β₂v + (1−β₂)g²
/// p ← p − lr · m̂ / (√v̂ + ε)   with m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
/// ```
pub fn optimizer_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    lr: T,
    state: &mut AdamState<T>,
) -> Result<(), TrainError> {
    let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() {
        return Err(TrainError::Contract(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::Contract(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if state.m.is_empty() {
        state.m = grads
            .iter()
            .map(|g| Tensor::zeros(g.shape().to_vec()))
            .collect::<Result<_, _>>()?;
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
        return Err(TrainError::Contract("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let c = state.config;
    let (b1, b2, eps) = (lit::<T>(c.beta1), lit::<T>(c.beta2), lit::<T>(c.eps));
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
