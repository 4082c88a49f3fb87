use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{decays, ModelParams, OptimizerState};
use crate::tensor::Tensor;

use super::TrainConfig;

/// Global L2 norm over all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// Frozen parameters are never touched. Norm gains, biases and the mask
/// query are not decayed. `step` (the 0-based index of this update) is only
/// used to report divergence; nothing is modified when any gradient is
/// non-finite.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
    step: u64,
) -> Result<()> {
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::DivergedRun { step });
    }
    for (name, g) in grads {
        let p = params.params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    let (b1, b2) = config.betas;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.params.iter_mut().filter(|(_, p)| !p.frozen) {
        let Some(g) = grads.get(name) else { continue };
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let wd = if decays(name) { config.weight_decay } else { 0.0 };
        for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * (m_hat / (v_hat.sqrt() + config.eps) + wd * *x);
        }
    }
    if params.params.values().any(|p| !p.value.is_finite()) {
        return Err(Error::DivergedRun { step });
    }
    Ok(())
}
