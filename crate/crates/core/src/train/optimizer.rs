use transip_tensor::Array;

use crate::model::Params;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// AdamW moments per parameter and the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros = || params.values().iter().map(|p| Array::zeros(p.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    pub fn check(&self, params: &Params) -> Result<()> {
        for ((name, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Incompatible(format!(
                    "optimizer moments for {name} have shape {:?}, parameter has {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
        }
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Incompatible("optimizer state does not match the parameter list".into()));
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Array]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm observed before clipping.
pub fn clip_grad_norm(grads: &mut [Array], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(
    params: &mut Params,
    grads: &[Array],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidInput(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].data();
        if grads[i].shape() != params.values()[i].shape() {
            return Err(Error::InvalidInput(format!(
                "gradient for {} has shape {:?}, expected {:?}",
                params.names()[i],
                grads[i].shape(),
                params.values()[i].shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mut p = params.values()[i].as_ref().clone();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            *w = *w - lr * cfg.weight_decay * *w - lr * update;
        }
        params.set(i, p)?;
    }
    Ok(())
}
