//! Adam with bias correction and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WchError};
use crate::tensor::{Real, Tensor};

pub const BETA1: Real = 0.9;
pub const BETA2: Real = 0.999;
pub const EPSILON: Real = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i] = None` leaves parameter `i`
/// and its moments untouched.
pub fn adam_update(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut AdamState, lr: Real) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(WchError::dim(
            "adam_update",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(WchError::dim("adam_update", params[i].shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(WchError::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for `step` of `total` steps; cosine decays from `base` to 0.
    pub fn rate(self, base: Real, step: usize, total: usize) -> Real {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let frac = step as Real / total.max(1) as Real;
                0.5 * base * (1.0 + (std::f64::consts::PI as Real * frac).cos())
            }
        }
    }
}
