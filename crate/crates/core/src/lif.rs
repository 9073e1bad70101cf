//! The baseline leaky integrate-and-fire neuron and its surrogate gradient.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::OpCount;
use crate::tensor::Tensor;

/// Default surrogate sharpness.
pub const DEFAULT_THETA: f64 = 2.0;

/// Which spike nonlinearity the forward pass applies.
///
/// `Hard` is the Heaviside step used for training and inversion. `Smooth`
/// replaces it with the arctan antiderivative of the surrogate so that a
/// finite-difference oracle sees a differentiable model whose exact
/// derivative is the surrogate gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpikeFn {
    #[default]
    Hard,
    Smooth,
}

impl SpikeFn {
    /// Spike value for a membrane already offset by the threshold.
    #[inline]
    pub fn eval(self, offset: f64, theta: f64) -> f64 {
        match self {
            SpikeFn::Hard => {
                if offset >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            SpikeFn::Smooth => smooth_spike_scalar(offset, theta),
        }
    }
}

#[inline]
pub fn surrogate_grad_scalar(m: f64, theta: f64) -> f64 {
    let z = FRAC_PI_2 * theta * m;
    (theta / 2.0) / (1.0 + z * z)
}

#[inline]
pub fn smooth_spike_scalar(m: f64, theta: f64) -> f64 {
    0.5 + (FRAC_PI_2 * theta * m).atan() / PI
}

/// `(theta/2) / (1 + (pi/2 * theta * m)^2)` per element.
pub fn surrogate_grad(m: &Tensor, theta: f64) -> Tensor {
    m.map(|x| surrogate_grad_scalar(x, theta))
}

/// `1/2 + atan(pi/2 * theta * m) / pi` per element; its derivative is [`surrogate_grad`].
pub fn smooth_spike(m: &Tensor, theta: f64) -> Tensor {
    m.map(|x| smooth_spike_scalar(x, theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub alpha_leak: f64,
    pub v_th: f64,
    pub theta: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            alpha_leak: 0.5,
            v_th: 1.0,
            theta: DEFAULT_THETA,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "surrogate sharpness must be positive, got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: Tensor,
    pub o_prev: Tensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
            o_prev: Tensor::zeros(shape),
        }
    }
}

/// One soft-reset LIF update with a hard threshold.
pub fn lif_step(state: &LifState, weighted_input: &Tensor, params: &LifParams) -> Result<(LifState, Tensor)> {
    let mut ops = OpCount::default();
    lif_step_with(state, weighted_input, params, SpikeFn::Hard, &mut ops)
}

pub(crate) fn lif_step_with(
    state: &LifState,
    weighted_input: &Tensor,
    params: &LifParams,
    spike: SpikeFn,
    ops: &mut OpCount,
) -> Result<(LifState, Tensor)> {
    if state.v.shape() != weighted_input.shape() || state.o_prev.shape() != weighted_input.shape() {
        return Err(Error::ShapeMismatch {
            left: state.v.shape().to_vec(),
            right: weighted_input.shape().to_vec(),
        });
    }
    let leak = ops.scale(&state.v, params.alpha_leak);
    let driven = ops.add(&leak, weighted_input);
    let reset = ops.scale(&state.o_prev, params.v_th);
    let v = ops.sub(&driven, &reset);
    let spikes = ops.spike(&v, params.v_th, spike, params.theta);
    Ok((
        LifState {
            v,
            o_prev: spikes.clone(),
        },
        spikes,
    ))
}
