//! Reverse-mode gradients through time and depth.
//!
//! Three schedules are supported for reversible nodes, plus stored BPTT for
//! the LIF baseline:
//!
//! * `A0` / `A1`: stored activations. The forward pass keeps every
//!   timestep's input, membranes and previous potential.
//! * `B`: recompute. Backward inverts each step to recover its inputs, runs
//!   the forward step again to rebuild the intermediates, then differentiates.
//! * `C`: inverse graph. Backward inverts each step and differentiates
//!   directly from the membranes the inversion already produced.
//!
//! Every spike derivative uses the surrogate gradient, and gradients flow
//! through all paths of the potential update, including the reset product
//! and the `alpha` carry.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{FlopsLedger, MemoryLedger, NodeCensus, OpCount, Phase};
use crate::lif::{LifParams, SpikeFn};
use crate::net::{cross_entropy_loss, Layer, Model, Network};
use crate::dd::DdTensor;
use crate::node::{forward_groups, inverse_groups, CacheMode, NodeCache, NodeParams, StoredStep};
use crate::tensor::{relative_error, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Original LIF node, stored activations.
    A0,
    /// Reversible node, stored activations.
    A1,
    /// Reversible node, recompute through the forward graph.
    B,
    /// Reversible node, differentiate on the inverse graph.
    C,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::A0, Strategy::A1, Strategy::B, Strategy::C];
    pub const REVERSIBLE: [Strategy; 3] = [Strategy::A1, Strategy::B, Strategy::C];

    pub fn cache_mode(self) -> CacheMode {
        match self {
            Strategy::A0 | Strategy::A1 => CacheMode::Stored,
            Strategy::B | Strategy::C => CacheMode::Reversible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::A0 => "a0",
            Strategy::A1 => "a1",
            Strategy::B => "b",
            Strategy::C => "c",
        }
    }

    pub fn drives_lif(self) -> bool {
        self == Strategy::A0
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

/// Stored activations of a LIF layer: the updated membrane at each timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LifCache {
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    /// Inputs of a dense layer, kept under every strategy for its weight
    /// gradient. When a reversible-mode node produced them, its output
    /// residuals ride along so the node can be inverted exactly.
    Dense {
        inputs: Vec<Tensor>,
        residuals: Option<Vec<Tensor>>,
    },
    Node(NodeCache),
    Lif(LifCache),
}

/// What one forward pass left behind for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub strategy: Strategy,
    pub spike: SpikeFn,
    pub timesteps: usize,
    pub records: Vec<Record>,
    /// Network output sequence, kept only when the last layer is a node.
    pub final_output: Option<Vec<Tensor>>,
    pub final_residual: Option<Vec<Tensor>>,
}

impl Tape {
    /// Retained node elements by role.
    pub fn memory_census(&self) -> MemoryLedger {
        let mut nodes = Vec::new();
        for (layer, rec) in self.records.iter().enumerate() {
            match rec {
                Record::Node(NodeCache::Stored { steps }) => {
                    let mut c = NodeCensus {
                        layer,
                        k: steps.first().map_or(0, |s| s.x.len() as u64),
                        ..Default::default()
                    };
                    for s in steps {
                        c.per_step_x += s.x.len() as u64;
                        c.per_step_m += s.m.iter().map(|m| m.len() as u64).sum::<u64>();
                        c.per_step_v += s.v_prev.len() as u64;
                    }
                    nodes.push(c);
                }
                Record::Node(NodeCache::Reversible { v_final }) => nodes.push(NodeCensus {
                    layer,
                    k: v_final.len() as u64,
                    final_v: v_final.len() as u64,
                    ..Default::default()
                }),
                Record::Lif(cache) => nodes.push(NodeCensus {
                    layer,
                    k: cache.v.first().map_or(0, |v| v.len() as u64),
                    per_step_v: cache.v.iter().map(|v| v.len() as u64).sum(),
                    ..Default::default()
                }),
                Record::Dense { .. } => {}
            }
        }
        MemoryLedger {
            mode: self.strategy.cache_mode(),
            timesteps: self.timesteps,
            nodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    /// Per layer, the gradient of the loss with respect to that layer's
    /// input sequence. Empty where not computed.
    pub input_grads: Vec<Vec<Tensor>>,
    /// Dense weights and biases, in [`Network::params`] order.
    pub param_grads: Vec<Tensor>,
    /// Elements reconstructed by inversion during the pass.
    pub recovered_elements: u64,
}

impl GradResult {
    /// Largest per-tensor relative error against `reference`, over every
    /// quantity both results carry.
    pub fn max_relative_error(&self, reference: &GradResult) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (a, b) in self.input_grads.iter().zip(&reference.input_grads) {
            if a.is_empty() || b.is_empty() {
                continue;
            }
            for (ta, tb) in a.iter().zip(b) {
                worst = worst.max(relative_error(ta, tb)?);
            }
        }
        for (a, b) in self.param_grads.iter().zip(&reference.param_grads) {
            worst = worst.max(relative_error(a, b)?);
        }
        Ok(worst)
    }
}

fn split(t: &Tensor, n: usize) -> Vec<Tensor> {
    t.split_last(n).expect("extent checked by forward pass")
}

fn join(parts: &[Tensor]) -> Tensor {
    Tensor::concat_last(parts).expect("groups share leading extents")
}

/// Vector-Jacobian product of one node step, group by group.
///
/// Inputs are the upstream gradients on the outputs `Y` and new potentials
/// `V'`, together with the step's outputs and membranes. Returns gradients
/// on `X` and on the previous potentials.
pub(crate) fn vjp_groups(
    gy: &[Tensor],
    gv: &[Tensor],
    y: &[Tensor],
    m: &[Tensor],
    p: &NodeParams,
    ops: &mut OpCount,
) -> (Vec<Tensor>, Vec<Tensor>) {
    let n = p.groups;
    let mut gx: Vec<Option<Tensor>> = vec![None; n];
    let mut gv_prev: Vec<Option<Tensor>> = vec![None; n];
    // gradient reaching Y_i through group i+1's drive
    let mut g_drive: Option<Tensor> = None;
    for i in (0..n).rev() {
        let mut g_y = match g_drive.take() {
            Some(gd) => ops.add(&gy[i], &gd),
            None => gy[i].clone(),
        };
        let reset_gap = ops.affine(&m[i], -1.0, p.v_res);
        let through_reset = ops.mul(&gv[i], &reset_gap);
        g_y = ops.add(&g_y, &through_reset);

        let slope = ops.surrogate(&m[i], p.v_th, p.theta);
        let keep = ops.affine(&y[i], -1.0, 1.0);
        let g_m_hold = ops.mul(&gv[i], &keep);
        let g_m_spike = ops.mul(&g_y, &slope);
        let g_m = ops.add(&g_m_hold, &g_m_spike);

        let carry = ops.scale(&gv[i], p.alpha);
        let leak = ops.scale(&g_m, 1.0 - 1.0 / p.tau);
        gv_prev[i] = Some(ops.add(&carry, &leak));

        let g_d = ops.scale(&g_m, 1.0 / p.tau);
        gx[p_partner(p, i)] = Some(ops.scale(&g_y, p.beta));
        if i == 0 {
            let coupled = gx[0].take().expect("group n coupled into X_1");
            gx[0] = Some(ops.add(&coupled, &g_d));
        } else {
            g_drive = Some(g_d);
        }
    }
    let unwrap = |v: Vec<Option<Tensor>>| v.into_iter().map(|t| t.expect("every group visited")).collect();
    (unwrap(gx), unwrap(gv_prev))
}

#[inline]
fn p_partner(p: &NodeParams, i: usize) -> usize {
    (i + 1) % p.groups
}

/// Vector-Jacobian product of one reversible node step.
///
/// `y` is the step output and `m` its membranes, one tensor per group (as
/// cached in stored mode or rebuilt by inversion). Returns `(gX, gV_prev)`.
pub fn node_vjp(
    gy: &Tensor,
    gv: &Tensor,
    y: &Tensor,
    m: &[Tensor],
    params: &NodeParams,
) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let n = params.groups;
    for t in [gv, y] {
        if t.shape() != gy.shape() {
            return Err(Error::ShapeMismatch {
                left: gy.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    let ys = gy.split_last(n)?;
    if m.len() != n || m.iter().any(|mi| mi.shape() != ys[0].shape()) {
        return Err(Error::ShapeMismatch {
            left: ys[0].shape().to_vec(),
            right: m.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
        });
    }
    let mut ops = OpCount::default();
    let (gx, gvp) = vjp_groups(&ys, &split(gv, n), &split(y, n), m, params, &mut ops);
    Ok((join(&gx), join(&gvp)))
}

/// Gradients of one node sequence: per-timestep input gradients, the
/// gradient on the initial potential, and (for the inverting schedules)
/// the recovered input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrad {
    pub gx_seq: Vec<Tensor>,
    pub gv0: Tensor,
    pub recovered_x: Option<Vec<Tensor>>,
    pub recovered_v0: Option<Tensor>,
}

/// Counters for the phases a node backward pass touches.
#[derive(Debug, Default)]
pub(crate) struct BackwardOps {
    pub forward: OpCount,
    pub inverse: OpCount,
    pub grad: OpCount,
}

fn zero_groups(like: &Tensor, n: usize) -> Vec<Tensor> {
    split(&Tensor::zeros(like.shape()), n)
}

pub(crate) fn node_backward_stored(
    steps: &[StoredStep],
    y_seq: &[Tensor],
    gy_seq: &[Tensor],
    p: &NodeParams,
    ops: &mut BackwardOps,
) -> Result<NodeGrad> {
    if steps.len() != gy_seq.len() || y_seq.len() != gy_seq.len() {
        return Err(Error::MissingCache);
    }
    let n = p.groups;
    let mut gv = zero_groups(&gy_seq[0], n);
    let mut gx_seq = vec![None; gy_seq.len()];
    for t in (0..gy_seq.len()).rev() {
        let (gx, gvp) = vjp_groups(&split(&gy_seq[t], n), &gv, &split(&y_seq[t], n), &steps[t].m, p, &mut ops.grad);
        gx_seq[t] = Some(join(&gx));
        gv = gvp;
    }
    Ok(NodeGrad {
        gx_seq: gx_seq.into_iter().map(Option::unwrap).collect(),
        gv0: join(&gv),
        recovered_x: None,
        recovered_v0: None,
    })
}

fn node_backward_inverting(
    v_final: &DdTensor,
    y_seq: &[Tensor],
    y_res: Option<&[Tensor]>,
    gy_seq: &[Tensor],
    p: &NodeParams,
    spike: SpikeFn,
    rerun_forward: bool,
    ops: &mut BackwardOps,
) -> Result<NodeGrad> {
    if y_seq.len() != gy_seq.len() || y_seq.is_empty() || y_res.is_some_and(|r| r.len() != y_seq.len()) {
        return Err(Error::MissingCache);
    }
    let n = p.groups;
    let mut v = v_final.split_last(n).expect("extent checked by forward pass");
    let mut gv = zero_groups(&v_final.hi, n);
    let mut gx_seq = vec![None; y_seq.len()];
    let mut x_seq = vec![None; y_seq.len()];
    for t in (0..y_seq.len()).rev() {
        let y = split(&y_seq[t], n);
        let r = y_res.map(|r| split(&r[t], n));
        let inv = inverse_groups(&y, r.as_deref(), &v, p, spike, &mut ops.inverse)?;
        let gy = split(&gy_seq[t], n);
        let (gx, gvp) = if rerun_forward {
            let fwd = forward_groups(&inv.x, &inv.v_prev, p, spike, &mut ops.forward);
            vjp_groups(&gy, &gv, &fwd.y, &fwd.m, p, &mut ops.grad)
        } else {
            vjp_groups(&gy, &gv, &y, &inv.m, p, &mut ops.grad)
        };
        gx_seq[t] = Some(join(&gx));
        x_seq[t] = Some(join(&inv.x));
        gv = gvp;
        v = inv.v_prev;
    }
    Ok(NodeGrad {
        gx_seq: gx_seq.into_iter().map(Option::unwrap).collect(),
        gv0: join(&gv),
        recovered_x: Some(x_seq.into_iter().map(Option::unwrap).collect()),
        recovered_v0: Some(DdTensor::concat_last(&v)?.to_tensor()),
    })
}

pub(crate) fn node_backward_recompute(
    v_final: &DdTensor,
    y_seq: &[Tensor],
    y_res: Option<&[Tensor]>,
    gy_seq: &[Tensor],
    p: &NodeParams,
    spike: SpikeFn,
    ops: &mut BackwardOps,
) -> Result<NodeGrad> {
    node_backward_inverting(v_final, y_seq, y_res, gy_seq, p, spike, true, ops)
}

pub(crate) fn node_backward_inverse_graph(
    v_final: &DdTensor,
    y_seq: &[Tensor],
    y_res: Option<&[Tensor]>,
    gy_seq: &[Tensor],
    p: &NodeParams,
    spike: SpikeFn,
    ops: &mut BackwardOps,
) -> Result<NodeGrad> {
    node_backward_inverting(v_final, y_seq, y_res, gy_seq, p, spike, false, ops)
}

/// Stored BPTT through a soft-reset LIF layer.
pub(crate) fn lif_backward(cache: &LifCache, go_seq: &[Tensor], p: &LifParams, ops: &mut OpCount) -> Result<Vec<Tensor>> {
    if cache.v.len() != go_seq.len() {
        return Err(Error::MissingCache);
    }
    let mut gi_seq = vec![None; go_seq.len()];
    let mut gv_next: Option<Tensor> = None;
    for t in (0..go_seq.len()).rev() {
        let (go, carry) = match &gv_next {
            Some(gn) => {
                let reset = ops.scale(gn, p.v_th);
                (ops.sub(&go_seq[t], &reset), Some(ops.scale(gn, p.alpha_leak)))
            }
            None => (go_seq[t].clone(), None),
        };
        let slope = ops.surrogate(&cache.v[t], p.v_th, p.theta);
        let mut gv = ops.mul(&go, &slope);
        if let Some(c) = carry {
            gv = ops.add(&gv, &c);
        }
        gi_seq[t] = Some(gv.clone());
        gv_next = Some(gv);
    }
    Ok(gi_seq.into_iter().map(Option::unwrap).collect())
}

/// Backpropagates `loss_grad` (the per-timestep gradient of the network
/// output) under the tape's own strategy.
pub fn backward(network: &Network, tape: &Tape, loss_grad: &[Tensor]) -> Result<GradResult> {
    backward_with_ledger(network, tape, loss_grad, None)
}

pub fn backward_with_ledger(
    network: &Network,
    tape: &Tape,
    loss_grad: &[Tensor],
    ledger: Option<&mut FlopsLedger>,
) -> Result<GradResult> {
    run_backward(network, tape, tape.strategy, loss_grad, ledger)
}

/// Stored-activation BPTT (strategies A0 and A1).
pub fn backward_stored(network: &Network, tape: &Tape, loss_grad: &[Tensor]) -> Result<GradResult> {
    if tape.strategy.cache_mode() != CacheMode::Stored {
        return Err(Error::MissingCache);
    }
    run_backward(network, tape, tape.strategy, loss_grad, None)
}

/// Invert, rerun forward, differentiate (strategy B) on a reversible-mode tape.
pub fn backward_recompute(network: &Network, tape: &Tape, loss_grad: &[Tensor]) -> Result<GradResult> {
    run_backward(network, tape, Strategy::B, loss_grad, None)
}

/// Invert and differentiate on the inverse graph (strategy C) on a reversible-mode tape.
pub fn backward_inverse_graph(network: &Network, tape: &Tape, loss_grad: &[Tensor]) -> Result<GradResult> {
    run_backward(network, tape, Strategy::C, loss_grad, None)
}

fn run_backward(
    network: &Network,
    tape: &Tape,
    strategy: Strategy,
    loss_grad: &[Tensor],
    mut ledger: Option<&mut FlopsLedger>,
) -> Result<GradResult> {
    if network.layers.len() != tape.records.len() {
        return Err(Error::MissingCache);
    }
    let mut grad_seq: Vec<Tensor> = loss_grad.to_vec();
    let mut outputs: Option<Cow<'_, [Tensor]>> = tape.final_output.as_deref().map(Cow::Borrowed);
    let mut residuals: Option<&[Tensor]> = tape.final_residual.as_deref();
    let mut input_grads = vec![Vec::new(); network.layers.len()];
    let mut dense_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; network.layers.len()];
    let mut recovered = 0u64;

    for (l, (layer, record)) in network.layers.iter().zip(&tape.records).enumerate().rev() {
        match (layer, record) {
            (Layer::Dense(d), Record::Dense { inputs, residuals: r }) => {
                let (gx, gw, gb) = d.backward(inputs, &grad_seq)?;
                dense_grads[l] = Some((gw, gb));
                outputs = Some(Cow::Borrowed(inputs.as_slice()));
                residuals = r.as_deref();
                grad_seq = gx;
            }
            (Layer::Reversible(p), Record::Node(cache)) => {
                let y_seq = outputs.take().ok_or(Error::MissingCache)?;
                let y_res = residuals.take();
                let mut ops = BackwardOps::default();
                let g = match (strategy, cache) {
                    (Strategy::A1, NodeCache::Stored { steps }) => {
                        let g = node_backward_stored(steps, &y_seq, &grad_seq, p, &mut ops)?;
                        outputs = Some(Cow::Owned(steps.iter().map(|s| s.x.clone()).collect()));
                        g
                    }
                    (Strategy::B | Strategy::C, NodeCache::Reversible { v_final }) => {
                        let mut g = if strategy == Strategy::B {
                            node_backward_recompute(v_final, &y_seq, y_res, &grad_seq, p, tape.spike, &mut ops)?
                        } else {
                            node_backward_inverse_graph(v_final, &y_seq, y_res, &grad_seq, p, tape.spike, &mut ops)?
                        };
                        let xs = g.recovered_x.take().expect("inverting schedules recover inputs");
                        recovered += xs.iter().map(|x| x.len() as u64).sum::<u64>();
                        recovered += g.recovered_v0.as_ref().map_or(0, |v| v.len() as u64);
                        outputs = Some(Cow::Owned(xs));
                        g
                    }
                    (Strategy::A0, _) => {
                        return Err(Error::StrategyMismatch {
                            strategy: strategy.to_string(),
                            layer: "reversible",
                        })
                    }
                    _ => return Err(Error::MissingCache),
                };
                if let Some(led) = ledger.as_deref_mut() {
                    let grad_phase = if strategy == Strategy::C {
                        Phase::GradInverseGraph
                    } else {
                        Phase::GradForwardGraph
                    };
                    led.record(Phase::Forward, ops.forward.total());
                    led.record(Phase::Inverse, ops.inverse.total());
                    led.record(grad_phase, ops.grad.total());
                    led.elements += grad_seq.iter().map(|t| t.len() as u64).sum::<u64>();
                }
                grad_seq = g.gx_seq;
            }
            (Layer::Lif(p), Record::Lif(cache)) => {
                if strategy != Strategy::A0 {
                    return Err(Error::StrategyMismatch {
                        strategy: strategy.to_string(),
                        layer: "lif",
                    });
                }
                let mut ops = OpCount::default();
                let gi = lif_backward(cache, &grad_seq, p, &mut ops)?;
                if let Some(led) = ledger.as_deref_mut() {
                    led.record(Phase::GradForwardGraph, ops.total());
                    led.elements += grad_seq.iter().map(|t| t.len() as u64).sum::<u64>();
                }
                outputs = None;
                grad_seq = gi;
            }
            _ => return Err(Error::MissingCache),
        }
        input_grads[l] = grad_seq.clone();
    }

    let param_grads = dense_grads
        .into_iter()
        .flatten()
        .flat_map(|(w, b)| [w, b])
        .collect();
    Ok(GradResult {
        input_grads,
        param_grads,
        recovered_elements: recovered,
    })
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference gradients of the smoothed model's mean cross-entropy
/// with respect to every parameter and every element of the input batch.
///
/// The returned `input_grads` carries only the network input (layer 0).
pub fn finite_difference_oracle(model: &Model, input: &Tensor, labels: &[usize], h: f64) -> Result<GradResult> {
    let loss_of = |m: &Model, x: &Tensor| -> Result<f64> {
        let (logits, _) = m.forward(x, Strategy::for_model(m), SpikeFn::Smooth, None)?;
        Ok(cross_entropy_loss(&logits, labels)?.0)
    };

    let mut probe = model.clone();
    let n_params = model.network.params().len();
    let mut param_grads = Vec::with_capacity(n_params);
    let mut failure = None;
    for idx in 0..n_params {
        let base = model.network.params()[idx].clone();
        let g = central_difference(
            |w| {
                *probe.network.params_mut()[idx] = Tensor::from_vec(base.shape().to_vec(), w.to_vec())
                    .expect("probe keeps the parameter shape");
                loss_of(&probe, input).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            base.data(),
            h,
        );
        *probe.network.params_mut()[idx] = base.clone();
        param_grads.push(Tensor::from_vec(base.shape().to_vec(), g)?);
    }
    let gx = central_difference(
        |x| {
            let xt = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).expect("probe keeps the input shape");
            loss_of(model, &xt).unwrap_or_else(|e| {
                failure.get_or_insert(e);
                f64::NAN
            })
        },
        input.data(),
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut input_grads = vec![Vec::new(); model.network.layers.len()];
    input_grads[0] = vec![Tensor::from_vec(input.shape().to_vec(), gx)?];
    Ok(GradResult {
        input_grads,
        param_grads,
        recovered_elements: 0,
    })
}

impl Strategy {
    /// A strategy valid for the model's node kind, for passes where the
    /// schedule does not matter.
    pub fn for_model(model: &Model) -> Strategy {
        if model.uses_lif() {
            Strategy::A0
        } else {
            Strategy::A1
        }
    }
}
