//! Scalar-operation and retained-activation accounting.
//!
//! The cost model charges one FLOP per application of an elementwise scalar
//! operation. A threshold comparison (the spike) counts as one; the surrogate
//! derivative counts as [`SURROGATE_FLOPS`]. Dense-layer matmuls are not
//! charged: the ledgers describe the spiking nodes only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::{surrogate_grad_scalar, SpikeFn};
use crate::node::CacheMode;
use crate::tensor::Tensor;

/// Offset-and-scale, square, add one, divide.
pub const SURROGATE_FLOPS: u64 = 4;

/// Running count of scalar operations issued by a kernel.
///
/// The counted helpers assume operand shapes were validated by the caller.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCount(pub u64);

impl OpCount {
    pub fn total(self) -> u64 {
        self.0
    }

    #[inline]
    fn tick(&mut self, t: &Tensor) {
        self.0 += t.len() as u64;
    }

    /// Charges `per_element` operations on each of `elements` values, for
    /// kernels that fuse several counted operations into one loop.
    #[inline]
    pub fn charge(&mut self, per_element: u64, elements: usize) {
        self.0 += per_element * elements as u64;
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tick(a);
        a.add(b).expect("operand shapes checked by caller")
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tick(a);
        a.sub(b).expect("operand shapes checked by caller")
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tick(a);
        a.mul(b).expect("operand shapes checked by caller")
    }

    /// Quotient without a zero check; callers guard their denominators.
    pub fn div_unchecked(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tick(a);
        a.zip_map(b, |x, y| x / y).expect("operand shapes checked by caller")
    }

    pub fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        self.tick(a);
        a.scale(s)
    }

    /// `k * a + c`, one operation (used for `1 - Y` and `V_res - M`).
    pub fn affine(&mut self, a: &Tensor, k: f64, c: f64) -> Tensor {
        self.tick(a);
        a.affine(k, c)
    }

    /// Spike of `m - threshold`: a single comparison.
    pub fn spike(&mut self, m: &Tensor, threshold: f64, spike: SpikeFn, theta: f64) -> Tensor {
        self.tick(m);
        m.map(|x| spike.eval(x - threshold, theta))
    }

    pub fn surrogate(&mut self, m: &Tensor, threshold: f64, theta: f64) -> Tensor {
        self.0 += SURROGATE_FLOPS * m.len() as u64;
        m.map(|x| surrogate_grad_scalar(x - threshold, theta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Inverse,
    GradForwardGraph,
    GradInverseGraph,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Forward,
        Phase::Inverse,
        Phase::GradForwardGraph,
        Phase::GradInverseGraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Inverse => "inverse",
            Phase::GradForwardGraph => "grad_forward_graph",
            Phase::GradInverseGraph => "grad_inverse_graph",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPhase(s.to_string()))
    }
}

/// Per-phase scalar-operation counters for one pass.
///
/// `elements` accumulates the node elements processed per timestep (the
/// per-layer `k`, summed over nodes and timesteps), so a pass over a single
/// node at one timestep has `elements == k`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub forward: u64,
    pub inverse: u64,
    pub grad_forward_graph: u64,
    pub grad_inverse_graph: u64,
    pub elements: u64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: Phase, count: u64) {
        *self.counter_mut(phase) += count;
    }

    /// Records against a phase given by name, as read from a report or flag.
    pub fn record_named(&mut self, phase: &str, count: u64) -> Result<()> {
        self.record(phase.parse()?, count);
        Ok(())
    }

    pub fn get(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Forward => self.forward,
            Phase::Inverse => self.inverse,
            Phase::GradForwardGraph => self.grad_forward_graph,
            Phase::GradInverseGraph => self.grad_inverse_graph,
        }
    }

    fn counter_mut(&mut self, phase: Phase) -> &mut u64 {
        match phase {
            Phase::Forward => &mut self.forward,
            Phase::Inverse => &mut self.inverse,
            Phase::GradForwardGraph => &mut self.grad_forward_graph,
            Phase::GradInverseGraph => &mut self.grad_inverse_graph,
        }
    }

    pub fn total(&self) -> u64 {
        Phase::ALL.iter().map(|&p| self.get(p)).sum()
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        for p in Phase::ALL {
            self.record(p, other.get(p));
        }
        self.elements += other.elements;
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Per-element constants of the analytical cost model, and their totals for
/// the three backward schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalCosts {
    pub forward: f64,
    pub inverse: f64,
    pub grad_fwd: f64,
    pub grad_inv: f64,
    pub stored_backward: f64,
    pub recompute_backward: f64,
    pub inverse_graph_backward: f64,
}

impl TheoreticalCosts {
    pub const PER_ELEMENT: TheoreticalCosts = TheoreticalCosts {
        forward: 12.0,
        inverse: 17.0,
        grad_fwd: 15.5,
        grad_inv: 8.5,
        stored_backward: 15.5,
        recompute_backward: 44.5,
        inverse_graph_backward: 25.5,
    };

    /// Recompute total is inverse + forward + forward-graph gradient, and
    /// the inverse-graph total is inverse + inverse-graph gradient.
    pub fn identities_hold(&self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        close(self.recompute_backward, self.inverse + self.forward + self.grad_fwd)
            && close(self.inverse_graph_backward, self.inverse + self.grad_inv)
            && close(self.stored_backward, self.grad_fwd)
    }

    /// Fractional backward saving of the inverse graph over recompute.
    pub fn backward_reduction(&self) -> f64 {
        1.0 - self.inverse_graph_backward / self.recompute_backward
    }

    /// Same saving when each schedule also pays one forward pass.
    pub fn total_reduction(&self) -> f64 {
        1.0 - (self.forward + self.inverse_graph_backward) / (self.forward + self.recompute_backward)
    }
}

/// The per-element cost table scaled by `k` elements.
pub fn theoretical_costs(k: u64) -> Result<TheoreticalCosts> {
    if k == 0 {
        return Err(Error::InvalidConfig("element count k must be positive".into()));
    }
    let k = k as f64;
    let c = TheoreticalCosts::PER_ELEMENT;
    Ok(TheoreticalCosts {
        forward: c.forward * k,
        inverse: c.inverse * k,
        grad_fwd: c.grad_fwd * k,
        grad_inv: c.grad_inv * k,
        stored_backward: c.stored_backward * k,
        recompute_backward: c.recompute_backward * k,
        inverse_graph_backward: c.inverse_graph_backward * k,
    })
}

/// Retained elements of one spiking node, split by role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCensus {
    /// Index of the node's layer in its network.
    pub layer: usize,
    /// Node elements per timestep.
    pub k: u64,
    pub per_step_x: u64,
    pub per_step_m: u64,
    pub per_step_v: u64,
    pub final_v: u64,
}

impl NodeCensus {
    pub fn per_step_total(&self) -> u64 {
        self.per_step_x + self.per_step_m + self.per_step_v
    }

    pub fn total(&self) -> u64 {
        self.per_step_total() + self.final_v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    pub mode: CacheMode,
    pub timesteps: usize,
    pub nodes: Vec<NodeCensus>,
}

impl MemoryLedger {
    pub fn total(&self) -> u64 {
        self.nodes.iter().map(NodeCensus::total).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    /// `None` for the whole-network total.
    pub layer: Option<usize>,
    pub stored: u64,
    pub reversible: u64,
    pub ratio: f64,
}

/// Stored-over-reversible element ratios per node plus a total row.
pub fn reduction_report(stored: &MemoryLedger, reversible: &MemoryLedger) -> Result<Vec<ReductionRow>> {
    if stored.timesteps != reversible.timesteps {
        return Err(Error::ModelMismatch(format!(
            "timesteps {} vs {}",
            stored.timesteps, reversible.timesteps
        )));
    }
    if stored.nodes.len() != reversible.nodes.len() {
        return Err(Error::ModelMismatch(format!(
            "{} nodes vs {}",
            stored.nodes.len(),
            reversible.nodes.len()
        )));
    }
    let ratio = |s: u64, r: u64| if r == 0 { f64::INFINITY } else { s as f64 / r as f64 };
    let mut rows = Vec::with_capacity(stored.nodes.len() + 1);
    for (s, r) in stored.nodes.iter().zip(&reversible.nodes) {
        if s.layer != r.layer || s.k != r.k {
            return Err(Error::ModelMismatch(format!(
                "node at layer {} (k={}) vs layer {} (k={})",
                s.layer, s.k, r.layer, r.k
            )));
        }
        rows.push(ReductionRow {
            layer: Some(s.layer),
            stored: s.total(),
            reversible: r.total(),
            ratio: ratio(s.total(), r.total()),
        });
    }
    rows.push(ReductionRow {
        layer: None,
        stored: stored.total(),
        reversible: reversible.total(),
        ratio: ratio(stored.total(), reversible.total()),
    });
    Ok(rows)
}
