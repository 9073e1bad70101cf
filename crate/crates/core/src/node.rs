//! The reversible spiking node.
//!
//! State `(X, V)` is split along the last axis into `n` groups. Group `i`
//! integrates a drive (`X_1` for the first group, the previous group's output
//! `Y_{i-1}` otherwise), fires through the Heaviside step, and adds a coupling
//! term `beta * X_{(i mod n) + 1}`:
//!
//! ```text
//! M_i  = V_i + (D_i - V_i) / tau
//! Y_i  = H(M_i - V_th) + beta * X_{(i mod n)+1}
//! V_i' = (1 - Y_i) * M_i + Y_i * V_res + alpha * V_i
//! ```
//!
//! Because every group's drive is known once the outputs are known, the step
//! can be undone exactly: group `n` gives back `X_1`, after which groups
//! `1..n-1` give back `X_2..X_n`. Each `V_i` is solved from the last line,
//! which is linear in `V_i` with coefficient `(1 - Y_i)(1 - 1/tau) + alpha`.

use serde::{Deserialize, Serialize};

use crate::dd::{self, DdTensor};
use crate::error::{Error, Result};
use crate::lif::{SpikeFn, DEFAULT_THETA};
use crate::ledger::OpCount;
use crate::tensor::Tensor;

/// Inverse denominators below this magnitude are rejected.
pub const SINGULAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v_th: f64,
    pub v_res: f64,
    pub theta: f64,
    pub groups: usize,
}

impl Default for NodeParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            alpha: 0.1,
            beta: 1.0,
            v_th: 1.0,
            v_res: 0.0,
            theta: DEFAULT_THETA,
            groups: 2,
        }
    }
}

impl NodeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.beta == 0.0 || !self.beta.is_finite() {
            return bad(format!("beta must be nonzero and finite, got {}", self.beta));
        }
        if self.tau == 0.0 || !self.tau.is_finite() {
            return bad(format!("tau must be nonzero and finite, got {}", self.tau));
        }
        if !(self.theta > 0.0) {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if self.groups < 2 {
            return bad(format!("a reversible node needs at least 2 groups, got {}", self.groups));
        }
        Ok(())
    }

    pub fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    /// Index of the input group coupled into group `i`'s output.
    #[inline]
    fn partner(&self, i: usize) -> usize {
        (i + 1) % self.groups
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStepInput {
    pub x: Tensor,
    pub v_prev: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStepOutput {
    pub y: Tensor,
    pub v: Tensor,
    pub m: Option<Tensor>,
}

/// Whether a sequence keeps per-timestep activations or only its final potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Stored,
    Reversible,
}

/// Per-group quantities of one step, in group order. Membranes are kept
/// rounded to `f64`; they only feed the gradient.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GroupStep {
    pub y: Vec<Tensor>,
    /// `(H + beta X) - Y`, the rounding left out of each output.
    pub r: Vec<Tensor>,
    pub v: Vec<DdTensor>,
    pub m: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GroupInverse {
    pub x: Vec<Tensor>,
    pub v_prev: Vec<DdTensor>,
    pub m: Vec<Tensor>,
}

fn check_pair(a: &Tensor, b: &Tensor, groups: usize) -> Result<()> {
    check_shapes(a.shape(), b.shape(), groups)
}

fn check_shapes(a: &[usize], b: &[usize], groups: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    let extent = a.last().copied().unwrap_or(0);
    if extent % groups != 0 {
        return Err(Error::NotDivisible { extent, groups });
    }
    Ok(())
}

fn tensor_from(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data).expect("shape product matches")
}

/// `M = V + (D - V) / tau`: three operations.
fn membrane(v: &DdTensor, drive: &Tensor, p: &NodeParams, ops: &mut OpCount) -> DdTensor {
    ops.charge(3, v.len());
    let c = 1.0 / p.tau;
    let d = drive.data();
    DdTensor::from_fn(v.shape(), |i| {
        let vi = v.get(i);
        dd::add(vi, dd::mul_f(dd::add_f(dd::neg(vi), d[i]), c))
    })
}

/// `(1 - Y) * M + Y * V_res + alpha * V`: six operations.
fn potential(y: &Tensor, m: &DdTensor, v: &DdTensor, p: &NodeParams, ops: &mut OpCount) -> DdTensor {
    ops.charge(6, y.len());
    let y = y.data();
    DdTensor::from_fn(m.shape(), |i| {
        let held = dd::mul(dd::two_sum(1.0, -y[i]), m.get(i));
        let reset = dd::two_prod(y[i], p.v_res);
        dd::add(dd::add(held, reset), dd::mul_f(v.get(i), p.alpha))
    })
}

#[inline]
fn fire(m: dd::Dd, p: &NodeParams, spike: SpikeFn) -> f64 {
    spike.eval(dd::to_f64(dd::add_f(m, -p.v_th)), p.theta)
}

/// `H(M - V_th) + beta * X_c`: three operations. Returns the rounded
/// output and its residual.
fn output(m: &DdTensor, coupled: &Tensor, p: &NodeParams, spike: SpikeFn, ops: &mut OpCount) -> (Tensor, Tensor) {
    ops.charge(3, m.len());
    let c = coupled.data();
    let y = DdTensor::from_fn(m.shape(), |i| dd::add_f(dd::two_prod(p.beta, c[i]), fire(m.get(i), p, spike)));
    (y.hi, y.lo)
}

/// Solves `V' = (1 - Y)(V + (D - V)/tau) + Y V_res + alpha V` for `V`:
/// eight operations.
fn solve_potential(
    v_new: &DdTensor,
    y: &Tensor,
    drive: &Tensor,
    p: &NodeParams,
    ops: &mut OpCount,
    locate: impl Fn(usize) -> usize,
) -> Result<DdTensor> {
    ops.charge(8, y.len());
    let c = 1.0 / p.tau;
    let leak = dd::two_sum(1.0, -c);
    let (y, d) = (y.data(), drive.data());
    let mut singular = None;
    let v = DdTensor::from_fn(v_new.shape(), |i| {
        let keep = dd::two_sum(1.0, -y[i]);
        let den = dd::add_f(dd::mul(keep, leak), p.alpha);
        if singular.is_none() && !(den.0.abs() >= SINGULAR_EPS) {
            singular = Some((i, dd::to_f64(den)));
        }
        let driven = dd::mul_f(dd::mul_f(keep, d[i]), c);
        let num = dd::sub(dd::sub(v_new.get(i), driven), dd::two_prod(y[i], p.v_res));
        dd::div(num, den)
    });
    match singular {
        Some((i, value)) => Err(Error::SingularDenominator { index: locate(i), value }),
        None => Ok(v),
    }
}

/// `(Y - H(M - V_th)) / beta`: three operations. With the output residual
/// the coupled input comes back exactly.
fn solve_coupled(y: &Tensor, r: Option<&Tensor>, m: &DdTensor, p: &NodeParams, spike: SpikeFn, ops: &mut OpCount) -> Tensor {
    ops.charge(3, y.len());
    let yd = y.data();
    let rd = r.map(Tensor::data);
    tensor_from(
        y.shape(),
        (0..y.len())
            .map(|i| {
                let yi = (yd[i], rd.map_or(0.0, |r| r[i]));
                let c = dd::add_f(yi, -fire(m.get(i), p, spike));
                dd::to_f64(dd::div(c, (p.beta, 0.0)))
            })
            .collect(),
    )
}

/// Maps an index inside group `g` (of width `w`, full extent `extent`) to the full tensor.
fn group_locator(g: usize, w: usize, extent: usize) -> impl Fn(usize) -> usize {
    move |i| (i / w) * extent + g * w + i % w
}

pub(crate) fn forward_groups(
    x: &[Tensor],
    v: &[DdTensor],
    p: &NodeParams,
    spike: SpikeFn,
    ops: &mut OpCount,
) -> GroupStep {
    let n = p.groups;
    let mut y: Vec<Tensor> = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut v_new = Vec::with_capacity(n);
    let mut m_all = Vec::with_capacity(n);
    for i in 0..n {
        let drive = if i == 0 { &x[0] } else { &y[i - 1] };
        let m = membrane(&v[i], drive, p, ops);
        let (yi, ri) = output(&m, &x[p.partner(i)], p, spike, ops);
        v_new.push(potential(&yi, &m, &v[i], p, ops));
        y.push(yi);
        r.push(ri);
        m_all.push(m.hi);
    }
    GroupStep { y, r, v: v_new, m: m_all }
}

pub(crate) fn inverse_groups(
    y: &[Tensor],
    r: Option<&[Tensor]>,
    v_new: &[DdTensor],
    p: &NodeParams,
    spike: SpikeFn,
    ops: &mut OpCount,
) -> Result<GroupInverse> {
    let n = p.groups;
    let w = y[0].last_extent();
    let extent = w * n;
    let mut x: Vec<Option<Tensor>> = vec![None; n];
    let mut v_prev: Vec<Option<DdTensor>> = vec![None; n];
    let mut m_all: Vec<Option<Tensor>> = vec![None; n];

    // The last group is driven by the known Y_{n-1}; it returns X_1.
    let order = std::iter::once(n - 1).chain(0..n - 1);
    for i in order {
        let drive = if i == 0 {
            x[0].as_ref().expect("X_1 recovered first")
        } else {
            &y[i - 1]
        };
        let vi = solve_potential(&v_new[i], &y[i], drive, p, ops, group_locator(i, w, extent))?;
        let m = membrane(&vi, drive, p, ops);
        x[p.partner(i)] = Some(solve_coupled(&y[i], r.map(|r| &r[i]), &m, p, spike, ops));
        v_prev[i] = Some(vi);
        m_all[i] = Some(m.hi);
    }
    fn unwrap<T>(v: Vec<Option<T>>) -> Vec<T> {
        v.into_iter().map(|t| t.expect("every group solved")).collect()
    }
    Ok(GroupInverse {
        x: unwrap(x),
        v_prev: unwrap(v_prev),
        m: unwrap(m_all),
    })
}

/// Two-half forward written out literally for the `groups == 2` case.
fn forward_halves(x: &[Tensor], v: &[DdTensor], p: &NodeParams, ops: &mut OpCount) -> GroupStep {
    let (x1, x2) = (&x[0], &x[1]);
    let (v1, v2) = (&v[0], &v[1]);
    let m1 = membrane(v1, x1, p, ops);
    let (y1, r1) = output(&m1, x2, p, SpikeFn::Hard, ops);
    let v1n = potential(&y1, &m1, v1, p, ops);
    let m2 = membrane(v2, &y1, p, ops);
    let (y2, r2) = output(&m2, x1, p, SpikeFn::Hard, ops);
    let v2n = potential(&y2, &m2, v2, p, ops);
    GroupStep {
        y: vec![y1, y2],
        r: vec![r1, r2],
        v: vec![v1n, v2n],
        m: vec![m1.hi, m2.hi],
    }
}

/// Two-half inverse in the order V_2, X_1, V_1, X_2.
fn inverse_halves(y: &[Tensor], r: Option<&[Tensor]>, v_new: &[DdTensor], p: &NodeParams, ops: &mut OpCount) -> Result<GroupInverse> {
    let (y1, y2) = (&y[0], &y[1]);
    let (r1, r2) = (r.map(|r| &r[0]), r.map(|r| &r[1]));
    let w = y1.last_extent();
    let v2 = solve_potential(&v_new[1], y2, y1, p, ops, group_locator(1, w, 2 * w))?;
    let m2 = membrane(&v2, y1, p, ops);
    let x1 = solve_coupled(y2, r2, &m2, p, SpikeFn::Hard, ops);
    let v1 = solve_potential(&v_new[0], y1, &x1, p, ops, group_locator(0, w, 2 * w))?;
    let m1 = membrane(&v1, &x1, p, ops);
    let x2 = solve_coupled(y1, r1, &m1, p, SpikeFn::Hard, ops);
    Ok(GroupInverse {
        x: vec![x1, x2],
        v_prev: vec![v1, v2],
        m: vec![m1.hi, m2.hi],
    })
}

fn join(parts: &[Tensor]) -> Tensor {
    Tensor::concat_last(parts).expect("groups share leading extents")
}

fn join_dd(parts: &[DdTensor]) -> DdTensor {
    DdTensor::concat_last(parts).expect("groups share leading extents")
}

fn split_dd(t: &Tensor, n: usize) -> Result<Vec<DdTensor>> {
    DdTensor::from_tensor(t.clone()).split_last(n)
}

/// Forward step of the reversible node. With two groups this is the
/// literal half-split form; otherwise it defers to [`grouped_step_forward`].
pub fn rev_step_forward(input: &NodeStepInput, params: &NodeParams) -> Result<NodeStepOutput> {
    params.validate()?;
    if params.groups != 2 {
        return grouped_step_forward(input, params);
    }
    check_pair(&input.x, &input.v_prev, 2)?;
    let mut ops = OpCount::default();
    let s = forward_halves(&input.x.split_last(2)?, &split_dd(&input.v_prev, 2)?, params, &mut ops);
    Ok(NodeStepOutput {
        y: join(&s.y),
        v: join_dd(&s.v).to_tensor(),
        m: None,
    })
}

/// Exact inverse of [`rev_step_forward`]; `output.m` is ignored.
pub fn rev_step_inverse(output: &NodeStepOutput, params: &NodeParams) -> Result<NodeStepInput> {
    params.validate()?;
    if params.groups != 2 {
        return grouped_step_inverse(output, params);
    }
    check_pair(&output.y, &output.v, 2)?;
    let mut ops = OpCount::default();
    let r = inverse_halves(&output.y.split_last(2)?, None, &split_dd(&output.v, 2)?, params, &mut ops)?;
    Ok(NodeStepInput {
        x: join(&r.x),
        v_prev: join_dd(&r.v_prev).to_tensor(),
    })
}

pub fn grouped_step_forward(input: &NodeStepInput, params: &NodeParams) -> Result<NodeStepOutput> {
    params.validate()?;
    check_pair(&input.x, &input.v_prev, params.groups)?;
    let mut ops = OpCount::default();
    let s = forward_groups(
        &input.x.split_last(params.groups)?,
        &split_dd(&input.v_prev, params.groups)?,
        params,
        SpikeFn::Hard,
        &mut ops,
    );
    Ok(NodeStepOutput {
        y: join(&s.y),
        v: join_dd(&s.v).to_tensor(),
        m: None,
    })
}

pub fn grouped_step_inverse(output: &NodeStepOutput, params: &NodeParams) -> Result<NodeStepInput> {
    params.validate()?;
    check_pair(&output.y, &output.v, params.groups)?;
    let mut ops = OpCount::default();
    let r = inverse_groups(
        &output.y.split_last(params.groups)?,
        None,
        &split_dd(&output.v, params.groups)?,
        params,
        SpikeFn::Hard,
        &mut ops,
    )?;
    Ok(NodeStepInput {
        x: join(&r.x),
        v_prev: join_dd(&r.v_prev).to_tensor(),
    })
}

/// Activations a stored-mode node keeps for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredStep {
    pub x: Tensor,
    /// Membranes, one tensor per group.
    pub m: Vec<Tensor>,
    pub v_prev: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeCache {
    Stored { steps: Vec<StoredStep> },
    /// Final potentials, carried as double-double values so that the
    /// contracting update stays invertible.
    Reversible { v_final: DdTensor },
}

impl NodeCache {
    pub fn mode(&self) -> CacheMode {
        match self {
            NodeCache::Stored { .. } => CacheMode::Stored,
            NodeCache::Reversible { .. } => CacheMode::Reversible,
        }
    }

    pub fn retained_tensors(&self) -> usize {
        match self {
            NodeCache::Stored { steps } => steps.iter().map(|s| 2 + s.m.len()).sum(),
            NodeCache::Reversible { .. } => 1,
        }
    }

    pub fn retained_elements(&self) -> usize {
        match self {
            NodeCache::Stored { steps } => steps
                .iter()
                .map(|s| s.x.len() + s.v_prev.len() + s.m.iter().map(Tensor::len).sum::<usize>())
                .sum(),
            NodeCache::Reversible { v_final } => v_final.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    pub y_seq: Vec<Tensor>,
    /// Per-step output residuals (see [`sequence_inverse_compensated`]),
    /// emitted in reversible mode only. Whoever keeps `y_seq` for the
    /// inverse keeps these beside it.
    pub y_residual: Vec<Tensor>,
    pub v_final: DdTensor,
    pub cache: NodeCache,
}

/// Runs the node over `x_seq` starting from potentials `v0`.
pub fn sequence_forward(x_seq: &[Tensor], v0: &Tensor, params: &NodeParams, mode: CacheMode) -> Result<SequenceOutput> {
    let mut ops = OpCount::default();
    sequence_forward_with(x_seq.to_vec(), v0, params, mode, SpikeFn::Hard, &mut ops)
}

pub(crate) fn sequence_forward_with(
    x_seq: Vec<Tensor>,
    v0: &Tensor,
    params: &NodeParams,
    mode: CacheMode,
    spike: SpikeFn,
    ops: &mut OpCount,
) -> Result<SequenceOutput> {
    params.validate()?;
    if x_seq.is_empty() {
        return Err(Error::InvalidConfig("a sequence needs at least one timestep".into()));
    }
    let n = params.groups;
    let mut v = split_dd(v0, n)?;
    let mut y_seq = Vec::with_capacity(x_seq.len());
    let mut y_residual = Vec::with_capacity(x_seq.len());
    let mut steps = Vec::new();
    for x in x_seq {
        check_pair(&x, v0, n)?;
        let s = forward_groups(&x.split_last(n)?, &v, params, spike, ops);
        y_seq.push(join(&s.y));
        let v_prev = std::mem::replace(&mut v, s.v);
        match mode {
            CacheMode::Reversible => y_residual.push(join(&s.r)),
            CacheMode::Stored => steps.push(StoredStep {
                x,
                m: s.m,
                v_prev: join(&v_prev.into_iter().map(|v| v.hi).collect::<Vec<_>>()),
            }),
        }
    }
    let v_final = join_dd(&v);
    let cache = match mode {
        CacheMode::Stored => NodeCache::Stored { steps },
        CacheMode::Reversible => NodeCache::Reversible {
            v_final: v_final.clone(),
        },
    };
    Ok(SequenceOutput {
        y_seq,
        y_residual,
        v_final,
        cache,
    })
}

/// Undoes [`sequence_forward`], returning `(x_seq, v0)`.
///
/// Without the output residuals each recovered input carries the rounding
/// of its coupling sum (about one ulp of `Y`); the potentials then inherit
/// that error, amplified by the contraction of the leaky update.
pub fn sequence_inverse(y_seq: &[Tensor], v_final: &DdTensor, params: &NodeParams) -> Result<(Vec<Tensor>, Tensor)> {
    let mut ops = OpCount::default();
    let (x_seq, v0) = sequence_inverse_with(y_seq, None, v_final, params, SpikeFn::Hard, &mut ops)?;
    Ok((x_seq, v0.to_tensor()))
}

/// [`sequence_inverse`] given the residuals the forward pass emitted with
/// `y_seq`. The recovery is then exact to double-double precision.
pub fn sequence_inverse_compensated(
    y_seq: &[Tensor],
    y_residual: &[Tensor],
    v_final: &DdTensor,
    params: &NodeParams,
) -> Result<(Vec<Tensor>, Tensor)> {
    let mut ops = OpCount::default();
    let (x_seq, v0) = sequence_inverse_with(y_seq, Some(y_residual), v_final, params, SpikeFn::Hard, &mut ops)?;
    Ok((x_seq, v0.to_tensor()))
}

pub(crate) fn sequence_inverse_with(
    y_seq: &[Tensor],
    y_residual: Option<&[Tensor]>,
    v_final: &DdTensor,
    params: &NodeParams,
    spike: SpikeFn,
    ops: &mut OpCount,
) -> Result<(Vec<Tensor>, DdTensor)> {
    params.validate()?;
    if y_seq.is_empty() {
        return Err(Error::InvalidConfig("a sequence needs at least one timestep".into()));
    }
    if y_residual.is_some_and(|r| r.len() != y_seq.len()) {
        return Err(Error::MissingCache);
    }
    let n = params.groups;
    let mut v = v_final.split_last(n)?;
    let mut x_seq = vec![None; y_seq.len()];
    for (t, y) in y_seq.iter().enumerate().rev() {
        check_shapes(y.shape(), v_final.shape(), n)?;
        let r = match y_residual {
            Some(res) => {
                check_pair(y, &res[t], n)?;
                Some(res[t].split_last(n)?)
            }
            None => None,
        };
        let inv = inverse_groups(&y.split_last(n)?, r.as_deref(), &v, params, spike, ops)?;
        x_seq[t] = Some(join(&inv.x));
        v = inv.v_prev;
    }
    Ok((x_seq.into_iter().map(Option::unwrap).collect(), join_dd(&v)))
}

/// Rebuilds the per-group membranes of a step from its inputs and outputs.
pub fn rebuild_membranes(x: &Tensor, v_prev: &Tensor, y: &Tensor, params: &NodeParams) -> Result<Vec<Tensor>> {
    params.validate()?;
    check_pair(x, v_prev, params.groups)?;
    check_pair(x, y, params.groups)?;
    let n = params.groups;
    let (x, v, y) = (x.split_last(n)?, split_dd(v_prev, n)?, y.split_last(n)?);
    let mut ops = OpCount::default();
    Ok((0..n)
        .map(|i| {
            let drive = if i == 0 { &x[0] } else { &y[i - 1] };
            membrane(&v[i], drive, params, &mut ops).to_tensor()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Seed;

    fn example_params() -> NodeParams {
        NodeParams {
            tau: 2.0,
            alpha: 0.2,
            beta: 1.0,
            v_th: 1.0,
            v_res: 0.0,
            theta: 2.0,
            groups: 2,
        }
    }

    fn row(data: &[f64]) -> Tensor {
        Tensor::from_vec(vec![1, data.len()], data.to_vec()).unwrap()
    }

    fn assert_close(a: &Tensor, b: &[f64], tol: f64) {
        for (x, y) in a.data().iter().zip(b) {
            assert!((x - y).abs() <= tol, "{:?} vs {:?}", a.data(), b);
        }
    }

    /// Direct scalar transcription of the two-half equations.
    fn scalar_oracle(x: [f64; 2], v: [f64; 2], p: &NodeParams) -> ([f64; 2], [f64; 2]) {
        let h = |m: f64| if m - p.v_th >= 0.0 { 1.0 } else { 0.0 };
        let m1 = v[0] + (x[0] - v[0]) / p.tau;
        let y1 = h(m1) + p.beta * x[1];
        let v1 = (1.0 - y1) * m1 + y1 * p.v_res + p.alpha * v[0];
        let m2 = v[1] + (y1 - v[1]) / p.tau;
        let y2 = h(m2) + p.beta * x[0];
        let v2 = (1.0 - y2) * m2 + y2 * p.v_res + p.alpha * v[1];
        ([y1, y2], [v1, v2])
    }

    #[test]
    fn forward_examples() {
        let p = example_params();
        let out = rev_step_forward(
            &NodeStepInput { x: row(&[0.8, 0.4]), v_prev: row(&[0.0, 0.0]) },
            &p,
        )
        .unwrap();
        assert_close(&out.y, &[0.4, 0.8], 1e-15);
        assert_close(&out.v, &[0.24, 0.04], 1e-15);

        let out = rev_step_forward(
            &NodeStepInput { x: row(&[2.4, 0.0]), v_prev: row(&[0.0, 0.0]) },
            &p,
        )
        .unwrap();
        assert_close(&out.y, &[1.0, 2.4], 1e-15);
        assert_close(&out.v, &[0.0, -0.7], 1e-15);

        let out = rev_step_forward(
            &NodeStepInput { x: row(&[0.0, 0.0]), v_prev: row(&[0.0, 0.0]) },
            &p,
        )
        .unwrap();
        assert_eq!(out.y.data(), &[0.0, 0.0]);
        assert_eq!(out.v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let p = example_params();
        let x = Tensor::random_uniform(&[50, 2], -2.0, 2.0, Seed(1)).unwrap();
        let v = Tensor::random_uniform(&[50, 2], -2.0, 2.0, Seed(2)).unwrap();
        let out = rev_step_forward(&NodeStepInput { x: x.clone(), v_prev: v.clone() }, &p).unwrap();
        for r in 0..50 {
            let xr = [x.data()[2 * r], x.data()[2 * r + 1]];
            let vr = [v.data()[2 * r], v.data()[2 * r + 1]];
            let (y, vn) = scalar_oracle(xr, vr, &p);
            // the kernel carries extra precision, so allow a few ulps
            assert_close(&row(&out.y.data()[2 * r..2 * r + 2]), &y, 1e-14);
            assert_close(&row(&out.v.data()[2 * r..2 * r + 2]), &vn, 1e-14);
        }
    }

    #[test]
    fn inverse_examples() {
        let p = example_params();
        let back = rev_step_inverse(
            &NodeStepOutput { y: row(&[0.4, 0.8]), v: row(&[0.24, 0.04]), m: None },
            &p,
        )
        .unwrap();
        assert_close(&back.x, &[0.8, 0.4], 1e-12);
        assert_close(&back.v_prev, &[0.0, 0.0], 1e-12);

        let singular = NodeParams { alpha: 0.0, tau: 1.0, ..p };
        let err = rev_step_inverse(
            &NodeStepOutput { y: row(&[0.3, 1.0]), v: row(&[0.0, 0.0]), m: None },
            &singular,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularDenominator { index: 1, .. }), "{err:?}");
    }

    #[test]
    fn odd_extent_is_rejected() {
        let p = NodeParams::default();
        let err = rev_step_forward(
            &NodeStepInput { x: row(&[1.0, 2.0, 3.0]), v_prev: row(&[0.0; 3]) },
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotDivisible { extent: 3, groups: 2 }));
        let bad = NodeParams { beta: 0.0, ..p };
        assert!(matches!(
            rev_step_forward(&NodeStepInput { x: row(&[1.0, 2.0]), v_prev: row(&[0.0; 2]) }, &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    fn random_input(shape: &[usize], seed: u64) -> NodeStepInput {
        NodeStepInput {
            x: Tensor::random_uniform(shape, -2.0, 2.0, Seed(seed)).unwrap(),
            v_prev: Tensor::random_uniform(shape, -2.0, 2.0, Seed(seed).derive(1)).unwrap(),
        }
    }

    #[test]
    fn step_roundtrips() {
        for seed in 0..1000 {
            let input = random_input(&[2, 16], seed);
            let p = NodeParams::default();
            let out = rev_step_forward(&input, &p).unwrap();
            let back = rev_step_inverse(&out, &p).unwrap();
            assert!(back.x.approx_equal(&input.x, 1e-6, 1e-10).unwrap(), "seed {seed}");
            assert!(back.v_prev.approx_equal(&input.v_prev, 1e-6, 1e-10).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn grouped_reduces_to_halves_bit_exactly() {
        let p = NodeParams::default();
        for seed in 0..50 {
            let input = random_input(&[3, 8], seed);
            let mut a = OpCount::default();
            let mut b = OpCount::default();
            let x = input.x.split_last(2).unwrap();
            let v = split_dd(&input.v_prev, 2).unwrap();
            let halves = forward_halves(&x, &v, &p, &mut a);
            let grouped = forward_groups(&x, &v, &p, SpikeFn::Hard, &mut b);
            assert_eq!(halves, grouped);
            assert_eq!(a, b);
            let inv_h = inverse_halves(&halves.y, Some(&halves.r), &halves.v, &p, &mut a).unwrap();
            let inv_g = inverse_groups(&grouped.y, Some(&grouped.r), &grouped.v, &p, SpikeFn::Hard, &mut b).unwrap();
            assert_eq!(inv_h, inv_g);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn grouped_roundtrips() {
        for (groups, width) in [(4, 16), (8, 16), (16, 16), (3, 12), (12, 12)] {
            let p = NodeParams::default().with_groups(groups);
            for seed in 0..50 {
                let input = random_input(&[2, width], seed);
                let out = grouped_step_forward(&input, &p).unwrap();
                let back = grouped_step_inverse(&out, &p).unwrap();
                assert!(back.x.approx_equal(&input.x, 1e-6, 1e-10).unwrap());
                assert!(back.v_prev.approx_equal(&input.v_prev, 1e-6, 1e-10).unwrap());
            }
        }
    }

    #[test]
    fn forward_counts_twelve_ops_per_element() {
        for groups in [2, 4, 8] {
            let p = NodeParams::default().with_groups(groups);
            let input = random_input(&[1, 64], 3);
            let mut ops = OpCount::default();
            forward_groups(
                &input.x.split_last(groups).unwrap(),
                &split_dd(&input.v_prev, groups).unwrap(),
                &p,
                SpikeFn::Hard,
                &mut ops,
            );
            assert_eq!(ops.total(), 12 * 64);
        }
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let p = NodeParams::default();
        let zeros = vec![Tensor::zeros(&[2, 8]); 5];
        let out = sequence_forward(&zeros, &Tensor::zeros(&[2, 8]), &p, CacheMode::Reversible).unwrap();
        assert!(out.y_seq.iter().all(|y| y.data().iter().all(|&v| v == 0.0)));
        assert!(out.v_final.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_modes_and_cache_sizes() {
        let p = NodeParams::default();
        let v0 = Tensor::zeros(&[2, 8]);
        let xs: Vec<Tensor> = (0..3)
            .map(|t| Tensor::random_uniform(&[2, 8], -2.0, 2.0, Seed(t)).unwrap())
            .collect();
        let stored = sequence_forward(&xs[..1], &v0, &p, CacheMode::Stored).unwrap();
        let rev = sequence_forward(&xs[..1], &v0, &p, CacheMode::Reversible).unwrap();
        assert_eq!(stored.y_seq, rev.y_seq);
        assert_eq!(stored.v_final, rev.v_final);

        let stored = sequence_forward(&xs, &v0, &p, CacheMode::Stored).unwrap();
        let rev = sequence_forward(&xs, &v0, &p, CacheMode::Reversible).unwrap();
        assert_eq!(rev.cache.retained_tensors(), 1);
        assert_eq!(rev.cache.retained_elements(), 16);
        // x, v_prev and one membrane per group, per timestep
        assert_eq!(stored.cache.retained_tensors(), 3 * (2 + p.groups));
        assert_eq!(stored.cache.retained_elements(), 3 * 3 * 16);
    }

    #[test]
    fn sequence_roundtrip() {
        let p = NodeParams::default();
        for (t_len, seed) in [(1usize, 0u64), (3, 1), (10, 2)] {
            let v0 = Tensor::random_uniform(&[1, 64], -2.0, 2.0, Seed(seed + 99)).unwrap();
            let xs: Vec<Tensor> = (0..t_len)
                .map(|t| Tensor::random_uniform(&[1, 64], -2.0, 2.0, Seed(seed).derive(t as u64)).unwrap())
                .collect();
            let out = sequence_forward(&xs, &v0, &p, CacheMode::Reversible).unwrap();
            let (back, v0_back) = sequence_inverse(&out.y_seq, &out.v_final, &p).unwrap();
            for (a, b) in back.iter().zip(&xs) {
                assert!(a.approx_equal(b, 1e-6, 1e-10).unwrap());
            }
            assert!(v0_back.approx_equal(&v0, 1e-6, 1e-10).unwrap());
        }
        assert!(sequence_inverse(&[], &DdTensor::zeros(&[1, 2]), &p).is_err());
    }

    #[test]
    fn rebuilt_membranes_match_stored() {
        let p = NodeParams::default().with_groups(4);
        let xs = vec![Tensor::random_uniform(&[2, 8], -2.0, 2.0, Seed(5)).unwrap()];
        let v0 = Tensor::random_uniform(&[2, 8], -1.0, 1.0, Seed(6)).unwrap();
        let out = sequence_forward(&xs, &v0, &p, CacheMode::Stored).unwrap();
        let NodeCache::Stored { steps } = &out.cache else { unreachable!() };
        let rebuilt = rebuild_membranes(&steps[0].x, &steps[0].v_prev, &out.y_seq[0], &p).unwrap();
        assert_eq!(rebuilt, steps[0].m);
    }
}
