//! Check suites and benchmarks shared by the command line and the tests.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward, backward_with_ledger, finite_difference_oracle, GradResult, Record, Strategy};
use crate::ledger::{theoretical_costs, FlopsLedger, MemoryLedger, Phase, TheoreticalCosts};
use crate::lif::{LifParams, SpikeFn};
use crate::net::{cross_entropy_loss, evaluate, train_epoch, Layer, Model, Network, NodeKind, Sgd, Topology, TrainConfig};
use crate::node::{grouped_step_forward, grouped_step_inverse, sequence_inverse_compensated, NodeCache, NodeParams, NodeStepInput, NodeStepOutput};
use crate::report::Report;
use crate::tensor::{Seed, Tensor};

/// Reduction in FLOPs quoted in prose for the inverse-graph schedule.
pub const STATED_FLOPS_REDUCTION: f64 = 0.23;

/// Element-wise comparison tally for `|a - b| <= atol + rtol |b|`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundtripOutcome {
    pub trials: usize,
    pub elements: u64,
    pub failures: u64,
    pub max_abs_err: f64,
    /// Largest `|a - b| / (atol + rtol |b|)`; at most 1 when every element passes.
    pub worst_margin: f64,
}

impl RoundtripOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// Folds one `actual` vs `reference` comparison into the tally.
    pub fn compare(&mut self, actual: &Tensor, reference: &Tensor, rtol: f64, atol: f64) -> Result<()> {
        if actual.shape() != reference.shape() {
            return Err(Error::ShapeMismatch {
                left: actual.shape().to_vec(),
                right: reference.shape().to_vec(),
            });
        }
        for (&a, &b) in actual.data().iter().zip(reference.data()) {
            let err = (a - b).abs();
            let margin = err / (atol + rtol * b.abs());
            self.elements += 1;
            if !(margin <= 1.0) {
                self.failures += 1;
            }
            self.max_abs_err = self.max_abs_err.max(err);
            self.worst_margin = if margin.is_nan() { f64::INFINITY } else { self.worst_margin.max(margin) };
        }
        Ok(())
    }

    fn merge(&mut self, other: &RoundtripOutcome) {
        self.trials += other.trials;
        self.elements += other.elements;
        self.failures += other.failures;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.worst_margin = self.worst_margin.max(other.worst_margin);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundtripConfig {
    pub layers: usize,
    pub timesteps: usize,
    pub dim: usize,
    pub groups: usize,
    pub trials: usize,
    pub batch: usize,
    pub seed: Seed,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for RoundtripConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            timesteps: 10,
            dim: 128,
            groups: 2,
            trials: 100,
            batch: 1,
            seed: Seed(0),
            rtol: 1e-6,
            atol: 1e-10,
        }
    }
}

impl RoundtripConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.timesteps == 0 || self.dim == 0 || self.trials == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig(
                "layers, timesteps, dim, trials and batch must be positive".into(),
            ));
        }
        NodeParams::default().with_groups(self.groups).validate()?;
        if self.dim % self.groups != 0 {
            return Err(Error::NotDivisible {
                extent: self.dim,
                groups: self.groups,
            });
        }
        Ok(())
    }
}

/// Node parameters drawn from the ranges the roundtrip suites cover.
pub fn random_node_params(groups: usize, rng: &mut impl Rng) -> NodeParams {
    NodeParams {
        tau: rng.random_range(1.5..4.0),
        alpha: rng.random_range(0.05..0.5),
        beta: rng.random_range(0.5..2.0),
        v_th: rng.random_range(0.5..1.5),
        v_res: rng.random_range(-0.5..0.5),
        groups,
        ..NodeParams::default()
    }
}

fn random_seq(t: usize, shape: &[usize], seed: Seed) -> Result<Vec<Tensor>> {
    (0..t)
        .map(|i| Tensor::random_uniform(shape, -2.0, 3.0, seed.derive(i as u64)))
        .collect()
}

/// Forward `layers` dense + node blocks, then invert every node from its
/// outputs (held as the next dense layer's cached inputs, or the network
/// output) and compare the recovered inputs and initial potentials.
#[allow(clippy::too_many_arguments)]
pub fn sequence_roundtrip_trial(
    layers: usize,
    timesteps: usize,
    dim: usize,
    batch: usize,
    params: NodeParams,
    seed: Seed,
    rtol: f64,
    atol: f64,
) -> Result<RoundtripOutcome> {
    let net = Network::block_stack(layers, dim, params, seed.derive(7))?;
    let xs = random_seq(timesteps, &[batch, dim], seed)?;
    let (out, tape) = net.forward(xs, timesteps, Strategy::C, SpikeFn::Hard, None)?;
    let mut result = RoundtripOutcome {
        trials: 1,
        ..Default::default()
    };
    let zeros = Tensor::zeros(&[batch, dim]);
    for (j, record) in tape.records.iter().enumerate() {
        let Record::Node(NodeCache::Reversible { v_final }) = record else {
            continue;
        };
        let (y, res) = match tape.records.get(j + 1) {
            Some(Record::Dense { inputs, residuals }) => (inputs, residuals),
            None => (&out, &tape.final_residual),
            _ => return Err(Error::MissingCache),
        };
        let res = res.as_ref().ok_or(Error::MissingCache)?;
        let (Some(Record::Dense { inputs, .. }), Some(Layer::Dense(d))) = (tape.records.get(j - 1), net.layers.get(j - 1)) else {
            return Err(Error::MissingCache);
        };
        let (x, v0) = sequence_inverse_compensated(y, res, v_final, &params)?;
        result.compare(&v0, &zeros, rtol, atol)?;
        for (a, input) in x.iter().zip(inputs) {
            result.compare(a, &d.forward(input)?, rtol, atol)?;
        }
    }
    Ok(result)
}

/// `trials` sequence roundtrips at a fixed shape, with node parameters
/// drawn per trial.
pub fn run_roundtrip(cfg: &RoundtripConfig) -> Result<(RoundtripOutcome, Report)> {
    cfg.validate()?;
    let mut rng = cfg.seed.rng();
    let mut total = RoundtripOutcome::default();
    let mut report = Report::new(
        "roundtrip",
        &["trial", "layers", "timesteps", "dim", "groups", "elements", "max_abs_err", "worst_margin", "pass"],
    );
    report.config("roundtrip", cfg);
    for trial in 0..cfg.trials {
        let p = random_node_params(cfg.groups, &mut rng);
        let o = sequence_roundtrip_trial(
            cfg.layers,
            cfg.timesteps,
            cfg.dim,
            cfg.batch,
            p,
            cfg.seed.derive(trial as u64 + 1),
            cfg.rtol,
            cfg.atol,
        )?;
        report.row(vec![
            json!(trial),
            json!(cfg.layers),
            json!(cfg.timesteps),
            json!(cfg.dim),
            json!(cfg.groups),
            json!(o.elements),
            json!(o.max_abs_err),
            json!(o.worst_margin),
            json!(o.passed()),
        ]);
        total.merge(&o);
    }
    report.verdict(
        "roundtrip",
        total.passed(),
        format!(
            "{} of {} elements outside atol {:e} + rtol {:e}; worst margin {:.3e}",
            total.failures, total.elements, cfg.atol, cfg.rtol, total.worst_margin
        ),
    );
    Ok((total, report))
}

const GROUP_CHOICES: [usize; 3] = [2, 4, 8];

/// Random single-step roundtrips: groups in {2, 4, 8}, width up to `max_dim`.
pub fn step_roundtrip_suite(trials: usize, max_dim: usize, seed: Seed, rtol: f64, atol: f64) -> Result<RoundtripOutcome> {
    let mut rng = seed.rng();
    let mut out = RoundtripOutcome::default();
    for trial in 0..trials {
        let groups = GROUP_CHOICES[rng.random_range(0..GROUP_CHOICES.len())];
        let dim = groups * rng.random_range(1..=(max_dim / groups).max(1));
        let batch = rng.random_range(1..=4);
        let p = random_node_params(groups, &mut rng);
        let s = seed.derive(trial as u64);
        let input = NodeStepInput {
            x: Tensor::random_uniform(&[batch, dim], -2.0, 3.0, s.derive(0))?,
            v_prev: Tensor::random_uniform(&[batch, dim], -1.0, 1.5, s.derive(1))?,
        };
        let fwd = grouped_step_forward(&input, &p)?;
        let back = grouped_step_inverse(
            &NodeStepOutput {
                y: fwd.y,
                v: fwd.v,
                m: None,
            },
            &p,
        )?;
        out.compare(&back.x, &input.x, rtol, atol)?;
        out.compare(&back.v_prev, &input.v_prev, rtol, atol)?;
        out.trials += 1;
    }
    Ok(out)
}

/// Random sequence roundtrips with `L <= max_layers`, `T <= max_timesteps`,
/// width `<= max_dim` and groups in {2, 4, 8}.
pub fn sequence_roundtrip_suite(
    trials: usize,
    max_layers: usize,
    max_timesteps: usize,
    max_dim: usize,
    seed: Seed,
    rtol: f64,
    atol: f64,
) -> Result<RoundtripOutcome> {
    let mut rng = seed.rng();
    let mut out = RoundtripOutcome::default();
    for trial in 0..trials {
        let groups = GROUP_CHOICES[rng.random_range(0..GROUP_CHOICES.len())];
        let dim = groups * rng.random_range(1..=(max_dim / groups).max(1));
        let layers = rng.random_range(1..=max_layers);
        let timesteps = rng.random_range(1..=max_timesteps);
        let p = random_node_params(groups, &mut rng);
        let o = sequence_roundtrip_trial(layers, timesteps, dim, 2, p, seed.derive(trial as u64), rtol, atol)?;
        out.merge(&o);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Schedules compared against the stored-activation reference.
    pub strategies: Vec<Strategy>,
    pub nets: usize,
    pub fd: bool,
    pub rtol: f64,
    pub fd_rtol: f64,
    pub fd_h: f64,
    pub seed: Seed,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::REVERSIBLE.to_vec(),
            nets: 20,
            fd: false,
            rtol: 1e-9,
            fd_rtol: 1e-4,
            fd_h: 1e-6,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    /// Largest relative error between any two schedules.
    pub max_strategy_err: f64,
    /// Largest relative error of any schedule against finite differences.
    pub max_fd_err: Option<f64>,
    pub nets: usize,
}

/// A small random classifier and batch for gradient checks.
pub fn random_check_model(seed: Seed) -> Result<(Model, Tensor, Vec<usize>)> {
    let mut rng = seed.rng();
    let groups = [2, 4][rng.random_range(0..2)];
    let depth = rng.random_range(1..=3);
    let widths = (0..depth).map(|_| groups * rng.random_range(1..=3)).collect();
    let classes = rng.random_range(2..=4);
    let topology = Topology {
        input_dim: rng.random_range(2..=5),
        widths,
        classes,
        timesteps: rng.random_range(1..=5),
        node: NodeKind::Reversible(random_node_params(groups, &mut rng)),
    };
    let batch = rng.random_range(1..=3);
    let model = Model::new(topology.clone(), seed.derive(1))?;
    let x = Tensor::random_uniform(&[batch, topology.input_dim], -1.0, 2.0, seed.derive(2))?;
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Ok((model, x, labels))
}

/// Gradients of the mean cross-entropy under one schedule.
pub fn model_gradients(model: &Model, x: &Tensor, labels: &[usize], strategy: Strategy, spike: SpikeFn) -> Result<GradResult> {
    let (logits, tape) = model.forward(x, strategy, spike, None)?;
    let (_, gl) = cross_entropy_loss(&logits, labels)?;
    model.backward(&tape, &gl, None)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<(GradcheckOutcome, Report)> {
    if cfg.nets == 0 || cfg.strategies.is_empty() {
        return Err(Error::InvalidConfig("gradcheck needs at least one net and one strategy".into()));
    }
    if let Some(s) = cfg.strategies.iter().find(|s| s.drives_lif()) {
        return Err(Error::StrategyMismatch {
            strategy: s.to_string(),
            layer: "reversible",
        });
    }
    let mut report = Report::new(
        "gradcheck",
        &["net", "depth", "timesteps", "groups", "strategy", "reference", "max_rel_err", "tolerance", "pass"],
    );
    report.config("gradcheck", cfg);
    let mut worst: f64 = 0.0;
    let mut worst_fd: Option<f64> = None;
    for net in 0..cfg.nets {
        let (model, x, labels) = random_check_model(cfg.seed.derive(net as u64))?;
        let groups = match model.topology.node {
            NodeKind::Reversible(p) => p.groups,
            NodeKind::Lif(_) => 0,
        };
        let row = |report: &mut Report, s: Strategy, reference: &str, err: f64, tol: f64| {
            report.row(vec![
                json!(net),
                json!(model.topology.widths.len()),
                json!(model.topology.timesteps),
                json!(groups),
                json!(s.name()),
                json!(reference),
                json!(err),
                json!(tol),
                json!(err <= tol),
            ]);
        };
        let reference = model_gradients(&model, &x, &labels, Strategy::A1, SpikeFn::Hard)?;
        let mut others = Vec::new();
        for &s in &cfg.strategies {
            let g = model_gradients(&model, &x, &labels, s, SpikeFn::Hard)?;
            let err = g.max_relative_error(&reference)?;
            worst = worst.max(err);
            row(&mut report, s, "a1", err, cfg.rtol);
            for (o, og) in &others {
                let err = g.max_relative_error(og)?;
                worst = worst.max(err);
                row(&mut report, s, Strategy::name(*o), err, cfg.rtol);
            }
            others.push((s, g));
        }
        if cfg.fd {
            let fd = finite_difference_oracle(&model, &x, &labels, cfg.fd_h)?;
            for &s in &cfg.strategies {
                let err = model_gradients(&model, &x, &labels, s, SpikeFn::Smooth)?.max_relative_error(&fd)?;
                worst_fd = Some(worst_fd.unwrap_or(0.0).max(err));
                row(&mut report, s, "fd", err, cfg.fd_rtol);
            }
        }
    }
    report.verdict(
        "strategy_equivalence",
        worst <= cfg.rtol,
        format!("max relative error {worst:.3e}, tolerance {:e}", cfg.rtol),
    );
    if let Some(e) = worst_fd {
        report.verdict(
            "finite_difference",
            e <= cfg.fd_rtol,
            format!("max relative error {e:.3e}, tolerance {:e}", cfg.fd_rtol),
        );
    }
    Ok((
        GradcheckOutcome {
            max_strategy_err: worst,
            max_fd_err: worst_fd,
            nets: cfg.nets,
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    Stored,
    Reversible,
    Both,
}

impl std::str::FromStr for MemoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stored" => Ok(MemoryMode::Stored),
            "reversible" => Ok(MemoryMode::Reversible),
            "both" => Ok(MemoryMode::Both),
            other => Err(Error::InvalidConfig(format!("unknown memory mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBenchConfig {
    /// Node widths, one per block.
    pub widths: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub mode: MemoryMode,
    pub batch: usize,
    pub groups: usize,
    pub seed: Seed,
}

impl Default for MemoryBenchConfig {
    fn default() -> Self {
        Self {
            widths: vec![256, 256],
            timesteps: (1..=20).collect(),
            mode: MemoryMode::Both,
            batch: 1,
            groups: 2,
            seed: Seed(0),
        }
    }
}

/// Measured node censuses per `T` for the stored and/or reversible schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBenchOutcome {
    pub timesteps: Vec<usize>,
    pub stored: Vec<MemoryLedger>,
    pub reversible: Vec<MemoryLedger>,
}

pub fn run_bench_memory(cfg: &MemoryBenchConfig) -> Result<(MemoryBenchOutcome, Report)> {
    if cfg.widths.is_empty() || cfg.timesteps.is_empty() || cfg.batch == 0 {
        return Err(Error::InvalidConfig("memory bench needs widths, timesteps and a positive batch".into()));
    }
    if cfg.timesteps.contains(&0) {
        return Err(Error::InvalidConfig("timesteps must be positive".into()));
    }
    let params = NodeParams::default().with_groups(cfg.groups);
    let strategies: Vec<Strategy> = match cfg.mode {
        MemoryMode::Stored => vec![Strategy::A1],
        MemoryMode::Reversible => vec![Strategy::C],
        MemoryMode::Both => vec![Strategy::A1, Strategy::C],
    };
    let mut out = MemoryBenchOutcome {
        timesteps: cfg.timesteps.clone(),
        stored: Vec::new(),
        reversible: Vec::new(),
    };
    let mut report = Report::new(
        "bench-memory",
        &["timesteps", "mode", "layer", "k", "per_step_elements", "final_elements", "total_elements", "ratio"],
    );
    report.config("bench_memory", cfg);
    let mut predicted_ok = true;
    for &t in &cfg.timesteps {
        let topology = Topology {
            input_dim: cfg.widths[0],
            widths: cfg.widths.clone(),
            classes: 10,
            timesteps: t,
            node: NodeKind::Reversible(params),
        };
        let model = Model::new(topology, cfg.seed)?;
        let x = Tensor::random_uniform(&[cfg.batch, cfg.widths[0]], -1.0, 2.0, cfg.seed.derive(t as u64))?;
        for &s in &strategies {
            let (_, tape) = model.forward(&x, s, SpikeFn::Hard, None)?;
            let census = tape.memory_census();
            predicted_ok &= census == model.memory_snapshot(s, cfg.batch);
            match s {
                Strategy::A1 => out.stored.push(census),
                _ => out.reversible.push(census),
            }
        }
    }
    let both = cfg.mode == MemoryMode::Both;
    for (i, &t) in cfg.timesteps.iter().enumerate() {
        let ledgers: Vec<(&str, &MemoryLedger)> = [("stored", out.stored.get(i)), ("reversible", out.reversible.get(i))]
            .into_iter()
            .filter_map(|(n, l)| l.map(|l| (n, l)))
            .collect();
        for (name, ledger) in &ledgers {
            for node in &ledger.nodes {
                let ratio = if both {
                    let layer_total = |l: &MemoryLedger| l.nodes.iter().find(|n| n.layer == node.layer).map_or(0, |n| n.total());
                    Some(json!(ratio(layer_total(&out.stored[i]), layer_total(&out.reversible[i]))))
                } else {
                    None
                };
                report.row(vec![
                    json!(t),
                    json!(name),
                    json!(node.layer),
                    json!(node.k),
                    json!(node.per_step_total()),
                    json!(node.final_v),
                    json!(node.total()),
                    ratio.unwrap_or(serde_json::Value::Null),
                ]);
            }
            let k: u64 = ledger.nodes.iter().map(|n| n.k).sum();
            let total_ratio = both.then(|| json!(ratio(out.stored[i].total(), out.reversible[i].total())));
            report.row(vec![
                json!(t),
                json!(name),
                json!("total"),
                json!(k),
                json!(ledger.nodes.iter().map(|n| n.per_step_total()).sum::<u64>()),
                json!(ledger.nodes.iter().map(|n| n.final_v).sum::<u64>()),
                json!(ledger.total()),
                total_ratio.unwrap_or(serde_json::Value::Null),
            ]);
        }
    }
    report.verdict("census_matches_prediction", predicted_ok, "measured tape census equals memory_snapshot");
    for v in memory_verdicts(&out) {
        report.verdict(&v.0, v.1, v.2);
    }
    Ok((out, report))
}

fn ratio(stored: u64, reversible: u64) -> f64 {
    stored as f64 / reversible as f64
}

/// `(name, passed, detail)` for the scaling claims the outcome supports.
pub fn memory_verdicts(out: &MemoryBenchOutcome) -> Vec<(String, bool, String)> {
    let mut v = Vec::new();
    if !out.reversible.is_empty() {
        let first = out.reversible[0].total();
        let constant = out.reversible.iter().all(|l| l.total() == first && l.nodes.iter().all(|n| n.per_step_total() == 0));
        v.push(("reversible_constant".into(), constant, format!("{first} elements at every T")));
    }
    if !out.stored.is_empty() {
        let mut linear = true;
        let mut slope_ok = true;
        for (l, &t) in out.stored.iter().zip(&out.timesteps) {
            for n in &l.nodes {
                let slope = n.total() / t as u64;
                linear &= n.total() == slope * t as u64 && n.final_v == 0;
                slope_ok &= slope >= n.k;
            }
        }
        if out.stored.len() >= 2 {
            let slopes: Vec<u64> = out.stored.iter().zip(&out.timesteps).map(|(l, &t)| l.total() / t as u64).collect();
            linear &= slopes.iter().all(|&s| s == slopes[0]);
        }
        v.push(("stored_linear".into(), linear, "census = slope * T per node".into()));
        v.push(("stored_slope_at_least_k".into(), slope_ok, "slope >= k per node".into()));
    }
    if out.stored.len() >= 2 && out.reversible.len() == out.stored.len() {
        let mut pairs: Vec<(usize, f64)> = out
            .timesteps
            .iter()
            .zip(out.stored.iter().zip(&out.reversible))
            .map(|(&t, (s, r))| (t, ratio(s.total(), r.total())))
            .collect();
        pairs.sort_by_key(|p| p.0);
        pairs.dedup_by_key(|p| p.0);
        let increasing = pairs.windows(2).all(|w| w[1].1 > w[0].1);
        v.push((
            "ratio_increasing".into(),
            increasing,
            format!(
                "ratio {:.2} at T={} to {:.2} at T={}",
                pairs[0].1,
                pairs[0].0,
                pairs[pairs.len() - 1].1,
                pairs[pairs.len() - 1].0
            ),
        ));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBenchConfig {
    pub strategies: Vec<Strategy>,
    pub timesteps: Vec<usize>,
    pub repeats: usize,
    pub warmups: usize,
    pub depth: usize,
    pub dim: usize,
    pub batch: usize,
    pub seed: Seed,
}

impl Default for TimeBenchConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            timesteps: vec![8],
            repeats: 20,
            warmups: 2,
            depth: 8,
            dim: 4096,
            batch: 1,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeRow {
    pub strategy: Strategy,
    pub timesteps: usize,
    pub forward_median: f64,
    pub backward_median: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Keeps freed memory inside the process heap. glibc otherwise hands the
/// top of the heap back to the kernel after every pass, and the stored
/// caches fault their pages in again on the next forward.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn steady_heap() {
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn steady_heap() {}

/// Wall-clock medians of one forward and one backward pass through a stack
/// of `depth` spiking nodes of width `dim`. Repeats interleave the
/// strategies so slow drift affects all of them alike.
///
/// On glibc this raises the process allocator's trim and mmap thresholds.
pub fn run_bench_time(cfg: &TimeBenchConfig) -> Result<(Vec<TimeRow>, Report)> {
    if cfg.repeats == 0 || cfg.depth == 0 || cfg.dim == 0 || cfg.batch == 0 || cfg.strategies.is_empty() {
        return Err(Error::InvalidConfig(
            "repeats, depth, dim, batch and the strategy list must be positive".into(),
        ));
    }
    if cfg.timesteps.is_empty() || cfg.timesteps.contains(&0) {
        return Err(Error::InvalidConfig("timesteps must be positive".into()));
    }
    let node = NodeParams::default();
    if cfg.dim % node.groups != 0 {
        return Err(Error::NotDivisible {
            extent: cfg.dim,
            groups: node.groups,
        });
    }
    steady_heap();
    let rev = Network::node_stack(cfg.depth, node);
    let lif = Network::lif_stack(cfg.depth, LifParams::default());
    let mut report = Report::new(
        "bench-time",
        &["strategy", "timesteps", "depth", "dim", "repeats", "forward_median_s", "backward_median_s", "total_median_s"],
    );
    report.config("bench_time", cfg);
    let mut rows = Vec::new();
    for &t in &cfg.timesteps {
        let xs = random_seq(t, &[cfg.batch, cfg.dim], cfg.seed.derive(t as u64))?;
        let gs: Vec<Tensor> = random_seq(t, &[cfg.batch, cfg.dim], cfg.seed.derive(1000 + t as u64))?;
        let mut fwd = vec![Vec::with_capacity(cfg.repeats); cfg.strategies.len()];
        let mut bwd = vec![Vec::with_capacity(cfg.repeats); cfg.strategies.len()];
        for rep in 0..cfg.warmups + cfg.repeats {
            for (i, &s) in cfg.strategies.iter().enumerate() {
                let net = if s.drives_lif() { &lif } else { &rev };
                let inputs = xs.clone();
                let start = Instant::now();
                let (out, tape) = net.forward(inputs, t, s, SpikeFn::Hard, None)?;
                let mid = Instant::now();
                let g = backward(net, &tape, &gs)?;
                let end = Instant::now();
                drop((out, tape, g));
                if rep >= cfg.warmups {
                    fwd[i].push((mid - start).as_secs_f64());
                    bwd[i].push((end - mid).as_secs_f64());
                }
            }
        }
        for (i, &s) in cfg.strategies.iter().enumerate() {
            let row = TimeRow {
                strategy: s,
                timesteps: t,
                forward_median: median(&mut fwd[i]),
                backward_median: median(&mut bwd[i]),
            };
            report.row(vec![
                json!(s.name()),
                json!(t),
                json!(cfg.depth),
                json!(cfg.dim),
                json!(cfg.repeats),
                json!(row.forward_median),
                json!(row.backward_median),
                json!(row.forward_median + row.backward_median),
            ]);
            rows.push(row);
        }
    }
    Ok((rows, report))
}

/// Measured scalar-op counts of one node step on `k` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsMeasurement {
    pub k: u64,
    pub forward: u64,
    pub inverse: u64,
    pub grad_forward_graph: u64,
    pub grad_inverse_graph: u64,
    pub stored_backward: u64,
    pub recompute_backward: u64,
    pub inverse_graph_backward: u64,
}

pub fn measure_flops(k: usize, seed: Seed) -> Result<FlopsMeasurement> {
    let p = NodeParams::default();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if k % p.groups != 0 {
        return Err(Error::NotDivisible { extent: k, groups: p.groups });
    }
    let net = Network::node_stack(1, p);
    let x = vec![Tensor::random_uniform(&[1, k], -2.0, 3.0, seed)?];
    let g = vec![Tensor::random_uniform(&[1, k], -1.0, 1.0, seed.derive(1))?];
    let mut ledgers = Vec::new();
    let mut forward = 0;
    for s in [Strategy::A1, Strategy::B, Strategy::C] {
        let mut fwd = FlopsLedger::new();
        let (_, tape) = net.forward(x.clone(), 1, s, SpikeFn::Hard, Some(&mut fwd))?;
        forward = fwd.get(Phase::Forward);
        let mut led = FlopsLedger::new();
        backward_with_ledger(&net, &tape, &g, Some(&mut led))?;
        ledgers.push(led);
    }
    Ok(FlopsMeasurement {
        k: k as u64,
        forward,
        inverse: ledgers[2].get(Phase::Inverse),
        grad_forward_graph: ledgers[0].get(Phase::GradForwardGraph),
        grad_inverse_graph: ledgers[2].get(Phase::GradInverseGraph),
        stored_backward: ledgers[0].total(),
        recompute_backward: ledgers[1].total(),
        inverse_graph_backward: ledgers[2].total(),
    })
}

pub fn run_flops(k: usize, seed: Seed) -> Result<(FlopsMeasurement, TheoreticalCosts, Report)> {
    let m = measure_flops(k, seed)?;
    let th = theoretical_costs(k as u64)?;
    let mut report = Report::new("flops", &["phase", "k", "measured", "theoretical", "ratio"]);
    report.config("k", k).config("seed", seed);
    let rows: [(&str, u64, f64); 7] = [
        ("forward", m.forward, th.forward),
        ("inverse", m.inverse, th.inverse),
        ("grad_forward_graph", m.grad_forward_graph, th.grad_fwd),
        ("grad_inverse_graph", m.grad_inverse_graph, th.grad_inv),
        ("stored_backward", m.stored_backward, th.stored_backward),
        ("recompute_backward", m.recompute_backward, th.recompute_backward),
        ("inverse_graph_backward", m.inverse_graph_backward, th.inverse_graph_backward),
    ];
    for (phase, measured, theory) in rows {
        report.row(vec![
            json!(phase),
            json!(k),
            json!(measured),
            json!(theory),
            json!(measured as f64 / theory),
        ]);
    }
    let measured_c_over_b = m.inverse_graph_backward as f64 / m.recompute_backward as f64;
    let measured_total = 1.0
        - (m.forward + m.inverse_graph_backward) as f64 / (m.forward + m.recompute_backward) as f64;
    let summary = [
        ("backward_c_over_b", json!(measured_c_over_b), th.inverse_graph_backward / th.recompute_backward),
        ("backward_reduction", json!(1.0 - measured_c_over_b), th.backward_reduction()),
        ("total_reduction", json!(measured_total), th.total_reduction()),
        ("stated_reduction", serde_json::Value::Null, STATED_FLOPS_REDUCTION),
    ];
    for (phase, measured, theory) in summary {
        let r = measured.as_f64().map(|v| json!(v / theory)).unwrap_or(serde_json::Value::Null);
        report.row(vec![json!(phase), json!(k), measured, json!(theory), r]);
    }
    let k64 = k as u64;
    report.verdict("forward_is_12k", m.forward == 12 * k64, format!("{} vs {}", m.forward, 12 * k64));
    report.verdict(
        "cost_identities",
        th.identities_hold(),
        "recompute = inverse + forward + grad_fwd; inverse_graph = inverse + grad_inv",
    );
    let gap = m.recompute_backward.saturating_sub(m.inverse_graph_backward);
    report.verdict(
        "recompute_minus_inverse_graph",
        m.recompute_backward >= m.inverse_graph_backward + 12 * k64,
        format!("gap {gap} vs 12k = {}", 12 * k64),
    );
    Ok((m, th, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub widths: Vec<usize>,
    pub timesteps: usize,
    pub node: NodeKind,
    pub train: TrainConfig,
}

/// Trains for `cfg.train.epochs` epochs, continuing from `resume` when given.
/// Returns the per-epoch report and a checkpoint of the final state.
pub fn run_training(cfg: &TrainRunConfig, data: &Dataset, resume: Option<Checkpoint>) -> Result<(Vec<crate::net::EpochMetrics>, Report, Checkpoint)> {
    cfg.train.validate()?;
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            if ck.model.topology.input_dim != data.dim || ck.model.topology.classes != data.classes {
                return Err(Error::ModelMismatch("checkpoint topology does not fit the dataset".into()));
            }
            let opt = ck
                .optimizer
                .unwrap_or_else(|| Sgd::new(cfg.train.sgd, &ck.model.network.params()));
            (ck.model, opt, ck.epoch)
        }
        None => {
            let topology = Topology {
                input_dim: data.dim,
                widths: cfg.widths.clone(),
                classes: data.classes,
                timesteps: cfg.timesteps,
                node: cfg.node,
            };
            let model = Model::new(topology, cfg.train.seed)?;
            let opt = Sgd::new(cfg.train.sgd, &model.network.params());
            (model, opt, 0)
        }
    };
    let mut report = Report::new(
        "train",
        &["epoch", "loss", "accuracy", "iterations", "forward_s", "backward_s", "eval_accuracy"],
    );
    report.config("train", cfg);
    let mut metrics = Vec::new();
    for epoch in start..start + cfg.train.epochs {
        let m = train_epoch(&mut model, &mut opt, data, &cfg.train, epoch)?;
        let eval = evaluate(&model, data, cfg.train.batch_size)?;
        report.row(vec![
            json!(epoch),
            json!(m.loss),
            json!(m.accuracy),
            json!(m.iterations.len()),
            json!(m.forward_secs),
            json!(m.backward_secs),
            json!(eval),
        ]);
        metrics.push(m);
    }
    let finite = metrics.iter().all(|m| m.loss.is_finite());
    report.verdict("finite_loss", finite, "every epoch loss is finite");
    if let [first, .., last] = metrics.as_slice() {
        let rises = metrics.windows(2).all(|w| w[1].loss <= 1.1 * w[0].loss);
        report.verdict(
            "loss_trend",
            rises && last.loss < first.loss,
            format!(
                "epoch loss {:.6} to {:.6}, at most 10% upward between adjacent epochs",
                first.loss, last.loss
            ),
        );
    }
    let ck = Checkpoint {
        model,
        optimizer: Some(opt),
        seed: cfg.train.seed,
        epoch: start + cfg.train.epochs,
    };
    Ok((metrics, report, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn roundtrip_defaults_pass_and_validate() {
        let cfg = RoundtripConfig { trials: 3, ..Default::default() };
        let (out, report) = run_roundtrip(&cfg).unwrap();
        assert!(out.passed(), "{out:?}");
        assert!(report.passed());
        assert_eq!(report.rows.len(), 3);
        let bad = RoundtripConfig { groups: 3, ..Default::default() };
        assert!(matches!(run_roundtrip(&bad), Err(Error::NotDivisible { extent: 128, groups: 3 })));
        let bad = RoundtripConfig { dim: 0, ..Default::default() };
        assert!(run_roundtrip(&bad).is_err());
    }

    #[test]
    fn flops_table_for_k_1000() {
        let (m, th, report) = run_flops(1000, Seed(0)).unwrap();
        assert_eq!(m.forward, 12_000);
        assert_eq!(
            [th.forward, th.inverse, th.grad_fwd, th.grad_inv, th.recompute_backward, th.inverse_graph_backward],
            [12_000.0, 17_000.0, 15_500.0, 8_500.0, 44_500.0, 25_500.0]
        );
        assert_eq!(m.recompute_backward - m.inverse_graph_backward, 12_000);
        assert!(report.passed());
        let phases = report.column("phase").unwrap();
        assert!(phases.iter().any(|p| p.as_str() == Some("stated_reduction")));
        assert!(matches!(run_flops(7, Seed(0)), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn memory_bench_small() {
        let cfg = MemoryBenchConfig {
            widths: vec![8, 4],
            timesteps: vec![1, 2, 5],
            ..Default::default()
        };
        let (out, report) = run_bench_memory(&cfg).unwrap();
        assert!(report.passed(), "{:?}", report.verdicts);
        assert_eq!(out.stored[1].total(), 2 * out.stored[0].total());
        assert_eq!(out.reversible[0].total(), 12);
        let empty = MemoryBenchConfig { widths: vec![], ..Default::default() };
        assert!(run_bench_memory(&empty).is_err());
    }

    #[test]
    fn gradcheck_small() {
        let cfg = GradcheckConfig { nets: 3, fd: true, ..Default::default() };
        let (out, report) = run_gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{out:?}");
        // inversion recovers the stored membranes bit for bit, so even a
        // tolerance of zero holds
        let strict = GradcheckConfig { nets: 5, rtol: 0.0, ..Default::default() };
        let (out, report) = run_gradcheck(&strict).unwrap();
        assert_eq!(out.max_strategy_err, 0.0);
        assert!(report.passed());
        let (out, report) = run_gradcheck(&GradcheckConfig { nets: 2, fd: true, fd_rtol: 1e-15, ..Default::default() }).unwrap();
        assert!(out.max_fd_err.unwrap() > 1e-15);
        assert!(!report.passed());
    }
}
