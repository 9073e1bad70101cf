//! Dense + spiking-node networks, loss, optimizer and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward_with_ledger, GradResult, LifCache, Record, Strategy, Tape};
use crate::ledger::{FlopsLedger, MemoryLedger, NodeCensus, OpCount, Phase};
use crate::lif::{lif_step_with, LifParams, LifState, SpikeFn};
use crate::node::{sequence_forward_with, CacheMode, NodeParams};
use crate::tensor::{Seed, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in x out]`
    pub weights: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseLayer {
    /// Uniform init in `±1/sqrt(fan_in)` for both weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, seed: Seed) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weights: Tensor::random_uniform(&[fan_in, fan_out], -bound, bound, seed.derive(0))?,
            bias: Tensor::random_uniform(&[fan_out], -bound, bound, seed.derive(1))?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weights)?;
        let n = self.fan_out();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Returns `(input grads, weight grad, bias grad)`.
    ///
    /// When the layer saw a single input reused for every timestep, the
    /// timestep gradients are summed first and one input gradient is returned.
    pub fn backward(&self, inputs: &[Tensor], grads: &[Tensor]) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
        let wt = self.weights.transpose()?;
        let collapsed;
        let grads = if inputs.len() == 1 && grads.len() > 1 {
            let mut sum = grads[0].clone();
            for g in &grads[1..] {
                sum.add_assign(g)?;
            }
            collapsed = [sum];
            &collapsed[..]
        } else {
            grads
        };
        if inputs.len() != grads.len() {
            return Err(Error::MissingCache);
        }
        let mut gw = Tensor::zeros(self.weights.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let mut gx = Vec::with_capacity(inputs.len());
        for (x, g) in inputs.iter().zip(grads) {
            gw.add_assign(&x.transpose()?.matmul(g)?)?;
            gb.add_assign(&g.sum_rows()?)?;
            gx.push(g.matmul(&wt)?);
        }
        Ok((gx, gw, gb))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Reversible(NodeParams),
    Lif(LifParams),
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Reversible(_) => "reversible",
            Layer::Lif(_) => "lif",
        }
    }
}

/// An ordered stack of layers, processed one whole sequence at a time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// A chain of `depth` reversible nodes with no weights in between.
    pub fn node_stack(depth: usize, params: NodeParams) -> Self {
        Self::new(vec![Layer::Reversible(params); depth])
    }

    /// `depth` blocks of a square dense layer followed by a reversible node.
    pub fn block_stack(depth: usize, dim: usize, params: NodeParams, seed: Seed) -> Result<Self> {
        let mut layers = Vec::with_capacity(2 * depth);
        for b in 0..depth {
            layers.push(Layer::Dense(DenseLayer::init(dim, dim, seed.derive(b as u64))?));
            layers.push(Layer::Reversible(params));
        }
        Ok(Self::new(layers))
    }

    pub fn lif_stack(depth: usize, params: LifParams) -> Self {
        Self::new(vec![Layer::Lif(params); depth])
    }

    /// Dense weights and biases in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some([&d.weights, &d.bias]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some([&mut d.weights, &mut d.bias]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn check_strategy(&self, strategy: Strategy) -> Result<()> {
        for layer in &self.layers {
            let ok = match layer {
                Layer::Dense(_) => true,
                Layer::Reversible(p) => {
                    p.validate()?;
                    !strategy.drives_lif()
                }
                Layer::Lif(p) => {
                    p.validate()?;
                    strategy.drives_lif()
                }
            };
            if !ok {
                return Err(Error::StrategyMismatch {
                    strategy: strategy.to_string(),
                    layer: layer.kind(),
                });
            }
        }
        Ok(())
    }

    /// Runs `inputs` through every layer for `timesteps` steps.
    ///
    /// A single input tensor stands for the same current at every timestep;
    /// it is expanded when it first reaches a spiking layer. Returns the
    /// output sequence and the tape for the chosen strategy. Node scalar
    /// operations are charged to `ledger` under the forward phase.
    pub fn forward(
        &self,
        inputs: Vec<Tensor>,
        timesteps: usize,
        strategy: Strategy,
        spike: SpikeFn,
        mut ledger: Option<&mut FlopsLedger>,
    ) -> Result<(Vec<Tensor>, Tape)> {
        if timesteps == 0 || inputs.is_empty() || (inputs.len() != 1 && inputs.len() != timesteps) {
            return Err(Error::InvalidConfig(format!(
                "{} inputs for {timesteps} timesteps",
                inputs.len()
            )));
        }
        self.check_strategy(strategy)?;
        let mut seq = inputs;
        // residuals of the most recent node outputs, until a layer consumes them
        let mut residuals: Option<Vec<Tensor>> = None;
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    let out = seq.iter().map(|x| d.forward(x)).collect::<Result<Vec<_>>>()?;
                    records.push(Record::Dense {
                        inputs: seq,
                        residuals: residuals.take(),
                    });
                    seq = out;
                }
                Layer::Reversible(p) => {
                    if seq.len() == 1 && timesteps > 1 {
                        seq = vec![seq[0].clone(); timesteps];
                    }
                    let v0 = Tensor::zeros(seq[0].shape());
                    let k = v0.len() as u64;
                    let mut ops = OpCount::default();
                    let out = sequence_forward_with(seq, &v0, p, strategy.cache_mode(), spike, &mut ops)?;
                    if let Some(led) = ledger.as_deref_mut() {
                        led.record(Phase::Forward, ops.total());
                        led.elements += k * timesteps as u64;
                    }
                    if strategy.cache_mode() == CacheMode::Reversible {
                        residuals = Some(out.y_residual);
                    }
                    records.push(Record::Node(out.cache));
                    seq = out.y_seq;
                }
                Layer::Lif(p) => {
                    if seq.len() == 1 && timesteps > 1 {
                        seq = vec![seq[0].clone(); timesteps];
                    }
                    let mut state = LifState::zeros(seq[0].shape());
                    let mut ops = OpCount::default();
                    let mut vs = Vec::with_capacity(timesteps);
                    let mut out = Vec::with_capacity(timesteps);
                    for x in &seq {
                        let (next, spikes) = lif_step_with(&state, x, p, spike, &mut ops)?;
                        vs.push(next.v.clone());
                        out.push(spikes);
                        state = next;
                    }
                    if let Some(led) = ledger.as_deref_mut() {
                        led.record(Phase::Forward, ops.total());
                        led.elements += seq.iter().map(|x| x.len() as u64).sum::<u64>();
                    }
                    records.push(Record::Lif(LifCache { v: vs }));
                    seq = out;
                }
            }
        }
        let (final_output, final_residual) = match self.layers.last() {
            Some(Layer::Dense(_)) | None => (None, None),
            Some(_) => (Some(seq.clone()), residuals),
        };
        Ok((
            seq,
            Tape {
                strategy,
                spike,
                timesteps,
                records,
                final_output,
                final_residual,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Reversible(NodeParams),
    Lif(LifParams),
}

/// Shape of a model, as recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub timesteps: usize,
    pub node: NodeKind,
}

/// `[Dense, node]` blocks followed by a dense readout, decoded by the mean
/// of the readout over timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: Network,
    pub topology: Topology,
}

impl Model {
    pub fn new(topology: Topology, seed: Seed) -> Result<Self> {
        if topology.input_dim == 0 || topology.classes == 0 || topology.timesteps == 0 {
            return Err(Error::InvalidConfig("model extents must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut fan_in = topology.input_dim;
        for (i, &w) in topology.widths.iter().enumerate() {
            if w == 0 {
                return Err(Error::InvalidConfig("block width must be positive".into()));
            }
            layers.push(Layer::Dense(DenseLayer::init(fan_in, w, seed.derive(i as u64))?));
            match topology.node {
                NodeKind::Reversible(p) => {
                    p.validate()?;
                    if w % p.groups != 0 {
                        return Err(Error::NotDivisible { extent: w, groups: p.groups });
                    }
                    layers.push(Layer::Reversible(p));
                }
                NodeKind::Lif(p) => {
                    p.validate()?;
                    layers.push(Layer::Lif(p));
                }
            }
            fan_in = w;
        }
        let readout = DenseLayer::init(fan_in, topology.classes, seed.derive(topology.widths.len() as u64))?;
        layers.push(Layer::Dense(readout));
        Ok(Self {
            network: Network::new(layers),
            topology,
        })
    }

    pub fn uses_lif(&self) -> bool {
        matches!(self.topology.node, NodeKind::Lif(_))
    }

    /// Returns `(logits, tape)`; `x` is a `[batch x input_dim]` current
    /// repeated at every timestep.
    pub fn forward(
        &self,
        x: &Tensor,
        strategy: Strategy,
        spike: SpikeFn,
        ledger: Option<&mut FlopsLedger>,
    ) -> Result<(Tensor, Tape)> {
        if x.shape().len() != 2 || x.shape()[1] != self.topology.input_dim {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![0, self.topology.input_dim],
            });
        }
        let (outs, tape) = self
            .network
            .forward(vec![x.clone()], self.topology.timesteps, strategy, spike, ledger)?;
        let mut logits = outs[0].clone();
        for o in &outs[1..] {
            logits.add_assign(o)?;
        }
        Ok((logits.scale(1.0 / outs.len() as f64), tape))
    }

    pub fn backward(&self, tape: &Tape, grad_logits: &Tensor, ledger: Option<&mut FlopsLedger>) -> Result<GradResult> {
        let steps = match tape.records.last() {
            Some(Record::Dense { inputs, .. }) => inputs.len(),
            _ => return Err(Error::MissingCache),
        };
        let g = grad_logits.scale(1.0 / steps as f64);
        backward_with_ledger(&self.network, tape, &vec![g; steps], ledger)
    }

    /// Predicted node census for a batch of `batch` samples under `strategy`.
    pub fn memory_snapshot(&self, strategy: Strategy, batch: usize) -> MemoryLedger {
        let t = self.topology.timesteps as u64;
        let mut nodes = Vec::new();
        for (b, &w) in self.topology.widths.iter().enumerate() {
            let k = (batch * w) as u64;
            let mut c = NodeCensus {
                layer: 2 * b + 1,
                k,
                ..Default::default()
            };
            match (strategy.drives_lif(), strategy.cache_mode()) {
                (true, _) => c.per_step_v = k * t,
                (false, CacheMode::Stored) => {
                    c.per_step_x = k * t;
                    c.per_step_m = k * t;
                    c.per_step_v = k * t;
                }
                (false, CacheMode::Reversible) => c.final_v = k,
            }
            nodes.push(c);
        }
        MemoryLedger {
            mode: strategy.cache_mode(),
            timesteps: self.topology.timesteps,
            nodes,
        }
    }
}

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            left: shape.to_vec(),
            right: vec![labels.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = max + sum.ln();
        total += log_norm - row[label];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - log_norm).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad[r * classes + c] = (p - target) / batch as f64;
        }
    }
    Ok((total / batch as f64, Tensor::from_vec(shape.to_vec(), grad)?))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

/// SGD with momentum and coupled weight decay:
/// `v <- mu v + g + lambda w`, `w <- w - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::InvalidConfig(format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((w, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    left: w.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub seed: Seed,
    pub strategy: Strategy,
    /// Collect FLOPs and node-census ledgers for every iteration.
    pub instrument: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 1,
            sgd: SgdConfig::default(),
            seed: Seed(0),
            strategy: Strategy::C,
            instrument: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch size and epochs must be positive".into()));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.sgd.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub loss: f64,
    pub forward_secs: f64,
    pub backward_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub iterations: Vec<IterationMetrics>,
    pub forward_secs: f64,
    pub backward_secs: f64,
    /// Forward-pass ledger summed over the epoch (instrumented runs only).
    pub forward_flops: Option<FlopsLedger>,
    /// Backward-pass ledger summed over the epoch (instrumented runs only).
    pub backward_flops: Option<FlopsLedger>,
    /// Node census of every iteration's tape (instrumented runs only).
    pub census: Vec<MemoryLedger>,
}

/// One pass over `data` in a shuffled order fixed by `(config.seed, epoch)`.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut Sgd,
    data: &Dataset,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    config.validate()?;
    if data.dim != model.topology.input_dim {
        return Err(Error::ShapeMismatch {
            left: vec![data.dim],
            right: vec![model.topology.input_dim],
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut config.seed.derive(epoch as u64).rng());

    let mut iterations = Vec::new();
    let mut correct = 0usize;
    let mut fwd_total = FlopsLedger::new();
    let mut bwd_total = FlopsLedger::new();
    let mut census = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let (x, labels) = data.batch(chunk)?;
        let mut fwd = FlopsLedger::new();
        let mut bwd = FlopsLedger::new();

        let start = Instant::now();
        let (logits, tape) = model.forward(&x, config.strategy, SpikeFn::Hard, config.instrument.then_some(&mut fwd))?;
        let forward_secs = start.elapsed().as_secs_f64();

        let (loss, grad_logits) = cross_entropy_loss(&logits, &labels)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();

        let start = Instant::now();
        let grads = model.backward(&tape, &grad_logits, config.instrument.then_some(&mut bwd))?;
        let backward_secs = start.elapsed().as_secs_f64();

        optimizer.step(model.network.params_mut(), &grads.param_grads)?;
        if config.instrument {
            fwd_total.merge(&fwd);
            bwd_total.merge(&bwd);
            census.push(tape.memory_census());
        }
        iterations.push(IterationMetrics {
            loss,
            forward_secs,
            backward_secs,
        });
    }
    let n_iter = iterations.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        loss: iterations.iter().map(|i| i.loss).sum::<f64>() / n_iter,
        accuracy: if data.is_empty() { 0.0 } else { correct as f64 / data.len() as f64 },
        forward_secs: iterations.iter().map(|i| i.forward_secs).sum(),
        backward_secs: iterations.iter().map(|i| i.backward_secs).sum(),
        iterations,
        forward_flops: config.instrument.then_some(fwd_total),
        backward_flops: config.instrument.then_some(bwd_total),
        census,
    })
}

/// Classification accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let strategy = Strategy::for_model(model);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let (logits, _) = model.forward(&x, strategy, SpikeFn::Hard, None)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
