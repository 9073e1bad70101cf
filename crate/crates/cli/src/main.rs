//! `revsnn`: gradient checks, invertibility suites, benchmarks, FLOPs
//! tables and training runs for the reversible spiking node.
//!
//! Exit status is 0 when every verdict passes, 1 when one fails and 2 on
//! usage or input errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use revsnn::bench::{
    run_bench_memory, run_bench_time, run_flops, run_gradcheck, run_roundtrip, run_training, GradcheckConfig,
    MemoryBenchConfig, MemoryMode, RoundtripConfig, TimeBenchConfig, TrainRunConfig,
};
use revsnn::checkpoint::{load_checkpoint, save_checkpoint};
use revsnn::data::{load_mnist_dir, synth_dataset, Dataset};
use revsnn::grad::Strategy;
use revsnn::net::{NodeKind, SgdConfig, TrainConfig};
use revsnn::node::NodeParams;
use revsnn::report::{Format, Report};
use revsnn::tensor::Seed;
use revsnn::Error;

#[derive(Parser, Debug)]
#[command(name = "revsnn", version, about = "Reversible spiking node benchmarks and training")]
struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, env = "REVSNN_SEED", default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "csv", value_parser = parse_format)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward then inverse sequences and compare every element.
    Roundtrip(RoundtripArgs),
    /// Compare gradients across strategies and against finite differences.
    Gradcheck(GradcheckArgs),
    /// Node activation census per timestep count.
    BenchMemory(MemoryArgs),
    /// Median forward and backward wall time per strategy.
    BenchTime(TimeArgs),
    /// Theoretical and measured scalar-op counts of one node step.
    Flops(FlopsArgs),
    /// Train a dense spiking classifier.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct RoundtripArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 10)]
    timesteps: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1e-6)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-10)]
    atol: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// a1, b, c or all.
    #[arg(long, default_value = "all")]
    strategy: String,
    /// Also compare against central finite differences of the smoothed model.
    #[arg(long)]
    fd: bool,
    #[arg(long, default_value_t = 20)]
    nets: usize,
    #[arg(long, default_value_t = 1e-9)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-4)]
    fd_rtol: f64,
}

#[derive(Args, Debug)]
struct MemoryArgs {
    /// Comma-separated node widths.
    #[arg(long, default_value = "256,256")]
    arch: String,
    /// `A..B` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "1..20")]
    timesteps: String,
    #[arg(long, default_value = "both")]
    mode: MemoryMode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    groups: usize,
}

#[derive(Args, Debug)]
struct TimeArgs {
    /// Comma-separated subset of a0, a1, b, c, or all.
    #[arg(long, default_value = "all")]
    strategy: String,
    #[arg(long, default_value = "8")]
    timesteps: String,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    #[arg(long, default_value_t = 4096)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long, default_value_t = 1000)]
    k: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `synth` or `idx:DIR` with the standard digit file pair in DIR.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value = "c")]
    strategy: Strategy,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "64,64")]
    arch: String,
    #[arg(long, default_value_t = 4)]
    timesteps: usize,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Synthetic blob count and dimension.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    synth_dim: usize,
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    /// Save the final state here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint for `--epochs` more epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::SingularDenominator { .. } | Error::DivisionByZero { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<usize>, Failure> {
    let items: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match items {
        Ok(v) if !v.is_empty() && !v.contains(&0) => Ok(v),
        _ => Err(usage(format!("{what} must be a comma-separated list of positive integers, got `{s}`"))),
    }
}

fn parse_range(s: &str) -> Result<Vec<usize>, Failure> {
    let bounds = s.split_once("..=").or_else(|| s.split_once(".."));
    match bounds {
        Some((a, b)) => match (a.trim().parse::<usize>(), b.trim().parse::<usize>()) {
            (Ok(a), Ok(b)) if a >= 1 && a <= b => Ok((a..=b).collect()),
            _ => Err(usage(format!("timestep range `{s}` must be A..B with 1 <= A <= B"))),
        },
        None => parse_list(s, "timesteps"),
    }
}

fn parse_strategies(s: &str, allowed: &[Strategy]) -> Result<Vec<Strategy>, Failure> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(allowed.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let st: Strategy = part.trim().parse()?;
        if !allowed.contains(&st) {
            return Err(usage(format!("strategy `{part}` is not available here")));
        }
        if !out.contains(&st) {
            out.push(st);
        }
    }
    Ok(out)
}

fn load_data(spec: &str, args: &TrainArgs, seed: Seed) -> Result<Dataset, Failure> {
    if spec == "synth" {
        return Ok(synth_dataset(args.classes, args.synth_dim, args.samples, seed.derive(0xda7a))?);
    }
    let Some(dir) = spec.strip_prefix("idx:") else {
        return Err(usage(format!("--data must be `synth` or `idx:DIR`, got `{spec}`")));
    };
    let dir = Path::new(dir);
    if !dir.is_dir() {
        return Err(usage(format!("IDX directory `{}` does not exist", dir.display())));
    }
    Ok(load_mnist_dir(dir, true)?)
}

fn run(cli: &Cli) -> Result<Report, Failure> {
    let seed = Seed(cli.seed);
    let report = match &cli.command {
        Command::Roundtrip(a) => {
            let cfg = RoundtripConfig {
                layers: a.layers,
                timesteps: a.timesteps,
                dim: a.dim,
                groups: a.groups,
                trials: a.trials,
                batch: a.batch,
                seed,
                rtol: a.rtol,
                atol: a.atol,
            };
            run_roundtrip(&cfg)?.1
        }
        Command::Gradcheck(a) => {
            let cfg = GradcheckConfig {
                strategies: parse_strategies(&a.strategy, &Strategy::REVERSIBLE)?,
                nets: a.nets,
                fd: a.fd,
                rtol: a.rtol,
                fd_rtol: a.fd_rtol,
                seed,
                ..Default::default()
            };
            run_gradcheck(&cfg)?.1
        }
        Command::BenchMemory(a) => {
            if a.arch.trim().is_empty() {
                return Err(usage("--arch needs at least one width"));
            }
            let cfg = MemoryBenchConfig {
                widths: parse_list(&a.arch, "--arch")?,
                timesteps: parse_range(&a.timesteps)?,
                mode: a.mode,
                batch: a.batch,
                groups: a.groups,
                seed,
            };
            run_bench_memory(&cfg)?.1
        }
        Command::BenchTime(a) => {
            let cfg = TimeBenchConfig {
                strategies: parse_strategies(&a.strategy, &Strategy::ALL)?,
                timesteps: parse_list(&a.timesteps, "--timesteps")?,
                repeats: a.repeats,
                warmups: a.warmups,
                depth: a.depth,
                dim: a.dim,
                batch: a.batch,
                seed,
            };
            run_bench_time(&cfg)?.1
        }
        Command::Flops(a) => run_flops(a.k, seed)?.2,
        Command::Train(a) => {
            let data = load_data(&a.data, a, seed)?;
            let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
            let cfg = TrainRunConfig {
                widths: parse_list(&a.arch, "--arch")?,
                timesteps: a.timesteps,
                node: NodeKind::Reversible(NodeParams {
                    groups: a.groups,
                    ..NodeParams::default()
                }),
                train: TrainConfig {
                    batch_size: a.batch_size,
                    epochs: a.epochs,
                    sgd: SgdConfig {
                        lr: a.lr,
                        momentum: a.momentum,
                        weight_decay: a.weight_decay,
                    },
                    seed,
                    strategy: a.strategy,
                    instrument: false,
                },
            };
            let (metrics, report, ck) = run_training(&cfg, &data, resume)?;
            let first = ck.epoch - metrics.len();
            for (i, m) in metrics.iter().enumerate() {
                eprintln!("epoch {}: loss {:.6} accuracy {:.4}", first + i, m.loss, m.accuracy);
            }
            if let Some(path) = &a.checkpoint {
                save_checkpoint(path, &ck)?;
            }
            report
        }
    };
    Ok(report)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let report = match run(&cli) {
        Ok(r) => r,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let written = match &cli.out {
        Some(path) => report.write(path, cli.format),
        None => report.render(cli.format).map(|s| print!("{s}")),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    for v in &report.verdicts {
        eprintln!("{}: {} ({})", v.name, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
