//! `g3cn` command-line interface.

mod overrides;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use g3cn::data::{generate_synthetic, parse_ntu_file, read_dataset, write_dataset, SynthConfig};
use g3cn::fsutil::atomic_write;
use g3cn::graph::{SkeletonGraph, SkeletonRef};
use g3cn::network::{Network, NetworkConfig};
use g3cn::train::{evaluate, export_topology, metrics_csv, prepare, Checkpoint, TrainConfig, Trainer};
use g3cn::verify::{format_outcomes, run_grad_checks, Scope};

use overrides::{config_base, load_config};

#[derive(Parser)]
#[command(name = "g3cn", version, about = "Gaussian-topology gated graph convolution for skeleton sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set network.n_classes=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ambiguous-action dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes `checkpoint.bin` and `metrics.csv` into the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Training set (`.jsonl`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Schedule preset: `desk` or `full-schedule`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy, per-class accuracy and confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the confusion matrix as CSV.
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        /// `ops`, `unit` or `network`.
        #[arg(long, default_value = "ops")]
        scope: Scope,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Export the averaged topology of a block for one sample.
    ExportTopology {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index of the sample within the dataset.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Block index; defaults to the last block.
        #[arg(long)]
        block: Option<usize>,
        /// Joint whose correlation row is written separately.
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "topology")]
        stem: String,
    },
    /// Convert NTU `.skeleton` files to the `.jsonl` dataset format.
    ParseSkeleton {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the layer table and parameter counts of a configuration.
    Describe {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Verification(String),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenData { cfg, seed, out } => gen_data(&cfg, seed, &out),
        Command::Train { cfg, seed, data, out_dir, preset, quiet } => {
            train(&cfg, seed, &data, &out_dir, preset.as_deref(), quiet)
        }
        Command::Eval { checkpoint, data, confusion } => eval(&checkpoint, &data, confusion.as_deref()),
        Command::GradCheck { scope, seeds, inject_fault } => grad_check(scope, seeds, inject_fault),
        Command::ExportTopology { checkpoint, data, sample, block, anchor, out_dir, stem } => {
            export(&checkpoint, &data, sample, block, anchor, &out_dir, &stem)
        }
        Command::ParseSkeleton { inputs, out } => parse_skeleton(&inputs, &out),
        Command::Describe { cfg } => describe(&cfg),
    }
}

fn resolve_graph(skeleton: &SkeletonRef, base: Option<&Path>) -> Result<SkeletonGraph, Failure> {
    skeleton
        .resolve(base)
        .and_then(|d| d.build())
        .context("loading skeleton")
        .map_err(usage)
}

fn gen_data(args: &ConfigArgs, seed: u64, out: &Path) -> CmdResult {
    let mut value = load_config(args.config.as_deref(), &args.overrides).map_err(usage)?;
    value["seed"] = Value::from(seed);
    let cfg: SynthConfig = serde_json::from_value(value).context("synthetic data config").map_err(usage)?;
    let graph = resolve_graph(&cfg.skeleton, config_base(args.config.as_deref()).as_deref())?;
    let seqs = generate_synthetic(&cfg, &graph).map_err(usage)?;
    write_dataset(out, &seqs).map_err(runtime)?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

fn load_train_config(args: &ConfigArgs) -> Result<(TrainConfig, SkeletonGraph), Failure> {
    let value = load_config(args.config.as_deref(), &args.overrides).map_err(usage)?;
    let cfg: TrainConfig = serde_json::from_value(value).context("training config").map_err(usage)?;
    let graph = resolve_graph(&cfg.network.skeleton, config_base(args.config.as_deref()).as_deref())?;
    Ok((cfg, graph))
}

fn train(args: &ConfigArgs, seed: u64, data: &Path, out_dir: &Path, preset: Option<&str>, quiet: bool) -> CmdResult {
    let (mut cfg, graph) = load_train_config(args)?;
    if let Some(p) = preset {
        cfg.apply_preset(p).map_err(usage)?;
    }
    cfg.seed = seed;
    cfg.validate().map_err(usage)?;
    let raw = read_dataset(data).with_context(|| format!("reading {}", data.display())).map_err(runtime)?;
    if raw.is_empty() {
        return Err(runtime(anyhow!("training set {} is empty", data.display())));
    }
    let prepared = prepare(&cfg, graph.n_joints(), &raw).map_err(runtime)?;
    std::fs::create_dir_all(out_dir).map_err(runtime)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let metrics_path = out_dir.join("metrics.csv");

    let mut trainer = Trainer::new(cfg, graph).map_err(usage)?;
    let started = Instant::now();
    while trainer.epoch() < trainer.config().epochs {
        let m = trainer.train_epoch(&prepared).map_err(runtime)?;
        if !quiet {
            println!(
                "epoch {:>4}  lr {:<10}  loss {:.6}  acc {:.4}  ({:.1}s)",
                m.epoch,
                m.lr,
                m.loss,
                m.acc,
                started.elapsed().as_secs_f64()
            );
        }
        atomic_write(&metrics_path, metrics_csv(trainer.metrics()).as_bytes()).map_err(runtime)?;
        trainer.checkpoint().save(&ckpt_path).map_err(runtime)?;
        if trainer.config().target_accuracy.is_some_and(|t| m.acc >= t) {
            break;
        }
    }
    println!("checkpoint {}  metrics {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Network), Failure> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display())).map_err(runtime)?;
    let net = ckpt.build_network().map_err(runtime)?;
    Ok((ckpt, net))
}

fn eval(checkpoint: &Path, data: &Path, confusion: Option<&Path>) -> CmdResult {
    let (ckpt, net) = load_checkpoint(checkpoint)?;
    let raw = read_dataset(data).with_context(|| format!("reading {}", data.display())).map_err(runtime)?;
    let prepared = prepare(&ckpt.config, net.graph().n_joints(), &raw).map_err(runtime)?;
    let report = evaluate(&net, &prepared, ckpt.config.batch_size).map_err(runtime)?;
    print!("{}", report.summary());
    if let Some(p) = confusion {
        atomic_write(p, report.confusion_csv().as_bytes()).map_err(runtime)?;
    }
    Ok(())
}

fn grad_check(scope: Scope, seeds: u64, inject_fault: bool) -> CmdResult {
    let started = Instant::now();
    let seeds: Vec<u64> = (0..seeds).collect();
    let outcomes = run_grad_checks(scope, &seeds, inject_fault).map_err(runtime)?;
    let (text, ok) = format_outcomes(&outcomes, started);
    print!("{text}");
    if ok {
        Ok(())
    } else {
        let failed = outcomes.iter().filter(|o| !o.passed).count();
        Err(Failure::Verification(format!("{failed} gradient checks exceeded the tolerance")))
    }
}

fn export(
    checkpoint: &Path,
    data: &Path,
    sample: usize,
    block: Option<usize>,
    anchor: usize,
    out_dir: &Path,
    stem: &str,
) -> CmdResult {
    let (ckpt, net) = load_checkpoint(checkpoint)?;
    let raw = read_dataset(data).with_context(|| format!("reading {}", data.display())).map_err(runtime)?;
    let seq = raw
        .get(sample)
        .ok_or_else(|| usage(anyhow!("sample {sample} out of range ({} sequences)", raw.len())))?;
    let seq = prepare(&ckpt.config, net.graph().n_joints(), std::slice::from_ref(seq))
        .map_err(runtime)?
        .remove(0);
    let block = block.unwrap_or(net.n_blocks() - 1);
    std::fs::create_dir_all(out_dir).map_err(runtime)?;
    let files = export_topology(&net, &seq, block, anchor, out_dir, stem).map_err(runtime)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn parse_skeleton(inputs: &[PathBuf], out: &Path) -> CmdResult {
    let mut all = Vec::new();
    for p in inputs {
        let seqs = parse_ntu_file(p).with_context(|| format!("parsing {}", p.display())).map_err(runtime)?;
        println!("{}: {} bodies", p.display(), seqs.len());
        all.extend(seqs);
    }
    write_dataset(out, &all).map_err(runtime)?;
    println!("wrote {} sequences to {}", all.len(), out.display());
    Ok(())
}

fn describe(args: &ConfigArgs) -> CmdResult {
    let mut value = load_config(args.config.as_deref(), &args.overrides).map_err(usage)?;
    if let Some(network) = value.get_mut("network") {
        value = network.take();
    }
    let cfg: NetworkConfig = serde_json::from_value(value).context("network config").map_err(usage)?;
    let graph = resolve_graph(&cfg.skeleton, config_base(args.config.as_deref()).as_deref())?;
    let net = Network::new(cfg, graph, &mut rand_seed()).map_err(usage)?;
    print!("{}", net.describe());
    Ok(())
}

/// Parameter counts do not depend on initial values.
fn rand_seed() -> impl rand::Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}
