use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbsd_core::data::write_manifest;
use fedbsd_core::harness::metrics::write_round_reports;
use fedbsd_core::harness::{
    build_dataset, build_partition, evaluate_client, load_config, run_experiment_with, write_metrics, ExperimentConfig, Golden, RunOptions,
};
use fedbsd_core::nn::checkpoint::{load_checkpoint, save_model};
use fedbsd_core::protocol::Strategy;
use fedbsd_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_GOLDEN_MISMATCH: u8 = 3;

/// Federated learning simulator: FedBSD, FedRep, FedAvg and local baselines.
///
/// Settings come from the config file (or built-in defaults) and are then
/// overridden by --seed and --strategy.
#[derive(Parser, Debug)]
#[command(name = "fedbsd", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalFlags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; also reseeds the partition.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run) or file (partition).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// fedbsd | fedrep | fedavg | local
    #[arg(long, global = true)]
    strategy: Option<Strategy>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics.csv, rounds.jsonl and model checkpoints.
    Run,
    /// Write the client partition manifest without training.
    Partition,
    /// Score a saved model on every client's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this client.
        #[arg(long)]
        client: Option<usize>,
    },
    /// Re-run the frozen config and compare checksums with the goldens.
    Golden {
        /// Directory holding golden.cfg and golden.sha256.
        #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/goldens"))]
        goldens: PathBuf,
        /// Overwrite golden.sha256 with the current checksums.
        #[arg(long)]
        regenerate: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_divergence() { EXIT_DIVERGED } else { EXIT_CONFIG })
        }
    }
}

fn config(flags: &GlobalFlags, fallback: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match flags.config.as_deref().or(fallback) {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
        cfg.partition.seed = seed;
    }
    if let Some(s) = flags.strategy {
        cfg.train.strategy = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<u8, Error> {
    let flags = &cli.global;
    match &cli.command {
        Command::Run => cmd_run(flags),
        Command::Partition => cmd_partition(flags),
        Command::Evaluate { checkpoint, client } => cmd_evaluate(flags, checkpoint, *client),
        Command::Golden { goldens, regenerate } => cmd_golden(flags, goldens, *regenerate),
    }
}

fn cmd_run(flags: &GlobalFlags) -> Result<u8, Error> {
    let cfg = config(flags, None)?;
    let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("fedbsd-out"));
    fs::create_dir_all(out.join("clients"))?;
    let result = run_experiment_with(&cfg, RunOptions::default())?;
    write_metrics(&result.log, &out.join("metrics.csv"))?;
    write_round_reports(BufWriter::new(fs::File::create(out.join("rounds.jsonl"))?), &result.reports)?;
    save_model(&out.join("global.ckpt"), &result.server.global)?;
    for c in &result.clients {
        save_model(&out.join("clients").join(format!("client_{}.ckpt", c.id)), &c.model)?;
    }
    if !flags.quiet {
        let k = cfg.train.eval_last_k.min(result.log.rounds());
        println!("last-{k} mean accuracy: {:.4}", result.log.average_last_k(k)?);
        if let Some(ft) = result.log.finetune_mean() {
            println!("fine-tuned mean accuracy: {ft:.4}");
        }
        println!("wrote {}", out.display());
    }
    Ok(0)
}

fn cmd_partition(flags: &GlobalFlags) -> Result<u8, Error> {
    let cfg = config(flags, None)?;
    let data = build_dataset(&cfg)?;
    let shards = build_partition(&cfg, &data)?;
    match &flags.out {
        Some(p) => write_manifest(BufWriter::new(fs::File::create(p)?), &shards)?,
        None => write_manifest(io::stdout().lock(), &shards)?,
    }
    Ok(0)
}

fn cmd_evaluate(flags: &GlobalFlags, checkpoint: &Path, client: Option<usize>) -> Result<u8, Error> {
    let cfg = config(flags, None)?;
    let model = load_checkpoint(checkpoint)?.into_model()?;
    let data = build_dataset(&cfg)?;
    let shards = build_partition(&cfg, &data)?;
    if let Some(k) = client {
        if k >= shards.len() {
            return Err(Error::InvalidParameter(format!("client {k} does not exist ({} clients)", shards.len())));
        }
    }
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "client_id,accuracy")?;
    let mut sum = 0.0;
    let mut n = 0;
    for s in shards.iter().filter(|s| client.map_or(true, |k| s.client_id == k)) {
        let acc = evaluate_client(&model, &s.test)?;
        writeln!(stdout, "{},{acc}", s.client_id)?;
        sum += acc;
        n += 1;
    }
    if !flags.quiet {
        writeln!(stdout, "mean,{}", sum / n as f64)?;
    }
    Ok(0)
}

fn cmd_golden(flags: &GlobalFlags, dir: &Path, regenerate: bool) -> Result<u8, Error> {
    let cfg = config(flags, Some(&dir.join("golden.cfg")))?;
    let actual = Golden::compute(&cfg)?;
    let path = dir.join("golden.sha256");
    if regenerate {
        fs::write(&path, actual.render())?;
        if !flags.quiet {
            println!("wrote {}", path.display());
        }
        return Ok(0);
    }
    let expected = Golden::parse(&fs::read_to_string(&path)?)?;
    let diff = actual.mismatches(&expected);
    if diff.is_empty() {
        if !flags.quiet {
            println!("golden ok ({} checksums)", expected.entries.len());
        }
        Ok(0)
    } else {
        eprintln!("golden mismatch: {}", diff.join(", "));
        Ok(EXIT_GOLDEN_MISMATCH)
    }
}
