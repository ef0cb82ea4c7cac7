use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use smar_core::analysis::{detect_collapse, expert_preference, layer_selections, mrd_curves, write_csvs};
use smar_core::checkpoint::Checkpoint;
use smar_core::data::{write_batches, BatchRecord, SynthGenerator};
use smar_core::metrics::{read_jsonl, write_jsonl};
use smar_core::train::{evaluate, Trainer};
use smar_core::{Execution, TrainConfig};

/// Output directory used when `--out-dir` is not given.
const OUT_DIR_ENV: &str = "SMAR_OUT_DIR";

#[derive(Parser)]
#[command(name = "smar", version, about = "Modality-aware MoE routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out synthetic batches.
    Eval(EvalArgs),
    /// Turn a metrics log into analysis CSVs.
    Analyze(AnalyzeArgs),
    /// Dump synthetic batches as JSON lines.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config path, or `default` for built-in defaults.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override a config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = if self.config == "default" {
            TrainConfig::default()
        } else {
            TrainConfig::from_path(Path::new(&self.config))?
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for outputs (falls back to $SMAR_OUT_DIR, then `out`).
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    out_dir: PathBuf,
    /// Checkpoint path, relative to the output directory.
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
    /// Metrics log path, relative to the output directory.
    #[arg(long, default_value = "metrics.jsonl")]
    metrics: PathBuf,
    /// Evaluate sequentially instead of in parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of held-out batches; defaults to the checkpoint's `eval_batches`.
    #[arg(long)]
    batches: Option<usize>,
    /// Per-batch JSONL output; a summary is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Max-expert-load above which a layer counts as collapsed.
    #[arg(long, default_value_t = 0.6)]
    threshold: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    batches: u64,
    /// First batch index.
    #[arg(long, default_value_t = 0)]
    start: u64,
    #[arg(long)]
    out: PathBuf,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Writes through a sibling temp file so a failure leaves nothing behind.
fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
        body(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display())),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn fmt_distances(d: &[f64]) -> String {
    d.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    info!("config:\n{}", cfg.to_toml_string());
    let checkpoint = args.out_dir.join(&args.checkpoint);
    let metrics = args.out_dir.join(&args.metrics);

    let run = Trainer::new(cfg.clone())?.run()?;
    write_atomic(&metrics, |w| Ok(write_jsonl(w, &run.metrics)?))?;
    write_atomic(&checkpoint, |w| Ok(Checkpoint::from_model(&cfg, &run.model).write(w)?))?;

    let report = evaluate(&run.model, &cfg, cfg.eval_batches, execution(args.sequential))?;
    println!("checkpoint: {}", checkpoint.display());
    println!("metrics: {}", metrics.display());
    if let Some(acc) = report.accuracy() {
        println!("eval accuracy: {acc:.4}");
        println!("eval mean d per layer: [{}]", fmt_distances(&report.mean_distances()));
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", args.checkpoint.display());
    }
    let file = File::open(&args.checkpoint).with_context(|| format!("opening {}", args.checkpoint.display()))?;
    let (cfg, model) = Checkpoint::read(BufReader::new(file))?.into_model()?;
    let n = args.batches.unwrap_or(cfg.eval_batches);
    let report = evaluate(&model, &cfg, n, execution(args.sequential))?;
    if let Some(out) = &args.out {
        write_atomic(out, |w| Ok(write_jsonl(w, &report.records)?))?;
    }
    match report.accuracy() {
        None => println!("empty evaluation (0 batches)"),
        Some(acc) => {
            println!("batches: {n}");
            println!("accuracy: {acc:.4}");
            println!("mean d per layer: [{}]", fmt_distances(&report.mean_distances()));
        }
    }
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let file = File::open(&args.metrics).with_context(|| format!("opening {}", args.metrics.display()))?;
    let records = read_jsonl(BufReader::new(file))?;
    let selections = layer_selections(&records);
    let collapse = detect_collapse(&selections, args.threshold)?;
    write_csvs(
        &args.out,
        &mrd_curves(&records),
        &expert_preference(&selections),
        &collapse,
    )?;
    println!("records: {}", records.len());
    println!("collapsed layers: {:?}", collapse.collapsed_layers());
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let data = SynthGenerator::new(cfg.synth_config())?;
    let records: Vec<BatchRecord> = (args.start..args.start + args.batches)
        .map(|s| BatchRecord::from_batch(cfg.seed, s, &data.batch(s)))
        .collect();
    write_atomic(&args.out, |w| Ok(write_batches(w, &records)?))?;
    println!("wrote {} batches to {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Analyze(a) => run_analyze(a),
        Command::GenData(a) => run_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
