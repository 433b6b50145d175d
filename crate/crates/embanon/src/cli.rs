//! The `embanon` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 malformed or incompatible
//! data/config files, 3 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::baselines::LaplaceConfig;
use crate::datamodel::{
    generate_synthetic, manifest_path, read_corpus, read_manifest, write_corpus, SyntheticConfig,
};
use crate::harness::{
    bench, emit_report, render, BenchTarget, ExperimentConfig, HarnessError, ReportFormat,
};
use crate::probes::{content_labels, run_probe_task, speaker_labels, Labels, ProbeConfig};
use crate::transformer::{self, PrivacyTransformer, PrivacyTransformerConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "embanon", version, about = "Anonymize layer-wise speech embeddings and measure the privacy/utility trade-off")]
struct Cli {
    /// Base seed for randomized steps of the chosen subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker cap; recorded in outputs, execution is single-threaded.
    #[arg(long, global = true, default_value_t = 4)]
    threads: usize,
    /// off | error | warn | info | debug | trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding corpus (.pemb).
    Gen(GenArgs),
    /// Train a privacy transformer on a corpus and save a checkpoint.
    Train(TrainArgs),
    /// Convert a corpus with a checkpoint or the Laplace baseline.
    Anonymize(AnonymizeArgs),
    /// Train and evaluate a single probe task on a corpus.
    Probe(ProbeArgs),
    /// Run a full experiment from a TOML/JSON config.
    Eval(EvalArgs),
    /// Time the anonymization pass over a fixed utterance set.
    Bench(BenchArgs),
    /// Re-render a saved report.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 40)]
    speakers: u32,
    #[arg(long, default_value_t = 200)]
    contents: u32,
    #[arg(long, default_value_t = 4)]
    layers: u32,
    #[arg(long, default_value_t = 32)]
    dim: u32,
    #[arg(long, default_value_t = 8)]
    speaker_latent: u32,
    #[arg(long, default_value_t = 8)]
    content_latent: u32,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Use the full-size architecture (d_spk 256, d_layer 128, 5 layers,
    /// 8 heads, 4608 hidden) instead of the compact one.
    #[arg(long, conflicts_with_all = ["d_spk", "d_layer", "enc_layers", "heads", "d_ff"])]
    full_size: bool,
    #[arg(long, default_value_t = 16)]
    d_spk: u32,
    #[arg(long, default_value_t = 8)]
    d_layer: u32,
    #[arg(long, default_value_t = 2)]
    enc_layers: u32,
    #[arg(long, default_value_t = 4)]
    heads: u32,
    /// 0 means 4x the model width.
    #[arg(long, default_value_t = 0)]
    d_ff: u32,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

#[derive(Args)]
struct AnonymizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Privacy-transformer checkpoint to apply.
    #[arg(long, conflicts_with = "laplace", required_unless_present = "laplace")]
    checkpoint: Option<PathBuf>,
    /// Apply the Laplace baseline with this epsilon instead.
    #[arg(long, value_name = "EPSILON")]
    laplace: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// sid | content<k> | manifest:<key>
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir (default ".").
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, conflicts_with = "laplace")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "EPSILON")]
    laplace: Option<f64>,
    /// Time the identity (original) arm.
    #[arg(long, conflicts_with_all = ["checkpoint", "laplace"])]
    original: bool,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Harness(HarnessError),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Harness(e) => {
                if e.is_data_error() {
                    2
                } else {
                    3
                }
            }
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Harness(e) => e.to_string(),
        }
    }
}

impl<E: Into<HarnessError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Harness(e.into())
    }
}

/// Parses and runs; returns the process exit code.
pub fn run(args: impl Iterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    init_logging(&cli.log_level);

    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Anonymize(args) => cmd_anonymize(&cli, args),
        Command::Probe(args) => cmd_probe(&cli, args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(&cli, args),
        Command::Report(args) => cmd_report(args),
    };

    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn init_logging(level: &str) {
    let filter = match level {
        "off" => log::LevelFilter::Off,
        "error" => log::LevelFilter::Error,
        "warn" => log::LevelFilter::Warn,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        "trace" => log::LevelFilter::Trace,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new().filter_level(filter).try_init();
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<(), CliError> {
    let cfg = SyntheticConfig {
        n_speakers: args.speakers,
        n_contents: args.contents,
        l: args.layers,
        d: args.dim,
        speaker_latent: args.speaker_latent,
        content_latent: args.content_latent,
        noise_sigma: args.noise,
        seed: cli.seed,
    };
    let corpus = generate_synthetic(&cfg)?;
    write_corpus(&corpus, &args.out)?;
    println!(
        "wrote {} records (L={}, d={}, {} speakers) to {}",
        corpus.records.len(),
        corpus.l,
        corpus.d,
        corpus.speakers.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let n_speakers = corpus.speakers.len() as u32;
    let model_cfg = if args.full_size {
        PrivacyTransformerConfig::full_size(corpus.l, corpus.d, n_speakers, cli.seed)
    } else {
        let mut cfg = PrivacyTransformerConfig {
            l: corpus.l,
            d: corpus.d,
            d_spk: args.d_spk,
            d_layer: args.d_layer,
            n_layers: args.enc_layers,
            n_heads: args.heads,
            d_ff: args.d_ff,
            n_speakers,
            dropout: args.dropout,
            seed: cli.seed,
        };
        if cfg.d_ff == 0 {
            cfg.d_ff = 4 * (cfg.d + cfg.d_spk + cfg.d_layer);
        }
        cfg
    };

    let mut model = PrivacyTransformer::init(model_cfg, &corpus.speakers)?;
    let opts = TrainOptions {
        epochs: args.epochs,
        lr: args.lr,
        batch: args.batch,
        val_fraction: args.val_fraction,
        seed: cli.seed,
    };
    let report = transformer::train(&mut model, &corpus, &opts)?;
    transformer::save(&model, &args.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(HarnessError::from)?
    );
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}

fn cmd_anonymize(cli: &Cli, args: &AnonymizeArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let out = if let Some(eps) = args.laplace {
        crate::baselines::laplace_anonymize_corpus(&corpus, &LaplaceConfig::new(eps, cli.seed))?
    } else {
        let checkpoint = args.checkpoint.as_ref().expect("clap enforces the group");
        let model = transformer::load(checkpoint)?;
        model.anonymize_corpus(&corpus, cli.seed)?
    };
    write_corpus(&out, &args.out)?;
    println!(
        "anonymized {} records to {}",
        out.records.len(),
        args.out.display()
    );
    Ok(())
}

fn parse_task(
    task: &str,
    corpus: &crate::datamodel::Corpus,
    input: &std::path::Path,
) -> Result<Labels, CliError> {
    if task == "sid" {
        return Ok(speaker_labels(corpus));
    }
    if let Some(k) = task.strip_prefix("content") {
        let k: u32 = k
            .parse()
            .map_err(|_| CliError::Usage(format!("bad task {task:?}: expected content<k>")))?;
        if k == 0 {
            return Err(CliError::Usage("content task needs k > 0".into()));
        }
        return Ok(content_labels(corpus, k));
    }
    if let Some(key) = task.strip_prefix("manifest:") {
        let manifest = read_manifest(manifest_path(input))?.ok_or_else(|| {
            HarnessError::Config(format!("no manifest sidecar next to {}", input.display()))
        })?;
        return manifest
            .label_maps
            .get(key)
            .cloned()
            .ok_or_else(|| HarnessError::Config(format!("manifest has no label map {key:?}")).into());
    }
    Err(CliError::Usage(format!(
        "unknown task {task:?}: expected sid, content<k>, or manifest:<key>"
    )))
}

fn cmd_probe(cli: &Cli, args: &ProbeArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let labels = parse_task(&args.task, &corpus, &args.input)?;
    let cfg = ProbeConfig {
        epochs: args.epochs,
        patience: args.patience,
        batch: args.batch,
        lr: args.lr,
        test_fraction: args.test_fraction,
        val_fraction: args.val_fraction,
        seed: cli.seed,
        split_seed: cli.seed,
        ..ProbeConfig::default()
    };
    let outcome = run_probe_task(&corpus, &labels, &cfg)?;
    let json = serde_json::to_string_pretty(&outcome.metrics).map_err(HarnessError::from)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(HarnessError::from)?,
        None => println!("{json}"),
    }
    log::info!(
        "task {} on {}: {} train / {} test records",
        args.task,
        args.input.display(),
        outcome.train_records,
        outcome.test_records
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let report = crate::harness::run_experiment(&cfg)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(HarnessError::from)?;
    emit_report(&report, ReportFormat::Json, out_dir.join("report.json"))?;
    emit_report(&report, ReportFormat::Markdown, out_dir.join("report.md"))?;
    println!("{}", crate::harness::render_markdown(&report));
    println!(
        "wrote {} and {}",
        out_dir.join("report.json").display(),
        out_dir.join("report.md").display()
    );
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<(), CliError> {
    let corpus = read_corpus(&args.input)?;
    let laplace_cfg = args.laplace.map(|eps| LaplaceConfig::new(eps, cli.seed));
    let model = match &args.checkpoint {
        Some(path) => Some(transformer::load(path)?),
        None => None,
    };
    let target = if let Some(cfg) = &laplace_cfg {
        BenchTarget::Laplace(cfg)
    } else if let Some(m) = &model {
        BenchTarget::Transformer(m)
    } else if args.original {
        BenchTarget::Identity
    } else {
        return Err(CliError::Usage(
            "bench needs one of --checkpoint, --laplace, or --original".into(),
        ));
    };
    let result = bench(&target, &corpus, args.n, args.batch, cli.threads, cli.seed)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&result).map_err(HarnessError::from)?
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let format: ReportFormat = args.format.parse().map_err(CliError::Usage)?;
    let text = std::fs::read_to_string(&args.input).map_err(HarnessError::from)?;
    let report: crate::harness::ExperimentReport =
        serde_json::from_str(&text).map_err(HarnessError::from)?;
    let rendered = render(&report, format)?;
    match &args.out {
        Some(path) => std::fs::write(path, rendered).map_err(HarnessError::from)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
