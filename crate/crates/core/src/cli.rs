//! Command-line entry point. `run` parses argv, dispatches a subcommand and
//! maps failures to exit codes: 2 for usage errors, 1 for everything else.
//! Failures also print one JSON error line on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::embedstore::{fit_normalizer, load_dataset, Split};
use crate::error::{Error, Result};
use crate::evaluator::evaluate_checkpoint;
use crate::explain::{explain_prediction, export_prototypes, self_classify_prototypes};
use crate::initkit::KMeansConfig;
use crate::protonet::AdaptorKind;
use crate::synthlab::{gen_blobs, gradient_oracle, kmeans_oracle, BlobSpec};
use crate::trainer::{initial_model, load_checkpoint, save_checkpoint, train, write_metrics_csv, TrainConfig};

pub const SEED_ENV: &str = "PROTOSCOPE_SEED";
/// The command-line default for `--steps`; the library default is the full-length run.
pub const CLI_DEFAULT_STEPS: u64 = 10_000;

pub const CHECKPOINT_FILE: &str = "checkpoint.pckp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PROTOS_DIR: &str = "protos";
pub const EXPLAIN_DIR: &str = "explain";

#[derive(Debug, Parser)]
#[command(name = "protoscope", version, about = "Prototype-network classifier over segment embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.pckp and metrics.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes eval.json, confusion.csv and predictions.csv.
    Eval(EvalArgs),
    /// Explain predictions; writes explain/<track id>.json.
    Explain(ExplainArgs),
    /// Export prototypes as PEMB files plus index.json under protos/.
    ExportProtos(ExportArgs),
    /// Run the gradient and k-means oracle suites.
    SelfCheck(SelfCheckArgs),
    /// Generate a Gaussian-blob dataset.
    SynthData(SynthArgs),
    /// Run the k-means initialization and summarize it.
    InspectInit(TrainArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    prototypes_per_class: Option<usize>,
    #[arg(long, value_parser = parse_adaptor)]
    adaptor: Option<AdaptorKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    validate_every: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Restrict to these track ids (repeatable).
    #[arg(long = "track")]
    tracks: Vec<String>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Adds nearest train segments to the index.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelfCheckArgs {
    /// Also audit this checkpoint's prototypes.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    gradient_cases: usize,
    #[arg(long, default_value_t = 50)]
    kmeans_instances: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    n_classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 10.0)]
    center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 4)]
    segments_per_track: usize,
}

fn parse_adaptor(s: &str) -> std::result::Result<AdaptorKind, String> {
    match s {
        "identity" => Ok(AdaptorKind::Identity),
        "residual-mlp" | "residual_mlp" => Ok(AdaptorKind::ResidualMlp),
        "set-attention" | "set_attention" => Ok(AdaptorKind::SetAttention),
        _ => Err("expected identity, residual-mlp or set-attention".into()),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Module(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Module(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = e.print();
            return report_failure(Failure::Usage(e.kind().to_string()));
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => report_failure(f),
    }
}

fn report_failure(f: Failure) -> i32 {
    let (code, kind, message) = match f {
        Failure::Usage(m) => (2, "usage", m),
        Failure::Module(e) => (1, e.kind(), e.to_string()),
    };
    eprintln!("{}", json!({"error": {"kind": kind, "message": message, "exit_code": code}}));
    code
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Explain(args) => cmd_explain(args),
        Command::ExportProtos(args) => cmd_export(args),
        Command::SelfCheck(args) => cmd_self_check(args),
        Command::SynthData(args) => cmd_synth(args),
        Command::InspectInit(args) => cmd_inspect_init(args),
    }
}

/// Training configuration plus dataset and output paths, resolved from
/// defaults, `PROTOSCOPE_SEED`, a config file and flags, in rising precedence.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            train: TrainConfig {
                total_steps: CLI_DEFAULT_STEPS,
                ..TrainConfig::default()
            },
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one key; `-` and `_` are interchangeable in key names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key.replace('-', "_").as_str() {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => t.seed = parse_value(key, value)?,
            "lambda" => t.lambda = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "steps" | "total_steps" => t.total_steps = parse_value(key, value)?,
            "peak_lr" => t.peak_lr = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "validate_every" => t.validate_every = parse_value(key, value)?,
            "adaptor" => t.adaptor = value.parse()?,
            "prototypes_per_class" => t.prototypes_per_class = parse_value(key, value)?,
            "proto_loss_target" => {
                t.proto_loss_target = serde_json::from_value(json!(value))
                    .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))?
            }
            "kmeans_restarts" => t.kmeans.restarts = parse_value(key, value)?,
            "kmeans_max_iter" => t.kmeans.max_iter = parse_value(key, value)?,
            "kmeans_tol" => t.kmeans.tol = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The resolved configuration in the same `key=value` form.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut pairs: Vec<(&str, String)> = Vec::new();
        if let Some(m) = &self.manifest {
            pairs.push(("manifest", m.display().to_string()));
        }
        if let Some(o) = &self.out {
            pairs.push(("out", o.display().to_string()));
        }
        pairs.extend([
            ("seed", t.seed.to_string()),
            ("lambda", t.lambda.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.total_steps.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("validate_every", t.validate_every.to_string()),
            ("adaptor", t.adaptor.as_str().to_string()),
            ("prototypes_per_class", t.prototypes_per_class.to_string()),
            (
                "proto_loss_target",
                serde_json::to_value(t.proto_loss_target)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            ),
            ("kmeans_restarts", t.kmeans.restarts.to_string()),
            ("kmeans_max_iter", t.kmeans.max_iter.to_string()),
            ("kmeans_tol", t.kmeans.tol.to_string()),
        ]);
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(parse_value(SEED_ENV, v.trim())?)),
        Err(_) => Ok(None),
    }
}

fn resolve(args: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(seed) = env_seed()? {
        rc.train.seed = seed;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rc.apply_text(&text)?;
    }
    let t = &mut rc.train;
    if let Some(v) = &args.manifest {
        rc.manifest = Some(v.clone());
    }
    if let Some(v) = &args.out {
        rc.out = Some(v.clone());
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.prototypes_per_class {
        t.prototypes_per_class = v;
    }
    if let Some(v) = args.adaptor {
        t.adaptor = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.steps {
        t.total_steps = v;
    }
    if let Some(v) = args.peak_lr {
        t.peak_lr = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.validate_every {
        t.validate_every = v;
    }
    rc.train.validate()?;
    Ok(rc)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required (as a flag or config key)")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Echoes the resolved arguments of a subcommand as `<name>.config`.
fn echo_config(dir: &Path, name: &str, pairs: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        let _ = writeln!(text, "{k}={v}");
    }
    write_text(&dir.join(format!("{name}.config")), &text)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let rc = resolve(&args)?;
    let manifest = require(&rc.manifest, "manifest")?;
    let out = require(&rc.out, "out")?;
    let dataset = load_dataset(manifest)?;
    ensure_dir(out)?;
    write_text(&out.join("train.config"), &rc.to_text())?;
    let outcome = train(&rc.train, &dataset)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    write_metrics_csv(out.join(METRICS_FILE), &outcome.metrics)?;
    println!(
        "{}",
        json!({
            "checkpoint": out.join(CHECKPOINT_FILE),
            "best_step": outcome.checkpoint.step,
            "val_loss": outcome.checkpoint.val_loss,
            "steps": rc.train.total_steps,
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.manifest)?;
    let report = evaluate_checkpoint(&checkpoint, &dataset, args.split)?;
    ensure_dir(&args.out)?;
    echo_config(
        &args.out,
        "eval",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("split", args.split.as_str().to_string()),
        ],
    )?;
    report.write_to(&args.out)?;
    println!(
        "{}",
        json!({
            "split": args.split,
            "n_tracks": report.n_tracks,
            "class_normalized_accuracy": report.class_normalized_accuracy,
            "accuracy": report.accuracy,
            "excluded_classes": report.excluded_classes,
        })
    );
    Ok(())
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c })
        .collect()
}

fn cmd_explain(args: ExplainArgs) -> CliResult<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.manifest)?;
    dataset.ensure_label_space(&checkpoint.labels)?;
    let dir = args.out.join(EXPLAIN_DIR);
    ensure_dir(&dir)?;
    echo_config(
        &args.out,
        "explain",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("split", args.split.as_str().to_string()),
            ("top_k", args.top_k.to_string()),
            ("track", args.tracks.join(",")),
        ],
    )?;
    let mut written = 0;
    for (_, record) in dataset.split(args.split) {
        if !args.tracks.is_empty() && !args.tracks.contains(&record.id) {
            continue;
        }
        let e = explain_prediction(
            &checkpoint.model,
            &checkpoint.normalizer,
            checkpoint.labels.classes(),
            record,
            args.top_k,
        )?;
        let path = dir.join(format!("{}.json", file_stem_for(&record.id)));
        write_text(&path, &serde_json::to_string_pretty(&e).map_err(Error::from)?)?;
        written += 1;
    }
    if written == 0 {
        return Err(Error::Validation(format!("no matching tracks in split {}", args.split.as_str())).into());
    }
    println!("{}", json!({"explanations": written, "dir": dir}));
    Ok(())
}

fn cmd_export(args: ExportArgs) -> CliResult<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = args.manifest.as_ref().map(load_dataset).transpose()?;
    ensure_dir(&args.out)?;
    echo_config(
        &args.out,
        "export-protos",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            (
                "manifest",
                args.manifest.as_ref().map(|m| m.display().to_string()).unwrap_or_default(),
            ),
        ],
    )?;
    let dir = args.out.join(PROTOS_DIR);
    let index = export_prototypes(&checkpoint, dataset.as_ref(), &dir)?;
    println!(
        "{}",
        json!({"prototypes": index.prototypes.len(), "dir": dir, "checkpoint_hash": index.checkpoint_hash})
    );
    Ok(())
}

fn cmd_self_check(args: SelfCheckArgs) -> CliResult<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let grad = gradient_oracle(args.gradient_cases, seed)?;
    let km = kmeans_oracle(args.kmeans_instances, seed, &KMeansConfig::default())?;
    println!(
        "{} gradient oracle: {} cases, max relative error {:.3e}",
        if grad.passed { "PASS" } else { "FAIL" },
        grad.cases.len(),
        grad.max_rel_err
    );
    println!(
        "{} k-means oracle: {} instances, max inertia gap {:.3e}",
        if km.passed { "PASS" } else { "FAIL" },
        km.cases.len(),
        km.max_gap
    );
    let audit = match &args.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let audit = self_classify_prototypes(&ck.model)?;
            println!(
                "prototype self-classification: {:.4} ({} misclassified)",
                audit.fraction_correct,
                audit.misclassified.len()
            );
            Some(audit)
        }
        None => None,
    };
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        echo_config(
            out,
            "self-check",
            &[
                ("seed", seed.to_string()),
                ("gradient_cases", args.gradient_cases.to_string()),
                ("kmeans_instances", args.kmeans_instances.to_string()),
                (
                    "checkpoint",
                    args.checkpoint.as_ref().map(|c| c.display().to_string()).unwrap_or_default(),
                ),
            ],
        )?;
        let body = json!({"gradient": grad, "kmeans": km, "prototypes": audit});
        write_text(
            &out.join("self_check.json"),
            &serde_json::to_string_pretty(&body).map_err(Error::from)?,
        )?;
    }
    if grad.passed && km.passed {
        Ok(())
    } else {
        Err(Error::Validation("oracle suite failed".into()).into())
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = BlobSpec {
        n_classes: args.n_classes,
        per_class: args.per_class,
        dim: args.dim,
        center_scale: args.center_scale,
        noise_std: args.noise_std,
        segments_per_track: args.segments_per_track,
        seed,
    };
    let manifest = gen_blobs(&spec, &args.out)?;
    println!("{}", json!({"manifest": manifest, "tracks": spec.n_classes * spec.per_class}));
    Ok(())
}

fn cmd_inspect_init(args: TrainArgs) -> CliResult<()> {
    let rc = resolve(&args)?;
    let manifest = require(&rc.manifest, "manifest")?;
    let dataset = load_dataset(manifest)?;
    let normalizer = fit_normalizer(&dataset)?;
    let (_, summary) = initial_model(&rc.train, &dataset, &normalizer)?;
    for c in &summary {
        let mean = c.prototype_center_distances.iter().sum::<f64>() / c.prototype_center_distances.len() as f64;
        println!(
            "{:<20} rows={:<6} inertia={:<12.6} iterations={:<4} mean prototype-center distance={:.6}",
            c.label, c.n_rows, c.inertia, c.iterations, mean
        );
    }
    if let Some(out) = &rc.out {
        ensure_dir(out)?;
        write_text(&out.join("inspect-init.config"), &rc.to_text())?;
        write_text(
            &out.join("init.json"),
            &serde_json::to_string_pretty(&summary).map_err(Error::from)?,
        )?;
    }
    Ok(())
}
