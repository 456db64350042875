use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value as Json;

use cwcf::dataset::{generate_synthetic, load_dataset, Dataset, SplitTag, SynthConfig};
use cwcf::eval::{evaluate, export_trace, EvalMode, EvalPoint, Frontier};
use cwcf::model::Model;
use cwcf::schema::{parse_schema, Schema};
use cwcf::training::{
    evaluate_hmil_full, evaluate_rs, pretrain_classifier, train, train_hmil_full, train_rs_baseline, TrainConfig,
};

#[derive(Parser)]
#[command(name = "cwcf", version, about = "Cost-sensitive classification of set-structured records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the classifier on random masks, then train the acquisition policy.
    Train(TrainArgs),
    /// Pretrain the classifier only.
    Pretrain(TrainArgs),
    /// Evaluate a checkpoint's acquisition policy on a split.
    Evaluate(EvalArgs),
    /// Random feature selection under a cost budget.
    BaselineRs(BaselineRsArgs),
    /// Classifier that observes every feature.
    BaselineHmil(TrainArgs),
    /// Non-dominated points of a metrics file.
    Pareto(ParetoArgs),
    /// Export one episode as a JSON trace.
    Trace(TraceArgs),
    /// Write a synthetic schema and samples file.
    GenSynthetic(GenArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Schema JSON. Defaults to the checkpoint's schema where one is given.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Samples, one JSON object per line.
    #[arg(long)]
    data: PathBuf,
    /// Split sizes; default 60/20/20 of the file.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON training configuration; keys override the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh model (skips pretraining for `train`).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: SplitTag,
    #[arg(long, default_value = "greedy")]
    mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lambda used for the reward column; defaults to the training value stored next to the checkpoint, else 0.
    #[arg(long)]
    lambda: Option<f64>,
    /// Append the point to this metrics file.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineRsArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    budget: f64,
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only points of this algorithm.
    #[arg(long)]
    algorithm: Option<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index of the sample in the samples file.
    #[arg(long)]
    sample_index: usize,
    #[arg(long, default_value = "greedy")]
    mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 7000)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    items_min: usize,
    #[arg(long, default_value_t = 5)]
    items_max: usize,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    let doc: Json = serde_json::from_str(&read(path)?)?;
    Model::from_checkpoint(&doc).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_data(args: &DataArgs, schema: Option<Arc<Schema>>) -> Result<Dataset> {
    let schema = match (&args.schema, schema) {
        (Some(p), _) => Arc::new(parse_schema(&read(p)?).with_context(|| format!("parsing {}", p.display()))?),
        (None, Some(s)) => s,
        (None, None) => bail!("--schema is required"),
    };
    let ds = load_dataset(schema, &read(&args.data)?).with_context(|| format!("parsing {}", args.data.display()))?;
    let n = ds.samples.len();
    let counts = match (args.train, args.val, args.test) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        (None, None, None) => {
            let a = n * 6 / 10;
            let b = n * 2 / 10;
            (a, b, n - a - b)
        }
        _ => bail!("give all of --train, --val and --test, or none"),
    };
    Ok(ds.split(counts, args.split_seed)?)
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset, config and starting model shared by the training commands.
fn setup(args: &TrainArgs) -> Result<(Dataset, TrainConfig, Model, bool)> {
    let cfg = load_config(args)?;
    let init = args.init.as_deref().map(load_checkpoint).transpose()?;
    let ds = load_data(&args.data, init.as_ref().map(|m| m.schema.clone()))?;
    let from_init = init.is_some();
    let model = match init {
        Some(m) => m,
        None => Model::new(ds.schema.clone(), ds.norm.clone(), cfg.seed),
    };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    Ok((ds, cfg, model, from_init))
}

fn tagged<T: Serialize>(kind: &str, value: &T) -> Result<Json> {
    let mut v = serde_json::to_value(value)?;
    if let Json::Object(m) = &mut v {
        m.insert("kind".into(), Json::String(kind.into()));
    }
    Ok(v)
}

fn report_points(out: &Path, points: &[EvalPoint]) -> Result<()> {
    let path = out.join("metrics.jsonl");
    let _ = fs::remove_file(&path);
    for p in points {
        append_line(&path, p)?;
        eprintln!("{} {:?}: accuracy {:.4}, cost {:.3}, reward {:.4}", p.algorithm, p.split, p.accuracy, p.avg_cost, p.avg_reward);
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (ds, cfg, mut model, from_init) = setup(&args)?;
    let log = args.out.join("log.jsonl");
    let _ = fs::remove_file(&log);
    if !from_init {
        let rep = pretrain_classifier(&mut model, &ds, &cfg)?;
        append_line(&log, &serde_json::json!({"kind": "pretrain", "epochs": rep.epochs_run, "best_epoch": rep.best_epoch, "train_ce": rep.train_ce, "val_ce": rep.val_ce}))?;
    }
    let trained = train(model, &ds, &cfg, |r, _| {
        eprintln!("step {}: val reward {:.4}, accuracy {:.4}, cost {:.3}", r.step, r.val_reward, r.val_accuracy, r.val_cost)
    })?;
    for s in &trained.steps {
        append_line(&log, &tagged("step", s)?)?;
    }
    for e in &trained.episodes {
        append_line(&log, &tagged("episode", e)?)?;
    }
    for v in &trained.history {
        append_line(&log, &tagged("val", v)?)?;
    }
    write_json(&args.out.join("checkpoint.json"), &trained.model.to_checkpoint())?;
    let points = [
        evaluate(&trained.model, &ds, SplitTag::Val, cfg.lambda, EvalMode::Greedy, cfg.seed)?,
        evaluate(&trained.model, &ds, SplitTag::Test, cfg.lambda, EvalMode::Greedy, cfg.seed)?,
    ];
    report_points(&args.out, &points)
}

fn cmd_pretrain(args: TrainArgs) -> Result<()> {
    let (ds, cfg, mut model, _) = setup(&args)?;
    let rep = pretrain_classifier(&mut model, &ds, &cfg)?;
    eprintln!("pretraining ran {} epochs, best {:?}", rep.epochs_run, rep.best_epoch);
    write_json(&args.out.join("checkpoint.json"), &model.to_checkpoint())
}

fn cmd_baseline_hmil(args: TrainArgs) -> Result<()> {
    let (ds, cfg, mut model, _) = setup(&args)?;
    train_hmil_full(&mut model, &ds, &cfg)?;
    write_json(&args.out.join("checkpoint.json"), &model.to_checkpoint())?;
    let points = [
        evaluate_hmil_full(&model, &ds, SplitTag::Val, cfg.lambda)?,
        evaluate_hmil_full(&model, &ds, SplitTag::Test, cfg.lambda)?,
    ];
    report_points(&args.out, &points)
}

fn cmd_baseline_rs(args: BaselineRsArgs) -> Result<()> {
    let (ds, cfg, model, _) = setup(&args.train)?;
    let (policy, _) = train_rs_baseline(model, &ds, args.budget, &cfg)?;
    write_json(&args.train.out.join("checkpoint.json"), &policy.model.to_checkpoint())?;
    let points = [
        evaluate_rs(&policy, &ds, SplitTag::Val, cfg.lambda, cfg.seed)?,
        evaluate_rs(&policy, &ds, SplitTag::Test, cfg.lambda, cfg.seed)?,
    ];
    report_points(&args.train.out, &points)
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let ds = load_data(&args.data, Some(model.schema.clone()))?;
    let lambda = match args.lambda {
        Some(l) => l,
        None => args
            .checkpoint
            .parent()
            .map(|d| d.join("config.json"))
            .filter(|p| p.exists())
            .map(|p| -> Result<f64> { Ok(serde_json::from_str::<TrainConfig>(&read(&p)?)?.lambda) })
            .transpose()?
            .unwrap_or(0.0),
    };
    let point = evaluate(&model, &ds, args.split, lambda, args.mode, args.seed)?;
    if let Some(m) = &args.metrics {
        append_line(m, &point)?;
    }
    println!("{}", serde_json::to_string(&point)?);
    Ok(())
}

fn cmd_pareto(args: ParetoArgs) -> Result<()> {
    let mut points = Vec::new();
    for (i, line) in read(&args.input)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: EvalPoint = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        if args.algorithm.as_ref().is_none_or(|a| *a == p.algorithm) {
            points.push(p);
        }
    }
    let frontier = Frontier::new(&points);
    eprintln!("{} of {} points on the frontier", frontier.points.len(), points.len());
    write_json(&args.out, &frontier)
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let ds = load_data(&args.data, Some(model.schema.clone()))?;
    let Some(sample) = ds.samples.get(args.sample_index) else {
        bail!("sample index {} out of range (have {})", args.sample_index, ds.samples.len());
    };
    let trace = export_trace(&model, args.sample_index, sample.clone(), args.lambda, args.mode, args.seed)?;
    write_json(&args.out, &trace)
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: args.classes,
        samples: args.samples,
        items_min: args.items_min,
        items_max: args.items_max,
        distractors: args.distractors,
        ..SynthConfig::default()
    };
    let (schema, ds) = generate_synthetic(&cfg, args.seed)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("schema.json"), schema.serialize())?;
    fs::write(args.out.join("data.jsonl"), ds.to_jsonl())?;
    eprintln!("wrote {} samples to {}", ds.samples.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::BaselineRs(a) => cmd_baseline_rs(a),
        Command::BaselineHmil(a) => cmd_baseline_hmil(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Trace(a) => cmd_trace(a),
        Command::GenSynthetic(a) => cmd_gen(a),
    }
}
