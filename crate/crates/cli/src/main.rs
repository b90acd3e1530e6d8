//! Command-line driver: binds configuration files and flags to the training,
//! evaluation, ablation, robustness, and profiling drivers.
//!
//! Every run writes a frozen copy of its fully resolved configuration next to
//! its outputs; re-running from that copy reproduces the run bit-for-bit on
//! the same platform.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use s2tx_core::config::{self, ExperimentConfig};
use s2tx_core::data::{load_csv, synth_global_local, Coupling, CsvSchema, DatasetKind, SeriesFrame, Split};
use s2tx_core::model::{load_checkpoint, model_from_checkpoint, save_checkpoint, S2TXModel};
use s2tx_core::profile::{sweep, write_plot_csv, PeakAlloc, ProfileKind, ProfileOptions, Regime};
use s2tx_core::train_eval::{
    self, append_jsonl, evaluate, prepare, run_ablation, run_robustness, RunRecord,
};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

#[derive(Parser)]
#[command(name = "s2tx", version, about = "Multi-scale state-space transformer forecaster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, evaluate it on the test split, write a checkpoint.
    Train(CommonArgs),
    /// Evaluate an existing checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Train every architecture variant and compare test MSE.
    Ablate(AblateArgs),
    /// Stress a trained model with bursts of missing input values.
    Robust(RobustArgs),
    /// Runtime/peak-memory scaling sweep over look-back lengths.
    Profile(ProfileArgs),
    /// Generate a synthetic benchmark CSV.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset name (etth1, etth2, ettm1, ettm2, exchange, weather, ecl) or a
    /// CSV path.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// full | no_cross_variate | no_cross_attention | neither
    #[arg(long)]
    variant: Option<String>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<String>,
    /// Extra config overrides as key=value; explicit flags win over these.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the dataset location (defaults to the checkpoint's).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated forecast horizons to average over.
    #[arg(long, default_value = "96,192,336,720")]
    horizons: String,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to stress; trains a fresh model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated missing-value ratios (fractions).
    #[arg(long, default_value = "0,0.04,0.08,0.16,0.24,0.32,0.40")]
    ratios: String,
    #[arg(long, default_value_t = 4)]
    burst_len: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated look-back lengths, ascending.
    #[arg(long, default_value = "336,672,1344,2688")]
    lengths: String,
    /// fixed-patch-number | fixed-stride
    #[arg(long, default_value = "fixed-patch-number")]
    regime: String,
    /// Comma-separated kinds: s2tx, sst_like, transformer, mamba.
    #[arg(long, default_value = "s2tx,sst_like,transformer,mamba")]
    kinds: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    variates: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    variates: usize,
    #[arg(long, default_value_t = 8000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = -0.9, allow_hyphen_values = true)]
    cross_strength: f64,
    #[arg(long, default_value_t = 1.5)]
    regime_gain: f64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Robust(args) => cmd_robust(args),
        Cmd::Profile(args) => cmd_profile(args),
        Cmd::Synth(args) => cmd_synth(args),
    }
}

/// Flag overrides beat --set pairs, which beat the config file.
fn resolve_cfg(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for kv in &args.set {
        match kv.split_once('=') {
            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
            None => bail!("--set expects key=value, got '{kv}'"),
        }
    }
    if let Some(d) = &args.dataset {
        pairs.push(("dataset".into(), d.clone()));
    }
    if let Some(h) = args.horizon {
        pairs.push(("horizon".into(), h.to_string()));
    }
    if let Some(s) = args.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(v) = &args.variant {
        pairs.push(("variant".into(), v.clone()));
    }
    if let Some(o) = &args.out {
        pairs.push(("out_dir".into(), o.clone()));
    }
    Ok(config::resolve(args.config.as_deref(), &pairs)?)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &cfg.data_dir {
        return PathBuf::from(d);
    }
    if let Ok(d) = std::env::var("S2TX_DATA_DIR") {
        return PathBuf::from(d);
    }
    PathBuf::from("data")
}

fn dataset_path(cfg: &ExperimentConfig) -> PathBuf {
    let name = &cfg.dataset;
    if name.contains('/') || name.contains('\\') || name.ends_with(".csv") {
        return PathBuf::from(name);
    }
    match cfg.dataset_kind().file_name() {
        Some(f) => data_dir(cfg).join(f),
        None => data_dir(cfg).join(format!("{name}.csv")),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(SeriesFrame, DatasetKind)> {
    let kind = cfg.dataset_kind();
    let path = dataset_path(cfg);
    let frame = load_csv(&path, &CsvSchema::default(), kind.expected_shape())
        .with_context(|| format!("loading dataset '{}' from {}", cfg.dataset, path.display()))?;
    Ok((frame, kind))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Create `<out_dir>/<run_id>/` and freeze the resolved config inside it.
fn make_run_dir(cfg: &ExperimentConfig, tag: &str) -> Result<(PathBuf, String)> {
    let run_id = format!(
        "{}-h{}-{}-s{}-{}-{}",
        cfg.dataset.replace('/', "_").replace('\\', "_"),
        cfg.horizon,
        cfg.variant.name(),
        cfg.seed,
        tag,
        unix_now()
    );
    let dir = PathBuf::from(&cfg.out_dir).join(&run_id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved.kv"), cfg.to_kv_string())?;
    Ok((dir, run_id))
}

fn write_metrics(
    dir: &Path,
    run_id: &str,
    cfg: &ExperimentConfig,
    split_name: &str,
    report: &s2tx_core::MetricReport,
) -> Result<()> {
    let record = RunRecord {
        run_id: run_id.to_string(),
        dataset: cfg.dataset.clone(),
        horizon: cfg.horizon,
        variant: cfg.variant.name().to_string(),
        mse: report.mse,
        mae: report.mae,
        wall_clock_s: report.wall_clock_s,
    };
    append_jsonl(&dir.join("metrics.jsonl"), &record)?;
    let mut text = format!(
        "run: {run_id}\nsplit: {split_name}\nwindows: {}\nmse: {:.6}\nmae: {:.6}\nwall_clock_s: {:.2}\n",
        report.windows, report.mse, report.mae, report.wall_clock_s
    );
    text.push_str("per_step_mse (first 8): ");
    for v in report.per_step_mse.iter().take(8) {
        text.push_str(&format!("{v:.4} "));
    }
    text.push('\n');
    std::fs::write(dir.join("metrics.txt"), text)?;
    Ok(())
}

fn test_stream<'a>(
    data: &'a train_eval::PreparedData,
    cfg: &ExperimentConfig,
) -> Result<s2tx_core::data::WindowStream<'a>> {
    Ok(s2tx_core::data::make_windows(
        &data.frame,
        &data.split,
        Split::Test,
        &cfg.window_spec(),
        cfg.eval_stride,
        cfg.batch_size,
    )?)
}

fn cmd_train(args: CommonArgs) -> Result<()> {
    let cfg = resolve_cfg(&args)?;
    let (frame, kind) = load_dataset(&cfg)?;
    let data = prepare(&frame, kind)?;
    let (dir, run_id) = make_run_dir(&cfg, "train")?;

    let mut model = S2TXModel::new(&cfg)?;
    println!(
        "training {} on {} (H={}, {} parameters)",
        cfg.variant.name(),
        cfg.dataset,
        cfg.horizon,
        model.param_count()
    );
    let (state, adam) = train_eval::train(&mut model, &data)?;
    for e in &state.history {
        println!(
            "epoch {:>3}: train_loss {:.6} val_mse {:.6} ({:.1}s)",
            e.epoch, e.train_loss, e.val_mse, e.wall_s
        );
    }
    println!("best epoch {} (val_mse {:.6})", state.best_epoch, state.best_val);

    let report = evaluate(&model, test_stream(&data, &cfg)?)?;
    println!("test mse {:.6} mae {:.6} over {} windows", report.mse, report.mae, report.windows);

    save_checkpoint(&dir.join("model.ckpt"), &model, Some(&adam))?;
    write_metrics(&dir, &run_id, &cfg, "test", &report)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (model, _) = model_from_checkpoint(&ckpt)?;
    let mut cfg = model.cfg.clone();
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    let (frame, kind) = load_dataset(&cfg)?;
    let data = prepare(&frame, kind)?;
    let (dir, run_id) = make_run_dir(&cfg, "evaluate")?;
    let report = evaluate(&model, test_stream(&data, &cfg)?)?;
    println!("test mse {:.6} mae {:.6} over {} windows", report.mse, report.mae, report.windows);
    write_metrics(&dir, &run_id, &cfg, "test", &report)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_cfg(&args.common)?;
    let horizons = parse_usize_list(&args.horizons)?;
    let (frame, _) = load_dataset(&cfg)?;
    let (dir, run_id) = make_run_dir(&cfg, "ablate")?;

    let rows = run_ablation(&cfg, &frame, &horizons)?;
    let mut table = format!("{:<20}", "variant");
    for h in &horizons {
        table.push_str(&format!(" {:>10}", format!("H={h}")));
    }
    table.push_str(&format!(" {:>10}\n", "avg"));
    for row in &rows {
        table.push_str(&format!("{:<20}", row.variant.name()));
        for (_, mse) in &row.per_horizon {
            table.push_str(&format!(" {:>10.6}", mse));
        }
        table.push_str(&format!(" {:>10.6}\n", row.avg_mse));
        for (h, mse) in &row.per_horizon {
            let record = RunRecord {
                run_id: run_id.clone(),
                dataset: cfg.dataset.clone(),
                horizon: *h,
                variant: row.variant.name().to_string(),
                mse: *mse,
                mae: f64::NAN,
                wall_clock_s: 0.0,
            };
            append_jsonl(&dir.join("metrics.jsonl"), &record)?;
        }
    }
    print!("{table}");
    std::fs::write(dir.join("ablation.txt"), &table)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_robust(args: RobustArgs) -> Result<()> {
    let cfg = resolve_cfg(&args.common)?;
    let ratios = parse_f64_list(&args.ratios)?;
    let (model, data, dir, run_id) = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (model, _) = model_from_checkpoint(&ckpt)?;
            let run_cfg = model.cfg.clone();
            let (frame, kind) = load_dataset(&run_cfg)?;
            let data = prepare(&frame, kind)?;
            let (dir, run_id) = make_run_dir(&run_cfg, "robust")?;
            (model, data, dir, run_id)
        }
        None => {
            println!("no checkpoint given; training a fresh model first");
            let (frame, kind) = load_dataset(&cfg)?;
            let data = prepare(&frame, kind)?;
            let (dir, run_id) = make_run_dir(&cfg, "robust")?;
            let mut model = S2TXModel::new(&cfg)?;
            train_eval::train(&mut model, &data)?;
            save_checkpoint(&dir.join("model.ckpt"), &model, None)?;
            (model, data, dir, run_id)
        }
    };

    let rows = run_robustness(&model, &data, &ratios, args.burst_len, model.cfg.seed)?;
    let mut table = format!("{:>10} {:>12} {:>14}\n", "miss_ratio", "mse", "degradation_%");
    for r in &rows {
        table.push_str(&format!("{:>9.0}% {:>12.6} {:>13.2}%\n", r.miss_ratio * 100.0, r.mse, r.degradation_pct));
    }
    print!("{table}");
    std::fs::write(dir.join("robustness.txt"), &table)?;
    let _ = run_id;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let cfg = resolve_cfg(&args.common)?;
    let lengths = parse_usize_list(&args.lengths)?;
    let regime = Regime::parse(&args.regime.replace('-', "_"))?;
    let kinds = args
        .kinds
        .split(',')
        .map(|k| ProfileKind::parse(k.trim()))
        .collect::<s2tx_core::Result<Vec<_>>>()?;
    let (dir, _) = make_run_dir(&cfg, "profile")?;

    let opts = ProfileOptions {
        repetitions: args.reps,
        variates: args.variates,
        seed: cfg.seed,
        ..Default::default()
    };
    let points = sweep(&kinds, &lengths, regime, &cfg, &opts)?;
    let table = s2tx_core::profile::render_table(&points);
    print!("{table}");
    if !PeakAlloc::installed() {
        println!("note: peak-memory tracking inactive");
    }
    std::fs::write(dir.join("profile.txt"), &table)?;
    std::fs::write(dir.join("profile.jsonl"), s2tx_core::profile::to_jsonl(&points))?;
    write_plot_csv(&dir.join("profile.csv"), &points)?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let frame = synth_global_local(
        args.variates,
        args.steps,
        args.seed,
        Coupling { cross_strength: args.cross_strength, regime_gain: args.regime_gain },
    );
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    frame.write_csv(&args.out)?;
    println!(
        "wrote {} steps x {} variates to {}",
        args.steps,
        args.variates,
        args.out.display()
    );
    Ok(())
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad number '{p}'")))
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad number '{p}'")))
        .collect()
}
