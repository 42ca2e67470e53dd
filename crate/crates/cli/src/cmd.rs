//! Argument surface and command bodies for the `rtc` binary.
//!
//! Every command reads its inputs, writes fixed-name artifacts under
//! `--out-dir`, and never mutates an input file. Hyperparameters load from
//! a key=value config file; flags override single keys and the resolved
//! config is echoed next to the artifacts it produced.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rtc_core::checkpoint::Checkpoint;
use rtc_core::data::{generate, Dataset, SyntheticConfig};
use rtc_core::evaluation::{cpb_literal, report, MetricsReport, PopularitySplit, SplitRule};
use rtc_core::inference::{
    calibrate_gamma, default_gamma_grid, flat_reject_predict, rhc_predict, rtc_predict_all,
    threshold_for_rate, CompetenceLevel, Decision,
};
use rtc_core::model::{FeatureMap, NodeParams};
use rtc_core::taxonomy::Taxonomy;
use rtc_core::training::{epoch_log_csv, train, TrainConfig, TrainError, TrainedModel};

// ---------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Flag combinations clap cannot express (exit 2, like clap itself).
    Usage(String),
    /// Unreadable or invalid inputs: files, configs, values (exit 3).
    Input(String),
    /// Training produced non-finite losses (exit 4).
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Input(msg) | CliError::Diverged(msg) => {
                f.write_str(msg)
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

macro_rules! input_errors {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}
input_errors!(
    rtc_core::taxonomy::TaxonomyError,
    rtc_core::data::DataError,
    rtc_core::checkpoint::CheckpointError,
    rtc_core::model::ModelError,
    rtc_core::evaluation::EvalError,
    rtc_core::inference::InferenceError,
    std::io::Error
);

// ---------------------------------------------------------------------
// argument surface
// ---------------------------------------------------------------------

const FILES_HELP: &str = "\
Fixed artifact names under --out-dir:
  synth      taxonomy.tsv, train.csv, val.csv, test.csv, synth_config.txt
  train      checkpoint.json, train_log.csv, train_config.txt
  calibrate  gamma.txt, gamma_scan.csv
  predict    predictions.csv
  eval       metrics.txt, metrics.json
  compare    deep/ and flat/ model dirs, gamma.txt, gamma_scan.csv,
             <baseline>.metrics.{txt,json}, rate_<pct>/<baseline>.metrics.*,
             train_config.txt, summary.csv

Exit codes: 0 ok, 2 usage, 3 invalid input, 4 training divergence.";

#[derive(Parser)]
#[command(name = "rtc", version, about = "Taxonomic classification with rejection", after_help = FILES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic long-tailed benchmark
    Synth(SynthArgs),
    /// Fit a model by SGD on cut-sampling and node-consistency losses
    Train(TrainArgs),
    /// Pick the competence level with the best validation CPB
    Calibrate(CalibrateArgs),
    /// Write per-sample decisions at a fixed operating point
    Predict(PredictArgs),
    /// Score decisions with CPB, accuracy, and depth metrics
    Eval(EvalArgs),
    /// Train and score every baseline at matched rejection rates
    Compare(CompareArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// key=value generator config; flags below override single keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Children per level, e.g. 4,4,4
    #[arg(long)]
    branching: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    class_sep: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Tail-to-head train count ratio in (0, 1]
    #[arg(long)]
    imbalance_factor: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    /// Training samples (id,label,f0,f1,... rows)
    #[arg(long)]
    train: PathBuf,
    /// key=value training config; flags below override single keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Collapse the taxonomy to its leaves first (flat baseline model)
    #[arg(long)]
    flatten: bool,
    /// Keep rate of the per-node cut sampler
    #[arg(long)]
    p: Option<f64>,
    /// Weight of the sampled-cut loss term
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long, value_parser = ["identity", "linear"])]
    feature_map: Option<String>,
    /// Output width of the linear feature map
    #[arg(long)]
    feature_dim: Option<usize>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated candidate levels; default 0,0.05,...,1
    #[arg(long)]
    gamma_grid: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Baseline::DeepRtc)]
    baseline: Baseline,
    /// Fixed competence level (or confidence threshold for rp)
    #[arg(long)]
    gamma: Option<f64>,
    /// Calibrate over this grid on --val instead of fixing --gamma
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Baseline::DeepRtc)]
    baseline: Baseline,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gamma_grid: Option<String>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Training samples; enables many/medium/few metric buckets
    #[arg(long)]
    train: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// key=value training config shared by every model
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated rejection rates to match across baselines
    #[arg(long, default_value = "0.05,0.1,0.2")]
    rejection_rates: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Top-down walk with per-node rejection on the hierarchical model
    DeepRtc,
    /// Flat argmax over leaves, never rejects
    Flat,
    /// Bottom-up mass walk over a flat model's leaf posterior
    Rhc,
    /// Flat argmax that rejects to the root below a confidence threshold
    Rp,
}

impl Baseline {
    fn name(self) -> &'static str {
        match self {
            Baseline::DeepRtc => "deep-rtc",
            Baseline::Flat => "flat",
            Baseline::Rhc => "rhc",
            Baseline::Rp => "rp",
        }
    }

    /// Deep models carry one parameter column per classification node,
    /// flat models one per leaf.
    fn wants_flat_model(self) -> bool {
        !matches!(self, Baseline::DeepRtc)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Calibrate(args) => run_calibrate(args),
        Command::Predict(args) => run_predict(args),
        Command::Eval(args) => run_eval(args),
        Command::Compare(args) => run_compare(args),
    }
}

// ---------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn read_config<T>(
    path: &Option<PathBuf>,
    parse: impl Fn(&str) -> Result<T, CliError>,
    default: T,
) -> Result<T, CliError> {
    match path {
        Some(p) => parse(&fs::read_to_string(p)?),
        None => Ok(default),
    }
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|v| v.trim().parse()).collect();
    match values {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Usage(format!("{what} must be a comma-separated float list"))),
    }
}

/// Loads a checkpoint against the taxonomy the baseline expects and
/// returns the parameters with the full tree (prediction always scores
/// against the full tree).
fn load_model(
    path: &Path,
    baseline: Baseline,
    taxonomy: &Taxonomy,
) -> Result<(NodeParams, FeatureMap), CliError> {
    let ck = Checkpoint::load(path)?;
    let model = if baseline.wants_flat_model() {
        ck.into_model(&taxonomy.flattened())?
    } else {
        ck.into_model(taxonomy)?
    };
    Ok(model)
}

fn decide_all(
    baseline: Baseline,
    ds: &Dataset,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    knob: f64,
) -> Result<Vec<Decision>, CliError> {
    match baseline {
        Baseline::DeepRtc => {
            let gamma = CompetenceLevel::new(knob)?;
            Ok(rtc_predict_all(ds, taxonomy, params, fmap, gamma)?)
        }
        Baseline::Rhc => {
            let gamma = CompetenceLevel::new(knob)?;
            (0..ds.len())
                .map(|i| {
                    rhc_predict(ds.feature(i), taxonomy, params, fmap, gamma)
                        .map_err(CliError::from)
                })
                .collect()
        }
        Baseline::Flat | Baseline::Rp => {
            let threshold = if baseline == Baseline::Flat { 0.0 } else { knob };
            (0..ds.len())
                .map(|i| {
                    flat_reject_predict(ds.feature(i), taxonomy, params, fmap, threshold)
                        .map_err(CliError::from)
                })
                .collect()
        }
    }
}

/// Ascending scan; strict improvement wins, so ties go to the smallest
/// knob (same rule the library calibration uses).
fn best_by_scan(
    grid: &[f64],
    mut score: impl FnMut(f64) -> Result<f64, CliError>,
) -> Result<(f64, Vec<(f64, f64)>), CliError> {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scan = Vec::with_capacity(sorted.len());
    let (mut best, mut best_score) = (f64::NAN, f64::NEG_INFINITY);
    for &knob in &sorted {
        let s = score(knob)?;
        if s > best_score {
            (best, best_score) = (knob, s);
        }
        scan.push((knob, s));
    }
    if scan.is_empty() {
        return Err(CliError::Usage("the knob grid is empty".into()));
    }
    Ok((best, scan))
}

/// Pure flag-combination check, run before any file is touched so misuse
/// reports as a usage error even when paths are also wrong.
fn check_operating_args(
    baseline: Baseline,
    gamma: Option<f64>,
    gamma_grid: &Option<String>,
    val: &Option<PathBuf>,
) -> Result<(), CliError> {
    if baseline == Baseline::Flat {
        if gamma.is_some() || gamma_grid.is_some() {
            return Err(CliError::Usage(
                "the flat baseline has no rejection knob; drop --gamma/--gamma-grid".into(),
            ));
        }
        return Ok(());
    }
    match (gamma, gamma_grid) {
        (Some(_), None) => Ok(()),
        (None, Some(_)) if val.is_none() => {
            Err(CliError::Usage("--gamma-grid calibration needs --val".into()))
        }
        (None, Some(_)) => Ok(()),
        _ => Err(CliError::Usage(
            "pass exactly one of --gamma or --gamma-grid".into(),
        )),
    }
}

/// Resolves the operating point for predict/eval: `--gamma` fixes it,
/// `--gamma-grid` calibrates on `--val`; flat takes neither.
fn resolve_knob(
    baseline: Baseline,
    gamma: Option<f64>,
    gamma_grid: &Option<String>,
    val: &Option<PathBuf>,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
) -> Result<f64, CliError> {
    check_operating_args(baseline, gamma, gamma_grid, val)?;
    if baseline == Baseline::Flat {
        return Ok(0.0);
    }
    match (gamma, gamma_grid) {
        (Some(g), None) => Ok(g),
        (None, Some(grid_text)) => {
            let grid = parse_f64_list(grid_text, "--gamma-grid")?;
            let val_path = val.as_ref().expect("checked above");
            let val_ds = Dataset::load(val_path, taxonomy)?;
            if baseline == Baseline::DeepRtc {
                let (best, _) = calibrate_gamma(&val_ds, taxonomy, params, fmap, &grid)?;
                Ok(best.value())
            } else {
                let (best, _) = best_by_scan(&grid, |knob| {
                    let d = decide_all(baseline, &val_ds, taxonomy, params, fmap, knob)?;
                    Ok(cpb_literal(&d, val_ds.labels(), taxonomy)?)
                })?;
                Ok(best)
            }
        }
        _ => Err(CliError::Usage(
            "pass exactly one of --gamma or --gamma-grid".into(),
        )),
    }
}

fn predictions_csv(
    taxonomy: &Taxonomy,
    ds: &Dataset,
    decisions: &[Decision],
    baseline: Baseline,
    knob: f64,
) -> String {
    let mut out = format!("# baseline={} gamma={knob}\n", baseline.name());
    out.push_str("# id,exit,exit_depth,at_leaf,confidence,truth\n");
    for (i, d) in decisions.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ds.id(i),
            taxonomy.name(d.exit_node),
            taxonomy.record(d.exit_node).depth,
            d.at_leaf as u8,
            d.exit_confidence(),
            taxonomy.name(ds.label(i)),
        ));
    }
    out
}

fn scan_csv(scan: &[(f64, f64)]) -> String {
    let mut out = String::from("# gamma,cpb_literal\n");
    for (g, c) in scan {
        out.push_str(&format!("{g},{c}\n"));
    }
    out
}

// ---------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = read_config(
        &args.config,
        |text| SyntheticConfig::from_kv_text(text).map_err(CliError::from),
        SyntheticConfig::default(),
    )?;
    let mut set = |key: &str, value: Option<String>| -> Result<(), CliError> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set("branching", args.branching)?;
    set("feature_dim", args.feature_dim.map(|v| v.to_string()))?;
    set("class_sep", args.class_sep.map(|v| v.to_string()))?;
    set("noise_sd", args.noise_sd.map(|v| v.to_string()))?;
    set("imbalance_factor", args.imbalance_factor.map(|v| v.to_string()))?;
    set("n_max", args.n_max.map(|v| v.to_string()))?;
    set("test_per_class", args.test_per_class.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;

    let out = generate(&cfg)?;
    for warning in &out.warnings {
        eprintln!("warning: {warning}");
    }

    let dir = &args.out_dir;
    write_artifact(dir, "taxonomy.tsv", &out.taxonomy.to_edge_string())?;
    write_artifact(dir, "train.csv", &out.train.to_csv(&out.taxonomy))?;
    write_artifact(dir, "val.csv", &out.val.to_csv(&out.taxonomy))?;
    write_artifact(dir, "test.csv", &out.test.to_csv(&out.taxonomy))?;
    write_artifact(dir, "synth_config.txt", &cfg.to_kv_string())?;

    println!(
        "benchmark: {} leaves, {} train / {} val / {} test samples -> {}",
        out.taxonomy.leaf_count(),
        out.train.len(),
        out.val.len(),
        out.test.len(),
        dir.display(),
    );
    Ok(())
}

fn train_overrides(cfg: &mut TrainConfig, args: &TrainArgs) -> Result<(), CliError> {
    let mut set = |key: &str, value: Option<String>| -> Result<(), CliError> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set("p", args.p.map(|v| v.to_string()))?;
    set("lambda", args.lambda.map(|v| v.to_string()))?;
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("batch_size", args.batch_size.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("weight_decay", args.weight_decay.map(|v| v.to_string()))?;
    set("init_scale", args.init_scale.map(|v| v.to_string()))?;
    set("feature_map", args.feature_map.clone())?;
    set("feature_dim", args.feature_dim.map(|v| v.to_string()))?;
    Ok(())
}

fn save_trained(
    dir: &Path,
    taxonomy: &Taxonomy,
    model: &TrainedModel,
    cfg: &TrainConfig,
    note: Option<&str>,
) -> Result<(), CliError> {
    let ck = Checkpoint::from_model(taxonomy, &model.params, &model.feature_map);
    fs::create_dir_all(dir)?;
    ck.save(&dir.join("checkpoint.json"))?;
    write_artifact(dir, "train_log.csv", &epoch_log_csv(&model.log))?;
    let mut echoed = cfg.to_kv_string();
    if let Some(n) = note {
        echoed.push_str(&format!("# {n}\n"));
    }
    write_artifact(dir, "train_config.txt", &echoed)?;
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = read_config(
        &args.config,
        |text| TrainConfig::from_kv_text(text).map_err(CliError::from),
        TrainConfig::default(),
    )?;
    train_overrides(&mut cfg, &args)?;
    cfg.validate()?;

    let loaded = Taxonomy::load(&args.taxonomy)?;
    let taxonomy = if args.flatten { loaded.flattened() } else { loaded };
    let ds = Dataset::load(&args.train, &taxonomy)?;

    let model = train(&ds, &taxonomy, &cfg)?;
    let note = args.flatten.then_some("trained against the flattened taxonomy");
    save_trained(&args.out_dir, &taxonomy, &model, &cfg, note)?;

    let last = model.log.last().expect("at least one epoch");
    println!(
        "epoch {}: total {:.6} (cut {:.6}, node {:.6}) -> {}",
        last.epoch,
        last.total,
        last.sts,
        last.ncl,
        args.out_dir.join("checkpoint.json").display(),
    );
    Ok(())
}

fn run_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let taxonomy = Taxonomy::load(&args.taxonomy)?;
    let val = Dataset::load(&args.val, &taxonomy)?;
    let (params, fmap) = load_model(&args.checkpoint, Baseline::DeepRtc, &taxonomy)?;
    let grid = match &args.gamma_grid {
        Some(text) => parse_f64_list(text, "--gamma-grid")?,
        None => default_gamma_grid(),
    };

    let (best, scan) = calibrate_gamma(&val, &taxonomy, &params, &fmap, &grid)?;
    write_artifact(&args.out_dir, "gamma.txt", &format!("{}\n", best.value()))?;
    write_artifact(&args.out_dir, "gamma_scan.csv", &scan_csv(&scan))?;

    let best_cpb = scan
        .iter()
        .find(|(g, _)| *g == best.value())
        .map(|(_, c)| *c)
        .unwrap_or(f64::NAN);
    println!("gamma* = {} (validation CPB {best_cpb:.6})", best.value());
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<(), CliError> {
    check_operating_args(args.baseline, args.gamma, &args.gamma_grid, &args.val)?;
    let taxonomy = Taxonomy::load(&args.taxonomy)?;
    let test = Dataset::load(&args.test, &taxonomy)?;
    let (params, fmap) = load_model(&args.checkpoint, args.baseline, &taxonomy)?;
    let knob = resolve_knob(
        args.baseline,
        args.gamma,
        &args.gamma_grid,
        &args.val,
        &taxonomy,
        &params,
        &fmap,
    )?;

    let decisions = decide_all(args.baseline, &test, &taxonomy, &params, &fmap, knob)?;
    let csv = predictions_csv(&taxonomy, &test, &decisions, args.baseline, knob);
    write_artifact(&args.out_dir, "predictions.csv", &csv)?;

    let leaves = decisions.iter().filter(|d| d.at_leaf).count();
    println!(
        "{} decisions at gamma {knob} ({leaves} full-depth) -> {}",
        decisions.len(),
        args.out_dir.join("predictions.csv").display(),
    );
    Ok(())
}

/// Decisions at the operating point plus the forced full-depth pass that
/// leaf accuracy is measured on.
fn evaluate_baseline(
    baseline: Baseline,
    test: &Dataset,
    taxonomy: &Taxonomy,
    params: &NodeParams,
    fmap: &FeatureMap,
    knob: f64,
    split: Option<&PopularitySplit>,
) -> Result<MetricsReport, CliError> {
    let decisions = decide_all(baseline, test, taxonomy, params, fmap, knob)?;
    let forced = decide_all(baseline, test, taxonomy, params, fmap, 0.0)?;
    Ok(report(&decisions, test.labels(), Some(&forced), split, taxonomy)?)
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    check_operating_args(args.baseline, args.gamma, &args.gamma_grid, &args.val)?;
    let taxonomy = Taxonomy::load(&args.taxonomy)?;
    let test = Dataset::load(&args.test, &taxonomy)?;
    let (params, fmap) = load_model(&args.checkpoint, args.baseline, &taxonomy)?;
    let knob = resolve_knob(
        args.baseline,
        args.gamma,
        &args.gamma_grid,
        &args.val,
        &taxonomy,
        &params,
        &fmap,
    )?;
    let split = match &args.train {
        Some(path) => {
            let counts = Dataset::load(path, &taxonomy)?.class_counts(&taxonomy);
            Some(PopularitySplit::from_counts(&taxonomy, &counts, SplitRule::Thirds)?)
        }
        None => None,
    };

    let rep = evaluate_baseline(
        args.baseline,
        &test,
        &taxonomy,
        &params,
        &fmap,
        knob,
        split.as_ref(),
    )?;
    write_artifact(&args.out_dir, "metrics.txt", &rep.to_text())?;
    write_artifact(&args.out_dir, "metrics.json", &rep.to_json())?;

    println!(
        "{} at gamma {knob}: cpb {:.4}, hier_acc {:.4}, leaf_freq {:.4}",
        args.baseline.name(),
        rep.all.cpb,
        rep.all.hier_acc,
        rep.all.leaf_freq,
    );
    Ok(())
}

fn rate_label(rate: f64) -> String {
    let pct = rate * 100.0;
    if pct.fract().abs() < 1e-9 {
        format!("rate_{}", pct.round() as i64)
    } else {
        format!("rate_{pct}")
    }
}

fn summary_row(method: &str, rate: &str, knob: f64, rep: &MetricsReport) -> String {
    let bucket = |m: &Option<rtc_core::evaluation::Metrics>| {
        m.as_ref().map(|v| v.cpb.to_string()).unwrap_or_default()
    };
    format!(
        "{method},{rate},{knob},{},{},{},{},{},{},{},{},{},{}\n",
        rep.all.n,
        rep.all.cpb,
        rep.all.cpb_literal,
        rep.all.hier_acc,
        rep.all.leaf_acc.map(|v| v.to_string()).unwrap_or_default(),
        rep.all.depth,
        rep.all.leaf_freq,
        bucket(&rep.many),
        bucket(&rep.medium),
        bucket(&rep.few),
    )
}

fn write_report(dir: &Path, method: &str, rep: &MetricsReport) -> Result<(), CliError> {
    write_artifact(dir, &format!("{method}.metrics.txt"), &rep.to_text())?;
    write_artifact(dir, &format!("{method}.metrics.json"), &rep.to_json())?;
    Ok(())
}

fn run_compare(args: CompareArgs) -> Result<(), CliError> {
    let rates = parse_f64_list(&args.rejection_rates, "--rejection-rates")?;
    let mut cfg = read_config(
        &args.config,
        |text| TrainConfig::from_kv_text(text).map_err(CliError::from),
        TrainConfig::default(),
    )?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let taxonomy = Taxonomy::load(&args.taxonomy)?;
    let flat_taxonomy = taxonomy.flattened();
    let train_ds = Dataset::load(&args.train, &taxonomy)?;
    let val_ds = Dataset::load(&args.val, &taxonomy)?;
    let test_ds = Dataset::load(&args.test, &taxonomy)?;

    // One hierarchical model, one flat model on the collapsed tree; the
    // flat loss has no cut term worth weighting.
    let deep = train(&train_ds, &taxonomy, &cfg)?;
    let mut flat_cfg = cfg.clone();
    flat_cfg.sts_weight = 0.0;
    let flat = train(
        &train_ds.relabeled(&taxonomy, &flat_taxonomy)?,
        &flat_taxonomy,
        &flat_cfg,
    )?;

    let dir = &args.out_dir;
    save_trained(&dir.join("deep"), &taxonomy, &deep, &cfg, None)?;
    save_trained(
        &dir.join("flat"),
        &flat_taxonomy,
        &flat,
        &flat_cfg,
        Some("trained against the flattened taxonomy"),
    )?;
    write_artifact(dir, "train_config.txt", &cfg.to_kv_string())?;

    // Every method with a knob gets the same validation calibration.
    let grid = default_gamma_grid();
    let (gamma_star, scan) =
        calibrate_gamma(&val_ds, &taxonomy, &deep.params, &deep.feature_map, &grid)?;
    write_artifact(dir, "gamma.txt", &format!("{}\n", gamma_star.value()))?;
    write_artifact(dir, "gamma_scan.csv", &scan_csv(&scan))?;
    let calibrate_local = |baseline: Baseline| -> Result<f64, CliError> {
        let (best, _) = best_by_scan(&grid, |knob| {
            let d = decide_all(baseline, &val_ds, &taxonomy, &flat.params, &flat.feature_map, knob)?;
            Ok(cpb_literal(&d, val_ds.labels(), &taxonomy)?)
        })?;
        Ok(best)
    };
    let rhc_star = calibrate_local(Baseline::Rhc)?;
    let rp_star = calibrate_local(Baseline::Rp)?;

    let counts = train_ds.class_counts(&taxonomy);
    let split = PopularitySplit::from_counts(&taxonomy, &counts, SplitRule::Thirds)?;

    let model_for = |baseline: Baseline| -> (&NodeParams, &FeatureMap) {
        if baseline.wants_flat_model() {
            (&flat.params, &flat.feature_map)
        } else {
            (&deep.params, &deep.feature_map)
        }
    };
    let report_for = |baseline: Baseline, knob: f64| -> Result<MetricsReport, CliError> {
        let (params, fmap) = model_for(baseline);
        evaluate_baseline(baseline, &test_ds, &taxonomy, params, fmap, knob, Some(&split))
    };

    let mut summary = String::from(
        "# method,rate,knob,n,cpb,cpb_literal,hier_acc,leaf_acc,depth,leaf_freq,\
         cpb_many,cpb_medium,cpb_few\n",
    );

    // Headline operating points (rate column empty): calibrated knobs.
    let headline = [
        (Baseline::DeepRtc, gamma_star.value()),
        (Baseline::Flat, 0.0),
        (Baseline::Rhc, rhc_star),
        (Baseline::Rp, rp_star),
    ];
    for (baseline, knob) in headline {
        let rep = report_for(baseline, knob)?;
        write_report(dir, baseline.name(), &rep)?;
        summary.push_str(&summary_row(baseline.name(), "", knob, &rep));
        println!(
            "{:<8} knob {knob:.4}: cpb {:.4}, hier_acc {:.4}, leaf_freq {:.4}",
            baseline.name(),
            rep.all.cpb,
            rep.all.hier_acc,
            rep.all.leaf_freq,
        );
    }

    // Matched rejection rates: each method thresholds its own test-set
    // confidence scores, so rejected fractions line up across methods.
    for &rate in &rates {
        let rate_dir = dir.join(rate_label(rate));
        for baseline in [Baseline::DeepRtc, Baseline::Rhc, Baseline::Rp] {
            let (params, fmap) = model_for(baseline);
            let forced = decide_all(baseline, &test_ds, &taxonomy, params, fmap, 0.0)?;
            let scores: Vec<f64> = match baseline {
                Baseline::Rp => forced.iter().map(|d| d.exit_confidence()).collect(),
                _ => forced.iter().map(|d| d.min_confidence()).collect(),
            };
            let knob = threshold_for_rate(&scores, rate)?;
            let rep = report_for(baseline, knob)?;
            write_report(&rate_dir, baseline.name(), &rep)?;
            summary.push_str(&summary_row(
                baseline.name(),
                &rate.to_string(),
                knob,
                &rep,
            ));
        }
    }
    write_artifact(dir, "summary.csv", &summary)?;

    println!("summary -> {}", dir.join("summary.csv").display());
    Ok(())
}
