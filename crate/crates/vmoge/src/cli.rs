//! Command-line entry point.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vmoge_core::checks::{kl_check, tiny_model_gradcheck};
use vmoge_core::features::{assemble_dataset, featurize_recording, validate_recordings, FeatureConfig, GraphScope};
use vmoge_core::graphprior::PriorVariant;
use vmoge_core::signal::Band;
use vmoge_core::synthgen::{generate_dataset, SynthConfig};
use vmoge_core::trainer::{gating_report, GatingReport};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::run::{self, MetricsFile};
use crate::{container, csvio};

#[derive(Debug, Parser)]
#[command(name = "vmoge", version, about = "Band-resolved variational mixture of graph experts")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic labeled recordings as CSV files.
    Synth(SynthArgs),
    /// Turn a directory of CSV recordings into a feature container.
    Featurize(FeaturizeArgs),
    /// Cross-validated training; writes a run directory.
    Train(TrainArgs),
    /// Re-evaluate a saved run on a feature container.
    Eval(EvalArgs),
    /// Gate-weight, attribution and covariate tables of a run.
    Report(ReportArgs),
    /// Grid over prior variants and λ values.
    SweepLambda(SweepArgs),
    /// Closed-form KL against Monte-Carlo estimates on random instances.
    KlCheck(KlCheckArgs),
    /// Finite-difference check of the full objective on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    subjects_per_class: usize,
    #[arg(long, default_value_t = 100.0)]
    fs: f64,
    #[arg(long, default_value_t = 8.0)]
    duration: f64,
    #[arg(long, default_value_t = 19)]
    channels: usize,
    /// delta, theta, alpha or beta.
    #[arg(long, default_value = "alpha")]
    target_band: String,
    /// Zero-based channel indices, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3, 4, 5])]
    target_channels: Vec<usize>,
    #[arg(long, default_value_t = 2.5)]
    effect_size: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// Directory of CSV recordings.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected sampling rate; recordings at another rate are rejected.
    #[arg(long)]
    fs: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    epoch_sec: f64,
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    /// epoch or subject.
    #[arg(long, default_value = "epoch")]
    graph_scope: String,
}

/// Knobs shared by `train` and `sweep-lambda`; each overrides the config file.
#[derive(Debug, Args, Default)]
struct Overrides {
    /// Flat key = value file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// none, l-shift, lnorm-shift or pure.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    lambda_shift: Option<f64>,
    #[arg(long)]
    granularity: Option<String>,
    /// prob or logit.
    #[arg(long)]
    mixture: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use `+log|Q|` in the KL instead of `−log|Q|`.
    #[arg(long)]
    plus_logdet_kl: bool,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    features: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    features: PathBuf,
    /// Output CSV: one row per prior variant, one column per λ.
    #[arg(long)]
    out: PathBuf,
    /// Which λ the columns vary: the KL weight (`kl`) or the prior shift (`shift`).
    #[arg(long, default_value = "kl")]
    sweep: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.6, 0.8, 1.0])]
    lambdas: Vec<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct KlCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::SweepLambda(a) => sweep(a),
        Command::KlCheck(a) => kl(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    subjects_per_class: usize,
    fs: f64,
    duration_sec: f64,
    channels: usize,
    target_band: &'a str,
    target_channels: &'a [usize],
    effect_size: f64,
    noise_amplitude: f64,
    seed: u64,
    subjects: Vec<SynthSubject<'a>>,
}

#[derive(Serialize)]
struct SynthSubject<'a> {
    subject: &'a str,
    label: u8,
    file: String,
}

fn synth(a: SynthArgs) -> Result<()> {
    let target_band = Band::from_name(&a.target_band)
        .ok_or_else(|| CliError::Invalid(format!("unknown band `{}`", a.target_band)))?;
    let cfg = SynthConfig {
        subjects_per_class: a.subjects_per_class,
        fs: a.fs,
        duration_sec: a.duration,
        channels: a.channels,
        target_band,
        target_channels: a.target_channels,
        effect_size: a.effect_size,
        noise_amplitude: a.noise,
        seed: a.seed,
    };
    let (recs, manifest) = generate_dataset(&cfg)?;
    create_dir(&a.out)?;
    for rec in &recs {
        csvio::write_recording(&a.out.join(format!("{}.csv", rec.subject)), rec)?;
    }
    let m = SynthManifest {
        subjects_per_class: cfg.subjects_per_class,
        fs: cfg.fs,
        duration_sec: cfg.duration_sec,
        channels: cfg.channels,
        target_band: cfg.target_band.name(),
        target_channels: &cfg.target_channels,
        effect_size: cfg.effect_size,
        noise_amplitude: cfg.noise_amplitude,
        seed: cfg.seed,
        subjects: manifest
            .iter()
            .map(|e| SynthSubject {
                subject: &e.subject,
                label: e.label,
                file: format!("{}.csv", e.subject),
            })
            .collect(),
    };
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m).expect("manifest serializes"))
        .map_err(|e| CliError::io(&path, e))?;
    println!("wrote {} recordings to {}", recs.len(), a.out.display());
    Ok(())
}

fn featurize(a: FeaturizeArgs) -> Result<()> {
    let graph_scope: GraphScope = a
        .graph_scope
        .parse()
        .map_err(|_| CliError::Invalid(format!("unknown graph scope `{}`", a.graph_scope)))?;
    let cfg = FeatureConfig {
        epoch_sec: a.epoch_sec,
        density: a.density,
        graph_scope,
        ..FeatureConfig::default()
    };
    let recs = csvio::read_dir(&a.input)?;
    let (fs_found, _) = validate_recordings(&recs)?;
    if let Some(fs) = a.fs {
        if fs != fs_found {
            return Err(CliError::Invalid(format!("recordings are sampled at {fs_found} Hz, not {fs} Hz")));
        }
    }
    let parts = run::parallel_map(recs.len(), run::threads(), |i| featurize_recording(&recs[i], i as u32, &cfg));
    let mut epochs = Vec::with_capacity(parts.len());
    for p in parts {
        let (e, warnings) = p?;
        for w in warnings {
            log::warn!("{w:?}");
        }
        epochs.push(e);
    }
    let ds = assemble_dataset(&recs, epochs)?;
    container::write(&a.out, &ds, &cfg)?;
    println!(
        "wrote {} epochs of {} subjects ({} channels, {} samples) to {}",
        ds.samples.len(),
        ds.subjects.len(),
        ds.channels,
        ds.len,
        a.out.display()
    );
    Ok(())
}

/// Canonical name of a prior given by its command-line alias or full name.
fn prior_name(s: &str) -> Result<&'static str> {
    s.parse::<PriorVariant>()
        .map(PriorVariant::name)
        .map_err(|_| CliError::Invalid(format!("unknown prior `{s}`")))
}

/// Applies `KEY=VALUE` to a config; values parse as TOML scalars, falling back to strings.
pub fn apply_setting(cfg: &RunConfig, setting: &str) -> Result<RunConfig> {
    let (key, value) = setting
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("`{setting}` is not KEY=VALUE")))?;
    let (key, value) = (key.trim(), value.trim());
    let mut table: toml::Table = toml::from_str(&cfg.to_text()).expect("own output parses");
    if !table.contains_key(key) {
        return Err(CliError::Invalid(format!("unknown config key `{key}`")));
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    table.insert(key.to_string(), parsed);
    RunConfig::parse(&toml::to_string(&table).expect("table serializes"))
}

fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &o.set {
        cfg = apply_setting(&cfg, s)?;
    }
    if let Some(p) = &o.prior {
        cfg.prior = prior_name(p)?.to_string();
    }
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    take!(lambda_kl, lambda_shift, granularity, mixture, folds, seed, epochs, lr, batch_size);
    if o.plus_logdet_kl {
        cfg.plus_logdet_kl = true;
    }
    cfg.prior = prior_name(&cfg.prior)?.to_string();
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(m: &MetricsFile) {
    let fmt = |s: &run::SummaryJson| match (s.mean, s.std) {
        (Some(m), Some(d)) => format!("{m:.4} ± {d:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".into(),
    };
    println!("subject AUC {}  ACC {}", fmt(&m.subject_auc), fmt(&m.subject_acc));
    println!("epoch   AUC {}  ACC {}", fmt(&m.epoch_auc), fmt(&m.epoch_acc));
    let pi: Vec<String> = m.mean_pi.iter().map(|v| format!("{v:.3}")).collect();
    println!("mean gate weights (δ θ α β): {}", pi.join(" "));
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve(&a.overrides)?;
    let (ds, _) = container::read(&a.features)?;
    let model_config = cfg.model_config(ds.fs)?;
    let (cv, trained) = run::cross_validate(&ds, &model_config, &cfg.train_config()?, run::threads())?;
    run::write_run(&a.out, &cfg, &cv, &trained)?;
    print_metrics(&MetricsFile::of(&cv));
    println!("run written to {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ds, _) = container::read(&a.features)?;
    let cv = run::evaluate_run(&a.run, &ds, run::threads())?;
    let m = MetricsFile::of(&cv);
    let path = a.run.join("eval_metrics.json");
    fs::write(&path, m.to_json()).map_err(|e| CliError::io(&path, e))?;
    print_metrics(&m);
    Ok(())
}

/// Plain-text tables of a gating report.
pub fn format_report(report: &GatingReport, attribution: &[(String, usize, f64)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gate weights by class: mean [q1, median, q3]");
    for (class, row) in report.class_weights.iter().enumerate() {
        for (k, cell) in row.iter().enumerate() {
            if let Some((mean, q)) = cell {
                let _ = writeln!(
                    s,
                    "  class {class} {:<6} {mean:.4} [{:.4}, {:.4}, {:.4}]",
                    Band::ALL[k].name(),
                    q[0],
                    q[1],
                    q[2]
                );
            }
        }
    }
    let _ = writeln!(s, "class contrast (class 1 − class 0 mean weight)");
    for (k, gap) in report.class_gap().iter().enumerate() {
        if let Some(g) = gap {
            let _ = writeln!(s, "  {:<6} {g:+.4}", Band::ALL[k].name());
        }
    }
    if !attribution.is_empty() {
        let _ = writeln!(s, "channel attribution π_k·‖μ_c‖ (per band, max 1)");
        for b in Band::ALL {
            let vals: Vec<String> = attribution
                .iter()
                .filter(|(band, _, _)| band == b.name())
                .map(|(_, _, v)| format!("{v:.2}"))
                .collect();
            let _ = writeln!(s, "  {:<6} {}", b.name(), vals.join(" "));
        }
    }
    if report.correlations.is_empty() {
        let _ = writeln!(s, "no covariates; correlation table omitted");
    } else {
        let _ = writeln!(s, "gate weight vs covariate: Pearson r (p)");
        for c in &report.correlations {
            let _ = writeln!(
                s,
                "  {:<6} {:<6} r = {:+.3} (p = {:.4}, n = {})",
                c.band.name(),
                c.covariate.name(),
                c.r,
                c.p,
                c.n
            );
        }
    }
    s
}

fn read_attribution(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| CliError::format(path, e))?;
        let bad = || CliError::format(path, "malformed attribution row");
        let channel = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let value = row.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        out.push((row[0].to_string(), channel, value));
    }
    Ok(out)
}

fn report(a: ReportArgs) -> Result<()> {
    let records = run::read_gating(&a.run.join(run::GATING_FILE))?;
    let report = gating_report(&records)?;
    let attribution = read_attribution(&a.run.join(run::ATTRIBUTION_FILE))?;
    let text = format_report(&report, &attribution);
    let path = a.run.join("report.txt");
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(())
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub prior: &'static str,
    pub lambda: f64,
    pub subject_auc: Option<f64>,
    pub subject_auc_std: Option<f64>,
    pub epoch_auc: Option<f64>,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let base = resolve(&a.overrides)?;
    let by_kl = match a.sweep.as_str() {
        "kl" => true,
        "shift" => false,
        other => return Err(CliError::Invalid(format!("--sweep must be kl or shift, got `{other}`"))),
    };
    if a.lambdas.is_empty() || a.lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(CliError::Invalid("λ values must be non-negative".into()));
    }
    let (ds, _) = container::read(&a.features)?;
    let model_config = base.model_config(ds.fs)?;
    // runs whose outcome cannot depend on λ are trained once
    let mut cache: BTreeMap<(usize, u64, u64), (Option<f64>, Option<f64>, Option<f64>)> = BTreeMap::new();
    let mut cells = Vec::new();
    for (vi, variant) in PriorVariant::ALL.iter().enumerate() {
        for &lambda in &a.lambdas {
            let mut cfg = base.clone();
            cfg.prior = variant.name().to_string();
            if by_kl {
                cfg.lambda_kl = lambda;
            } else {
                cfg.lambda_shift = lambda;
            }
            let kl_matters = *variant != PriorVariant::None;
            let shift_matters = matches!(variant, PriorVariant::LaplacianShift | PriorVariant::NormalizedShift);
            let key = (
                vi,
                if kl_matters { cfg.lambda_kl.to_bits() } else { 0 },
                if shift_matters { cfg.lambda_shift.to_bits() } else { 0 },
            );
            let result = match cache.get(&key) {
                Some(r) => *r,
                None => {
                    let (cv, _) = run::cross_validate(&ds, &model_config, &cfg.train_config()?, run::threads())?;
                    let s = cv.subject_auc();
                    let e = cv.epoch_auc();
                    let finite = |v: f64| v.is_finite().then_some(v);
                    let r = (finite(s.mean), finite(s.std), finite(e.mean));
                    log::info!("{} λ={lambda}: subject AUC {:?}", variant.name(), r.0);
                    cache.insert(key, r);
                    r
                }
            };
            cells.push(SweepCell {
                prior: variant.name(),
                lambda,
                subject_auc: result.0,
                subject_auc_std: result.1,
                epoch_auc: result.2,
            });
        }
    }
    let text = sweep_csv(&cells, &a.lambdas)?;
    fs::write(&a.out, &text).map_err(|e| CliError::io(&a.out, e))?;
    print!("{text}");
    if let Some(m) = none_gap(&cells) {
        println!("max |AUC(none) − AUC(GMRF)| over the grid: {m:.4}");
    }
    Ok(())
}

/// Wide table: `prior,λ₁,…` with the mean subject-level AUC in each cell.
pub fn sweep_csv(cells: &[SweepCell], lambdas: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["prior".to_string()];
    header.extend(lambdas.iter().map(|l| l.to_string()));
    w.write_record(&header).map_err(|e| CliError::Invalid(e.to_string()))?;
    for v in PriorVariant::ALL {
        let mut row = vec![v.name().to_string()];
        for &l in lambdas {
            let cell = cells.iter().find(|c| c.prior == v.name() && c.lambda == l);
            row.push(cell.and_then(|c| c.subject_auc).map(|x| x.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Largest absolute AUC difference between the no-prior row and any GMRF cell in the same column.
pub fn none_gap(cells: &[SweepCell]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for none in cells.iter().filter(|c| c.prior == PriorVariant::None.name()) {
        for other in cells.iter().filter(|c| c.prior != none.prior && c.lambda == none.lambda) {
            if let (Some(a), Some(b)) = (none.subject_auc, other.subject_auc) {
                best = Some(best.map_or((a - b).abs(), |m: f64| m.max((a - b).abs())));
            }
        }
    }
    best
}

fn kl(a: KlCheckArgs) -> Result<()> {
    if a.trials == 0 || a.samples == 0 {
        return Err(CliError::Invalid("trials and samples must be positive".into()));
    }
    let r = kl_check(a.trials, a.samples, a.seed)?;
    println!("trials: {}", r.trials);
    println!("max relative error: {:.6}", r.max_rel_error);
    println!("max absolute error (|KL| < 0.1): {:.6}", r.max_abs_error_small);
    println!("min KL: {:.3e}", r.min_kl);
    if r.passes() {
        Ok(())
    } else {
        Err(CliError::CheckFailed("KL check exceeded tolerance".into()))
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.eps > 0.0) {
        return Err(CliError::Invalid("eps must be positive".into()));
    }
    let r = tiny_model_gradcheck(a.seed, a.eps)?;
    println!("entries checked: {}", r.entries_checked);
    println!("max relative error: {:.3e}", r.max_rel_error);
    println!("max absolute error: {:.3e}", r.max_abs_error);
    if let Some((name, i)) = &r.worst {
        println!("worst entry: {name}[{i}]");
    }
    if r.max_rel_error < a.tol {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            r.max_rel_error, a.tol
        )))
    }
}

