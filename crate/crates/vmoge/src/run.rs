//! Cross-validated runs: parallel folds, run-directory artifacts and reloading.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use vmoge_core::features::Dataset;
use vmoge_core::model::{Model, ModelConfig, Priors};
use vmoge_core::signal::{Band, NUM_BANDS};
use vmoge_core::tensor::Tensor;
use vmoge_core::trainer::{
    evaluate, fold_result, fold_split, gating_report, subject_kfold, train_fold, CvResult, FoldResult, GatingRecord,
    Metrics, Summary, TrainConfig, TrainedModel,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const GATING_FILE: &str = "gating.csv";
pub const ATTRIBUTION_FILE: &str = "channel_attribution.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const TRAINING_FILE: &str = "training.json";
pub const PARAMS_DIR: &str = "params";

/// Worker count from `VMOGE_THREADS` (unset or 0: all available cores).
pub fn threads() -> usize {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("VMOGE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

/// Runs `job(i)` for `i in 0..n` on up to `workers` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|v| v.expect("every index ran"))
        .collect()
}

/// Subject-stratified cross-validation with folds spread over `workers` threads.
pub fn cross_validate(
    ds: &Dataset,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(CvResult, Vec<TrainedModel>)> {
    cfg.validate()?;
    ds.validate()?;
    let assignment = subject_kfold(&ds.subject_labels(), cfg.folds, cfg.seed)?;
    let priors = Priors::build(&ds.samples, cfg.prior)?;
    let results = parallel_map(cfg.folds, workers, |f| {
        train_fold(ds, &assignment, f, &priors, model_config, cfg)
    });
    let mut folds = Vec::with_capacity(cfg.folds);
    let mut trained = Vec::with_capacity(cfg.folds);
    for r in results {
        let (f, t) = r?;
        folds.push(f);
        trained.push(t);
    }
    Ok((CvResult { folds }, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auc: Option<f64>,
    pub acc: f64,
}

impl From<Metrics> for MetricPair {
    fn from(m: Metrics) -> Self {
        Self { auc: m.auc, acc: m.acc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub subject: MetricPair,
    pub epoch: MetricPair,
    /// `[class][band]`; `null` for a class absent from the test fold.
    pub class_mean_pi: [[Option<f64>; NUM_BANDS]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl From<Summary> for SummaryJson {
    fn from(s: Summary) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            mean: finite(s.mean),
            std: finite(s.std),
            n: s.n,
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub folds: Vec<FoldMetrics>,
    pub subject_auc: SummaryJson,
    pub subject_acc: SummaryJson,
    pub epoch_auc: SummaryJson,
    pub epoch_acc: SummaryJson,
    /// Metrics of the pooled out-of-fold predictions.
    pub pooled_subject: MetricPair,
    pub pooled_epoch: MetricPair,
    pub mean_pi: [f64; NUM_BANDS],
}

impl MetricsFile {
    pub fn of(cv: &CvResult) -> Self {
        let (pe, ps) = cv.pooled();
        Self {
            folds: cv
                .folds
                .iter()
                .map(|f| FoldMetrics {
                    fold: f.fold,
                    subject: f.subject.into(),
                    epoch: f.epoch.into(),
                    class_mean_pi: f.class_mean_pi.map(|row| row.map(|v| v.is_finite().then_some(v))),
                })
                .collect(),
            subject_auc: cv.subject_auc().into(),
            subject_acc: cv.subject_acc().into(),
            epoch_auc: cv.epoch_auc().into(),
            epoch_acc: cv.epoch_acc().into(),
            pooled_subject: ps.into(),
            pooled_epoch: pe.into(),
            mean_pi: cv.mean_pi(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    fold: usize,
    step: usize,
    nll: f64,
    kl: &'a [f64; NUM_BANDS],
    total: f64,
    lambda_kl: f64,
}

#[derive(Serialize)]
struct TrainingFold<'a> {
    fold: usize,
    epoch_totals: &'a [f64],
    skipped_steps: u64,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn gating_csv(records: &[GatingRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "subject", "epoch", "label", "pi_delta", "pi_theta", "pi_alpha", "pi_beta", "p_hat", "age", "score",
    ];
    w.write_record(header).map_err(|e| CliError::Invalid(e.to_string()))?;
    for r in records {
        let mut row = vec![r.subject.clone(), r.epoch.to_string(), r.label.to_string()];
        row.extend(r.pi.iter().map(|v| v.to_string()));
        row.extend([r.p_hat.to_string(), opt(r.age), opt(r.score)]);
        w.write_record(&row).map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses `gating.csv`; the per-channel attribution is not stored there and comes back empty.
pub fn read_gating(path: &Path) -> Result<Vec<GatingRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| CliError::format(path, e))?;
        if row.len() != 10 {
            return Err(CliError::format(path, format!("row has {} fields, expected 10", row.len())));
        }
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| CliError::format(path, format!("`{}` is not a number", &row[i])))
        };
        let opt_num = |i: usize| -> Result<Option<f64>> { if row[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        out.push(GatingRecord {
            subject: row[0].to_string(),
            epoch: num(1)? as u32,
            label: num(2)? as u8,
            pi: [num(3)?, num(4)?, num(5)?, num(6)?],
            p_hat: num(7)?,
            age: opt_num(8)?,
            score: opt_num(9)?,
            attribution: Vec::new(),
        });
    }
    Ok(out)
}

pub fn attribution_csv(records: &[GatingRecord]) -> Result<String> {
    let report = gating_report(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["band", "channel", "value"])
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    for b in Band::ALL {
        for c in 0..report.channels {
            let v = report.attribution[b.index() * report.channels + c];
            w.write_record([b.name().to_string(), c.to_string(), v.to_string()])
                .map_err(|e| CliError::Invalid(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, cv: &CvResult, trained: &[TrainedModel]) -> Result<()> {
    fs::create_dir_all(dir.join(PARAMS_DIR)).map_err(|e| CliError::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    write_file(&dir.join(METRICS_FILE), MetricsFile::of(cv).to_json())?;
    let records = cv.records();
    write_file(&dir.join(GATING_FILE), gating_csv(&records)?)?;
    write_file(&dir.join(ATTRIBUTION_FILE), attribution_csv(&records)?)?;

    let trace_path = dir.join(TRACE_FILE);
    let file = fs::File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for f in &cv.folds {
        for (step, b) in f.trace.iter().enumerate() {
            let line = TraceLine {
                fold: f.fold,
                step,
                nll: b.nll,
                kl: &b.kl,
                total: b.total,
                lambda_kl: b.lambda_kl,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| CliError::Invalid(e.to_string()))?;
            out.write_all(b"\n").map_err(|e| CliError::io(&trace_path, e))?;
        }
    }
    out.flush().map_err(|e| CliError::io(&trace_path, e))?;

    let training: Vec<TrainingFold> = cv
        .folds
        .iter()
        .map(|f| TrainingFold {
            fold: f.fold,
            epoch_totals: &f.epoch_totals,
            skipped_steps: f.skipped_steps,
        })
        .collect();
    write_file(
        &dir.join(TRAINING_FILE),
        serde_json::to_string_pretty(&training).expect("training summary serializes"),
    )?;

    for (fold, t) in trained.iter().enumerate() {
        let params: Vec<SavedParam> = t
            .store
            .ids()
            .map(|id| SavedParam {
                name: t.store.name(id).to_string(),
                shape: t.store.tensor(id).shape().to_vec(),
                data: t.store.tensor(id).data().to_vec(),
            })
            .collect();
        let json = serde_json::to_string(&params).expect("parameters serialize");
        write_file(&dir.join(PARAMS_DIR).join(format!("fold-{fold}.json")), json)?;
    }
    Ok(())
}

/// Rebuilds the trained model of `fold` from its saved parameters.
pub fn load_trained(dir: &Path, fold: usize, model_config: &ModelConfig) -> Result<TrainedModel> {
    let path = dir.join(PARAMS_DIR).join(format!("fold-{fold}.json"));
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let saved: Vec<SavedParam> = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e))?;
    let (model, mut store) = Model::blank(model_config.clone())?;
    if saved.len() != store.len() {
        return Err(CliError::format(&path, format!("{} parameters, model has {}", saved.len(), store.len())));
    }
    for p in saved {
        let id = store
            .id(&p.name)
            .ok_or_else(|| CliError::format(&path, format!("unknown parameter `{}`", p.name)))?;
        if store.tensor(id).shape() != p.shape.as_slice() {
            return Err(CliError::format(&path, format!("parameter `{}` has shape {:?}", p.name, p.shape)));
        }
        *store.tensor_mut(id) = Tensor::new(&p.shape, p.data).map_err(vmoge_core::Error::from)?;
    }
    Ok(TrainedModel {
        model,
        store,
        trace: Vec::new(),
        epoch_totals: Vec::new(),
        skipped_steps: 0,
        clamped: 0,
    })
}

/// Re-evaluates every fold of a saved run on `ds`.
pub fn evaluate_run(dir: &Path, ds: &Dataset, workers: usize) -> Result<CvResult> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let train_cfg = cfg.train_config()?;
    let model_config = cfg.model_config(ds.fs)?;
    let assignment = subject_kfold(&ds.subject_labels(), train_cfg.folds, train_cfg.seed)?;
    let results: Vec<Result<FoldResult>> = parallel_map(train_cfg.folds, workers, |fold| {
        let trained = load_trained(dir, fold, &model_config)?;
        let (_, test) = fold_split(ds, &assignment, fold);
        let records = evaluate(&trained, ds, &test, &train_cfg, fold as u64 + 1)?;
        Ok(fold_result(fold, records, &trained))
    });
    Ok(CvResult {
        folds: results.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
