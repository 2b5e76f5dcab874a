//! Optimization, subject-level cross-validation and gating reports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{BandFeatureTensor, Dataset};
use crate::graphprior::{PriorSpec, PriorVariant};
use crate::model::{Model, ModelConfig, ObjectiveConfig, Priors};
use crate::objective::{KlSign, LossBreakdown};
use crate::signal::{Band, NUM_BANDS};
use crate::stats::{accuracy, auc, mean_std, pearson_r, quartiles};
use crate::tensor::{Grads, ParameterStore, Tape};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_kl: f64,
    pub prior: PriorSpec,
    pub kl_sign: KlSign,
    pub folds: usize,
    pub seed: u64,
    /// Latent draws averaged at evaluation.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            epochs: 30,
            batch_size: 16,
            lambda_kl: 0.6,
            prior: PriorSpec::new(PriorVariant::NormalizedShift, 0.1),
            kl_sign: KlSign::Standard,
            folds: 5,
            seed: 0,
            eval_draws: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.betas.0 > 0.0 && self.betas.0 < 1.0 && self.betas.1 > 0.0 && self.betas.1 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lambda_kl >= 0.0) {
            return bad("lambda_kl must be non-negative");
        }
        if !(self.prior.shift >= 0.0) {
            return bad("prior shift must be non-negative");
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_kl: self.lambda_kl,
            kl_sign: self.kl_sign,
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`. Returns `false` and leaves
/// the store untouched if any gradient entry is non-finite.
pub fn adam_step(store: &mut ParameterStore, grads: &Grads, lr: f64, betas: (f64, f64), t: u64) -> bool {
    assert!(t >= 1, "Adam steps are 1-based");
    if !grads.all_finite() {
        return false;
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let (value, m, v) = store.parts_mut(id);
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            value[i] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
        }
    }
    true
}

/// Fold index per subject, stratified by class; deterministic given `seed`.
pub fn subject_kfold(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(Error::Data(format!(
                "class {class} has {} subjects, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, &s) in members.iter().enumerate() {
            assignment[s] = j % folds;
        }
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Data(format!("subject {i} has label {}, expected 0 or 1", labels[i])));
    }
    Ok(assignment)
}

/// Parameters, model and loss trace after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub store: ParameterStore,
    pub trace: Vec<LossBreakdown>,
    /// Mean total loss of each training epoch.
    pub epoch_totals: Vec<f64>,
    pub skipped_steps: u64,
    pub clamped: u64,
}

fn fold_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tape cells one backward pass may hold before a batch is split into
/// parts whose gradients are accumulated.
const CELL_BUDGET: usize = 1 << 23;

fn micro_batch(model: &Model, dataset: &Dataset, batch_size: usize) -> usize {
    let per_sample = model.cells_per_sample(dataset.channels, dataset.len).max(1);
    (CELL_BUDGET / per_sample).clamp(1, batch_size.max(1))
}

/// Mini-batch Adam on the negative ELBO over `train` (sample indices).
pub fn train_model(
    dataset: &Dataset,
    train: &[usize],
    priors: &Priors,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = fold_rng(cfg.seed, stream);
    let mut store = ParameterStore::new();
    let model = Model::new(&mut store, model_config.clone(), &mut rng)?;
    let mut order = train.to_vec();
    let micro = micro_batch(&model, dataset, cfg.batch_size);
    let mut trace = Vec::new();
    let mut epoch_totals = Vec::with_capacity(cfg.epochs);
    let (mut t, mut skipped, mut clamped) = (0u64, 0u64, 0u64);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len() as f64;
            let mut b = LossBreakdown::new(0.0, [0.0; NUM_BANDS], cfg.lambda_kl);
            b.total = 0.0;
            let mut grads = Grads::zeros_like(&store);
            for part in chunk.chunks(micro) {
                let samples: Vec<&BandFeatureTensor> = part.iter().map(|&i| &dataset.samples[i]).collect();
                let eps = model.draw_noise(samples.len(), dataset.channels, &mut rng);
                let mut tape = Tape::new();
                let vars = model.loss(&mut tape, &store, &samples, part, priors, cfg.objective(), eps)?;
                let pb = vars.breakdown(&tape, cfg.lambda_kl);
                // batch loss is a sample mean, so each part counts by its share
                let w = part.len() as f64 / n;
                b.nll += w * pb.nll;
                for (k, v) in b.kl.iter_mut().zip(pb.kl) {
                    *k += w * v;
                }
                b.total += w * pb.total;
                clamped += vars.clamped as u64;
                tape.backward(vars.total)?;
                grads.add_scaled(&tape.param_grads(&store), w);
            }
            trace.push(b);
            if !b.total.is_finite() {
                log::error!("non-finite loss at step {}; trace: {:?}", trace.len(), trace);
                return Err(Error::Diverged {
                    step: trace.len(),
                    total: b.total,
                });
            }
            t += 1;
            if !adam_step(&mut store, &grads, cfg.lr, cfg.betas, t) {
                skipped += 1;
                t -= 1;
                log::warn!("skipped step {} with non-finite gradient", trace.len());
            }
            epoch_sum += b.total;
            batches += 1;
        }
        epoch_totals.push(epoch_sum / batches as f64);
    }
    Ok(TrainedModel {
        model,
        store,
        trace,
        epoch_totals,
        skipped_steps: skipped,
        clamped,
    })
}

/// Gate output for one evaluated epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingRecord {
    pub subject: String,
    pub epoch: u32,
    pub label: u8,
    pub pi: [f64; NUM_BANDS],
    pub p_hat: f64,
    pub age: Option<f64>,
    pub score: Option<f64>,
    /// `π_k·‖μ_c^(k)‖₂`, band-major `K × C`.
    pub attribution: Vec<f64>,
}

/// Predictions of `trained` on `indices`, in order.
pub fn evaluate(
    trained: &TrainedModel,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<GatingRecord>> {
    let mut rng = fold_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, stream);
    let mut out = Vec::with_capacity(indices.len());
    let micro = micro_batch(&trained.model, dataset, cfg.batch_size);
    for chunk in indices.chunks(micro) {
        let samples: Vec<&BandFeatureTensor> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let preds = trained
            .model
            .predict(&trained.store, &samples, cfg.eval_draws, &mut rng)?;
        for (s, p) in samples.iter().zip(preds) {
            let info = &dataset.subjects[s.subject as usize];
            let c = dataset.channels;
            let attribution = (0..NUM_BANDS * c).map(|i| p.pi[i / c] * p.mu_norms[i]).collect();
            out.push(GatingRecord {
                subject: info.id.clone(),
                epoch: s.epoch,
                label: s.label,
                pi: p.pi,
                p_hat: p.p_hat,
                age: info.age,
                score: info.score,
                attribution,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auc: Option<f64>,
    pub acc: f64,
}

/// Epoch-level metrics and subject-level metrics on per-subject mean scores.
pub fn score_records(records: &[GatingRecord]) -> (Metrics, Metrics) {
    let scores: Vec<f64> = records.iter().map(|r| r.p_hat).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let epoch = Metrics {
        auc: auc(&scores, &labels),
        acc: accuracy(&scores, &labels, 0.5),
    };
    let mut ids: Vec<&str> = Vec::new();
    let mut sums: Vec<(f64, usize, u8)> = Vec::new();
    for r in records {
        match ids.iter().position(|&id| id == r.subject) {
            Some(i) => {
                sums[i].0 += r.p_hat;
                sums[i].1 += 1;
            }
            None => {
                ids.push(&r.subject);
                sums.push((r.p_hat, 1, r.label));
            }
        }
    }
    let s_scores: Vec<f64> = sums.iter().map(|s| s.0 / s.1 as f64).collect();
    let s_labels: Vec<u8> = sums.iter().map(|s| s.2).collect();
    let subject = Metrics {
        auc: auc(&s_scores, &s_labels),
        acc: accuracy(&s_scores, &s_labels, 0.5),
    };
    (epoch, subject)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub subject: Metrics,
    pub epoch: Metrics,
    /// Mean gate weights per class (`[class][band]`); NaN for an absent class.
    pub class_mean_pi: [[f64; NUM_BANDS]; 2],
    pub records: Vec<GatingRecord>,
    pub trace: Vec<LossBreakdown>,
    pub epoch_totals: Vec<f64>,
    pub skipped_steps: u64,
}

fn class_means(records: &[GatingRecord]) -> [[f64; NUM_BANDS]; 2] {
    let mut out = [[f64::NAN; NUM_BANDS]; 2];
    for (class, row) in out.iter_mut().enumerate() {
        let members: Vec<&GatingRecord> = records.iter().filter(|r| r.label as usize == class).collect();
        if members.is_empty() {
            continue;
        }
        for (k, v) in row.iter_mut().enumerate() {
            *v = members.iter().map(|r| r.pi[k]).sum::<f64>() / members.len() as f64;
        }
    }
    out
}

/// Train/test sample indices of one fold.
pub fn fold_split(dataset: &Dataset, assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..dataset.samples.len()).partition(|&i| assignment[dataset.samples[i].subject as usize] == fold);
    (train, test)
}

/// Packs the evaluation records of `fold` with the training history of `trained`.
pub fn fold_result(fold: usize, records: Vec<GatingRecord>, trained: &TrainedModel) -> FoldResult {
    let (epoch, subject) = score_records(&records);
    FoldResult {
        fold,
        subject,
        epoch,
        class_mean_pi: class_means(&records),
        records,
        trace: trained.trace.clone(),
        epoch_totals: trained.epoch_totals.clone(),
        skipped_steps: trained.skipped_steps,
    }
}

/// Trains on every fold but `fold` and evaluates on `fold`; the trained
/// parameters are returned alongside the result.
pub fn train_fold(
    dataset: &Dataset,
    assignment: &[usize],
    fold: usize,
    priors: &Priors,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FoldResult, TrainedModel)> {
    let (train, test) = fold_split(dataset, assignment, fold);
    let stream = fold as u64 + 1;
    let trained = train_model(dataset, &train, priors, model_config, cfg, stream)?;
    let records = evaluate(&trained, dataset, &test, cfg, stream)?;
    Ok((fold_result(fold, records, &trained), trained))
}

/// Like [`train_fold`], dropping the parameters.
pub fn run_fold(
    dataset: &Dataset,
    assignment: &[usize],
    fold: usize,
    priors: &Priors,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldResult> {
    train_fold(dataset, assignment, fold, priors, model_config, cfg).map(|(r, _)| r)
}

/// Mean ± sample std of a metric over folds (absent values skipped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        let (mean, std) = mean_std(&v);
        Self { mean, std, n: v.len() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn subject_auc(&self) -> Summary {
        Summary::of(self.folds.iter().map(|f| f.subject.auc))
    }

    pub fn subject_acc(&self) -> Summary {
        Summary::of(self.folds.iter().map(|f| Some(f.subject.acc)))
    }

    pub fn epoch_auc(&self) -> Summary {
        Summary::of(self.folds.iter().map(|f| f.epoch.auc))
    }

    pub fn epoch_acc(&self) -> Summary {
        Summary::of(self.folds.iter().map(|f| Some(f.epoch.acc)))
    }

    /// Metrics on the pooled out-of-fold predictions.
    pub fn pooled(&self) -> (Metrics, Metrics) {
        score_records(&self.records())
    }

    pub fn records(&self) -> Vec<GatingRecord> {
        self.folds.iter().flat_map(|f| f.records.iter().cloned()).collect()
    }

    /// Mean gate weight per band over all out-of-fold records.
    pub fn mean_pi(&self) -> [f64; NUM_BANDS] {
        let recs = self.records();
        let mut m = [0.0; NUM_BANDS];
        for r in &recs {
            for k in 0..NUM_BANDS {
                m[k] += r.pi[k] / recs.len() as f64;
            }
        }
        m
    }
}

/// Runs every fold sequentially.
pub fn cross_validate(dataset: &Dataset, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<CvResult> {
    cfg.validate()?;
    dataset.validate()?;
    let assignment = subject_kfold(&dataset.subject_labels(), cfg.folds, cfg.seed)?;
    let priors = Priors::build(&dataset.samples, cfg.prior)?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(dataset, &assignment, f, &priors, model_config, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    Age,
    Score,
}

impl Covariate {
    pub fn name(self) -> &'static str {
        match self {
            Covariate::Age => "age",
            Covariate::Score => "score",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub band: Band,
    pub covariate: Covariate,
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingReport {
    /// `[class][band]` → `(mean, [q1, median, q3])`; `None` for an absent class.
    pub class_weights: [[Option<(f64, [f64; 3])>; NUM_BANDS]; 2],
    /// Band-major `K × C`, each band scaled to a maximum of 1.
    pub attribution: Vec<f64>,
    pub channels: usize,
    pub correlations: Vec<Correlation>,
}

impl GatingReport {
    /// Class-1 minus class-0 mean weight per band.
    pub fn class_gap(&self) -> [Option<f64>; NUM_BANDS] {
        core::array::from_fn(|k| match (self.class_weights[0][k], self.class_weights[1][k]) {
            (Some(a), Some(b)) => Some(b.0 - a.0),
            _ => None,
        })
    }
}

pub fn gating_report(records: &[GatingRecord]) -> Result<GatingReport> {
    let first = records.first().ok_or_else(|| Error::Data("no gating records".into()))?;
    let width = first.attribution.len();
    let channels = width / NUM_BANDS;
    let mut class_weights = [[None; NUM_BANDS]; 2];
    for (class, row) in class_weights.iter_mut().enumerate() {
        for (k, cell) in row.iter_mut().enumerate() {
            let v: Vec<f64> = records
                .iter()
                .filter(|r| r.label as usize == class)
                .map(|r| r.pi[k])
                .collect();
            if let Some(q) = quartiles(&v) {
                *cell = Some((v.iter().sum::<f64>() / v.len() as f64, q));
            }
        }
    }
    let mut attribution = vec![0.0; width];
    for r in records {
        for (a, v) in attribution.iter_mut().zip(&r.attribution) {
            *a += v / records.len() as f64;
        }
    }
    for band in attribution.chunks_mut(channels.max(1)) {
        let max = band.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            band.iter_mut().for_each(|v| *v /= max);
        }
    }
    let mut correlations = Vec::new();
    for cov in [Covariate::Age, Covariate::Score] {
        let value = |r: &GatingRecord| match cov {
            Covariate::Age => r.age,
            Covariate::Score => r.score,
        };
        if records.iter().any(|r| value(r).is_none()) {
            continue;
        }
        let x: Vec<f64> = records.iter().map(|r| value(r).unwrap()).collect();
        for b in Band::ALL {
            let y: Vec<f64> = records.iter().map(|r| r.pi[b.index()]).collect();
            if let Some((r, p)) = pearson_r(&y, &x) {
                correlations.push(Correlation {
                    band: b,
                    covariate: cov,
                    r,
                    p,
                    n: x.len(),
                });
            }
        }
    }
    Ok(GatingReport {
        class_weights,
        attribution,
        channels,
        correlations,
    })
}
