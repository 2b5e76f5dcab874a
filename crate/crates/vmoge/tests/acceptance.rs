//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! if any fails. Criteria 5 to 9 train on synthetic cohorts with
//! `configs/routing.toml` and take roughly half an hour on one core.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vmoge::cli::main_with_args;
use vmoge::config::RunConfig;
use vmoge::{container, run};
use vmoge_core::checks::{kl_check, tiny_model_gradcheck};
use vmoge_core::features::{featurize_dataset, Dataset, FeatureConfig};
use vmoge_core::graphprior::PrecisionMatrix;
use vmoge_core::objective::{kl_gmrf, KlSign};
use vmoge_core::signal::{relative_band_power, Band, BandDefinition, Epoch, WelchParams, NUM_BANDS};
use vmoge_core::synthgen::{generate_dataset, SynthConfig};
use vmoge_core::trainer::CvResult;

const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/routing.toml")
}

fn routing_config() -> RunConfig {
    RunConfig::load(&config_path()).expect("routing config loads")
}

fn feature_config() -> FeatureConfig {
    FeatureConfig {
        epoch_sec: 2.0,
        ..FeatureConfig::default()
    }
}

fn cohort(band: Band, effect: f64, seed: u64) -> Dataset {
    let syn = SynthConfig {
        target_band: band,
        effect_size: effect,
        seed,
        ..SynthConfig::default()
    };
    let (recs, _) = generate_dataset(&syn).expect("synthetic cohort");
    featurize_dataset(&recs, &feature_config()).expect("features").0
}

fn cross_validate(ds: &Dataset, cfg: &RunConfig) -> CvResult {
    let model = cfg.model_config(ds.fs).expect("model config");
    let train = cfg.train_config().expect("train config");
    run::cross_validate(ds, &model, &train, run::threads()).expect("cross-validation").0
}

fn cli(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("vmoge").chain(args.iter().copied()).map(String::from).collect();
    main_with_args(argv)
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn kl_monte_carlo() -> Outcome {
    let start = Instant::now();
    let r = kl_check(100, 100_000, 0).expect("kl check runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.passes() && r.min_kl >= -1e-9 && secs < 60.0,
        format!(
            "max rel {:.2e}, max abs (|KL| < 0.1) {:.2e}, min KL {:.2e}, {secs:.1} s",
            r.max_rel_error, r.max_abs_error_small, r.min_kl
        ),
    )
}

fn kl_closed_form() -> Outcome {
    let std = |mu: &[f64], q: PrecisionMatrix| kl_gmrf(mu, &vec![0.0; mu.len()], 1, &q, KlSign::Standard);
    let same = std(&[0.0, 0.0, 0.0], PrecisionMatrix::identity(3));
    let univariate = std(&[0.0], PrecisionMatrix::from_matrix(vec![2.0], 1).unwrap());
    // Laplacian of the two-node graph plus 0.1·I
    let pair = std(&[0.0, 0.0], PrecisionMatrix::from_matrix(vec![1.1, -1.0, -1.0, 1.1], 2).unwrap());
    outcome(
        same == 0.0 && (univariate - 0.15343).abs() < 5e-6 && (pair - 0.8803).abs() < 5e-5,
        format!("{same}, {univariate:.5}, {pair:.4}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let r = tiny_model_gradcheck(0, 1e-5).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.max_rel_error < 1e-4 && secs < 120.0,
        format!("{} entries, max rel {:.2e}, {secs:.1} s", r.entries_checked, r.max_rel_error),
    )
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn rbp(channels: Vec<Vec<f64>>, fs: f64) -> Vec<f64> {
    let len = channels[0].len();
    let e = Epoch {
        index: 0,
        channels: channels.len(),
        len,
        data: channels.concat(),
    };
    relative_band_power(&e, fs, &BandDefinition::default(), WelchParams::default_for(fs, len))
        .unwrap()
        .values
}

fn spectral() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(1..6);
        let len = rng.random_range(64..600);
        let chans: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                white(&mut rng, len).into_iter().map(|v| v * scale).collect()
            })
            .collect();
        let v = rbp(chans, 128.0);
        for ch in 0..c {
            let total: f64 = (0..NUM_BANDS).map(|b| v[b * c + ch]).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }

    let (fs, n) = (256.0, 1024);
    let tone: Vec<f64> = (0..n).map(|t| (2.0 * PI * 10.0 * t as f64 / fs).sin()).collect();
    let t = rbp(vec![tone], fs);
    let alpha = t[Band::Alpha.index()];
    let leak = [Band::Delta, Band::Theta, Band::Beta].map(|b| t[b.index()]).into_iter().fold(0.0, f64::max);

    let mut mean = [0.0; NUM_BANDS];
    for _ in 0..100 {
        let v = rbp(vec![white(&mut rng, n)], fs);
        for b in 0..NUM_BANDS {
            mean[b] += v[b] / 100.0;
        }
    }
    let expected = [3.5 / 44.5, 4.0 / 44.5, 5.0 / 44.5, 32.0 / 44.5];
    let noise_gap = (0..NUM_BANDS).map(|b| (mean[b] - expected[b]).abs()).fold(0.0, f64::max);

    outcome(
        worst_sum < 1e-9 && alpha > 0.99 && leak < 1e-2 && noise_gap < 0.02,
        format!("column sum error {worst_sum:.1e}, tone α {alpha:.4} leak {leak:.1e}, white-noise gap {noise_gap:.4}"),
    )
}

/// Criterion 5 data: one cross-validation per (band, seed).
struct Routing {
    runs: Vec<(Band, u64, CvResult)>,
    elapsed: Duration,
}

fn routing() -> (Outcome, Routing) {
    let cfg = routing_config();
    let start = Instant::now();
    let mut runs = Vec::new();
    for band in Band::ALL {
        for seed in 0..SEEDS {
            let ds = cohort(band, 2.5, seed);
            let cv = cross_validate(&ds, &RunConfig { seed, ..cfg.clone() });
            runs.push((band, seed, cv));
        }
    }
    let elapsed = start.elapsed();
    let mut pass = elapsed < Duration::from_secs(15 * 60);
    let mut lines = Vec::new();
    for band in Band::ALL {
        let mine: Vec<&CvResult> = runs.iter().filter(|r| r.0 == band).map(|r| &r.2).collect();
        let aucs: Vec<f64> = mine.iter().map(|cv| cv.subject_auc().mean).collect();
        let pooled: Vec<f64> = mine.iter().map(|cv| cv.pooled().1.auc.unwrap_or(f64::NAN)).collect();
        let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let routed = mine.iter().filter(|cv| argmax(&cv.mean_pi()) == band.index()).count();
        pass &= mean_auc >= 0.9 && routed >= 4;
        lines.push(format!(
            "{}: subject AUC {mean_auc:.3} (per seed {aucs:.3?}, pooled {pooled:.3?}), π argmax on target in {routed}/{SEEDS}",
            band.name()
        ));
    }
    let detail = format!("{:.0} s\n    {}", elapsed.as_secs_f64(), lines.join("\n    "));
    (outcome(pass, detail), Routing { runs, elapsed })
}

fn null_control() -> Outcome {
    let cfg = routing_config();
    let aucs: Vec<f64> = (0..SEEDS)
        .map(|seed| cross_validate(&cohort(Band::Alpha, 1.0, seed), &RunConfig { seed, ..cfg.clone() }).subject_auc().mean)
        .collect();
    outcome(aucs.iter().all(|a| (0.3..=0.7).contains(a)), format!("subject AUC per seed {aucs:.3?}"))
}

fn convergence(routing: &Routing) -> Outcome {
    let mut folds = 0;
    let mut fitted = 0;
    let mut worst: f64 = 0.0;
    for (_, _, cv) in &routing.runs {
        for f in &cv.folds {
            let ratio = f.epoch_totals.last().unwrap() / f.epoch_totals[0];
            folds += 1;
            if ratio < 0.8 {
                fitted += 1;
            }
            worst = worst.max(ratio);
        }
    }
    let cfg = RunConfig {
        prior: "pure".into(),
        ..routing_config()
    };
    let cv = cross_validate(&cohort(Band::Alpha, 2.5, 0), &cfg);
    let kl_finite = cv.folds.iter().all(|f| f.trace.iter().all(|b| b.kl.iter().all(|k| k.is_finite())));
    outcome(
        fitted == folds && kl_finite,
        format!("final/first total < 0.8 in {fitted}/{folds} folds (worst {worst:.3}); pure-normalized KL finite: {kl_finite}"),
    )
}

fn write_features(dir: &Path) -> PathBuf {
    let path = dir.join("features.vmg");
    container::write(&path, &cohort(Band::Alpha, 2.5, 0), &feature_config()).expect("features written");
    path
}

fn sweep(dir: &Path, features: &Path) -> Outcome {
    let out = dir.join("sweep.csv");
    let start = Instant::now();
    let code = cli(&[
        "sweep-lambda",
        "--features",
        features.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        config_path().to_str().unwrap(),
    ]);
    let secs = start.elapsed().as_secs_f64();
    if code != 0 {
        return outcome(false, format!("exit status {code}"));
    }
    let mut reader = csv::Reader::from_path(&out).expect("sweep csv");
    let columns = reader.headers().expect("header").len() - 1;
    let rows: Vec<(String, Vec<Option<f64>>)> = reader
        .records()
        .map(|r| {
            let r = r.expect("row");
            (r[0].to_string(), r.iter().skip(1).map(|v| v.parse().ok()).collect())
        })
        .collect();
    let complete = columns == 5 && rows.len() == 4 && rows.iter().all(|(_, v)| v.iter().all(Option::is_some));
    let none = rows.iter().find(|r| r.0 == "none").map(|r| r.1.clone());
    let mut margin: f64 = 0.0;
    if let Some(none) = &none {
        for (_, v) in rows.iter().filter(|r| r.0 != "none") {
            for (a, b) in none.iter().zip(v) {
                if let (Some(a), Some(b)) = (a, b) {
                    margin = margin.max((a - b).abs());
                }
            }
        }
    }
    outcome(
        complete && secs < 45.0 * 60.0 && margin > 0.0,
        format!("{} x {columns} grid, {secs:.0} s, largest none vs GMRF gap {margin:.4}", rows.len()),
    )
}

fn reproducible(dir: &Path, features: &Path) -> Outcome {
    let train = |name: &str| {
        let out = dir.join(name);
        let code = cli(&[
            "train",
            "--features",
            features.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            config_path().to_str().unwrap(),
            "--seed",
            "7",
        ]);
        (code, out)
    };
    let (ca, a) = train("a");
    let (cb, b) = train("b");
    if ca != 0 || cb != 0 {
        return outcome(false, format!("exit statuses {ca}, {cb}"));
    }
    let same = |file: &str| fs::read(a.join(file)).unwrap() == fs::read(b.join(file)).unwrap();
    let (metrics, gating) = (same("metrics.json"), same("gating.csv"));
    outcome(metrics && gating, format!("metrics.json identical: {metrics}, gating.csv identical: {gating}"))
}

fn main() {
    let mut results = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };
    report(1, kl_monte_carlo());
    report(2, kl_closed_form());
    report(3, gradients());
    report(4, spectral());
    let (o, routing) = routing();
    report(5, o);
    report(6, null_control());
    report(7, convergence(&routing));
    let dir = tempfile::tempdir().expect("temp dir");
    let features = write_features(dir.path());
    report(8, sweep(dir.path(), &features));
    report(9, reproducible(dir.path(), &features));
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed (criterion 5 took {:.0} s)", results.len() - failed, results.len(), routing.elapsed.as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
