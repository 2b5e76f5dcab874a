//! Self-checks shared by the command line and the test suites.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::features::BandFeatureTensor;
use crate::graphprior::{precision_matrix, PrecisionMatrix, PriorSpec, PriorVariant};
use crate::mgtnfe::{Aggregation, ExtractorConfig, GranularityConfig};
use crate::model::{Model, ModelConfig, ObjectiveConfig, Priors};
use crate::objective::{kl_gmrf, kl_monte_carlo, KlSign};
use crate::signal::NUM_BANDS;
use crate::tensor::{try_grad_check, GradCheckReport, ParameterStore};
use crate::vencoder::EncoderConfig;

/// Random symmetric 0/1 adjacency with zero diagonal and at least one edge.
pub fn random_adjacency<R: Rng + ?Sized>(c: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        for j in i + 1..c {
            if rng.random_bool(p) {
                a[i * c + j] = 1.0;
                a[j * c + i] = 1.0;
            }
        }
    }
    if c > 1 && a.iter().all(|&v| v == 0.0) {
        a[1] = 1.0;
        a[c] = 1.0;
    }
    a
}

/// Configuration of the tiny model: `C = 4`, `T′ = 64`, `D_T = 8`, `d_z = 4`.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        fs: 100.0,
        granularity: GranularityConfig::preset("mixed-1").expect("preset exists"),
        extractor: ExtractorConfig {
            token_dim: 8,
            heads: 2,
            layers: 1,
            out_dim: 8,
            aggregation: Aggregation::Mean,
            ..ExtractorConfig::default()
        },
        encoder: EncoderConfig {
            in_dim: 8,
            hidden_dim: 8,
            latent_dim: 4,
            add_self_loops: false,
        },
        mixture: Default::default(),
    }
}

/// Two random labeled samples shaped for [`tiny_model_config`].
pub fn tiny_batch<R: Rng + ?Sized>(rng: &mut R) -> Vec<BandFeatureTensor> {
    let (c, len) = (4, 64);
    (0..2)
        .map(|i| BandFeatureTensor {
            subject: i,
            epoch: 0,
            label: i as u8,
            channels: c,
            len,
            rbp: vec![0.25; NUM_BANDS * c],
            filtered: (0..NUM_BANDS * c * len).map(|_| StandardNormal.sample(rng)).collect(),
            adjacency: (0..NUM_BANDS).flat_map(|_| random_adjacency(c, 0.5, rng)).collect(),
        })
        .collect()
}

/// Gradient check of the full negative ELBO (KL included) on the tiny model.
/// Every parameter is perturbed away from its initializer first, so
/// zero-initialized layers do not hide any gradient path.
pub fn tiny_model_gradcheck(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let model = Model::new(&mut store, tiny_model_config(), &mut rng)?;
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v += jitter.sample(&mut rng);
        }
    }
    let batch = tiny_batch(&mut rng);
    let samples: Vec<&BandFeatureTensor> = batch.iter().collect();
    let priors = Priors::build(&batch, PriorSpec::new(PriorVariant::NormalizedShift, 0.1))?;
    let objective = ObjectiveConfig {
        lambda_kl: 0.6,
        kl_sign: KlSign::Standard,
    };
    let eps_noise = model.draw_noise(samples.len(), 4, &mut rng);
    try_grad_check(
        |tape, s| {
            model
                .loss(tape, s, &samples, &[0, 1], &priors, objective, eps_noise.clone())
                .map(|v| v.total)
        },
        &store,
        eps,
    )
}

/// A random KL instance: posterior `(μ, logσ)` row-major `C × d_z` and a
/// shifted-Laplacian precision.
#[derive(Debug, Clone, PartialEq)]
pub struct KlInstance {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub latent: usize,
    pub q: PrecisionMatrix,
}

/// `C ∈ 1..=8`, `d_z ∈ 1..=4`, prior `L + λI` or `L_norm + λI` with `λ ∈ [0.1, 1]`.
pub fn random_kl_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<KlInstance> {
    let c = rng.random_range(1..=8);
    let latent = rng.random_range(1..=4);
    let a = random_adjacency(c, 0.5, rng);
    let shift = rng.random_range(0.1..1.0);
    let variant = if rng.random_bool(0.5) {
        PriorVariant::LaplacianShift
    } else {
        PriorVariant::NormalizedShift
    };
    let q = precision_matrix(&a, c, PriorSpec::new(variant, shift))?;
    let mu = (0..c * latent).map(|_| rng.random_range(-1.0..1.0)).collect();
    let log_sigma = (0..c * latent).map(|_| rng.random_range(-0.7..0.3)).collect();
    Ok(KlInstance {
        mu,
        log_sigma,
        latent,
        q,
    })
}

/// Outcome of comparing the closed-form KL with Monte-Carlo estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCheck {
    /// Largest relative error among instances with `|KL| ≥ 0.1`.
    pub max_rel_error: f64,
    /// Largest absolute error among instances with `|KL| < 0.1`.
    pub max_abs_error_small: f64,
    /// Smallest closed-form value seen.
    pub min_kl: f64,
    pub trials: usize,
}

impl KlCheck {
    /// Within 1% relative (1e-3 absolute for `|KL| < 0.1`) and never below −1e-9.
    pub fn passes(&self) -> bool {
        self.max_rel_error < 0.01 && self.max_abs_error_small < 1e-3 && self.min_kl >= -1e-9
    }
}

pub fn kl_check(trials: usize, samples: usize, seed: u64) -> Result<KlCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = KlCheck {
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        min_kl: f64::INFINITY,
        trials,
    };
    for _ in 0..trials {
        let inst = random_kl_instance(&mut rng)?;
        let exact = kl_gmrf(&inst.mu, &inst.log_sigma, inst.latent, &inst.q, KlSign::Standard);
        let mc = kl_monte_carlo(&inst.mu, &inst.log_sigma, inst.latent, &inst.q, samples, &mut rng);
        out.min_kl = out.min_kl.min(exact);
        let err = (exact - mc).abs();
        if exact.abs() < 0.1 {
            out.max_abs_error_small = out.max_abs_error_small.max(err);
        } else {
            out.max_rel_error = out.max_rel_error.max(err / exact.abs());
        }
    }
    Ok(out)
}
