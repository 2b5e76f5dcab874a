//! Flat `key = value` run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vmoge_core::graphprior::{PriorSpec, PriorVariant};
use vmoge_core::mgtnfe::{Aggregation, ExtractorConfig, GranularityConfig};
use vmoge_core::model::ModelConfig;
use vmoge_core::moe::MixtureMode;
use vmoge_core::objective::KlSign;
use vmoge_core::trainer::TrainConfig;
use vmoge_core::vencoder::EncoderConfig;

use crate::error::{CliError, Result};

/// Every model and training knob. Missing keys take defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_kl: f64,
    pub prior: String,
    pub lambda_shift: f64,
    pub plus_logdet_kl: bool,
    pub eval_draws: usize,
    pub granularity: String,
    pub mixture: String,
    pub aggregation: String,
    pub token_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub feature_dim: usize,
    pub l_max: usize,
    pub positional_encoding: bool,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub self_loops: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let x = ExtractorConfig::default();
        let e = EncoderConfig::default();
        Self {
            seed: t.seed,
            folds: t.folds,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.betas.0,
            beta2: t.betas.1,
            lambda_kl: t.lambda_kl,
            prior: t.prior.variant.name().into(),
            lambda_shift: t.prior.shift,
            plus_logdet_kl: t.kl_sign == KlSign::PlusLogDet,
            eval_draws: t.eval_draws,
            granularity: "coarse".into(),
            mixture: MixtureMode::default().name().into(),
            aggregation: x.aggregation.to_string(),
            token_dim: x.token_dim,
            heads: x.heads,
            layers: x.layers,
            feature_dim: x.out_dim,
            l_max: x.l_max,
            positional_encoding: x.positional_encoding,
            hidden_dim: e.hidden_dim,
            latent_dim: e.latent_dim,
            self_loops: e.add_self_loops,
        }
    }
}

fn invalid(key: &str, value: &str) -> CliError {
    CliError::Invalid(format!("invalid value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::format(path, e))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        let variant: PriorVariant = self.prior.parse().map_err(|_| invalid("prior", &self.prior))?;
        Ok(PriorSpec::new(variant, self.lambda_shift))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr: self.lr,
            betas: (self.beta1, self.beta2),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda_kl: self.lambda_kl,
            prior: self.prior_spec()?,
            kl_sign: if self.plus_logdet_kl {
                KlSign::PlusLogDet
            } else {
                KlSign::Standard
            },
            folds: self.folds,
            seed: self.seed,
            eval_draws: self.eval_draws,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, fs: f64) -> Result<ModelConfig> {
        let granularity: GranularityConfig = self
            .granularity
            .parse()
            .map_err(|_| invalid("granularity", &self.granularity))?;
        let mixture: MixtureMode = self.mixture.parse().map_err(|_| invalid("mixture", &self.mixture))?;
        let aggregation: Aggregation = self
            .aggregation
            .parse()
            .map_err(|_| invalid("aggregation", &self.aggregation))?;
        Ok(ModelConfig {
            fs,
            granularity,
            extractor: ExtractorConfig {
                token_dim: self.token_dim,
                heads: self.heads,
                layers: self.layers,
                out_dim: self.feature_dim,
                aggregation,
                l_max: self.l_max,
                positional_encoding: self.positional_encoding,
            },
            encoder: EncoderConfig {
                in_dim: self.feature_dim,
                hidden_dim: self.hidden_dim,
                latent_dim: self.latent_dim,
                add_self_loops: self.self_loops,
            },
            mixture,
        })
    }

    /// Checks every value without building anything.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.model_config(1.0)?;
        Ok(())
    }
}
