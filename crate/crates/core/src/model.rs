//! The full mixture of band experts.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::features::BandFeatureTensor;
use crate::graphprior::{precision_matrix, PrecisionMatrix, PriorSpec};
use crate::mgtnfe::{Extractor, ExtractorConfig, GranularityConfig};
use crate::moe::{mean_pool, mixture_log_likelihood, mixture_predict, softmax, Expert, Gate, MixtureMode};
use crate::objective::{kl_gmrf_tape, KlSign, LossBreakdown, PROB_FLOOR};
use crate::signal::{Band, NUM_BANDS};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use crate::vencoder::{normalize_adjacency, reparameterize, standard_normal, BandEncoder, EncoderConfig, Posterior};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub fs: f64,
    pub granularity: GranularityConfig,
    pub extractor: ExtractorConfig,
    pub encoder: EncoderConfig,
    pub mixture: MixtureMode,
}

impl ModelConfig {
    pub fn new(fs: f64, granularity: GranularityConfig) -> Self {
        Self {
            fs,
            granularity,
            extractor: ExtractorConfig::default(),
            encoder: EncoderConfig::default(),
            mixture: MixtureMode::default(),
        }
    }
}

/// Priors of every sample and band, indexed like the dataset's samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Priors {
    pub spec: Option<PriorSpec>,
    matrices: Vec<Vec<PrecisionMatrix>>,
}

impl Priors {
    pub fn none() -> Self {
        Self::default()
    }

    /// Builds `Q^(k)` for every sample; `None` when the variant is `none`.
    pub fn build(samples: &[BandFeatureTensor], spec: PriorSpec) -> Result<Self> {
        if spec.is_none() {
            return Ok(Self::none());
        }
        let mut matrices = Vec::with_capacity(samples.len());
        for s in samples {
            let mut per_band = Vec::with_capacity(NUM_BANDS);
            for b in Band::ALL {
                per_band.push(precision_matrix(s.adjacency_band(b), s.channels, spec)?);
            }
            matrices.push(per_band);
        }
        Ok(Self {
            spec: Some(spec),
            matrices,
        })
    }

    pub fn is_active(&self) -> bool {
        self.spec.is_some()
    }

    pub fn get(&self, sample: usize, band: Band) -> &PrecisionMatrix {
        &self.matrices[sample][band.index()]
    }
}

/// Encoder outputs of one batch, before latent sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded {
    pub posteriors: [Posterior; NUM_BANDS],
    pub log_pi: Var,
    pub batch: usize,
}

/// Tape handles of the objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVars {
    pub nll: Var,
    pub kl: Option<[Var; NUM_BANDS]>,
    pub total: Var,
    pub clamped: usize,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, lambda_kl: f64) -> LossBreakdown {
        let kl = match self.kl {
            Some(k) => k.map(|v| tape.item(v)),
            None => [0.0; NUM_BANDS],
        };
        let mut b = LossBreakdown::new(tape.item(self.nll), kl, lambda_kl);
        b.total = tape.item(self.total);
        b
    }
}

/// Objective settings shared by training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda_kl: f64,
    pub kl_sign: KlSign,
}

/// Evaluation output of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pi: [f64; NUM_BANDS],
    pub p_hat: f64,
    /// `‖μ_c^(k)‖₂`, band-major `K × C`.
    pub mu_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    extractor: Extractor,
    encoders: Vec<BandEncoder>,
    experts: Vec<Expert>,
    gate: Gate,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.encoder.in_dim != config.extractor.out_dim {
            return Err(Error::Config(format!(
                "encoder input width {} differs from extractor output width {}",
                config.encoder.in_dim, config.extractor.out_dim
            )));
        }
        let extractor = Extractor::new(
            store,
            "mgt",
            config.extractor.clone(),
            &config.granularity,
            config.fs,
            rng,
        )?;
        let mut encoders = Vec::with_capacity(NUM_BANDS);
        let mut experts = Vec::with_capacity(NUM_BANDS);
        for b in Band::ALL {
            encoders.push(BandEncoder::new(store, &format!("{}.encoder", b.name()), &config.encoder, rng)?);
        }
        for b in Band::ALL {
            experts.push(Expert::new(
                store,
                &format!("{}.expert", b.name()),
                config.encoder.latent_dim,
                rng,
            )?);
        }
        let gate = Gate::new(store, "gate", NUM_BANDS * config.extractor.out_dim, rng)?;
        Ok(Self {
            config,
            extractor,
            encoders,
            experts,
            gate,
        })
    }

    /// A model with a fresh store initialized from a fixed seed, meant to
    /// have its parameters overwritten by saved values.
    pub fn blank(config: ModelConfig) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let model = Self::new(&mut store, config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.encoder.latent_dim
    }

    /// Rough count of tape cells one sample occupies: attention maps plus
    /// token activations over every band, channel and block.
    pub fn cells_per_sample(&self, channels: usize, len: usize) -> usize {
        let x = &self.config.extractor;
        let l = self.extractor.plan(len).total();
        let per_block = x.heads * l * l + 8 * l * x.token_dim;
        NUM_BANDS * channels * x.layers.max(1) * per_block
    }

    /// Runs the extractor, graph encoders and gate on a batch.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, samples: &[&BandFeatureTensor]) -> Result<Encoded> {
        let n = samples.len();
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (c, t) = (first.channels, first.len);
        let seq = n * c;
        let mut x = Vec::with_capacity(NUM_BANDS * seq * t);
        for b in Band::ALL {
            for s in samples {
                x.extend_from_slice(s.filtered_band(b));
            }
        }
        let x = tape.constant(Tensor::new(&[NUM_BANDS * seq, t], x)?);
        let h = self.extractor.forward(tape, store, x)?;
        let d_h = self.config.extractor.out_dim;

        let mut posteriors = Vec::with_capacity(NUM_BANDS);
        let mut pooled = Vec::with_capacity(NUM_BANDS);
        for b in Band::ALL {
            let k = b.index();
            let hk = tape.narrow(h, 0, k * seq, seq)?;
            let hk = tape.reshape(hk, &[n, c, d_h])?;
            let mut a_hat = Vec::with_capacity(n * c * c);
            for s in samples {
                a_hat.extend(normalize_adjacency(
                    s.adjacency_band(b),
                    c,
                    self.config.encoder.add_self_loops,
                ));
            }
            let a_hat = tape.constant(Tensor::new(&[n, c, c], a_hat)?);
            posteriors.push(self.encoders[k].forward(tape, store, hk, a_hat)?);
            pooled.push(tape.mean_axis(hk, 1)?);
        }
        let h_prime = tape.concat(&pooled, 1)?;
        let gate_logits = self.gate.logits(tape, store, h_prime)?;
        let log_pi = tape.log_softmax(gate_logits);
        Ok(Encoded {
            posteriors: [posteriors[0], posteriors[1], posteriors[2], posteriors[3]],
            log_pi,
            batch: n,
        })
    }

    /// Expert logits `[N, K]` for one latent draw per band (`ε[k]: [N, C, d_z]`).
    pub fn decode(&self, tape: &mut Tape, store: &ParameterStore, enc: &Encoded, eps: Vec<Tensor>) -> Result<Var> {
        let mut logits = Vec::with_capacity(NUM_BANDS);
        for (k, e) in eps.into_iter().enumerate() {
            let z = reparameterize(tape, enc.posteriors[k], e)?;
            let z_bar = mean_pool(tape, z)?;
            logits.push(self.experts[k].forward(tape, store, z_bar)?);
        }
        Ok(tape.concat(&logits, 1)?)
    }

    /// Draws `ε` for every band of a batch.
    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, channels: usize, rng: &mut R) -> Vec<Tensor> {
        (0..NUM_BANDS)
            .map(|_| standard_normal(&[batch, channels, self.latent_dim()], rng))
            .collect()
    }

    /// Negative ELBO of a batch with the given noise. `indices` address
    /// `priors`; pass an inactive [`Priors`] to drop the KL term.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        samples: &[&BandFeatureTensor],
        indices: &[usize],
        priors: &Priors,
        objective: ObjectiveConfig,
        eps: Vec<Tensor>,
    ) -> Result<LossVars> {
        let enc = self.encode(tape, store, samples)?;
        let logits = self.decode(tape, store, &enc, eps)?;
        let n = samples.len();
        let mut sign = Vec::with_capacity(n * NUM_BANDS);
        for s in samples {
            let v = if s.label == 1 { 1.0 } else { -1.0 };
            sign.extend_from_slice(&[v; NUM_BANDS]);
        }
        let sign = tape.constant(Tensor::new(&[n, NUM_BANDS], sign)?);
        let ll = mixture_log_likelihood(tape, enc.log_pi, logits, sign, self.config.mixture)?;
        let per_sample = tape.scale(ll, -1.0);
        let (lo, hi) = (-libm::log1p(-PROB_FLOOR), -libm::log(PROB_FLOOR));
        let clamped = tape.value(per_sample).iter().filter(|&&v| v < lo || v > hi).count();
        let per_sample = tape.clamp(per_sample, lo, hi);
        let nll = tape.mean(per_sample);

        if !priors.is_active() {
            return Ok(LossVars {
                nll,
                kl: None,
                total: nll,
                clamped,
            });
        }
        let mut kl = Vec::with_capacity(NUM_BANDS);
        for b in Band::ALL {
            let qs: Vec<&PrecisionMatrix> = indices.iter().map(|&i| priors.get(i, b)).collect();
            let p = enc.posteriors[b.index()];
            kl.push(kl_gmrf_tape(tape, p.mu, p.log_sigma, &qs, objective.kl_sign)?);
        }
        let kl_sum = tape.add(kl[0], kl[1])?;
        let kl_sum = tape.add(kl_sum, kl[2])?;
        let kl_sum = tape.add(kl_sum, kl[3])?;
        let weighted = tape.scale(kl_sum, objective.lambda_kl);
        let total = tape.add(nll, weighted)?;
        Ok(LossVars {
            nll,
            kl: Some([kl[0], kl[1], kl[2], kl[3]]),
            total,
            clamped,
        })
    }

    /// Gate weights, mixed probability averaged over `draws` latent samples,
    /// and posterior-mean norms for every sample of a batch.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        samples: &[&BandFeatureTensor],
        draws: usize,
        rng: &mut R,
    ) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, store, samples)?;
        let n = samples.len();
        let c = samples[0].channels;
        let d = self.latent_dim();
        let log_pi = tape.value(enc.log_pi).to_vec();
        let mut out: Vec<Prediction> = (0..n)
            .map(|i| {
                let pi = softmax(&log_pi[i * NUM_BANDS..(i + 1) * NUM_BANDS]);
                Prediction {
                    pi: [pi[0], pi[1], pi[2], pi[3]],
                    p_hat: 0.0,
                    mu_norms: vec![0.0; NUM_BANDS * c],
                }
            })
            .collect();
        for k in 0..NUM_BANDS {
            let mu = tape.value(enc.posteriors[k].mu);
            for (i, p) in out.iter_mut().enumerate() {
                for ch in 0..c {
                    let row = &mu[(i * c + ch) * d..(i * c + ch + 1) * d];
                    p.mu_norms[k * c + ch] = libm::sqrt(row.iter().map(|v| v * v).sum());
                }
            }
        }
        let draws = draws.max(1);
        for _ in 0..draws {
            let eps = self.draw_noise(n, c, rng);
            let logits = self.decode(&mut tape, store, &enc, eps)?;
            let lv = tape.value(logits);
            for (i, p) in out.iter_mut().enumerate() {
                p.p_hat += mixture_predict(&p.pi, &lv[i * NUM_BANDS..(i + 1) * NUM_BANDS], self.config.mixture)
                    / draws as f64;
            }
        }
        Ok(out)
    }
}
