//! Per-band variational graph encoder.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graphprior::normalized_adjacency;
use crate::nn::Linear;
use crate::tensor::{ParameterStore, Result, Tape, Tensor, Var, LEAKY_SLOPE};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub add_self_loops: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 16,
            hidden_dim: 16,
            latent_dim: 8,
            add_self_loops: false,
        }
    }
}

/// `Â = D^{-1/2} A D^{-1/2}`, optionally on `A + I`.
pub fn normalize_adjacency(a: &[f64], c: usize, self_loops: bool) -> Vec<f64> {
    if !self_loops {
        return normalized_adjacency(a, c);
    }
    let mut looped = a.to_vec();
    for i in 0..c {
        looped[i * c + i] += 1.0;
    }
    normalized_adjacency(&looped, c)
}

/// Posterior mean and clamped log standard deviation, both `[N, C, d_z]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posterior {
    pub mu: Var,
    pub log_sigma: Var,
}

/// GCN plus posterior heads of one band expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandEncoder {
    layer1: Linear,
    layer2: Linear,
    mu_head: Linear,
    log_sigma_head: Linear,
}

impl BandEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            layer1: Linear::new(store, &format!("{prefix}.gcn1"), cfg.in_dim, cfg.hidden_dim, rng)?,
            layer2: Linear::new(store, &format!("{prefix}.gcn2"), cfg.hidden_dim, cfg.hidden_dim, rng)?,
            mu_head: Linear::new(store, &format!("{prefix}.mu"), cfg.hidden_dim, cfg.latent_dim, rng)?,
            log_sigma_head: Linear::new(
                store,
                &format!("{prefix}.log_sigma"),
                cfg.hidden_dim,
                cfg.latent_dim,
                rng,
            )?,
        })
    }

    /// `Â·ρ(Â·H·W₁ + b₁)·W₂ + b₂` for `H: [N, C, d_h]`, `Â: [N, C, C]`.
    pub fn gcn(&self, tape: &mut Tape, store: &ParameterStore, h: Var, a_hat: Var) -> Result<Var> {
        let x = propagate(tape, store, &self.layer1, h, a_hat)?;
        let x = tape.leaky_relu(x, LEAKY_SLOPE);
        propagate(tape, store, &self.layer2, x, a_hat)
    }

    pub fn posterior(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> Result<Posterior> {
        let mu = self.mu_head.forward(tape, store, h)?;
        let raw = self.log_sigma_head.forward(tape, store, h)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        Ok(Posterior { mu, log_sigma })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, h: Var, a_hat: Var) -> Result<Posterior> {
        let g = self.gcn(tape, store, h, a_hat)?;
        self.posterior(tape, store, g)
    }
}

// Â·(X·W) + b: the bias is added after propagation.
fn propagate(tape: &mut Tape, store: &ParameterStore, layer: &Linear, x: Var, a_hat: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let w = tape.param(store, layer.weight);
    let xw = tape.matmul(flat, w)?;
    let xw = tape.reshape(xw, &[s[0], s[1], layer.fan_out])?;
    let ax = tape.batch_matmul(a_hat, xw)?;
    match layer.bias {
        Some(b) => {
            let b = tape.param(store, b);
            tape.add(ax, b)
        }
        None => Ok(ax),
    }
}

/// `Z = μ + exp(logσ)⊙ε` with `ε` held constant.
pub fn reparameterize(tape: &mut Tape, post: Posterior, eps: Tensor) -> Result<Var> {
    let e = tape.constant(eps);
    let sigma = tape.exp(post.log_sigma);
    let noise = tape.mul(sigma, e)?;
    tape.add(post.mu, noise)
}

/// Standard-normal draw of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
