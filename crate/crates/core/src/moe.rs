//! Band experts, the softmax gate and expert mixing.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::nn::Linear;
use crate::signal::NUM_BANDS;
use crate::tensor::{Init, ParameterStore, Result, Tape, Var, LEAKY_SLOPE};

pub const EXPERT_HIDDEN: usize = 16;
pub const GATE_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixtureMode {
    /// `p̂ = Σ π_k σ(ℓ_k)`.
    #[default]
    ProbMix,
    /// `p̂ = σ(Σ π_k ℓ_k)`.
    LogitMix,
}

impl MixtureMode {
    pub fn name(self) -> &'static str {
        match self {
            MixtureMode::ProbMix => "prob",
            MixtureMode::LogitMix => "logit",
        }
    }
}

impl fmt::Display for MixtureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixtureMode {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "prob" | "prob-mix" => Ok(MixtureMode::ProbMix),
            "logit" | "logit-mix" => Ok(MixtureMode::LogitMix),
            _ => Err(()),
        }
    }
}

/// `d_z → 16 → 1` decoder of one expert.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expert {
    hidden: Linear,
    out: Linear,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, prefix: &str, latent: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.hidden"), latent, EXPERT_HIDDEN, rng)?,
            // zero output layer: every expert starts at logit 0, so the gate has
            // no class-dependent routing signal until an expert becomes informative
            out: Linear::with_init(store, &format!("{prefix}.out"), EXPERT_HIDDEN, 1, Init::Zeros, rng)?,
        })
    }

    /// `[N, d_z] → [N, 1]` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, z_bar: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, z_bar)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.out.forward(tape, store, h)
    }
}

/// `[N, C, d_z] → [N, d_z]`.
pub fn mean_pool(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.mean_axis(z, 1)
}

/// Gate `φ(H′) = ρ(mean_c H′ · W + b)`, logits `w_kᵀφ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gate {
    feature: Linear,
    weights: crate::tensor::ParamId,
}

impl Gate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, prefix: &str, input: usize, rng: &mut R) -> Result<Self> {
        let feature = Linear::new(store, &format!("{prefix}.feature"), input, GATE_HIDDEN, rng)?;
        // uniform π at initialization
        let weights = store.init(
            &format!("{prefix}.experts"),
            &[GATE_HIDDEN, NUM_BANDS],
            Init::Zeros,
            rng,
        )?;
        Ok(Self { feature, weights })
    }

    /// Gate logits `[N, K]` from the channel-mean of `H′` (`[N, K·d_h]`).
    pub fn logits(&self, tape: &mut Tape, store: &ParameterStore, pooled: Var) -> Result<Var> {
        let phi = self.feature.forward(tape, store, pooled)?;
        let phi = tape.leaky_relu(phi, LEAKY_SLOPE);
        let w = tape.param(store, self.weights);
        tape.matmul(phi, w)
    }
}

/// Numerically stable softmax of a plain vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Mixed predictive probability.
pub fn mixture_predict(pi: &[f64], logits: &[f64], mode: MixtureMode) -> f64 {
    match mode {
        MixtureMode::ProbMix => pi.iter().zip(logits).map(|(p, &l)| p * sigmoid(l)).sum(),
        MixtureMode::LogitMix => sigmoid(pi.iter().zip(logits).map(|(p, l)| p * l).sum()),
    }
}

/// Per-sample `log p(y)` under the mixture, `[N]`, from log gate weights
/// `[N, K]`, expert logits `[N, K]` and a constant `±1` label sign `[N, K]`.
pub fn mixture_log_likelihood(
    tape: &mut Tape,
    log_pi: Var,
    logits: Var,
    sign: Var,
    mode: MixtureMode,
) -> Result<Var> {
    match mode {
        MixtureMode::ProbMix => {
            // log σ(s·ℓ) = −softplus(−s·ℓ)
            let signed = tape.mul(logits, sign)?;
            let neg = tape.scale(signed, -1.0);
            let sp = tape.softplus(neg);
            let log_sig = tape.scale(sp, -1.0);
            let joint = tape.add(log_pi, log_sig)?;
            Ok(tape.logsumexp(joint))
        }
        MixtureMode::LogitMix => {
            let pi = tape.exp(log_pi);
            let weighted = tape.mul(pi, logits)?;
            let mixed = tape.sum_axis(weighted, 1)?;
            let n = tape.shape(mixed)[0];
            let s = tape.narrow(sign, 1, 0, 1)?;
            let s = tape.reshape(s, &[n])?;
            let signed = tape.mul(mixed, s)?;
            let neg = tape.scale(signed, -1.0);
            let sp = tape.softplus(neg);
            Ok(tape.scale(sp, -1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_pool_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap());
        let p = mean_pool(&mut tape, z).unwrap();
        assert_eq!(tape.value(p), &[1.0, 1.0]);
        let z = tape.constant(Tensor::new(&[1, 2, 2], vec![0.5, -2.0, -0.5, 2.0]).unwrap());
        let p = mean_pool(&mut tape, z).unwrap();
        assert_eq!(tape.value(p), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[1.5; 4]), vec![0.25; 4]);
        let e10 = libm::exp(10.0);
        let top = softmax(&[10.0, 0.0, 0.0, 0.0])[0];
        assert!((top - e10 / (e10 + 3.0)).abs() < 1e-15);
        assert!(top > 0.9998);
        let a = softmax(&[0.3, -1.0, 2.0, 0.1]);
        let b = softmax(&[100.3, 99.0, 102.0, 100.1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_examples() {
        let logits = [0.7, -3.0, 1.0, 2.0];
        for mode in [MixtureMode::ProbMix, MixtureMode::LogitMix] {
            assert!((mixture_predict(&[1.0, 0.0, 0.0, 0.0], &logits, mode) - sigmoid(0.7)).abs() < 1e-15);
            assert!((mixture_predict(&[0.1, 0.2, 0.3, 0.4], &[0.4; 4], mode) - sigmoid(0.4)).abs() < 1e-15);
        }
        let l9 = libm::log(9.0);
        let p = mixture_predict(&[0.7, 0.1, 0.1, 0.1], &[l9, 0.0, 0.0, 0.0], MixtureMode::ProbMix);
        assert!((p - 0.78).abs() < 1e-12);
    }

    #[test]
    fn zero_expert_gives_half() {
        let mut store = ParameterStore::new();
        let e = Expert::new(&mut store, "e", 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let l = e.forward(&mut tape, &store, z).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn tape_likelihood_matches_plain_mixture() {
        let pi = [0.1, 0.2, 0.3, 0.4];
        let logits = [0.5, -1.0, 2.0, -0.3];
        for mode in [MixtureMode::ProbMix, MixtureMode::LogitMix] {
            let p = mixture_predict(&pi, &logits, mode);
            for y in [0.0, 1.0] {
                let mut tape = Tape::new();
                let lp = tape.constant(Tensor::new(&[1, 4], pi.iter().map(|v| libm::log(*v)).collect()).unwrap());
                let l = tape.constant(Tensor::new(&[1, 4], logits.to_vec()).unwrap());
                let s = tape.constant(Tensor::filled(&[1, 4], 2.0 * y - 1.0));
                let ll = mixture_log_likelihood(&mut tape, lp, l, s, mode).unwrap();
                let want = if y == 1.0 { libm::log(p) } else { libm::log(1.0 - p) };
                assert!((tape.value(ll)[0] - want).abs() < 1e-12);
            }
        }
    }
}
