//! Mixture likelihood and GMRF KL terms of the training objective.
//!
//! The posterior of one expert is a `C × d_z` mean-field Gaussian. The KL to
//! the prior `N(0, Q⁻¹)` is taken per latent coordinate `j`, treating column
//! `j` as a `C`-vector with covariance `diag(σ²[:, j])`:
//!
//! `KL_j = ½[tr(QΣ_j) + μ_jᵀQμ_j − C − log|Σ_j| − log|Q|]`
//!
//! and summed over `j`. [`KlSign::PlusLogDet`] flips the last term to `+log|Q|`,
//! which is not a divergence (it can go negative) and exists only to reproduce
//! results computed with that formula.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::graphprior::PrecisionMatrix;
use crate::signal::NUM_BANDS;
use crate::stats::normal_quantile;
use crate::tensor::{Result, Tape, Tensor, Var};

/// Bounds applied to `p̂` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlSign {
    /// `−log|Q|`, the Gaussian KL divergence.
    #[default]
    Standard,
    /// `+log|Q|`.
    PlusLogDet,
}

impl KlSign {
    fn logdet_coefficient(self) -> f64 {
        match self {
            KlSign::Standard => -1.0,
            KlSign::PlusLogDet => 1.0,
        }
    }
}

/// Closed-form KL for `μ`, `logσ` stored row-major as `C × d_z`.
pub fn kl_gmrf(mu: &[f64], log_sigma: &[f64], latent: usize, q: &PrecisionMatrix, sign: KlSign) -> f64 {
    let c = q.size();
    assert_eq!(mu.len(), c * latent, "mu must be C x d_z");
    assert_eq!(log_sigma.len(), c * latent, "log_sigma must be C x d_z");
    let qm = q.matrix();
    let mut total = 0.0;
    for j in 0..latent {
        let mut trace = 0.0;
        let mut quad = 0.0;
        let mut log_det_sigma = 0.0;
        for i in 0..c {
            let ls = log_sigma[i * latent + j];
            trace += qm[i * c + i] * libm::exp(2.0 * ls);
            log_det_sigma += 2.0 * ls;
            let row: f64 = (0..c).map(|k| qm[i * c + k] * mu[k * latent + j]).sum();
            quad += mu[i * latent + j] * row;
        }
        total += 0.5
            * (trace + quad - c as f64 - log_det_sigma + sign.logdet_coefficient() * q.logdet());
    }
    total
}

/// Monte-Carlo estimate of `E_q[log q − log p]` from `samples` draws per
/// latent coordinate.
///
/// Draws come in groups that share `|ε|` and differ in sign: `±h_r ⊙ ε` for
/// every row `h_r` of a Sylvester-Hadamard matrix. Orthogonal columns make
/// the cross terms `ε_a ε_b` cancel within a group, and the base draws form a
/// Latin hypercube (each coordinate takes one value from each of as many
/// equal-probability strata as there are groups). Both keep the estimator
/// unbiased.
pub fn kl_monte_carlo<R: Rng + ?Sized>(
    mu: &[f64],
    log_sigma: &[f64],
    latent: usize,
    q: &PrecisionMatrix,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let c = q.size();
    let qm = q.matrix();
    let m = c.next_power_of_two();
    let sign = |r: usize, a: usize| if (r & a).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
    let groups = samples.div_ceil(2 * m).max(1);
    let mut strata: Vec<Vec<usize>> = vec![(0..groups).collect(); c];
    let mut eps = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut total = 0.0;
    for j in 0..latent {
        for s in strata.iter_mut() {
            s.shuffle(rng);
        }
        let log_norm: f64 = (0..c).map(|i| log_sigma[i * latent + j]).sum();
        let mut acc = 0.0;
        for g in 0..groups {
            for (i, e) in eps.iter_mut().enumerate() {
                let u: f64 = rng.random();
                *e = normal_quantile((strata[i][g] as f64 + u) / groups as f64);
            }
            let eps_sq: f64 = eps.iter().map(|e| e * e).sum();
            let mut quad_sum = 0.0;
            for r in 0..m {
                for flip in [1.0, -1.0] {
                    for i in 0..c {
                        z[i] = mu[i * latent + j] + flip * sign(r, i) * libm::exp(log_sigma[i * latent + j]) * eps[i];
                    }
                    quad_sum += (0..c)
                        .map(|i| z[i] * (0..c).map(|k| qm[i * c + k] * z[k]).sum::<f64>())
                        .sum::<f64>();
                }
            }
            acc += -0.5 * eps_sq + 0.5 * quad_sum / (2 * m) as f64;
        }
        total += acc / groups as f64 - log_norm - 0.5 * q.logdet();
    }
    total
}

/// Batch-mean KL on the tape. `mu`, `log_sigma` are `[N, C, d_z]`; `priors[n]`
/// is the precision of sample `n`.
pub fn kl_gmrf_tape(
    tape: &mut Tape,
    mu: Var,
    log_sigma: Var,
    priors: &[&PrecisionMatrix],
    sign: KlSign,
) -> Result<Var> {
    let s = tape.shape(mu).to_vec();
    let (n, c, d) = (s[0], s[1], s[2]);
    assert_eq!(priors.len(), n, "one prior per sample");
    let mut diag = Vec::with_capacity(n * c * d);
    let mut full = Vec::with_capacity(n * c * c);
    let mut constant = 0.0;
    for q in priors {
        for i in 0..c {
            let qi = q.get(i, i);
            diag.extend(core::iter::repeat_n(qi, d));
        }
        full.extend_from_slice(q.matrix());
        constant += -((c * d) as f64) + sign.logdet_coefficient() * d as f64 * q.logdet();
    }
    let diag = tape.constant(Tensor::new(&[n, c, d], diag)?);
    let full = tape.constant(Tensor::new(&[n, c, c], full)?);

    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let tr = tape.mul(diag, var)?;
    let tr = tape.sum(tr);
    let q_mu = tape.batch_matmul(full, mu)?;
    let quad = tape.mul(mu, q_mu)?;
    let quad = tape.sum(quad);
    let log_det = tape.sum(two_ls);
    let a = tape.add(tr, quad)?;
    let a = tape.sub(a, log_det)?;
    let a = tape.add_scalar(a, constant);
    Ok(tape.scale(a, 0.5 / n as f64))
}

/// Counts probabilities that had to be clamped away from 0 or 1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampCounter {
    pub clamped: u64,
}

/// Binary cross-entropy of a mixed probability.
pub fn classification_nll(p: f64, y: u8, counter: &mut ClampCounter) -> f64 {
    let clamped = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if clamped != p {
        counter.clamped += 1;
        log::warn!("predicted probability {p} clamped to {clamped}");
    }
    if y == 1 {
        -libm::log(clamped)
    } else {
        -libm::log1p(-clamped)
    }
}

/// One evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: [f64; NUM_BANDS],
    pub total: f64,
    pub lambda_kl: f64,
}

impl LossBreakdown {
    pub fn new(nll: f64, kl: [f64; NUM_BANDS], lambda_kl: f64) -> Self {
        Self {
            nll,
            kl,
            total: nll + lambda_kl * kl.iter().sum::<f64>(),
            lambda_kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.nll.is_finite() && self.kl.iter().all(|k| k.is_finite())
    }
}
