//! The closed-form GMRF KL against oracles that share none of its code:
//! dense-matrix algebra via nalgebra and plain Monte-Carlo sampling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vmoge_core::checks::{kl_check, random_kl_instance, KlInstance};
use vmoge_core::graphprior::PrecisionMatrix;
use vmoge_core::objective::{kl_gmrf, kl_monte_carlo, KlSign};

fn column(v: &[f64], latent: usize, j: usize) -> DVector<f64> {
    DVector::from_iterator(v.len() / latent, (0..v.len() / latent).map(|i| v[i * latent + j]))
}

/// `KL(N(μ, Σ_q) ‖ N(0, Σ_p))` with `Σ_p = Q⁻¹` formed explicitly.
fn dense_kl(inst: &KlInstance) -> f64 {
    let c = inst.q.size();
    let q = DMatrix::from_row_slice(c, c, inst.q.matrix());
    let sigma_p = q.clone().try_inverse().expect("Q is invertible");
    let sigma_p_inv = sigma_p.clone().try_inverse().expect("Q⁻¹ is invertible");
    (0..inst.latent)
        .map(|j| {
            let mu = column(&inst.mu, inst.latent, j);
            let var = column(&inst.log_sigma, inst.latent, j).map(|l| (2.0 * l).exp());
            let sigma_q = DMatrix::from_diagonal(&var);
            let trace = (&sigma_p_inv * &sigma_q).trace();
            let quad = (mu.transpose() * &sigma_p_inv * &mu)[(0, 0)];
            let log_ratio = sigma_p.determinant().ln() - var.iter().map(|v| v.ln()).sum::<f64>();
            0.5 * (trace + quad - c as f64 + log_ratio)
        })
        .sum()
}

/// Plain sampling estimate of `E_q[log q(z) − log p(z)]` with full densities,
/// returning the mean and its standard error.
fn sampled_kl<R: Rng>(inst: &KlInstance, draws: usize, rng: &mut R) -> (f64, f64) {
    let c = inst.q.size();
    let q = DMatrix::from_row_slice(c, c, inst.q.matrix());
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_det_q = q.determinant().ln();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut total = 0.0;
        for j in 0..inst.latent {
            let mut z = DVector::zeros(c);
            let mut log_q = 0.0;
            for i in 0..c {
                let ls = inst.log_sigma[i * inst.latent + j];
                let e: f64 = StandardNormal.sample(rng);
                z[i] = inst.mu[i * inst.latent + j] + ls.exp() * e;
                log_q += -half_log_2pi - ls - 0.5 * e * e;
            }
            let log_p = -(c as f64) * half_log_2pi + 0.5 * log_det_q - 0.5 * (z.transpose() * &q * &z)[(0, 0)];
            total += log_q - log_p;
        }
        sum += total;
        sum_sq += total * total;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn closed_form_matches_dense_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let inst = random_kl_instance(&mut rng).unwrap();
        let closed = kl_gmrf(&inst.mu, &inst.log_sigma, inst.latent, &inst.q, KlSign::Standard);
        let dense = dense_kl(&inst);
        assert!(
            (closed - dense).abs() <= 1e-9 * dense.abs().max(1.0),
            "closed form {closed} vs dense {dense}"
        );
        assert!(closed >= -1e-9);
    }
}

#[test]
fn closed_form_within_five_standard_errors_of_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..25 {
        let inst = random_kl_instance(&mut rng).unwrap();
        let closed = kl_gmrf(&inst.mu, &inst.log_sigma, inst.latent, &inst.q, KlSign::Standard);
        let (mc, se) = sampled_kl(&inst, 20_000, &mut rng);
        assert!((closed - mc).abs() < 5.0 * se + 1e-12, "closed {closed}, sampled {mc} ± {se}");
    }
}

#[test]
fn sampling_rejects_the_positive_log_det_sign() {
    // posterior equal to the prior N(0, 4I): the divergence is zero, the
    // +log|Q| variant is log|Q| = 2·log 0.25
    let q = PrecisionMatrix::from_matrix(vec![0.25, 0.0, 0.0, 0.25], 2).unwrap();
    let inst = KlInstance {
        mu: vec![0.0; 2],
        log_sigma: vec![2f64.ln(); 2],
        latent: 1,
        q,
    };
    let standard = kl_gmrf(&inst.mu, &inst.log_sigma, 1, &inst.q, KlSign::Standard);
    let plus = kl_gmrf(&inst.mu, &inst.log_sigma, 1, &inst.q, KlSign::PlusLogDet);
    let (mc, se) = sampled_kl(&inst, 20_000, &mut ChaCha8Rng::seed_from_u64(13));
    assert!(standard.abs() < 1e-12);
    assert!((plus - 2.0 * 0.25f64.ln()).abs() < 1e-12);
    assert!(plus < 0.0);
    assert!((mc - standard).abs() < 5.0 * se + 1e-12);
    assert!((mc - plus).abs() > 100.0 * se);
}

#[test]
fn library_estimator_agrees_with_plain_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let inst = random_kl_instance(&mut rng).unwrap();
        let reduced = kl_monte_carlo(&inst.mu, &inst.log_sigma, inst.latent, &inst.q, 20_000, &mut rng);
        let (mc, se) = sampled_kl(&inst, 20_000, &mut rng);
        assert!((reduced - mc).abs() < 5.0 * se + 1e-9, "library {reduced}, plain {mc} ± {se}");
    }
}

#[test]
fn hundred_instances_within_tolerance() {
    let t = std::time::Instant::now();
    let r = kl_check(100, 100_000, 0).unwrap();
    assert!(r.passes(), "{r:?}");
    assert!(t.elapsed().as_secs() < 60);
}
