use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmoge_core::graphprior::{
    build_adjacency, logdet_pd, normalized_adjacency, normalized_laplacian, precision_matrix, PriorSpec,
    PriorVariant, PURE_JITTER,
};
use vmoge_core::signal::Band;

fn eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn random_graph(seed: u64, n: usize, density: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                let w = rng.random_range(0.05..1.0);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
    }
    a
}

fn connected_graph(seed: u64, n: usize) -> Vec<f64> {
    let mut a = random_graph(seed, n, 0.3);
    for i in 0..n - 1 {
        if a[i * n + i + 1] == 0.0 {
            a[i * n + i + 1] = 0.5;
            a[(i + 1) * n + i] = 0.5;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_laplacian_spectrum_in_unit_band(seed in any::<u64>(), n in 2usize..20, p in 0.0f64..1.0) {
        let a = random_graph(seed, n, p);
        let ev = eigenvalues(&normalized_laplacian(&a, n), n);
        prop_assert!(ev[0] >= -1e-9);
        prop_assert!(ev[n - 1] <= 2.0 + 1e-9);
    }

    #[test]
    fn normalized_adjacency_spectral_radius(seed in any::<u64>(), n in 2usize..20) {
        let a = random_graph(seed, n, 0.5);
        let ev = eigenvalues(&normalized_adjacency(&a, n), n);
        prop_assert!(ev.iter().all(|v| v.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn logdet_matches_eigen_sum(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bm = DMatrix::from_row_slice(n, n, &b);
        let q = &bm * bm.transpose() + DMatrix::identity(n, n) * 0.1;
        let flat: Vec<f64> = q.transpose().iter().copied().collect();
        let want: f64 = eigenvalues(&flat, n).iter().map(|v| v.ln()).sum();
        let got = logdet_pd(&flat, n).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn shift_variants_bounded_below_and_markov(seed in any::<u64>(), n in 2usize..20, shift in 0.01f64..2.0) {
        let a = random_graph(seed, n, 0.4);
        for variant in [PriorVariant::LaplacianShift, PriorVariant::NormalizedShift] {
            let q = precision_matrix(&a, n, PriorSpec::new(variant, shift)).unwrap();
            let ev = eigenvalues(q.matrix(), n);
            prop_assert!(ev[0] >= shift - 1e-9);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(q.get(i, j), q.get(j, i));
                    if i != j {
                        prop_assert_eq!(q.get(i, j) != 0.0, a[i * n + j] != 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn pure_normalized_min_eigenvalue_is_jitter() {
    for seed in 0..20 {
        let n = 3 + seed as usize % 15;
        let a = connected_graph(seed, n);
        let q = precision_matrix(&a, n, PriorSpec::new(PriorVariant::PureNormalized, 0.0)).unwrap();
        let ev = eigenvalues(q.matrix(), n);
        assert!((ev[0] - PURE_JITTER).abs() < 1e-9, "seed {seed}: {}", ev[0]);
        let want: f64 = ev.iter().map(|v| v.ln()).sum();
        assert!((q.logdet() - want).abs() < 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn independent_noise_is_nearly_uncorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = 4000;
    let block: Vec<f64> = (0..2 * t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = build_adjacency(&block, 2, t, 1.0, Band::Theta).unwrap();
    assert!(g.adjacency()[1] < 0.1);
    assert_eq!(g.adjacency()[0], 0.0);
}

#[test]
fn built_adjacency_is_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, t) = (19, 300);
    let shared: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
    let block: Vec<f64> = (0..c * t)
        .map(|i| shared[i % t] * (i / t) as f64 / c as f64 + rng.random_range(-1.0..1.0))
        .collect();
    let g = build_adjacency(&block, c, t, 0.3, Band::Delta).unwrap();
    let a = g.adjacency();
    for i in 0..c {
        assert_eq!(a[i * c + i], 0.0);
        for j in 0..c {
            assert_eq!(a[i * c + j], a[j * c + i]);
            assert!((0.0..=1.0).contains(&a[i * c + j]));
        }
    }
    assert_eq!(g.edge_count(), (0.3f64 * 171.0).ceil() as usize);
}
