//! Permutation symmetries of the token transformer and the graph encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmoge_core::checks::random_adjacency;
use vmoge_core::mgtnfe::{Aggregation, Extractor, ExtractorConfig, GranularityConfig};
use vmoge_core::tensor::{ParameterStore, Tape, Tensor};
use vmoge_core::vencoder::{normalize_adjacency, reparameterize, standard_normal, BandEncoder, EncoderConfig};

fn extractor(pe: bool) -> (Extractor, ParameterStore) {
    let mut store = ParameterStore::new();
    let cfg = ExtractorConfig {
        token_dim: 8,
        heads: 2,
        layers: 2,
        out_dim: 6,
        aggregation: Aggregation::Mean,
        positional_encoding: pe,
        ..ExtractorConfig::default()
    };
    let gran = GranularityConfig::preset("mixed-1").unwrap();
    let ex = Extractor::new(&mut store, "ex", cfg, &gran, 100.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    (ex, store)
}

/// Token order with the first and last granularity blocks swapped.
fn swapped_order(ex: &Extractor, len: usize) -> Vec<usize> {
    let plan = ex.plan(len);
    let mut blocks = Vec::new();
    let mut start = 0;
    for &(_, n) in &plan.used {
        blocks.push((start..start + n).collect::<Vec<_>>());
        start += n;
    }
    assert!(blocks.len() >= 2 && blocks[0].len() != blocks[blocks.len() - 1].len());
    let last = blocks.len() - 1;
    blocks.swap(0, last);
    blocks.concat()
}

fn reorder(t: &Tensor, order: &[usize]) -> Tensor {
    let (n, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(n * l * d);
    for s in 0..n {
        for &p in order {
            out.extend_from_slice(&t.data()[(s * l + p) * d..(s * l + p + 1) * d]);
        }
    }
    Tensor::new(&[n, l, d], out).unwrap()
}

/// Encoded tokens and aggregate of the original and block-swapped embeddings,
/// positional encoding off.
fn both_orders() -> ([Vec<f64>; 2], [Vec<f64>; 2]) {
    let (ex, store) = extractor(false);
    let len = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = standard_normal(&[3, len], &mut rng);
    let order = swapped_order(&ex, len);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let e = ex.embed(&mut tape, &store, xv).unwrap();
    let tokens = tape.tensor(e);
    let run = |t: Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let h = ex.encode(&mut tape, &store, v).unwrap();
        let agg = ex.aggregate(&mut tape, &store, h).unwrap();
        (tape.value(h).to_vec(), tape.value(agg).to_vec())
    };
    let (h0, a0) = run(tokens.clone());
    let (h1, a1) = run(reorder(&tokens, &order));
    ([h0, h1], [a0, a1])
}

#[test]
fn swapping_granularity_blocks_keeps_mean_aggregate_without_pe() {
    let ([h0, h1], [a0, a1]) = both_orders();
    let moved = h0.iter().zip(&h1).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(moved > 1e-3, "per-position outputs should change");
    for (p, q) in a0.iter().zip(&a1) {
        assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0), "{p} vs {q}");
    }
}

#[test]
fn positional_encoding_breaks_the_symmetry() {
    let (ex, store) = extractor(true);
    let len = 200;
    let x = standard_normal(&[2, len], &mut ChaCha8Rng::seed_from_u64(11));
    let order = swapped_order(&ex, len);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let e = ex.embed(&mut tape, &store, xv).unwrap();
    let embedded = tape.tensor(e);
    // undo the encoding to get raw tokens, swap, then re-add it in place
    let plain = {
        let (ex0, store0) = extractor(false);
        let mut t = Tape::new();
        let xv = t.constant(standard_normal(&[2, len], &mut ChaCha8Rng::seed_from_u64(11)));
        let e = ex0.embed(&mut t, &store0, xv).unwrap();
        t.tensor(e)
    };
    let pe: Vec<f64> = embedded.data().iter().zip(plain.data()).map(|(a, b)| a - b).collect();
    let swapped = reorder(&plain, &order);
    let re_embedded = Tensor::new(
        embedded.shape(),
        swapped.data().iter().zip(&pe).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    let agg = |t: Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let h = ex.encode(&mut tape, &store, v).unwrap();
        let a = ex.aggregate(&mut tape, &store, h).unwrap();
        tape.value(a).to_vec()
    };
    let (a0, a1) = (agg(embedded), agg(re_embedded));
    let gap = a0.iter().zip(&a1).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6);
}

fn permute_rows(data: &[f64], n: usize, c: usize, w: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for s in 0..n {
        for (i, &p) in perm.iter().enumerate() {
            let (dst, src) = ((s * c + i) * w, (s * c + p) * w);
            out[dst..dst + w].copy_from_slice(&data[src..src + w]);
        }
    }
    out
}

fn permute_graph(a: &[f64], c: usize, perm: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            out[i * c + j] = a[perm[i] * c + perm[j]];
        }
    }
    out
}

#[test]
fn node_permutation_permutes_posterior_and_sample() {
    let (n, c, dh, dz) = (2, 6, 5, 3);
    let cfg = EncoderConfig {
        in_dim: dh,
        hidden_dim: 7,
        latent_dim: dz,
        add_self_loops: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParameterStore::new();
    let enc = BandEncoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
    let h = standard_normal(&[n, c, dh], &mut rng);
    let eps = standard_normal(&[n, c, dz], &mut rng);
    let graphs: Vec<Vec<f64>> = (0..n).map(|_| random_adjacency(c, 0.5, &mut rng)).collect();
    let perm = [3, 0, 5, 1, 4, 2];

    let run = |h: Vec<f64>, graphs: Vec<Vec<f64>>, eps: Vec<f64>| {
        let a_hat: Vec<f64> = graphs.iter().flat_map(|a| normalize_adjacency(a, c, false)).collect();
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::new(&[n, c, dh], h).unwrap());
        let av = tape.constant(Tensor::new(&[n, c, c], a_hat).unwrap());
        let post = enc.forward(&mut tape, &store, hv, av).unwrap();
        let z = reparameterize(&mut tape, post, Tensor::new(&[n, c, dz], eps).unwrap()).unwrap();
        [post.mu, post.log_sigma, z].map(|v| tape.value(v).to_vec())
    };
    let base = run(h.data().to_vec(), graphs.clone(), eps.data().to_vec());
    let moved = run(
        permute_rows(h.data(), n, c, dh, &perm),
        graphs.iter().map(|a| permute_graph(a, c, &perm)).collect(),
        permute_rows(eps.data(), n, c, dz, &perm),
    );
    for (b, m) in base.iter().zip(&moved) {
        let expected = permute_rows(b, n, c, dz, &perm);
        for (e, v) in expected.iter().zip(m) {
            assert!((e - v).abs() <= 1e-12 * e.abs().max(1.0), "{e} vs {v}");
        }
    }
}

#[test]
fn duplicated_isolated_node_duplicates_its_row() {
    let (c, dh) = (4, 3);
    let cfg = EncoderConfig {
        in_dim: dh,
        hidden_dim: 5,
        latent_dim: 2,
        add_self_loops: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParameterStore::new();
    let enc = BandEncoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
    let mut h = standard_normal(&[1, c, dh], &mut rng).data().to_vec();
    h.copy_within(2 * dh..3 * dh, 3 * dh);
    // nodes 2 and 3 are isolated with equal features
    let a = vec![0., 1., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::new(&[1, c, dh], h).unwrap());
    let av = tape.constant(Tensor::new(&[1, c, c], normalize_adjacency(&a, c, true)).unwrap());
    let post = enc.forward(&mut tape, &store, hv, av).unwrap();
    let mu = tape.value(post.mu);
    assert_eq!(&mu[4..6], &mu[6..8]);
}
