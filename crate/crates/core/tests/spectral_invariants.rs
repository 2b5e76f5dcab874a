//! Spectral front-end: partition of relative band power, tone and white-noise
//! expectations, and the Welch estimator against a direct DFT.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vmoge_core::signal::{
    bandpass_filter, relative_band_power, welch_psd, Band, BandDefinition, Epoch, WelchParams, NUM_BANDS,
};

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn tone(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|t| (2.0 * PI * freq * t as f64 / fs + phase).sin()).collect()
}

fn epoch(channels: Vec<Vec<f64>>) -> Epoch {
    let len = channels[0].len();
    Epoch {
        index: 0,
        channels: channels.len(),
        len,
        data: channels.concat(),
    }
}

fn rbp(e: &Epoch, fs: f64) -> Vec<f64> {
    relative_band_power(e, fs, &BandDefinition::default(), WelchParams::default_for(fs, e.len))
        .unwrap()
        .values
}

#[test]
fn columns_sum_to_one_on_random_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fs = 128.0;
    for _ in 0..1000 {
        let c = rng.random_range(1..6);
        let len = rng.random_range(64..600);
        let chans = (0..c)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                let f = rng.random_range(0.5..60.0);
                let mix: f64 = rng.random();
                let noise = white(&mut rng, len);
                tone(f, fs, len, 0.3)
                    .iter()
                    .zip(noise)
                    .map(|(s, w)| scale * (mix * s + (1.0 - mix) * w))
                    .collect()
            })
            .collect();
        let e = epoch(chans);
        let v = rbp(&e, fs);
        for ch in 0..c {
            let total: f64 = (0..NUM_BANDS).map(|b| v[b * c + ch]).sum();
            assert!((total - 1.0).abs() < 1e-9, "column sum {total}");
        }
    }
}

#[test]
fn pure_alpha_tone_is_all_alpha() {
    let (fs, n) = (256.0, 1024);
    let e = epoch(vec![tone(10.0, fs, n, 0.0), tone(10.0, fs, n, 1.0)]);
    let v = rbp(&e, fs);
    for ch in 0..2 {
        assert!(v[Band::Alpha.index() * 2 + ch] > 0.99);
        for b in [Band::Delta, Band::Theta, Band::Beta] {
            assert!(v[b.index() * 2 + ch] < 1e-2);
        }
    }
}

#[test]
fn white_noise_matches_bandwidth_fractions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (fs, n, epochs) = (256.0, 1024, 100);
    let mut mean = [0.0; NUM_BANDS];
    for _ in 0..epochs {
        let v = rbp(&epoch(vec![white(&mut rng, n)]), fs);
        for b in 0..NUM_BANDS {
            mean[b] += v[b] / epochs as f64;
        }
    }
    let expected = [3.5 / 44.5, 4.0 / 44.5, 5.0 / 44.5, 32.0 / 44.5];
    for b in 0..NUM_BANDS {
        assert!((mean[b] - expected[b]).abs() < 0.02, "band {b}: {} vs {}", mean[b], expected[b]);
    }
}

#[test]
fn overlap_does_not_bias_white_noise_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (fs, n) = (256.0, 1024);
    let bands = BandDefinition::default();
    let (mut half, mut none) = ([0.0; NUM_BANDS], [0.0; NUM_BANDS]);
    for _ in 0..100 {
        let x = white(&mut rng, n);
        for (acc, overlap) in [(&mut half, 0.5), (&mut none, 0.0)] {
            let psd = welch_psd(&x, fs, WelchParams { nperseg: 512, overlap }).unwrap();
            let powers: Vec<f64> = Band::ALL.iter().map(|&b| psd.band_power(bands.range(b).0, bands.range(b).1)).collect();
            let total: f64 = powers.iter().sum();
            for b in 0..NUM_BANDS {
                acc[b] += powers[b] / total;
            }
        }
    }
    for b in 0..NUM_BANDS {
        assert!((half[b] - none[b]).abs() / none[b] < 0.1);
    }
}

/// Hann-windowed, mean-removed periodograms through a direct O(n²) DFT,
/// averaged and scaled to a one-sided density.
fn direct_welch(x: &[f64], fs: f64, nperseg: usize, noverlap: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..nperseg).map(|i| (PI * i as f64 / nperseg as f64).sin().powi(2)).collect();
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let step = nperseg - noverlap;
    let starts: Vec<usize> = (0..).map(|s| s * step).take_while(|s| s + nperseg <= x.len()).collect();
    let nfreq = nperseg / 2 + 1;
    let mut out = vec![0.0; nfreq];
    for &s in &starts {
        let seg = &x[s..s + nperseg];
        let m = seg.iter().sum::<f64>() / nperseg as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in seg.iter().enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / nperseg as f64;
                re += (v - m) * w[t] * a.cos();
                im += (v - m) * w[t] * a.sin();
            }
            *o += re * re + im * im;
        }
    }
    for (k, o) in out.iter_mut().enumerate() {
        let one_sided = if k == 0 || (nperseg % 2 == 0 && k == nperseg / 2) { 1.0 } else { 2.0 };
        *o *= one_sided / (fs * wss * starts.len() as f64);
    }
    out
}

#[test]
fn welch_matches_direct_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, nperseg, overlap) in [(400, 200, 0.5), (300, 128, 0.25), (257, 97, 0.0)] {
        let x = white(&mut rng, n);
        let psd = welch_psd(&x, 100.0, WelchParams { nperseg, overlap }).unwrap();
        let noverlap = (overlap * nperseg as f64).floor() as usize;
        let oracle = direct_welch(&x, 100.0, nperseg, noverlap);
        assert_eq!(psd.density.len(), oracle.len());
        let scale = oracle.iter().cloned().fold(0.0, f64::max);
        for (a, b) in psd.density.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10 * scale);
        }
        assert!((psd.resolution() - 100.0 / nperseg as f64).abs() < 1e-12);
    }
}

#[test]
fn bandpass_is_linear_and_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fs = 100.0;
    for band in Band::ALL {
        let range = BandDefinition::default().range(band);
        let (x, y) = (white(&mut rng, 400), white(&mut rng, 400));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let lhs = bandpass_filter(&combo, fs, range).unwrap();
        let fx = bandpass_filter(&x, fs, range).unwrap();
        let fy = bandpass_filter(&y, fs, range).unwrap();
        let norm = lhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = lhs
            .iter()
            .zip(fx.iter().zip(&fy))
            .map(|(l, (u, v))| (l - a * u - b * v).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-9 * norm);
        let twice = bandpass_filter(&fx, fs, range).unwrap();
        let diff = twice.iter().zip(&fx).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-9 * fx.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
}
