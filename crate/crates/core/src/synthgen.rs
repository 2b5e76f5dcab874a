//! Synthetic multichannel recordings with a class effect in one band.
//!
//! Each channel is the sum of one random-phase oscillation per band plus
//! `1/f` noise. For class-1 subjects the oscillation of the target band is
//! multiplied by the effect size on the target channels only.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fft::{fft, ifft};
use crate::signal::{Band, BandDefinition, RawRecording};

/// Fraction of each band's width kept free of oscillation centers at either edge.
pub const EDGE_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects_per_class: usize,
    pub fs: f64,
    pub duration_sec: f64,
    pub channels: usize,
    pub target_band: Band,
    /// Zero-based channel indices carrying the effect.
    pub target_channels: Vec<usize>,
    pub effect_size: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects_per_class: 20,
            fs: 100.0,
            duration_sec: 8.0,
            channels: 19,
            target_band: Band::Alpha,
            target_channels: (0..6).collect(),
            effect_size: 2.5,
            noise_amplitude: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.subjects_per_class == 0 {
            return fail("subjects per class must be positive".into());
        }
        if !(self.fs > 90.0) {
            return fail(format!("sampling rate {} Hz must exceed 90 Hz", self.fs));
        }
        if !(self.duration_sec > 0.0) || self.samples() < 2 {
            return fail("duration must cover at least two samples".into());
        }
        if self.channels == 0 {
            return fail("need at least one channel".into());
        }
        if !(self.effect_size >= 1.0) {
            return fail(format!("effect size {} must be at least 1", self.effect_size));
        }
        if !(self.noise_amplitude >= 0.0) {
            return fail("noise amplitude must be non-negative".into());
        }
        if let Some(&c) = self.target_channels.iter().find(|&&c| c >= self.channels) {
            return fail(format!("target channel {c} outside 0..{}", self.channels));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        libm::round(self.fs * self.duration_sec) as usize
    }
}

/// Generator stream of subject `index`.
fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Unit-variance `1/f` noise: white noise shaped by `1/√f` in the frequency domain.
pub fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    fft(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k);
        *v = if f == 0 { Complex64::new(0.0, 0.0) } else { *v / libm::sqrt(f as f64) };
    }
    ifft(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = libm::sqrt(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64);
    if sd == 0.0 {
        return vec![0.0; n];
    }
    x.into_iter().map(|v| (v - mean) / sd).collect()
}

/// One recording; deterministic in `(cfg.seed, index)`.
pub fn generate_subject(cfg: &SynthConfig, label: u8, index: usize) -> Result<RawRecording> {
    cfg.validate()?;
    let mut rng = subject_rng(cfg.seed, index as u64);
    let n = cfg.samples();
    let bands = BandDefinition::default();
    let centers: Vec<f64> = Band::ALL
        .iter()
        .map(|&b| {
            let (lo, hi) = bands.range(b);
            let m = EDGE_MARGIN * (hi - lo);
            rng.random_range(lo + m..hi - m)
        })
        .collect();
    let mut data = Vec::with_capacity(cfg.channels * n);
    for c in 0..cfg.channels {
        let mut x = vec![0.0; n];
        for b in Band::ALL {
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = if label == 1 && b == cfg.target_band && cfg.target_channels.contains(&c) {
                cfg.effect_size
            } else {
                1.0
            };
            let w = 2.0 * PI * centers[b.index()] / cfg.fs;
            for (t, v) in x.iter_mut().enumerate() {
                *v += amp * libm::sin(w * t as f64 + phase);
            }
        }
        let noise = pink_noise(n, &mut rng);
        for (v, e) in x.iter_mut().zip(noise) {
            *v += cfg.noise_amplitude * e;
        }
        data.extend(x);
    }
    let mut rec = RawRecording::new(&format!("sub-{index:03}"), cfg.fs, cfg.channels, data)?.with_label(label);
    rec.age = Some(libm::round(rng.random_range(55.0..85.0)));
    rec.score = Some(libm::round(28.0 - 8.0 * label as f64 + rng.random_range(-3.0..3.0)));
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject: String,
    pub label: u8,
    pub index: usize,
}

/// Balanced dataset: subjects `0..n` are class 0, `n..2n` class 1.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Vec<RawRecording>, Vec<ManifestEntry>)> {
    cfg.validate()?;
    let mut recs = Vec::with_capacity(2 * cfg.subjects_per_class);
    let mut manifest = Vec::with_capacity(2 * cfg.subjects_per_class);
    for i in 0..2 * cfg.subjects_per_class {
        let label = u8::from(i >= cfg.subjects_per_class);
        let rec = generate_subject(cfg, label, i)?;
        manifest.push(ManifestEntry {
            subject: rec.subject.clone(),
            label,
            index: i,
        });
        recs.push(rec);
    }
    Ok((recs, manifest))
}
