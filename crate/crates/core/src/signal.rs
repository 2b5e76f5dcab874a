//! Epoching, Welch spectra, relative band power and band-pass decomposition.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use num_complex::Complex64;

use crate::fft;

/// Canonical EEG frequency bands, in expert order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::Delta, Band::Theta, Band::Alpha, Band::Beta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta => "beta",
        }
    }

    pub fn from_name(s: &str) -> Option<Band> {
        Band::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of frequency bands (and experts).
pub const NUM_BANDS: usize = 4;

/// Half-open band edges in Hz, `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandDefinition {
    pub edges: [(f64, f64); NUM_BANDS],
}

impl Default for BandDefinition {
    fn default() -> Self {
        Self {
            edges: [(0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 45.0)],
        }
    }
}

impl BandDefinition {
    pub fn range(&self, band: Band) -> (f64, f64) {
        self.edges[band.index()]
    }

    /// Union of all bands.
    pub fn analysis_range(&self) -> (f64, f64) {
        (self.edges[0].0, self.edges[NUM_BANDS - 1].1)
    }

    /// Band containing `f`, if any.
    pub fn locate(&self, f: f64) -> Option<Band> {
        Band::ALL
            .into_iter()
            .find(|b| f >= self.edges[b.index()].0 && f < self.edges[b.index()].1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("sampling rate must be positive, got {0}")]
    BadSamplingRate(f64),
    #[error("recording needs at least one channel")]
    NoChannels,
    #[error("data length {len} is not channels ({channels}) x samples")]
    Ragged { channels: usize, len: usize },
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("epoch of {0} samples is shorter than 2")]
    EpochTooShort(usize),
    #[error("overlap must lie in [0, 1), got {0}")]
    BadOverlap(f64),
    #[error("sampling rate {0} Hz puts 45 Hz at or above Nyquist")]
    NyquistTooLow(f64),
    #[error("band [{lo}, {hi}) Hz is not inside (0, {nyquist}] Hz")]
    BadBand { lo: f64, hi: f64, nyquist: f64 },
    #[error("empty signal")]
    Empty,
}

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalWarning {
    /// Fewer samples than one epoch; nothing was produced.
    ShortRecording { samples: usize, epoch_samples: usize },
    /// Requested segment longer than the signal.
    SegmentClamped { requested: usize, used: usize },
    /// A channel had no power in the analysis range.
    ZeroPower { channel: usize },
}

/// Multichannel recording, channel-major (`data[c * samples + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject: String,
    pub fs: f64,
    pub label: Option<u8>,
    pub age: Option<f64>,
    pub score: Option<f64>,
    channels: usize,
    samples: usize,
    data: Vec<f64>,
}

impl RawRecording {
    pub fn new(
        subject: impl Into<String>,
        fs: f64,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, SignalError> {
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(SignalError::BadSamplingRate(fs));
        }
        if channels == 0 {
            return Err(SignalError::NoChannels);
        }
        if data.len() % channels != 0 {
            return Err(SignalError::Ragged {
                channels,
                len: data.len(),
            });
        }
        let samples = data.len() / channels;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::NonFinite {
                channel: i / samples,
                index: i % samples,
            });
        }
        Ok(Self {
            subject: subject.into(),
            fs,
            label: None,
            age: None,
            score: None,
            channels,
            samples,
            data,
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One `C × T′` segment, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub index: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Epoch {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSplit {
    pub epochs: Vec<Epoch>,
    pub warning: Option<SignalWarning>,
}

/// Epoch length in samples for a duration in seconds.
pub fn epoch_samples(fs: f64, epoch_sec: f64) -> usize {
    libm::round(epoch_sec * fs).max(0.0) as usize
}

/// Cuts a recording into consecutive non-overlapping epochs; the trailing
/// remainder is dropped.
pub fn epoch_split(rec: &RawRecording, epoch_sec: f64) -> Result<EpochSplit, SignalError> {
    let len = epoch_samples(rec.fs, epoch_sec);
    if len < 2 {
        return Err(SignalError::EpochTooShort(len));
    }
    let count = rec.samples / len;
    let warning = (count == 0).then(|| {
        log::warn!(
            "recording {} has {} samples, shorter than one epoch ({len})",
            rec.subject,
            rec.samples
        );
        SignalWarning::ShortRecording {
            samples: rec.samples,
            epoch_samples: len,
        }
    });
    let epochs = (0..count)
        .map(|e| {
            let mut data = Vec::with_capacity(rec.channels * len);
            for c in 0..rec.channels {
                data.extend_from_slice(&rec.channel(c)[e * len..(e + 1) * len]);
            }
            Epoch {
                index: e,
                channels: rec.channels,
                len,
                data,
            }
        })
        .collect();
    Ok(EpochSplit { epochs, warning })
}

/// Welch estimator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchParams {
    pub nperseg: usize,
    pub overlap: f64,
}

impl WelchParams {
    /// Two-second Hann segments with half overlap, capped at the signal length.
    pub fn default_for(fs: f64, len: usize) -> Self {
        Self {
            nperseg: (libm::round(2.0 * fs) as usize).min(len).max(1),
            overlap: 0.5,
        }
    }
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub density: Vec<f64>,
    pub warning: Option<SignalWarning>,
}

impl Psd {
    pub fn resolution(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// `Σ psd·Δf` over bins with `lo ≤ f < hi`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        let df = self.resolution();
        self.freqs
            .iter()
            .zip(&self.density)
            .filter(|(f, _)| **f >= lo && **f < hi)
            .map(|(_, p)| p * df)
            .sum()
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

/// Averaged modified periodogram with Hann windows and per-segment mean
/// removal, scaled as a one-sided density.
pub fn welch_psd(x: &[f64], fs: f64, params: WelchParams) -> Result<Psd, SignalError> {
    if x.is_empty() {
        return Err(SignalError::Empty);
    }
    if !(0.0..1.0).contains(&params.overlap) {
        return Err(SignalError::BadOverlap(params.overlap));
    }
    if !(fs > 0.0) {
        return Err(SignalError::BadSamplingRate(fs));
    }
    let mut warning = None;
    let mut nperseg = params.nperseg.max(1);
    if nperseg > x.len() {
        log::warn!("nperseg {nperseg} exceeds signal length {}; clamping", x.len());
        warning = Some(SignalWarning::SegmentClamped {
            requested: nperseg,
            used: x.len(),
        });
        nperseg = x.len();
    }
    let noverlap = libm::floor(params.overlap * nperseg as f64) as usize;
    let step = (nperseg - noverlap).max(1);
    let segments = (x.len() - nperseg) / step + 1;
    let window = hann(nperseg);
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let nfreq = nperseg / 2 + 1;
    let mut density = vec![0.0; nfreq];
    for s in 0..segments {
        let seg = &x[s * step..s * step + nperseg];
        let mean = seg.iter().sum::<f64>() / nperseg as f64;
        let mut buf: Vec<Complex64> = seg
            .iter()
            .zip(&window)
            .map(|(v, w)| Complex64::new((v - mean) * w, 0.0))
            .collect();
        fft::fft(&mut buf);
        for (d, b) in density.iter_mut().zip(&buf) {
            *d += b.norm_sqr();
        }
    }
    let scale = 1.0 / (fs * wss * segments as f64);
    for (k, d) in density.iter_mut().enumerate() {
        *d *= scale;
        let nyquist = nperseg % 2 == 0 && k == nperseg / 2;
        if k != 0 && !nyquist {
            *d *= 2.0;
        }
    }
    let freqs = (0..nfreq).map(|k| k as f64 * fs / nperseg as f64).collect();
    Ok(Psd {
        freqs,
        density,
        warning,
    })
}

/// Relative band powers, `B × C` row-major (`rbp[b * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBandPower {
    pub channels: usize,
    pub values: Vec<f64>,
    pub warnings: Vec<SignalWarning>,
}

impl RelativeBandPower {
    pub fn get(&self, band: Band, channel: usize) -> f64 {
        self.values[band.index() * self.channels + channel]
    }
}

/// Share of each band in the analysis-range power, per channel.
pub fn relative_band_power(
    epoch: &Epoch,
    fs: f64,
    bands: &BandDefinition,
    welch: WelchParams,
) -> Result<RelativeBandPower, SignalError> {
    let (_, top) = bands.analysis_range();
    if !(fs > 2.0 * top) {
        return Err(SignalError::NyquistTooLow(fs));
    }
    let c_count = epoch.channels;
    let mut values = vec![0.0; NUM_BANDS * c_count];
    let mut warnings = Vec::new();
    for c in 0..c_count {
        let psd = welch_psd(epoch.channel(c), fs, welch)?;
        if let Some(w) = psd.warning.clone() {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        let powers: Vec<f64> = Band::ALL
            .iter()
            .map(|&b| {
                let (lo, hi) = bands.range(b);
                psd.band_power(lo, hi)
            })
            .collect();
        let total: f64 = powers.iter().sum();
        if total > 0.0 && total.is_finite() {
            for (b, p) in powers.iter().enumerate() {
                values[b * c_count + c] = p / total;
            }
        } else {
            log::warn!("channel {c} has zero power in the analysis range");
            warnings.push(SignalWarning::ZeroPower { channel: c });
            for b in 0..NUM_BANDS {
                values[b * c_count + c] = 1.0 / NUM_BANDS as f64;
            }
        }
    }
    Ok(RelativeBandPower {
        channels: c_count,
        values,
        warnings,
    })
}

/// Ideal frequency-domain band-pass keeping bins with `lo ≤ |f| < hi`.
pub fn bandpass_filter(x: &[f64], fs: f64, (lo, hi): (f64, f64)) -> Result<Vec<f64>, SignalError> {
    let nyquist = fs / 2.0;
    if !(lo >= 0.0 && lo < hi && hi <= nyquist) {
        return Err(SignalError::BadBand { lo, hi, nyquist });
    }
    let n = x.len();
    if n == 0 {
        return Err(SignalError::Empty);
    }
    let mut spec = fft::rfft(x);
    for (k, v) in spec.iter_mut().enumerate() {
        let bin = if k <= n / 2 { k as f64 } else { n as f64 - k as f64 };
        let f = bin * fs / n as f64;
        if !(f >= lo && f < hi) {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    fft::ifft(&mut spec);
    Ok(spec.into_iter().map(|v| v.re).collect())
}

/// Per-epoch inputs for the model: relative band powers and band-limited
/// signals (`filtered[(b * C + c) * T′ + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochFeatures {
    pub epoch_index: usize,
    pub channels: usize,
    pub len: usize,
    pub fs: f64,
    pub rbp: Vec<f64>,
    pub filtered: Vec<f64>,
}

impl EpochFeatures {
    pub fn filtered(&self, band: Band, channel: usize) -> &[f64] {
        let off = (band.index() * self.channels + channel) * self.len;
        &self.filtered[off..off + self.len]
    }

    /// `C × T′` block of one band.
    pub fn band_block(&self, band: Band) -> &[f64] {
        let n = self.channels * self.len;
        &self.filtered[band.index() * n..(band.index() + 1) * n]
    }
}

pub fn featurize_epoch(
    epoch: &Epoch,
    fs: f64,
    bands: &BandDefinition,
    welch: WelchParams,
) -> Result<(EpochFeatures, Vec<SignalWarning>), SignalError> {
    let rbp = relative_band_power(epoch, fs, bands, welch)?;
    let mut filtered = Vec::with_capacity(NUM_BANDS * epoch.channels * epoch.len);
    for b in Band::ALL {
        for c in 0..epoch.channels {
            filtered.extend(bandpass_filter(epoch.channel(c), fs, bands.range(b))?);
        }
    }
    Ok((
        EpochFeatures {
            epoch_index: epoch.index,
            channels: epoch.channels,
            len: epoch.len,
            fs,
            rbp: rbp.values,
            filtered,
        },
        rbp.warnings,
    ))
}
