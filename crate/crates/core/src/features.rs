//! Per-epoch band features and labeled datasets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::graphprior::{abs_correlation, build_adjacency, sparsify_top};
use crate::signal::{
    epoch_split, featurize_epoch, Band, BandDefinition, RawRecording, SignalWarning, WelchParams, NUM_BANDS,
};

/// Whether each epoch gets its own graph or all epochs of a subject share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GraphScope {
    #[default]
    Epoch,
    Subject,
}

impl fmt::Display for GraphScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphScope::Epoch => "epoch",
            GraphScope::Subject => "subject",
        })
    }
}

impl FromStr for GraphScope {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "epoch" => Ok(GraphScope::Epoch),
            "subject" => Ok(GraphScope::Subject),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub epoch_sec: f64,
    pub density: f64,
    pub graph_scope: GraphScope,
    pub bands: BandDefinition,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            epoch_sec: 4.0,
            density: 0.3,
            graph_scope: GraphScope::Epoch,
            bands: BandDefinition::default(),
        }
    }
}

/// Model input of one epoch. Band-major layouts: `rbp[b·C + c]`,
/// `filtered[(b·C + c)·T′ + t]`, `adjacency[(b·C + i)·C + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandFeatureTensor {
    pub subject: u32,
    pub epoch: u32,
    pub label: u8,
    pub channels: usize,
    pub len: usize,
    pub rbp: Vec<f64>,
    pub filtered: Vec<f64>,
    pub adjacency: Vec<f64>,
}

impl BandFeatureTensor {
    pub fn rbp_band(&self, band: Band) -> &[f64] {
        let c = self.channels;
        &self.rbp[band.index() * c..(band.index() + 1) * c]
    }

    pub fn filtered_band(&self, band: Band) -> &[f64] {
        let n = self.channels * self.len;
        &self.filtered[band.index() * n..(band.index() + 1) * n]
    }

    pub fn adjacency_band(&self, band: Band) -> &[f64] {
        let n = self.channels * self.channels;
        &self.adjacency[band.index() * n..(band.index() + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInfo {
    pub id: String,
    pub label: u8,
    pub age: Option<f64>,
    pub score: Option<f64>,
}

/// Featurized epochs of many subjects sharing one montage and sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub fs: f64,
    pub channels: usize,
    pub len: usize,
    pub subjects: Vec<SubjectInfo>,
    pub samples: Vec<BandFeatureTensor>,
}

impl Dataset {
    pub fn subject_labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// Sample indices belonging to the given subjects.
    pub fn samples_of(&self, subjects: &[usize]) -> Vec<usize> {
        let mut keep = vec![false; self.subjects.len()];
        for &s in subjects {
            keep[s] = true;
        }
        (0..self.samples.len())
            .filter(|&i| keep[self.samples[i].subject as usize])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let ok = (s.subject as usize) < self.subjects.len()
                && s.channels == self.channels
                && s.len == self.len
                && s.rbp.len() == NUM_BANDS * self.channels
                && s.filtered.len() == NUM_BANDS * self.channels * self.len
                && s.adjacency.len() == NUM_BANDS * self.channels * self.channels
                && s.label == self.subjects[s.subject as usize].label;
            if !ok {
                return Err(Error::Data(format!("sample {i} is inconsistent with the dataset header")));
            }
        }
        Ok(())
    }
}

/// Epochs, band features and band graphs of one labeled recording.
pub fn featurize_recording(
    rec: &RawRecording,
    subject: u32,
    cfg: &FeatureConfig,
) -> Result<(Vec<BandFeatureTensor>, Vec<SignalWarning>)> {
    let label = rec
        .label
        .ok_or_else(|| Error::Data(format!("recording `{}` has no label", rec.subject)))?;
    let split = epoch_split(rec, cfg.epoch_sec)?;
    let mut warnings: Vec<SignalWarning> = split.warning.into_iter().collect();
    let c = rec.channels();
    let mut out = Vec::with_capacity(split.epochs.len());
    for epoch in &split.epochs {
        let welch = WelchParams::default_for(rec.fs, epoch.len);
        let (feat, w) = featurize_epoch(epoch, rec.fs, &cfg.bands, welch)?;
        warnings.extend(w);
        let mut adjacency = Vec::with_capacity(NUM_BANDS * c * c);
        if cfg.graph_scope == GraphScope::Epoch {
            for b in Band::ALL {
                let g = build_adjacency(feat.band_block(b), c, feat.len, cfg.density, b)?;
                adjacency.extend_from_slice(g.adjacency());
            }
        }
        out.push(BandFeatureTensor {
            subject,
            epoch: epoch.index as u32,
            label,
            channels: c,
            len: feat.len,
            rbp: feat.rbp,
            filtered: feat.filtered,
            adjacency,
        });
    }
    if cfg.graph_scope == GraphScope::Subject && !out.is_empty() {
        let mut shared = Vec::with_capacity(NUM_BANDS * c * c);
        for b in Band::ALL {
            let mut mean = vec![0.0; c * c];
            for s in &out {
                let corr = abs_correlation(s.filtered_band(b), c, s.len)?;
                for (m, v) in mean.iter_mut().zip(corr) {
                    *m += v / out.len() as f64;
                }
            }
            shared.extend(sparsify_top(&mean, c, cfg.density)?);
        }
        for s in &mut out {
            s.adjacency = shared.clone();
        }
    }
    Ok((out, warnings))
}

/// Checks that recordings share a sampling rate and channel count and carry
/// distinct subject ids; returns `(fs, channels)`.
pub fn validate_recordings(recordings: &[RawRecording]) -> Result<(f64, usize)> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::Data("no recordings".into()))?;
    let (fs, channels) = (first.fs, first.channels());
    for (i, rec) in recordings.iter().enumerate() {
        if rec.fs != fs || rec.channels() != channels {
            return Err(Error::Data(format!(
                "recording `{}` has fs {} and {} channels; expected {fs} and {channels}",
                rec.subject,
                rec.fs,
                rec.channels()
            )));
        }
        if recordings[..i].iter().any(|r| r.subject == rec.subject) {
            return Err(Error::Data(format!("duplicate subject id `{}`", rec.subject)));
        }
    }
    Ok((fs, channels))
}

/// Builds a dataset from recordings and their featurized epochs (in the same order).
pub fn assemble_dataset(recordings: &[RawRecording], parts: Vec<Vec<BandFeatureTensor>>) -> Result<Dataset> {
    let (fs, channels) = validate_recordings(recordings)?;
    let subjects = recordings
        .iter()
        .map(|rec| SubjectInfo {
            id: rec.subject.clone(),
            label: rec.label.unwrap_or_default(),
            age: rec.age,
            score: rec.score,
        })
        .collect();
    let samples: Vec<BandFeatureTensor> = parts.into_iter().flatten().collect();
    let len = samples.first().map_or(0, |s| s.len);
    let ds = Dataset {
        fs,
        channels,
        len,
        subjects,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Featurizes labeled recordings into one dataset; subjects keep input order.
pub fn featurize_dataset(recordings: &[RawRecording], cfg: &FeatureConfig) -> Result<(Dataset, Vec<SignalWarning>)> {
    validate_recordings(recordings)?;
    let mut parts = Vec::with_capacity(recordings.len());
    let mut warnings = Vec::new();
    for (i, rec) in recordings.iter().enumerate() {
        let (s, w) = featurize_recording(rec, i as u32, cfg)?;
        parts.push(s);
        warnings.extend(w);
    }
    Ok((assemble_dataset(recordings, parts)?, warnings))
}
