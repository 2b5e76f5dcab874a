//! Binary feature container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `VMGE` | 4 bytes |
//! | version (1) | u32 |
//! | subjects, epochs, bands, channels, rbp width, T′ | u32 × 6 |
//! | per epoch: subject index, label | u32, u8 |
//! | per epoch: rbp, filtered, adjacency | f64 × (B·C·d + B·C·T′ + B·C·C) |
//! | manifest length | u32 |
//! | manifest | JSON bytes |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vmoge_core::features::{BandFeatureTensor, Dataset, FeatureConfig, GraphScope, SubjectInfo};
use vmoge_core::signal::{BandDefinition, NUM_BANDS};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"VMGE";
pub const VERSION: u32 = 1;
/// Relative band power values per band and channel.
pub const RBP_WIDTH: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: u8,
    pub age: Option<f64>,
    pub score: Option<f64>,
}

/// JSON footer: everything the payload does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fs: f64,
    pub epoch_sec: f64,
    pub density: f64,
    pub graph_scope: String,
    pub bands: [(f64, f64); NUM_BANDS],
    pub subjects: Vec<SubjectEntry>,
    /// Within-recording epoch index of every stored epoch.
    pub epochs: Vec<u32>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn count(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CliError::Invalid(format!("{what} count {v} exceeds u32")))
}

pub fn encode(ds: &Dataset, cfg: &FeatureConfig) -> Result<Vec<u8>> {
    ds.validate()?;
    let manifest = Manifest {
        fs: ds.fs,
        epoch_sec: cfg.epoch_sec,
        density: cfg.density,
        graph_scope: cfg.graph_scope.to_string(),
        bands: cfg.bands.edges,
        subjects: ds
            .subjects
            .iter()
            .map(|s| SubjectEntry {
                id: s.id.clone(),
                label: s.label,
                age: s.age,
                score: s.score,
            })
            .collect(),
        epochs: ds.samples.iter().map(|s| s.epoch).collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| CliError::Invalid(e.to_string()))?;
    let (c, t) = (ds.channels, ds.len);
    let per_epoch = 5 + 8 * NUM_BANDS * (c + c * t + c * c);
    let mut out = Vec::with_capacity(HEADER_LEN + ds.samples.len() * per_epoch + 4 + json.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [
        (ds.subjects.len(), "subject"),
        (ds.samples.len(), "epoch"),
        (NUM_BANDS, "band"),
        (c, "channel"),
        (RBP_WIDTH as usize, "rbp"),
        (t, "sample"),
    ] {
        put_u32(&mut out, count(v, what)?);
    }
    for s in &ds.samples {
        put_u32(&mut out, s.subject);
        out.push(s.label);
        put_f64s(&mut out, &s.rbp);
        put_f64s(&mut out, &s.filtered);
        put_f64s(&mut out, &s.adjacency);
    }
    put_u32(&mut out, count(json.len(), "manifest byte")?);
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        self.take(8 * n)
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect()
    }
}

pub fn decode(buf: &[u8]) -> std::result::Result<(Dataset, FeatureConfig), String> {
    if buf.len() < HEADER_LEN + 4 {
        return Err(format!("{} bytes is shorter than the header", buf.len()));
    }
    if &buf[..4] != MAGIC {
        return Err("bad magic; not a feature container".into());
    }
    let mut cur = Cursor { buf, pos: 4 };
    let version = cur.u32();
    if version != VERSION {
        return Err(format!("unsupported container version {version} (expected {VERSION})"));
    }
    let [subjects, epochs, bands, c, rbp_width, t] = [(); 6].map(|_| cur.u32() as usize);
    if bands != NUM_BANDS || rbp_width != RBP_WIDTH as usize {
        return Err(format!("expected {NUM_BANDS} bands and rbp width {RBP_WIDTH}, found {bands} and {rbp_width}"));
    }
    let per_epoch = 5 + 8 * NUM_BANDS * (c * rbp_width + c * t + c * c);
    let payload_end = epochs
        .checked_mul(per_epoch)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .filter(|&end| end + 4 <= buf.len())
        .ok_or("header counts exceed the file length")?;
    let mut samples = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let subject = cur.u32();
        let label = cur.take(1)[0];
        let rbp = cur.f64s(NUM_BANDS * c * rbp_width);
        let filtered = cur.f64s(NUM_BANDS * c * t);
        let adjacency = cur.f64s(NUM_BANDS * c * c);
        samples.push(BandFeatureTensor {
            subject,
            epoch: 0,
            label,
            channels: c,
            len: t,
            rbp,
            filtered,
            adjacency,
        });
    }
    debug_assert_eq!(cur.pos, payload_end);
    let json_len = cur.u32() as usize;
    if cur.pos + json_len != buf.len() {
        return Err(format!(
            "manifest length {json_len} disagrees with the {} trailing bytes",
            buf.len() - cur.pos
        ));
    }
    let manifest: Manifest = serde_json::from_slice(cur.take(json_len)).map_err(|e| format!("manifest: {e}"))?;
    if manifest.subjects.len() != subjects || manifest.epochs.len() != epochs {
        return Err("manifest counts disagree with the header".into());
    }
    for (s, &e) in samples.iter_mut().zip(&manifest.epochs) {
        s.epoch = e;
    }
    let graph_scope: GraphScope = manifest
        .graph_scope
        .parse()
        .map_err(|_| format!("unknown graph scope `{}`", manifest.graph_scope))?;
    let cfg = FeatureConfig {
        epoch_sec: manifest.epoch_sec,
        density: manifest.density,
        graph_scope,
        bands: BandDefinition { edges: manifest.bands },
    };
    let ds = Dataset {
        fs: manifest.fs,
        channels: c,
        len: t,
        subjects: manifest
            .subjects
            .into_iter()
            .map(|s| SubjectInfo {
                id: s.id,
                label: s.label,
                age: s.age,
                score: s.score,
            })
            .collect(),
        samples,
    };
    ds.validate().map_err(|e| e.to_string())?;
    Ok((ds, cfg))
}

pub fn write(path: &Path, ds: &Dataset, cfg: &FeatureConfig) -> Result<()> {
    let bytes = encode(ds, cfg)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<(Dataset, FeatureConfig)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}
