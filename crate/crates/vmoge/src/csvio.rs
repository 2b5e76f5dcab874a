//! Raw recordings as CSV: a `key=value` header row, then one row per channel.
//!
//! ```text
//! fs=100,subject=sub-000,label=1,age=71,score=22
//! 0.12,0.08,-0.31,...
//! ```
//!
//! `fs` and `subject` are required; `label`, `age` and `score` are optional.

use std::fs;
use std::path::{Path, PathBuf};

use vmoge_core::signal::RawRecording;

use crate::error::{CliError, Result};

pub fn write_recording(path: &Path, rec: &RawRecording) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::format(path, e))?;
    let mut header = vec![format!("fs={}", rec.fs), format!("subject={}", rec.subject)];
    if let Some(l) = rec.label {
        header.push(format!("label={l}"));
    }
    if let Some(a) = rec.age {
        header.push(format!("age={a}"));
    }
    if let Some(s) = rec.score {
        header.push(format!("score={s}"));
    }
    w.write_record(&header).map_err(|e| CliError::format(path, e))?;
    for c in 0..rec.channels() {
        w.write_record(rec.channel(c).iter().map(|v| v.to_string()))
            .map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_recording(path: &Path) -> Result<RawRecording> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::format(path, e))?;
    let mut rows = r.records();
    let header = rows
        .next()
        .ok_or_else(|| CliError::format(path, "empty file"))?
        .map_err(|e| CliError::format(path, e))?;
    let (mut fs, mut subject, mut label, mut age, mut score) = (None, None, None, None, None);
    for field in header.iter() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| CliError::format(path, format!("header field `{field}` is not key=value")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::format(path, format!("`{key}` has non-numeric value `{v}`")))
        };
        match key.trim() {
            "fs" => fs = Some(num(value)?),
            "subject" => subject = Some(value.trim().to_string()),
            "label" => {
                label = Some(match value.trim() {
                    "0" => 0,
                    "1" => 1,
                    v => return Err(CliError::format(path, format!("label must be 0 or 1, got `{v}`"))),
                })
            }
            "age" => age = Some(num(value)?),
            "score" => score = Some(num(value)?),
            other => return Err(CliError::format(path, format!("unknown header key `{other}`"))),
        }
    }
    let fs = fs.ok_or_else(|| CliError::format(path, "header lacks fs"))?;
    let subject = subject.ok_or_else(|| CliError::format(path, "header lacks subject"))?;
    let mut data = Vec::new();
    let mut channels = 0;
    let mut width = None;
    for (i, row) in rows.enumerate() {
        let row = row.map_err(|e| CliError::format(path, e))?;
        if width.is_some_and(|w| w != row.len()) {
            return Err(CliError::format(path, format!("channel row {} has {} samples", i + 1, row.len())));
        }
        width = Some(row.len());
        for v in row.iter() {
            data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::format(path, format!("row {}: `{v}` is not a number", i + 1)))?,
            );
        }
        channels += 1;
    }
    let mut rec = RawRecording::new(subject, fs, channels, data)
        .map_err(|e| CliError::format(path, e))?;
    rec.label = label;
    rec.age = age;
    rec.score = score;
    Ok(rec)
}

/// `*.csv` files of a directory in file-name order.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Invalid(format!("no .csv recordings in {}", dir.display())));
    }
    Ok(files)
}

pub fn read_dir(dir: &Path) -> Result<Vec<RawRecording>> {
    csv_files(dir)?.iter().map(|p| read_recording(p)).collect()
}
