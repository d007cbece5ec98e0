//! Score-record data model, batching, and file formats.
//!
//! A score stream is an ordered sequence of per-sample recognition scores:
//! the maximum SoftMax value and the maximum EVM class probability. File
//! order defines time. The optional ground-truth unknown flag is only
//! meaningful in test-bed files; operational ingestion ignores it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample's recognition scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Opaque identifier; never interpreted.
    pub sample_id: String,
    /// Maximum SoftMax value over known classes, in (0, 1].
    pub max_softmax: f64,
    /// Maximum EVM class probability, in [0, 1].
    pub max_evm: f64,
    /// Ground-truth unknown flag (test-bed files only).
    pub is_unknown: Option<bool>,
}

impl ScoreRecord {
    /// Build a record, validating score ranges.
    pub fn new(
        sample_id: impl Into<String>,
        max_softmax: f64,
        max_evm: f64,
        is_unknown: Option<bool>,
    ) -> Result<Self> {
        if !(max_softmax > 0.0 && max_softmax <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "max_softmax must be in (0,1], got {max_softmax}"
            )));
        }
        if !(0.0..=1.0).contains(&max_evm) {
            return Err(Error::InvalidArgument(format!(
                "max_evm must be in [0,1], got {max_evm}"
            )));
        }
        Ok(ScoreRecord {
            sample_id: sample_id.into(),
            max_softmax,
            max_evm,
            is_unknown,
        })
    }
}

/// A fixed-size window of consecutive records. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: usize,
    pub records: Vec<ScoreRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Max-SoftMax column of the batch.
    pub fn softmax_column(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_softmax).collect()
    }

    /// Max-EVM-probability column of the batch.
    pub fn evm_column(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_evm).collect()
    }
}

const SCORE_HEADER: [&str; 4] = ["sample_id", "max_softmax", "max_evm", "is_unknown"];

/// Read a score CSV. Parsing is strict: header names must match exactly,
/// scores must be in range, and `is_unknown` must be `0`, `1`, or empty.
/// Errors name the offending 1-based line.
pub fn read_score_file(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let file = std::fs::File::open(path)?;
    read_scores(file)
}

/// Read score records from any reader; see [`read_score_file`].
pub fn read_scores(reader: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got != SCORE_HEADER {
            return Err(Error::parse(
                1,
                format!("expected header {:?}, got {:?}", SCORE_HEADER.join(","), got.join(",")),
            ));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != 4 {
            return Err(Error::parse(line, format!("expected 4 fields, got {}", rec.len())));
        }
        let sample_id = rec[0].to_string();
        let max_softmax = parse_score(&rec[1], "max_softmax", line)?;
        let max_evm = parse_score(&rec[2], "max_evm", line)?;
        let is_unknown = match &rec[3] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => {
                return Err(Error::parse(
                    line,
                    format!("is_unknown must be 0, 1, or empty, got {other:?}"),
                ))
            }
        };
        if !(max_softmax > 0.0 && max_softmax <= 1.0) {
            return Err(Error::parse(line, format!("score out of range, line {line}")));
        }
        if !(0.0..=1.0).contains(&max_evm) {
            return Err(Error::parse(line, format!("score out of range, line {line}")));
        }
        out.push(ScoreRecord {
            sample_id,
            max_softmax,
            max_evm,
            is_unknown,
        });
    }
    Ok(out)
}

fn parse_score(field: &str, name: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("non-numeric {name}: {field:?}")))
}

/// Write a score CSV in the canonical format.
pub fn write_score_file(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_scores(file, records)
}

/// Write score records to any writer.
pub fn write_scores(writer: impl Write, records: &[ScoreRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SCORE_HEADER)?;
    for r in records {
        let flag = match r.is_unknown {
            None => String::new(),
            Some(false) => "0".to_string(),
            Some(true) => "1".to_string(),
        };
        wtr.write_record([
            r.sample_id.as_str(),
            &format_score(r.max_softmax),
            &format_score(r.max_evm),
            &flag,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn format_score(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Split records into consecutive batches of exactly `n`, indices 1..k.
/// A trailing partial batch is dropped; the number of dropped records is
/// `records.len() - k * n`.
pub fn batch_stream(records: Vec<ScoreRecord>, n: usize) -> Result<Vec<Batch>> {
    if n == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let k = records.len() / n;
    let mut batches = Vec::with_capacity(k);
    let mut it = records.into_iter();
    for index in 1..=k {
        let records: Vec<ScoreRecord> = it.by_ref().take(n).collect();
        batches.push(Batch { index, records });
    }
    Ok(batches)
}

/// A labeled feature set read from a feature CSV.
///
/// Header is `sample_id,label,f_1,...,f_M`; label 0 is reserved for unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub samples: Vec<FeatureSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub sample_id: String,
    pub label: u32,
    pub values: Vec<f64>,
}

/// Read a feature CSV; strict header and per-line diagnostics as for scores.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let file = std::fs::File::open(path)?;
    read_features(file)
}

/// Read a feature set from any reader; see [`read_feature_file`].
pub fn read_features(reader: impl Read) -> Result<FeatureSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let dim;
    {
        let headers = rdr.headers()?;
        let got: Vec<&str> = headers.iter().collect();
        if got.len() < 3 || got[0] != "sample_id" || got[1] != "label" {
            return Err(Error::parse(
                1,
                format!("expected header sample_id,label,f_1,...,f_M, got {:?}", got.join(",")),
            ));
        }
        for (i, h) in got[2..].iter().enumerate() {
            let want = format!("f_{}", i + 1);
            if *h != want {
                return Err(Error::parse(1, format!("expected column {want:?}, got {h:?}")));
            }
        }
        dim = got.len() - 2;
    }
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != dim + 2 {
            return Err(Error::parse(
                line,
                format!("expected {} fields, got {}", dim + 2, rec.len()),
            ));
        }
        let label: u32 = rec[1]
            .parse()
            .map_err(|_| Error::parse(line, format!("non-integer label: {:?}", &rec[1])))?;
        let mut values = Vec::with_capacity(dim);
        for i in 0..dim {
            let v: f64 = rec[i + 2].parse().map_err(|_| {
                Error::parse(line, format!("non-numeric feature f_{}: {:?}", i + 1, &rec[i + 2]))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite feature f_{}", i + 1)));
            }
            values.push(v);
        }
        samples.push(FeatureSample {
            sample_id: rec[0].to_string(),
            label,
            values,
        });
    }
    Ok(FeatureSet { dim, samples })
}
