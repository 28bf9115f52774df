//! File formats.
//!
//! Dataset files are comma-separated text. The first line declares the
//! shape, the second names the columns, then one row per sample:
//!
//! ```text
//! # d=2 K=3
//! x1,x2,y,r
//! 0.25,-1.5,2,1
//! 1.75,0.5,NA,0
//! ```
//!
//! Labels are written 1-based (`1..=K`) and read back to the 0-based
//! indices used in memory; a hidden label is the literal `NA`. Floats are
//! written in the shortest form that parses back to the same value, so a
//! write/read round trip is exact.
//!
//! Sealed truth and model checkpoints are JSON documents carrying a
//! `format_version` field.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SealedTruth};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

const MISSING: &str = "NA";

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# d={} K={}", ds.dim(), ds.n_classes())?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("r".into());
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = ds.x(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.label(i).map_or_else(|| MISSING.to_string(), |y| (y + 1).to_string()));
        row.push(if ds.is_labeled(i) { "1" } else { "0" }.into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_shape(line: &str) -> Result<(usize, usize)> {
    let bad = || Error::Format {
        line: 1,
        reason: format!("expected `# d=<dim> K=<classes>`, found `{}`", line.trim()),
    };
    let rest = line.trim().strip_prefix('#').ok_or_else(bad)?;
    let (mut d, mut k) = (None, None);
    for part in rest.split_whitespace() {
        match part.split_once('=') {
            Some(("d", v)) => d = v.parse().ok(),
            Some(("K", v)) => k = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    Ok((d.ok_or_else(bad)?, k.ok_or_else(bad)?))
}

/// Reads a dataset file. The result satisfies every shape constraint but
/// is not otherwise validated; call [`Dataset::validate`].
pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let (d, k) = parse_shape(&first)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.len() != d + 2 {
        return Err(Error::Format {
            line: 2,
            reason: format!("expected {} columns, found {}", d + 2, header.len()),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut indicator = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 3;
        let fail = |reason: String| Error::Format { line, reason };
        if record.len() != d + 2 {
            return Err(fail(format!("expected {} columns, found {}", d + 2, record.len())));
        }
        for field in record.iter().take(d) {
            features.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| fail(format!("bad feature `{field}`")))?,
            );
        }
        let y = record[d].trim();
        labels.push(if y == MISSING {
            None
        } else {
            let v: usize = y.parse().map_err(|_| fail(format!("bad label `{y}`")))?;
            if v == 0 {
                return Err(fail("labels are 1-based".into()));
            }
            Some(v - 1)
        });
        indicator.push(match record[d + 1].trim() {
            "1" => true,
            "0" => false,
            other => return Err(fail(format!("bad indicator `{other}`"))),
        });
    }
    Dataset::from_parts(features, d, labels, indicator, k)
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    format_version: u32,
    n_classes: usize,
    /// 1-based.
    labels: Vec<usize>,
    phi_star: Option<Vec<f64>>,
}

pub fn truth_to_json(truth: &SealedTruth) -> Result<String> {
    let file = TruthFile {
        format_version: FORMAT_VERSION,
        n_classes: truth.n_classes(),
        labels: truth.labels().iter().map(|y| y + 1).collect(),
        phi_star: truth.phi_star().map(<[f64]>::to_vec),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn truth_from_json(text: &str) -> Result<SealedTruth> {
    let file: TruthFile = serde_json::from_str(text)?;
    check_version(file.format_version)?;
    if let Some(i) = file.labels.iter().position(|&y| y == 0) {
        return Err(Error::InvalidSample {
            index: i,
            reason: "labels are 1-based".into(),
        });
    }
    SealedTruth::new(
        file.labels.iter().map(|y| y - 1).collect(),
        file.n_classes,
        file.phi_star,
    )
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    architecture: Architecture,
    input_dim: usize,
    n_classes: usize,
    /// Linear: `W` (K x d, row-major) then `b` (K). One hidden layer of
    /// width h: `W1` (h x d), `b1` (h), `W2` (K x h), `b2` (K).
    params: Vec<f64>,
}

pub fn model_to_json(theta: &ModelParams) -> Result<String> {
    if theta.params().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("model parameters are not finite"));
    }
    let file = Checkpoint {
        format_version: FORMAT_VERSION,
        architecture: theta.arch,
        input_dim: theta.input_dim,
        n_classes: theta.n_classes,
        params: theta.params().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn model_from_json(text: &str) -> Result<ModelParams> {
    let file: Checkpoint = serde_json::from_str(text)?;
    check_version(file.format_version)?;
    ModelParams::from_vec(file.architecture, file.input_dim, file.n_classes, file.params)
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::invalid(format!("unsupported format version {v}")));
    }
    Ok(())
}
