//! Artefact files: binary PGM images and small CSV tables.
//!
//! Every writer is deterministic: floats are printed with Rust's default
//! shortest-round-trip formatting, so re-parsing a file recovers the
//! exact bit pattern and equal runs produce byte-identical artefacts.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::analysis::{AnalysisError, CensusResult, LatentPointSet};
use crate::trainer::EpochStats;

/// Errors while writing or reading artefact files.
#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {what}")]
    Format { path: String, line: usize, what: String },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

fn io_err(path: &Path, source: io::Error) -> OutputError {
    OutputError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, line: usize, what: impl Into<String>) -> OutputError {
    OutputError::Format { path: path.display().to_string(), line, what: what.into() }
}

/// Write a binary PGM (`P5`, maxval 255). Pixels are clamped to `[0, 1]`
/// and scaled with round-half-away to the nearest byte.
pub fn write_pgm(
    path: impl AsRef<Path>,
    pixels: &[f64],
    width: usize,
    height: usize,
) -> Result<(), OutputError> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), width * height, "pixel buffer does not match {width}x{height}");
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(out, "P5\n{width} {height}\n255\n").map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// Write latent points as `label,angle,z1..zk` CSV.
pub fn write_latent_csv(path: impl AsRef<Path>, latents: &LatentPointSet) -> Result<(), OutputError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut run = || -> io::Result<()> {
        write!(out, "label,angle")?;
        for d in 1..=latents.dim() {
            write!(out, ",z{d}")?;
        }
        writeln!(out)?;
        for i in 0..latents.len() {
            write!(out, "{},{}", latents.label(i), latents.angle(i))?;
            for v in latents.point(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    run().map_err(|e| io_err(path, e))
}

/// Read a `label,angle,z1..zk` CSV back into a [`LatentPointSet`].
pub fn read_latent_csv(path: impl AsRef<Path>) -> Result<LatentPointSet, OutputError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => return Err(format_err(path, 1, "empty file, expected a header")),
    };
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "label" || columns[1] != "angle" {
        return Err(format_err(path, 1, format!("expected header label,angle,z1,.. got {header:?}")));
    }
    for (d, col) in columns[2..].iter().enumerate() {
        let want = format!("z{}", d + 1);
        if *col != want {
            return Err(format_err(path, 1, format!("expected column {want}, got {col:?}")));
        }
    }
    let dim = columns.len() - 2;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut angles = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(format_err(
                path,
                lineno,
                format!("expected {} fields, got {}", columns.len(), fields.len()),
            ));
        }
        let label: u8 = fields[0]
            .parse()
            .map_err(|_| format_err(path, lineno, format!("bad label {:?}", fields[0])))?;
        if label > 9 {
            return Err(format_err(path, lineno, format!("label {label} out of range 0..=9")));
        }
        let angle: f64 = fields[1]
            .parse()
            .map_err(|_| format_err(path, lineno, format!("bad angle {:?}", fields[1])))?;
        labels.push(label);
        angles.push(angle);
        for f in &fields[2..] {
            let v: f64 =
                f.parse().map_err(|_| format_err(path, lineno, format!("bad coordinate {f:?}")))?;
            points.push(v);
        }
    }
    Ok(LatentPointSet::new(points, labels, angles, dim)?)
}

/// Write a planar embedding as `label,t1,t2` CSV.
pub fn write_tsne_csv(
    path: impl AsRef<Path>,
    embedding: &[f64],
    labels: &[u8],
) -> Result<(), OutputError> {
    let path = path.as_ref();
    assert_eq!(embedding.len(), labels.len() * 2, "embedding is not n x 2");
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut run = || -> io::Result<()> {
        writeln!(out, "label,t1,t2")?;
        for (i, &label) in labels.iter().enumerate() {
            writeln!(out, "{label},{},{}", embedding[2 * i], embedding[2 * i + 1])?;
        }
        out.flush()
    };
    run().map_err(|e| io_err(path, e))
}

/// Write census counts as `digit,count` CSV, one row per digit 0..=9.
pub fn write_census_csv(path: impl AsRef<Path>, result: &CensusResult) -> Result<(), OutputError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut run = || -> io::Result<()> {
        writeln!(out, "digit,count")?;
        for (digit, count) in result.counts.iter().enumerate() {
            writeln!(out, "{digit},{count}")?;
        }
        out.flush()
    };
    run().map_err(|e| io_err(path, e))
}

/// Write per-epoch training losses as `epoch,total,recon,kl` CSV.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<(), OutputError> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut run = || -> io::Result<()> {
        writeln!(out, "epoch,total,recon,kl")?;
        for row in history {
            writeln!(out, "{},{},{},{}", row.epoch, row.total, row.recon, row.kl)?;
        }
        out.flush()
    };
    run().map_err(|e| io_err(path, e))
}
