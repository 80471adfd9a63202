//! MNIST loading, seeded rotation, and per-class reference targets.
//!
//! Images are 28x28 greyscale stored row-major as f64 in `[0,1]`
//! (`raw / 255`). The working set is the *combined* ordering: all 60000
//! training records followed by all 10000 test records, 70000 total. The
//! per-class reference images are pinned by index into that ordering.
//!
//! Rotation is inverse-mapped bilinear interpolation about the geometric
//! centre `(13.5, 13.5)`, counterclockwise as the image is viewed (row 0
//! at the top), zero-filled outside the source. `sin`/`cos` are snapped to
//! exact `{-1, 0, 1}` within 1e-12 so quarter turns degenerate to pixel
//! permutations and four of them compose to the bit-exact identity.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Image side length in pixels.
pub const IMG: usize = 28;
/// Pixels per image.
pub const PIXELS: usize = IMG * IMG;
/// Records in the MNIST training split.
pub const TRAIN_LEN: usize = 60000;
/// Records in the combined train+test ordering.
pub const COMBINED_LEN: usize = 70000;

/// Index of one clean reference image per digit (0..=9) in the combined
/// ordering. `reference_targets` verifies the labels found there.
pub const REFERENCE_INDICES: [usize; 10] = [56, 102, 25, 50, 26, 175, 62, 15, 46, 45];

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Errors raised while reading, writing, or assembling image data.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32, offset: usize },
    #[error("truncated file: need {needed} bytes from offset {offset}, have {available}")]
    TruncatedFile { needed: usize, available: usize, offset: usize },
    #[error("{extra} unexpected trailing bytes after offset {offset}")]
    TrailingBytes { extra: usize, offset: usize },
    #[error("dimension mismatch at byte offset {offset}: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("label {value} out of range at record {index} (byte offset {offset})")]
    BadLabel { index: usize, value: u8, offset: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("set has {len} records but reference index {index} is pinned")]
    SetTooSmall { len: usize, index: usize },
    #[error("reference index {index} holds digit {found}, expected {expected}")]
    ReferenceLabel { index: usize, expected: u8, found: u8 },
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::TruncatedFile {
            needed: 4,
            available: bytes.len().saturating_sub(offset),
            offset,
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX image file: big-endian magic 0x00000803, then counts and
/// 28x28 raw bytes. Returns `(count, pixels)` with `pixels.len() == count * 784`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<u8>), DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IMAGES_MAGIC, found: magic, offset: 0 });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != IMG {
        return Err(DataError::DimensionMismatch { what: "rows", expected: IMG, found: rows, offset: 8 });
    }
    if cols != IMG {
        return Err(DataError::DimensionMismatch { what: "columns", expected: IMG, found: cols, offset: 12 });
    }
    let needed = count * PIXELS;
    let body = &bytes[16..];
    if body.len() < needed {
        return Err(DataError::TruncatedFile { needed, available: body.len(), offset: 16 });
    }
    if body.len() > needed {
        return Err(DataError::TrailingBytes { extra: body.len() - needed, offset: 16 + needed });
    }
    Ok((count, body.to_vec()))
}

/// Parse an IDX label file: big-endian magic 0x00000801, then count and
/// one byte per record, each in 0..=9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: LABELS_MAGIC, found: magic, offset: 0 });
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::TruncatedFile { needed: count, available: body.len(), offset: 8 });
    }
    if body.len() > count {
        return Err(DataError::TrailingBytes { extra: body.len() - count, offset: 8 + count });
    }
    for (index, &value) in body.iter().enumerate() {
        if value > 9 {
            return Err(DataError::BadLabel { index, value, offset: 8 + index });
        }
    }
    Ok(body.to_vec())
}

/// Serialize raw image bytes (`len % 784 == 0`) into IDX format.
pub fn write_idx_images(pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len() % PIXELS, 0);
    let count = (pixels.len() / PIXELS) as u32;
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    out.extend_from_slice(&(IMG as u32).to_be_bytes());
    out.extend_from_slice(&(IMG as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Serialize labels into IDX format.
pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Which MNIST records make up the working set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// All 70000 records, training split first. The default.
    #[default]
    Combined,
    /// The 60000 training records only.
    Train,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "combined" => Ok(Split::Combined),
            "train" => Ok(Split::Train),
            other => Err(format!("unknown split {other:?} (expected combined|train)")),
        }
    }
}

/// A set of 28x28 images with labels and, after rotation, per-image angles.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    images: Vec<f64>,
    labels: Vec<u8>,
    angles: Option<Vec<f64>>,
}

impl ImageSet {
    /// Build a set from flat pixel data (`[0,1]`, row-major, 784 per image).
    pub fn new(images: Vec<f64>, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.len() != labels.len() * PIXELS {
            return Err(DataError::CountMismatch {
                images: images.len() / PIXELS,
                labels: labels.len(),
            });
        }
        Ok(ImageSet { images, labels, angles: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels of record `i`.
    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Rotation angles, present only on sets produced by [`build_rotated`].
    pub fn angles(&self) -> Option<&[f64]> {
        self.angles.as_deref()
    }

    /// Angle of record `i`; 0 for unrotated sets.
    pub fn angle(&self, i: usize) -> f64 {
        self.angles.as_ref().map_or(0.0, |a| a[i])
    }

    /// The first `min(n, len)` records.
    pub fn subset(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
            angles: self.angles.as_ref().map(|a| a[..n].to_vec()),
        }
    }

    /// Assemble records `[start, end)` into an NHWC batch tensor.
    pub fn batch_range(&self, start: usize, end: usize) -> Tensor {
        Tensor::new(
            vec![end - start, IMG, IMG, 1],
            self.images[start * PIXELS..end * PIXELS].to_vec(),
        )
        .expect("range length matches shape")
    }

    /// Assemble the listed records into an NHWC batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), IMG, IMG, 1], data).expect("length matches shape")
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<(Vec<u8>, Vec<u8>), DataError> {
    let (n, pixels) = parse_idx_images(&read_file(&dir.join(images))?)?;
    let labels = parse_idx_labels(&read_file(&dir.join(labels))?)?;
    if n != labels.len() {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    Ok((pixels, labels))
}

/// Load the requested split from a directory holding the four standard
/// MNIST IDX files. Pixels are scaled to `[0,1]`.
pub fn load_split(data_dir: &Path, split: Split) -> Result<ImageSet, DataError> {
    let (mut pixels, mut labels) =
        load_pair(data_dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    if split == Split::Combined {
        let (test_pixels, test_labels) =
            load_pair(data_dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
        pixels.extend_from_slice(&test_pixels);
        labels.extend_from_slice(&test_labels);
    }
    let images = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    ImageSet::new(images, labels)
}

/// Load the combined 70000-record set, training records first.
pub fn load_combined(data_dir: &Path) -> Result<ImageSet, DataError> {
    load_split(data_dir, Split::Combined)
}

fn snap(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

/// Rotate one 784-pixel image counterclockwise about `(13.5, 13.5)` with
/// bilinear interpolation; out-of-bounds source samples contribute zero
/// and outputs are clamped to `[0,1]`.
pub fn rotate_image(image: &[f64], angle: f64) -> Vec<f64> {
    debug_assert_eq!(image.len(), PIXELS);
    let c = snap(angle.cos());
    let s = snap(angle.sin());
    let centre = (IMG as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; PIXELS];
    for r in 0..IMG {
        let y = r as f64 - centre;
        for col in 0..IMG {
            let x = col as f64 - centre;
            // Inverse map: where in the source does this output pixel come from?
            let sx = x * c - y * s + centre;
            let sy = x * s + y * c + centre;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let dx = sx - x0;
            let dy = sy - y0;
            let mut acc = 0.0;
            for (gy, wy) in [(y0, 1.0 - dy), (y0 + 1.0, dy)] {
                if wy == 0.0 || gy < 0.0 || gy > (IMG - 1) as f64 {
                    continue;
                }
                for (gx, wx) in [(x0, 1.0 - dx), (x0 + 1.0, dx)] {
                    if wx == 0.0 || gx < 0.0 || gx > (IMG - 1) as f64 {
                        continue;
                    }
                    acc += wy * wx * image[gy as usize * IMG + gx as usize];
                }
            }
            out[r * IMG + col] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

/// The angle record `index` receives under `seed`: an independent ChaCha8
/// stream per index, one uniform draw from `[0, 2pi)`.
pub fn rotation_angle(seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random::<f64>() * TAU
}

/// The first `n` per-index rotation angles for `seed`.
pub fn rotation_angles(seed: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| rotation_angle(seed, i)).collect()
}

/// Rotate every record by its seeded angle. Labels carry over; the result
/// records its angles.
pub fn build_rotated(set: &ImageSet, seed: u64) -> ImageSet {
    let angles = rotation_angles(seed, set.len());
    let mut images = Vec::with_capacity(set.len() * PIXELS);
    for (i, &angle) in angles.iter().enumerate() {
        images.extend_from_slice(&rotate_image(set.image(i), angle));
    }
    ImageSet { images, labels: set.labels.clone(), angles: Some(angles) }
}

/// One fixed reference image per digit class.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    images: Vec<f64>,
    source_indices: [usize; 10],
}

impl TargetTable {
    /// Build a table from ten images, one per digit in order 0..=9.
    /// `source_indices` records where they came from (diagnostics only).
    pub fn from_images(images: Vec<f64>, source_indices: [usize; 10]) -> Result<Self, DataError> {
        if images.len() != 10 * PIXELS {
            return Err(DataError::CountMismatch { images: images.len() / PIXELS, labels: 10 });
        }
        Ok(TargetTable { images, source_indices })
    }

    /// The reference image for `digit`.
    pub fn image(&self, digit: u8) -> &[f64] {
        let d = digit as usize;
        &self.images[d * PIXELS..(d + 1) * PIXELS]
    }

    pub fn source_indices(&self) -> &[usize; 10] {
        &self.source_indices
    }

    /// The reference image for `digit` as a `[1,28,28,1]` batch.
    pub fn tensor(&self, digit: u8) -> Tensor {
        Tensor::new(vec![1, IMG, IMG, 1], self.image(digit).to_vec()).expect("fixed size")
    }

    /// Gather the reference image for each label into an NHWC batch: the
    /// reconstruction target of a targeted-mode training batch.
    pub fn batch_for_labels(&self, labels: &[u8]) -> Tensor {
        let mut data = Vec::with_capacity(labels.len() * PIXELS);
        for &label in labels {
            data.extend_from_slice(self.image(label));
        }
        Tensor::new(vec![labels.len(), IMG, IMG, 1], data).expect("length matches shape")
    }
}

/// Pick the pinned reference image for each digit out of the *unrotated*
/// set and verify the labels found there.
pub fn reference_targets(set: &ImageSet) -> Result<TargetTable, DataError> {
    let mut images = Vec::with_capacity(10 * PIXELS);
    for (digit, &index) in REFERENCE_INDICES.iter().enumerate() {
        if index >= set.len() {
            return Err(DataError::SetTooSmall { len: set.len(), index });
        }
        let found = set.label(index);
        if found != digit as u8 {
            return Err(DataError::ReferenceLabel { index, expected: digit as u8, found });
        }
        images.extend_from_slice(set.image(index));
    }
    TargetTable::from_images(images, REFERENCE_INDICES)
}
