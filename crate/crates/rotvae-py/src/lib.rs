//! Python bindings for the rotvae crate: datasets, models, and the
//! latent-space analysis operations, exchanged as plain Python lists.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use std::path::PathBuf;

use rotvae::analysis;
use rotvae::dataset::{
    self, build_rotated, load_split, reference_targets, Split, IMG, PIXELS,
};
use rotvae::tensor::Tensor;
use rotvae::trainer::{train, Checkpoint, TrainConfig, TrainError};
use rotvae::vae::Mode;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Io { .. }
        | TrainError::CheckpointMagic { .. }
        | TrainError::UnsupportedVersion(_)
        | TrainError::Corrupt { .. }
        | TrainError::Json(_) => io_err(e),
        other => value_err(other),
    }
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    s.parse::<Mode>().map_err(value_err)
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse::<Split>().map_err(value_err)
}

/// Rows of length `PIXELS` -> one [n, 28, 28, 1] batch tensor.
fn batch_tensor(images: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = images.len();
    if n == 0 {
        return Err(value_err("need at least one image"));
    }
    let mut data = Vec::with_capacity(n * PIXELS);
    for (i, row) in images.iter().enumerate() {
        if row.len() != PIXELS {
            return Err(value_err(format!(
                "image {i} has {} values, expected {PIXELS}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::new(vec![n, IMG, IMG, 1], data).map_err(value_err)
}

/// Rank-2 tensor -> list of rows.
fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// A labelled set of 28x28 images, optionally rotated.
#[pyclass(name = "ImageSet", frozen)]
struct PyImageSet {
    inner: dataset::ImageSet,
}

#[pymethods]
impl PyImageSet {
    /// Load an MNIST split ("combined" or "train") from a directory of
    /// IDX files.
    #[staticmethod]
    #[pyo3(signature = (data_dir, split = "combined"))]
    fn load(data_dir: PathBuf, split: &str) -> PyResult<Self> {
        let split = parse_split(split)?;
        Ok(PyImageSet { inner: load_split(&data_dir, split).map_err(io_err)? })
    }

    /// A copy with every image rotated by a seeded random angle.
    fn rotated(&self, seed: u64) -> Self {
        PyImageSet { inner: build_rotated(&self.inner, seed) }
    }

    /// The first `n` records.
    fn subset(&self, n: usize) -> Self {
        PyImageSet { inner: self.inner.subset(n) }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, i: usize) -> PyResult<u8> {
        self.check(i)?;
        Ok(self.inner.label(i))
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    /// Rotation angle of record `i` (0.0 when unrotated).
    fn angle(&self, i: usize) -> PyResult<f64> {
        self.check(i)?;
        Ok(self.inner.angle(i))
    }

    /// Pixels of record `i` as a flat list of 784 floats in [0, 1].
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.check(i)?;
        Ok(self.inner.image(i).to_vec())
    }
}

impl PyImageSet {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.inner.len() {
            return Err(value_err(format!(
                "index {i} out of range for {} records",
                self.inner.len()
            )));
        }
        Ok(())
    }
}

/// The ten fixed reference images, one per digit class.
#[pyclass(name = "TargetTable", frozen)]
struct PyTargetTable {
    inner: dataset::TargetTable,
}

#[pymethods]
impl PyTargetTable {
    /// Build the reference table from a set's canonical indices.
    #[staticmethod]
    fn reference(set: &PyImageSet) -> PyResult<Self> {
        Ok(PyTargetTable { inner: reference_targets(&set.inner).map_err(value_err)? })
    }

    /// The reference image for `digit` as 784 floats.
    fn image(&self, digit: u8) -> PyResult<Vec<f64>> {
        if digit > 9 {
            return Err(value_err(format!("digit must be 0..=9, got {digit}")));
        }
        Ok(self.inner.image(digit).to_vec())
    }

    /// Which record of the source set each digit's reference came from.
    fn source_indices(&self) -> [usize; 10] {
        *self.inner.source_indices()
    }
}

/// A trained (or loaded) VAE with its training history.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Train a model on MNIST. Mirrors the CLI's `train` subcommand.
    #[staticmethod]
    #[pyo3(signature = (
        data_dir,
        mode = "standard",
        latent_dim = 2,
        beta = 1.0,
        epochs = 30,
        batch_size = 128,
        seed = 0,
        rotate = true,
        subset = None,
        split = "combined",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        data_dir: PathBuf,
        mode: &str,
        latent_dim: usize,
        beta: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        rotate: bool,
        subset: Option<usize>,
        split: &str,
    ) -> PyResult<Self> {
        let config = TrainConfig {
            latent_dim,
            mode: parse_mode(mode)?,
            beta,
            epochs,
            batch_size,
            seed,
            rotate,
            subset,
            split: parse_split(split)?,
            data_dir,
            ..TrainConfig::default()
        };
        Ok(PyModel { ckpt: train(&config).map_err(train_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { ckpt: Checkpoint::load(&path).map_err(train_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(train_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.ckpt.config.latent_dim
    }

    #[getter]
    fn mode(&self) -> String {
        self.ckpt.config.mode.to_string()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.ckpt.config.beta
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.ckpt.config.seed
    }

    /// Per-epoch (epoch, total, reconstruction, kl) means.
    fn history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.ckpt
            .history
            .iter()
            .map(|s| (s.epoch, s.total, s.recon, s.kl))
            .collect()
    }

    /// Encode images (each 784 floats) to per-row (mu, log_var) lists.
    fn encode(&self, images: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let batch = batch_tensor(images)?;
        let (mu, log_var) = self.ckpt.state.encode(&batch).map_err(value_err)?;
        Ok((rows(&mu), rows(&log_var)))
    }

    /// Decode latent rows (each `latent_dim` floats) to images of 784
    /// floats.
    fn decode(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let n = z.len();
        if n == 0 {
            return Err(value_err("need at least one latent point"));
        }
        let k = self.ckpt.config.latent_dim;
        let mut data = Vec::with_capacity(n * k);
        for (i, row) in z.iter().enumerate() {
            if row.len() != k {
                return Err(value_err(format!(
                    "latent point {i} has {} values, expected {k}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        let z = Tensor::new(vec![n, k], data).map_err(value_err)?;
        let out = self.ckpt.state.decode(&z).map_err(value_err)?;
        Ok(out.data().chunks(PIXELS).map(<[f64]>::to_vec).collect())
    }

    /// Encoder means for a whole set: (points, labels, angles).
    fn embed(&self, set: &PyImageSet) -> PyResult<(Vec<Vec<f64>>, Vec<u8>, Vec<f64>)> {
        let latents = analysis::embed(&self.ckpt.state, &set.inner).map_err(value_err)?;
        let k = latents.dim();
        let points = latents.points().chunks(k).map(<[f64]>::to_vec).collect();
        Ok((points, latents.labels().to_vec(), latents.angles().to_vec()))
    }

    /// Decode a `steps` x `steps` latent grid into one flat mosaic;
    /// returns (pixels, side). Needs a 2-D latent space.
    #[pyo3(signature = (lo = -3.0, hi = 3.0, steps = 30))]
    fn grid(&self, lo: f64, hi: f64, steps: usize) -> PyResult<(Vec<f64>, usize)> {
        let mosaic = analysis::decode_grid(&self.ckpt.state, lo, hi, steps).map_err(value_err)?;
        Ok((mosaic.pixels(), mosaic.side()))
    }

    /// Count labels inside the cube of `side` centred on the embedding
    /// of `digit`'s reference image; returns ten counts.
    #[pyo3(signature = (set, targets, digit = 8, side = 0.2))]
    fn census(
        &self,
        set: &PyImageSet,
        targets: &PyTargetTable,
        digit: u8,
        side: f64,
    ) -> PyResult<Vec<usize>> {
        let result = analysis::census(&self.ckpt.state, &set.inner, &targets.inner, digit, side)
            .map_err(value_err)?;
        Ok(result.counts.to_vec())
    }
}

/// Rotate one 784-float image by `angle` radians (counter-clockwise,
/// bilinear, zero fill).
#[pyfunction]
fn rotate_image(image: Vec<f64>, angle: f64) -> PyResult<Vec<f64>> {
    if image.len() != PIXELS {
        return Err(value_err(format!(
            "image has {} values, expected {PIXELS}",
            image.len()
        )));
    }
    Ok(dataset::rotate_image(&image, angle))
}

/// Exact t-SNE of the given points to 2-D; returns one (t1, t2) pair
/// per input row.
#[pyfunction]
#[pyo3(signature = (points, perplexity = 30.0, iterations = 1000, seed = 0))]
fn tsne(
    points: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<Vec<(f64, f64)>> {
    let n = points.len();
    if n == 0 {
        return Err(value_err("need at least one point"));
    }
    let dim = points[0].len();
    let mut flat = Vec::with_capacity(n * dim);
    for (i, row) in points.iter().enumerate() {
        if row.len() != dim {
            return Err(value_err(format!(
                "point {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    let config = analysis::TsneConfig { perplexity, iterations, seed, ..Default::default() };
    let result = analysis::tsne(&flat, dim, &config).map_err(value_err)?;
    Ok(result
        .embedding
        .chunks(2)
        .map(|c| (c[0], c[1]))
        .collect())
}

/// Hold out a seeded fraction of the points and score k-NN majority
/// label recovery.
#[pyfunction]
#[pyo3(signature = (points, labels, k = 15, holdout = 0.2, seed = 0))]
fn knn_purity(
    points: Vec<Vec<f64>>,
    labels: Vec<u8>,
    k: usize,
    holdout: f64,
    seed: u64,
) -> PyResult<f64> {
    let n = points.len();
    if n == 0 {
        return Err(value_err("need at least one point"));
    }
    let dim = points[0].len();
    let mut flat = Vec::with_capacity(n * dim);
    for (i, row) in points.iter().enumerate() {
        if row.len() != dim {
            return Err(value_err(format!(
                "point {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    let latents = analysis::LatentPointSet::new(flat, labels, vec![0.0; n], dim)
        .map_err(value_err)?;
    analysis::knn_purity(&latents, k, holdout, seed).map_err(value_err)
}

#[pymodule]
fn rotvae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageSet>()?;
    m.add_class::<PyTargetTable>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rotate_image, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(knn_purity, m)?)?;
    m.add("IMG", IMG)?;
    m.add("PIXELS", PIXELS)?;
    Ok(())
}
