//! Adam training loop and checkpoints.
//!
//! A run is a pure function of its [`TrainConfig`]: parameter init, batch
//! shuffling, rotation angles, and reparameterization noise all come from
//! disjoint ChaCha8 streams under `config.seed`, and every numeric step is
//! sequential, so identical configs produce bit-identical checkpoints.
//!
//! Checkpoints are a small self-describing container: an 8-byte magic, a
//! version word, a JSON manifest (config, parameter names and shapes, loss
//! history), then the parameters as a raw little-endian f32 blob in fixed
//! order. f32 round-trips exactly through the f64 engine, so
//! save -> load -> save reproduces the file byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    build_rotated, load_split, reference_targets, DataError, ImageSet, Split, TargetTable,
};
use crate::rng::{derive_seed, stream_rng, streams, tags};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::vae::{draw_eps, Mode, ModelState, Params, VaeError, PARAM_NAMES};

const MAGIC: &[u8; 8] = b"RVAECKPT";
const VERSION: u32 = 1;

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub mode: Mode,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Train on randomly rotated digits (the paper's setting).
    pub rotate: bool,
    /// Redraw rotation angles every epoch instead of fixing them once.
    pub resample_rotations: bool,
    pub split: Split,
    /// Truncate the working set to its first `n` records.
    pub subset: Option<usize>,
    pub data_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 2,
            mode: Mode::Standard,
            beta: 1.0,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
            seed: 0,
            rotate: true,
            resample_rotations: false,
            split: Split::Combined,
            subset: None,
            data_dir: PathBuf::from("data/mnist"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::BadConfig { what: what.to_string() });
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if self.subset == Some(0) {
            return bad("subset must be at least 1 when given");
        }
        if self.resample_rotations && !self.rotate {
            return bad("resample_rotations needs rotate = true");
        }
        Ok(())
    }
}

/// Epoch-mean losses, weighted by actual batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Training and checkpoint errors.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad config: {what}")]
    BadConfig { what: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for {param} at epoch {epoch}, batch {batch}")]
    NonFiniteGrad {
        param: &'static str,
        epoch: usize,
        batch: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {found:?}")]
    CheckpointMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {what}")]
    Corrupt { what: String },
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// Adam with bias correction: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Fresh optimizer state for tensors of the given sizes.
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, sizes: &[usize]) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: &TrainConfig, params: &Params) -> Self {
        let sizes: Vec<usize> = params.list().iter().map(|t| t.numel()).collect();
        Adam::new(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
            &sizes,
        )
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. `params` and `grads` must match the sizes the
    /// optimizer was built with, in the same order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            debug_assert_eq!(param.numel(), m.len());
            debug_assert_eq!(grad.numel(), m.len());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// A finished (or loaded) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: ModelState,
    pub history: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    params: Vec<ManifestParam>,
    history: Vec<EpochStats>,
}

impl Checkpoint {
    /// Serialize to the container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            params: self
                .state
                .params
                .named()
                .map(|(name, t)| ManifestParam { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let blob_len: usize = self.state.params.numel() * 4;
        let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + blob_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.state.params.list() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse the container format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |what: &str| TrainError::Corrupt { what: what.to_string() };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(TrainError::CheckpointMagic {
                found: bytes[..bytes.len().min(8)].to_vec(),
            });
        }
        if bytes.len() < 20 {
            return Err(corrupt("header truncated"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TrainError::UnsupportedVersion(version));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json_end = 20usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..json_end])?;
        manifest.config.validate()?;

        let shapes = Params::shapes(manifest.config.latent_dim);
        if manifest.params.len() != 18 {
            return Err(corrupt("expected 18 parameter entries"));
        }
        for ((entry, shape), name) in manifest.params.iter().zip(&shapes).zip(PARAM_NAMES) {
            if entry.name != name || &entry.shape != shape {
                return Err(corrupt(&format!(
                    "parameter {} has shape {:?}, expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
        }
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let blob = &bytes[json_end..];
        if blob.len() != total * 4 {
            return Err(corrupt(&format!(
                "parameter blob is {} bytes, expected {}",
                blob.len(),
                total * 4
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(18);
        for shape in &shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = blob[offset..offset + n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            offset += n * 4;
            tensors.push(Tensor::new(shape.clone(), data).expect("length matches"));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("18 tensors");
        let params = Params {
            conv1_k: next(), conv1_b: next(), conv2_k: next(), conv2_b: next(),
            enc_w: next(), enc_b: next(), mu_w: next(), mu_b: next(),
            logvar_w: next(), logvar_b: next(), dec_w: next(), dec_b: next(),
            convt1_k: next(), convt1_b: next(), convt2_k: next(), convt2_b: next(),
            out_k: next(), out_b: next(),
        };
        let state = ModelState::from_parts(
            manifest.config.latent_dim,
            manifest.config.mode,
            manifest.config.beta,
            params,
        )?;
        Ok(Checkpoint { config: manifest.config, state, history: manifest.history })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)
            .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Load data per the config and run the full training pipeline.
pub fn train(config: &TrainConfig) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let base = load_split(&config.data_dir, config.split)?;
    // Reference targets come off the full unrotated set, before any subset.
    let targets = match config.mode {
        Mode::Targeted => Some(reference_targets(&base)?),
        Mode::Standard => None,
    };
    let working = match config.subset {
        Some(n) => base.subset(n),
        None => base,
    };
    train_on(&working, targets.as_ref(), config)
}

/// Train on an explicit unrotated working set. Rotation (when configured)
/// happens here so per-epoch resampling stays possible.
pub fn train_on(
    set: &ImageSet,
    targets: Option<&TargetTable>,
    config: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    if set.is_empty() {
        return Err(TrainError::BadConfig { what: "training set is empty".into() });
    }
    let mut state = ModelState::init(config.latent_dim, config.mode, config.beta, config.seed)?;
    let mut adam = Adam::for_params(config, &state.params);
    let mut eps_rng = stream_rng(config.seed, streams::EPS);
    let n = set.len();

    let fixed_rotation = if config.rotate && !config.resample_rotations {
        Some(build_rotated(set, derive_seed(config.seed, tags::ROTATE)))
    } else {
        None
    };

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let resampled;
        let working: &ImageSet = if config.rotate {
            match &fixed_rotation {
                Some(r) => r,
                None => {
                    resampled =
                        build_rotated(set, derive_seed(config.seed, tags::ROTATE + epoch as u64));
                    &resampled
                }
            }
        } else {
            set
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, streams::SHUFFLE + epoch as u64));

        let (mut sum_total, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = working.batch(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| working.label(i)).collect();
            let target = state.resolve_target(&batch, Some(&labels), targets)?;
            let eps = draw_eps(&[chunk.len(), config.latent_dim], &mut eps_rng);

            let mut g = Graph::new();
            let p = state.insert_params(&mut g, true);
            let x = g.leaf(batch);
            let t = g.leaf(target);
            let loss = state.build_loss(&mut g, &p, x, t, &eps)?;
            let total = g.value(loss.total).item();
            let recon = g.value(loss.recon).item();
            let kl = g.value(loss.kl).item();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let mut grads = g.backward(loss.total)?;
            let grad_tensors: Vec<Tensor> = p
                .list()
                .iter()
                .map(|&v| grads.take(v).expect("trainable leaf has gradient"))
                .collect();
            for (name, grad) in PARAM_NAMES.into_iter().zip(&grad_tensors) {
                if !grad.all_finite() {
                    return Err(TrainError::NonFiniteGrad { param: name, epoch, batch: batch_idx });
                }
            }
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            adam.step(&mut state.params.list_mut(), &grad_refs);

            let weight = chunk.len() as f64;
            sum_total += total * weight;
            sum_recon += recon * weight;
            sum_kl += kl * weight;
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            total: sum_total / n as f64,
            recon: sum_recon / n as f64,
            kl: sum_kl / n as f64,
        });
    }

    Ok(Checkpoint { config: config.clone(), state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PIXELS;

    fn synthetic_set(n: usize, seed: u64) -> ImageSet {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let images = (0..n * PIXELS)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        ImageSet::new(images, labels).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            subset: None,
            rotate: false,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // With constant gradient g, the bias-corrected first step is
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-7, &[2]);
        adam.step(&mut [&mut p], &[&g]);
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-5, "{}", p.data()[0]);
        assert!((p.data()[1] - (-2.0 + 0.01)).abs() < 1e-5, "{}", p.data()[1]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // f(x) = (x - 3)^2, gradient 2(x - 3).
        let mut x = Tensor::new(vec![1], vec![-4.0]).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-7, &[1]);
        for _ in 0..2000 {
            let g = Tensor::new(vec![1], vec![2.0 * (x.data()[0] - 3.0)]).unwrap();
            adam.step(&mut [&mut x], &[&g]);
        }
        assert!((x.data()[0] - 3.0).abs() < 1e-3, "{}", x.data()[0]);
    }

    #[test]
    fn every_parameter_tensor_moves_in_one_epoch() {
        let set = synthetic_set(16, 1);
        let config = tiny_config();
        let init = ModelState::init(config.latent_dim, config.mode, config.beta, config.seed).unwrap();
        let ckpt = train_on(&set, None, &config).unwrap();
        for ((name, before), after) in init.params.named().zip(ckpt.state.params.list()) {
            assert!(before != after, "{name} did not move");
        }
        assert_eq!(ckpt.history.len(), 1);
        assert!(ckpt.history[0].total.is_finite());
        assert_eq!(ckpt.history[0].epoch, 1);
    }

    #[test]
    fn identical_configs_give_bit_identical_runs() {
        let set = synthetic_set(12, 2);
        let config = TrainConfig { epochs: 2, rotate: true, ..tiny_config() };
        let a = train_on(&set, None, &config).unwrap();
        let b = train_on(&set, None, &config).unwrap();
        assert_eq!(a.state.params, b.state.params);
        assert_eq!(a.history, b.history);
        assert_eq!(a.to_bytes(), b.to_bytes());
        // A different seed diverges.
        let c = train_on(&set, None, &TrainConfig { seed: 6, ..config }).unwrap();
        assert!(a.state.params != c.state.params);
    }

    #[test]
    fn rotation_settings_change_the_run() {
        let set = synthetic_set(12, 3);
        let base = TrainConfig { epochs: 2, ..tiny_config() };
        let unrotated = train_on(&set, None, &base).unwrap();
        let rotated = train_on(&set, None, &TrainConfig { rotate: true, ..base.clone() }).unwrap();
        let resampled = train_on(
            &set,
            None,
            &TrainConfig { rotate: true, resample_rotations: true, ..base.clone() },
        )
        .unwrap();
        assert!(unrotated.state.params != rotated.state.params);
        assert!(rotated.state.params != resampled.state.params);
    }

    #[test]
    fn targeted_mode_without_table_is_an_error() {
        let set = synthetic_set(8, 4);
        let config = TrainConfig { mode: Mode::Targeted, ..tiny_config() };
        assert!(matches!(
            train_on(&set, None, &config),
            Err(TrainError::Vae(VaeError::MissingTargets))
        ));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = tiny_config();
            f(&mut c);
            assert!(matches!(c.validate(), Err(TrainError::BadConfig { .. })), "{c:?}");
        };
        bad(|c| c.epochs = 0);
        bad(|c| c.batch_size = 0);
        bad(|c| c.latent_dim = 0);
        bad(|c| c.learning_rate = 0.0);
        bad(|c| c.learning_rate = f64::NAN);
        bad(|c| c.adam_beta1 = 1.0);
        bad(|c| c.subset = Some(0));
        bad(|c| c.resample_rotations = true);
        tiny_config().validate().unwrap();
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let set = synthetic_set(8, 7);
        let ckpt = train_on(&set, None, &tiny_config()).unwrap();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.history, ckpt.history);
        // f32 quantization moves f64 params by at most 2^-24 relative.
        for (a, b) in ckpt
            .state
            .params
            .list()
            .iter()
            .zip(loaded.state.params.list())
        {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= x.abs() * 1e-7 + 1e-30);
            }
        }
    }

    #[test]
    fn loaded_checkpoint_reports_its_dimensions() {
        let set = synthetic_set(8, 8);
        let config = TrainConfig { latent_dim: 3, ..tiny_config() };
        let bytes = train_on(&set, None, &config).unwrap().to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.state.latent_dim(), 3);
        assert_eq!(loaded.config.latent_dim, 3);
    }

    #[test]
    fn checkpoint_parser_rejects_damage() {
        let set = synthetic_set(8, 9);
        let bytes = train_on(&set, None, &tiny_config()).unwrap().to_bytes();

        assert!(matches!(
            Checkpoint::from_bytes(b"NOTACKPT rest"),
            Err(TrainError::CheckpointMagic { .. })
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(TrainError::UnsupportedVersion(9))
        ));
        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(TrainError::Corrupt { .. })
        ));
    }
}
