//! The convolutional VAE and its two training objectives.
//!
//! Encoder: 3x3 stride-2 same conv (1->32), 3x3 stride-2 same conv
//! (32->64), flatten 7*7*64 = 3136, dense to 16, then two linear heads to
//! the k latent means and log-variances. Decoder mirrors it: dense k ->
//! 3136, reshape to 7x7x64, two 3x3 stride-2 same transposed convs
//! (64->64, then 64->32), and a 3x3 stride-1 same conv to one sigmoid
//! channel. All hidden activations are relu.
//!
//! The sampling layer draws `z = mu + exp(0.5 * log_var) * eps` with
//! `eps ~ N(0, I)`; `eps` is always threaded explicitly so any forward
//! pass can be replayed bit-for-bit.
//!
//! The loss per batch is `bce + beta * kl`, where `bce` compares the
//! decoder output against the *reconstruction target*: the input itself in
//! [`Mode::Standard`], or the fixed per-class reference image of the
//! input's label in [`Mode::Targeted`]. That one-line swap is the whole
//! difference between the two models.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{TargetTable, IMG};
use crate::rng::{stream_rng, streams};
use crate::tensor::{Graph, Padding, Tensor, TensorError, Var};

/// First conv layer channels.
pub const CONV1_CHANNELS: usize = 32;
/// Second conv layer channels.
pub const CONV2_CHANNELS: usize = 64;
/// Width of the dense bottleneck before the latent heads.
pub const HIDDEN_DIM: usize = 16;
/// Spatial extent after two stride-2 convs.
pub const FEATURE_SIDE: usize = 7;
/// Flattened feature count: 7 * 7 * 64.
pub const FEATURE_DIM: usize = FEATURE_SIDE * FEATURE_SIDE * CONV2_CHANNELS;
/// Clamp bound keeping `ln` finite in the reconstruction loss.
pub const BCE_EPSILON: f64 = 1e-7;

/// Which image the decoder is asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reconstruct the input (ordinary VAE).
    Standard,
    /// Reconstruct the fixed reference image of the input's class.
    Targeted,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Mode::Standard),
            "targeted" => Ok(Mode::Targeted),
            other => Err(format!("unknown mode {other:?} (expected standard|targeted)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Standard => "standard",
            Mode::Targeted => "targeted",
        })
    }
}

/// Model and loss errors.
#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("latent_dim must be at least 1")]
    ZeroLatentDim,
    #[error("beta must be finite and non-negative, got {0}")]
    BadBeta(f64),
    #[error("{what} has shape {got:?}, expected {expected}")]
    BadShape {
        what: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("targeted mode needs labels for the batch")]
    MissingLabels,
    #[error("targeted mode needs a target table")]
    MissingTargets,
    #[error("non-finite values out of {stage}")]
    NonFinite { stage: &'static str },
}

/// Everything the model owns: dimensions, objective, and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    latent_dim: usize,
    mode: Mode,
    beta: f64,
    pub params: Params,
}

/// The 18 parameter tensors in their fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub convt1_k: Tensor,
    pub convt1_b: Tensor,
    pub convt2_k: Tensor,
    pub convt2_b: Tensor,
    pub out_k: Tensor,
    pub out_b: Tensor,
}

/// Parameter names, matching the field order of [`Params`].
pub const PARAM_NAMES: [&str; 18] = [
    "conv1_k", "conv1_b", "conv2_k", "conv2_b", "enc_w", "enc_b", "mu_w", "mu_b", "logvar_w",
    "logvar_b", "dec_w", "dec_b", "convt1_k", "convt1_b", "convt2_k", "convt2_b", "out_k", "out_b",
];

impl Params {
    /// Shapes of the 18 tensors for latent width `k`, in order.
    pub fn shapes(latent_dim: usize) -> [Vec<usize>; 18] {
        let k = latent_dim;
        [
            vec![3, 3, 1, CONV1_CHANNELS],
            vec![CONV1_CHANNELS],
            vec![3, 3, CONV1_CHANNELS, CONV2_CHANNELS],
            vec![CONV2_CHANNELS],
            vec![FEATURE_DIM, HIDDEN_DIM],
            vec![HIDDEN_DIM],
            vec![HIDDEN_DIM, k],
            vec![k],
            vec![HIDDEN_DIM, k],
            vec![k],
            vec![k, FEATURE_DIM],
            vec![FEATURE_DIM],
            vec![3, 3, CONV2_CHANNELS, CONV2_CHANNELS],
            vec![CONV2_CHANNELS],
            vec![3, 3, CONV1_CHANNELS, CONV2_CHANNELS],
            vec![CONV1_CHANNELS],
            vec![3, 3, CONV1_CHANNELS, 1],
            vec![1],
        ]
    }

    /// The tensors in fixed order.
    pub fn list(&self) -> [&Tensor; 18] {
        [
            &self.conv1_k, &self.conv1_b, &self.conv2_k, &self.conv2_b, &self.enc_w, &self.enc_b,
            &self.mu_w, &self.mu_b, &self.logvar_w, &self.logvar_b, &self.dec_w, &self.dec_b,
            &self.convt1_k, &self.convt1_b, &self.convt2_k, &self.convt2_b, &self.out_k,
            &self.out_b,
        ]
    }

    /// Mutable access in the same fixed order.
    pub fn list_mut(&mut self) -> [&mut Tensor; 18] {
        [
            &mut self.conv1_k, &mut self.conv1_b, &mut self.conv2_k, &mut self.conv2_b,
            &mut self.enc_w, &mut self.enc_b, &mut self.mu_w, &mut self.mu_b, &mut self.logvar_w,
            &mut self.logvar_b, &mut self.dec_w, &mut self.dec_b, &mut self.convt1_k,
            &mut self.convt1_b, &mut self.convt2_k, &mut self.convt2_b, &mut self.out_k,
            &mut self.out_b,
        ]
    }

    /// `(name, tensor)` pairs in fixed order.
    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.list())
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.list().iter().map(|t| t.numel()).sum()
    }
}

/// Handles to the parameters inside one [`Graph`], same order as [`Params`].
pub struct ParamVars {
    vars: [Var; 18],
}

impl ParamVars {
    pub fn list(&self) -> &[Var; 18] {
        &self.vars
    }
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Result of the sampling layer: the draw and the noise that produced it.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Tensor,
    pub eps: Tensor,
}

/// Scalar losses of one batch plus the sample they were computed with.
#[derive(Debug, Clone)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub sample: LatentSample,
}

/// Variables of one recorded loss pass, for callers that also need
/// gradients or intermediate values.
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub output: Var,
}

impl ModelState {
    /// Fresh Glorot-uniform parameters (zero biases) for the given
    /// dimensions, drawn from the seed's init stream in field order.
    pub fn init(latent_dim: usize, mode: Mode, beta: f64, seed: u64) -> Result<Self, VaeError> {
        if latent_dim == 0 {
            return Err(VaeError::ZeroLatentDim);
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(VaeError::BadBeta(beta));
        }
        let mut rng = stream_rng(seed, streams::INIT);
        let shapes = Params::shapes(latent_dim);
        let mut tensors: Vec<Tensor> = Vec::with_capacity(18);
        for shape in &shapes {
            if shape.len() == 1 {
                tensors.push(Tensor::zeros(shape.clone()));
                continue;
            }
            let (fan_in, fan_out) = fans(shape);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
                .collect();
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
        Ok(ModelState { latent_dim, mode, beta, params })
    }

    /// Rebuild a state from loaded parts, re-validating shapes.
    pub fn from_parts(
        latent_dim: usize,
        mode: Mode,
        beta: f64,
        params: Params,
    ) -> Result<Self, VaeError> {
        if latent_dim == 0 {
            return Err(VaeError::ZeroLatentDim);
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(VaeError::BadBeta(beta));
        }
        let shapes = Params::shapes(latent_dim);
        for ((tensor, shape), name) in params.list().iter().zip(&shapes).zip(PARAM_NAMES) {
            if tensor.shape() != shape.as_slice() {
                return Err(VaeError::BadShape {
                    what: "parameter",
                    expected: format!("{name} {shape:?}"),
                    got: tensor.shape().to_vec(),
                });
            }
        }
        Ok(ModelState { latent_dim, mode, beta, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Record the parameters as graph leaves, differentiable if `trainable`.
    pub fn insert_params(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self.params.list().map(|t| {
            let t = t.clone();
            g.leaf(if trainable { t.with_grad() } else { t })
        });
        ParamVars { vars }
    }

    /// Encoder pipeline from an image batch to `(mu, log_var)` variables.
    pub fn build_encoder(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
    ) -> Result<(Var, Var), VaeError> {
        let c1 = g.conv2d(x, p.v(0), p.v(1), 2, Padding::Same)?;
        let a1 = g.relu(c1)?;
        let c2 = g.conv2d(a1, p.v(2), p.v(3), 2, Padding::Same)?;
        let a2 = g.relu(c2)?;
        let flat = g.flatten(a2)?;
        let h = g.dense(flat, p.v(4), p.v(5))?;
        let ah = g.relu(h)?;
        let mu = g.dense(ah, p.v(6), p.v(7))?;
        let log_var = g.dense(ah, p.v(8), p.v(9))?;
        Ok((mu, log_var))
    }

    /// Decoder pipeline from a latent batch to the sigmoid image output.
    pub fn build_decoder(&self, g: &mut Graph, p: &ParamVars, z: Var) -> Result<Var, VaeError> {
        let n = g.shape(z)[0];
        let h = g.dense(z, p.v(10), p.v(11))?;
        let ah = g.relu(h)?;
        let grid = g.reshape(ah, vec![n, FEATURE_SIDE, FEATURE_SIDE, CONV2_CHANNELS])?;
        let t1 = g.conv2d_transpose(grid, p.v(12), p.v(13), 2, Padding::Same)?;
        let a1 = g.relu(t1)?;
        let t2 = g.conv2d_transpose(a1, p.v(14), p.v(15), 2, Padding::Same)?;
        let a2 = g.relu(t2)?;
        let out = g.conv2d(a2, p.v(16), p.v(17), 1, Padding::Same)?;
        Ok(g.sigmoid(out)?)
    }

    /// Record the full loss pass for `batch` against `target` with the
    /// given noise. Shapes: batch and target `[n,28,28,1]`, eps `[n,k]`.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        batch: Var,
        target: Var,
        eps: &Tensor,
    ) -> Result<LossVars, VaeError> {
        let n = g.shape(batch)[0];
        if eps.shape() != [n, self.latent_dim] {
            return Err(VaeError::BadShape {
                what: "eps",
                expected: format!("[{n}, {}]", self.latent_dim),
                got: eps.shape().to_vec(),
            });
        }
        let (mu, log_var) = self.build_encoder(g, p, batch)?;
        // z = mu + exp(0.5 * log_var) * eps
        let half_lv = g.affine(log_var, 0.5, 0.0)?;
        let sigma = g.exp(half_lv)?;
        let eps_var = g.leaf(eps.clone());
        let noise = g.mul(sigma, eps_var)?;
        let z = g.add(mu, noise)?;
        let output = self.build_decoder(g, p, z)?;
        let recon = build_bce(g, target, output)?;
        let kl = build_kl(g, mu, log_var)?;
        let weighted = g.affine(kl, self.beta, 0.0)?;
        let total = g.add(recon, weighted)?;
        Ok(LossVars { total, recon, kl, mu, log_var, z, output })
    }

    fn check_batch(&self, batch: &Tensor, what: &'static str) -> Result<usize, VaeError> {
        let s = batch.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != IMG || s[2] != IMG || s[3] != 1 {
            return Err(VaeError::BadShape {
                what,
                expected: format!("[n, {IMG}, {IMG}, 1]"),
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Deterministic encoding of a pixel batch to `(mu, log_var)`.
    pub fn encode(&self, batch: &Tensor) -> Result<(Tensor, Tensor), VaeError> {
        self.check_batch(batch, "batch")?;
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false);
        let x = g.leaf(batch.clone());
        let (mu, log_var) = self.build_encoder(&mut g, &p, x)?;
        let mu = g.value(mu).clone();
        let log_var = g.value(log_var).clone();
        if !mu.all_finite() || !log_var.all_finite() {
            return Err(VaeError::NonFinite { stage: "encode" });
        }
        Ok((mu, log_var))
    }

    /// Deterministic decoding of a `[n,k]` latent batch to images.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, VaeError> {
        let s = z.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.latent_dim {
            return Err(VaeError::BadShape {
                what: "z",
                expected: format!("[n, {}]", self.latent_dim),
                got: s.to_vec(),
            });
        }
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false);
        let zv = g.leaf(z.clone());
        let out = self.build_decoder(&mut g, &p, zv)?;
        let out = g.value(out).clone();
        if !out.all_finite() {
            return Err(VaeError::NonFinite { stage: "decode" });
        }
        Ok(out)
    }

    /// Resolve the reconstruction target for a batch under this model's
    /// mode: the batch itself, or the per-label reference images.
    pub fn resolve_target(
        &self,
        batch: &Tensor,
        labels: Option<&[u8]>,
        targets: Option<&TargetTable>,
    ) -> Result<Tensor, VaeError> {
        let n = self.check_batch(batch, "batch")?;
        match self.mode {
            Mode::Standard => Ok(batch.clone()),
            Mode::Targeted => {
                let labels = labels.ok_or(VaeError::MissingLabels)?;
                let table = targets.ok_or(VaeError::MissingTargets)?;
                if labels.len() != n {
                    return Err(VaeError::BadShape {
                        what: "labels",
                        expected: format!("[{n}]"),
                        got: vec![labels.len()],
                    });
                }
                Ok(table.batch_for_labels(labels))
            }
        }
    }

    /// Evaluate the full loss of one batch with explicit noise.
    pub fn total_loss(
        &self,
        batch: &Tensor,
        labels: Option<&[u8]>,
        targets: Option<&TargetTable>,
        eps: &Tensor,
    ) -> Result<LossValues, VaeError> {
        let target = self.resolve_target(batch, labels, targets)?;
        let mut g = Graph::new();
        let p = self.insert_params(&mut g, false);
        let x = g.leaf(batch.clone());
        let t = g.leaf(target);
        let lv = self.build_loss(&mut g, &p, x, t, eps)?;
        let total = g.value(lv.total).item();
        if !total.is_finite() {
            return Err(VaeError::NonFinite { stage: "total_loss" });
        }
        Ok(LossValues {
            total,
            recon: g.value(lv.recon).item(),
            kl: g.value(lv.kl).item(),
            sample: LatentSample { z: g.value(lv.z).clone(), eps: eps.clone() },
        })
    }
}

/// Keras-style fans: last two axes are (in, out), earlier axes are the
/// receptive field. The Glorot limit is symmetric in the pair, so the
/// transposed-conv kernel ordering does not matter.
fn fans(shape: &[usize]) -> (usize, usize) {
    let receptive: usize = shape[..shape.len() - 2].iter().product();
    (shape[shape.len() - 2] * receptive, shape[shape.len() - 1] * receptive)
}

/// Binary cross-entropy against `target`, pixelwise, with the output
/// clamped to `[eps, 1-eps]`: mean over the channel axis, sum over the
/// 28x28 plane, mean over the batch.
fn build_bce(g: &mut Graph, target: Var, output: Var) -> Result<Var, VaeError> {
    let y = g.clamp(output, BCE_EPSILON, 1.0 - BCE_EPSILON)?;
    let ln_y = g.log(y)?;
    let pos = g.mul(target, ln_y)?;
    let one_minus_y = g.affine(y, -1.0, 1.0)?;
    let ln_omy = g.log(one_minus_y)?;
    let one_minus_t = g.affine(target, -1.0, 1.0)?;
    let neg = g.mul(one_minus_t, ln_omy)?;
    let ll = g.add(pos, neg)?;
    let chan = g.reduce_mean(ll, &[3])?;
    let spatial = g.reduce_sum(chan, &[1, 2])?;
    let batch = g.reduce_mean(spatial, &[0])?;
    Ok(g.affine(batch, -1.0, 0.0)?)
}

/// KL divergence to the unit Gaussian: `-0.5 * sum_k(1 + lv - mu^2 - e^lv)`
/// per sample, meaned over the batch.
fn build_kl(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var, VaeError> {
    let mu_sq = g.square(mu)?;
    let e_lv = g.exp(log_var)?;
    let one_plus = g.affine(log_var, 1.0, 1.0)?;
    let a = g.sub(one_plus, mu_sq)?;
    let b = g.sub(a, e_lv)?;
    let per_sample = g.reduce_sum(b, &[1])?;
    let meaned = g.reduce_mean(per_sample, &[0])?;
    Ok(g.affine(meaned, -0.5, 0.0)?)
}

fn check_pair(a: &Tensor, b: &Tensor, what: &'static str) -> Result<(), VaeError> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(VaeError::BadShape {
            what,
            expected: format!("matching [n,k], lhs {:?}", a.shape()),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form KL loss on plain `[n,k]` tensors (no graph).
pub fn kl_loss(mu: &Tensor, log_var: &Tensor) -> Result<f64, VaeError> {
    check_pair(mu, log_var, "kl inputs")?;
    let n = mu.shape()[0];
    let k = mu.shape()[1];
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..k {
            let m = mu.data()[i * k + j];
            let lv = log_var.data()[i * k + j];
            acc += 1.0 + lv - m * m - lv.exp();
        }
        total += -0.5 * acc;
    }
    Ok(total / n as f64)
}

/// Pixelwise BCE loss on plain `[n,28,28,1]` tensors (no graph), same
/// reduction as training: channel mean, spatial sum, batch mean.
pub fn reconstruction_loss(target: &Tensor, output: &Tensor) -> Result<f64, VaeError> {
    if target.shape() != output.shape() || target.rank() != 4 {
        return Err(VaeError::BadShape {
            what: "reconstruction pair",
            expected: format!("matching [n,h,w,c], target {:?}", target.shape()),
            got: output.shape().to_vec(),
        });
    }
    let s = target.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut total = 0.0;
    for i in 0..n {
        let mut sample = 0.0;
        for px in 0..h * w {
            let mut chan = 0.0;
            for ch in 0..c {
                let idx = (i * h * w + px) * c + ch;
                let t = target.data()[idx];
                let y = output.data()[idx].clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                chan += t * y.ln() + (1.0 - t) * (1.0 - y).ln();
            }
            sample += chan / c as f64;
        }
        total += -sample;
    }
    Ok(total / n as f64)
}

/// Reparameterized draw with explicit noise: `z = mu + exp(0.5*lv) * eps`.
pub fn sample_with_eps(mu: &Tensor, log_var: &Tensor, eps: &Tensor) -> Result<LatentSample, VaeError> {
    check_pair(mu, log_var, "sample inputs")?;
    check_pair(mu, eps, "eps")?;
    let z = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentSample {
        z: Tensor::new(mu.shape().to_vec(), z)?,
        eps: eps.clone(),
    })
}

/// Reparameterized draw with noise taken from `rng`.
pub fn sample(mu: &Tensor, log_var: &Tensor, rng: &mut impl Rng) -> Result<LatentSample, VaeError> {
    let eps = draw_eps(mu.shape(), rng);
    sample_with_eps(mu, log_var, &eps)
}

/// One standard-normal noise tensor of the given shape.
pub fn draw_eps(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}
