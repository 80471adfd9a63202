//! Exact (non-approximated) t-SNE for small point sets.
//!
//! This is the classic O(n^2) formulation: Gaussian conditional
//! affinities with a per-point bandwidth found by bisecting the Shannon
//! entropy to `ln(perplexity)` nats, symmetrised and floored; a Student-t
//! kernel in the plane; gradient descent with early exaggeration and a
//! momentum switch. Everything is seeded and single-threaded, so a run
//! is a pure function of `(points, config)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::AnalysisError;

/// Exact t-SNE refuses inputs beyond this many points.
pub const MAX_POINTS: usize = 10_000;

/// Entropy bisection stops once `|H - ln(perplexity)|` is below this (nats).
pub const ENTROPY_TOLERANCE: f64 = 1e-5;

/// Affinities and kernel values are floored here to keep logs finite.
pub const AFFINITY_FLOOR: f64 = 1e-12;

const BISECTION_STEPS: usize = 200;

/// Knobs for [`tsne`]. The defaults mirror the conventional settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations that use the exaggerated affinities.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches to `final_momentum`.
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

/// A finished t-SNE run.
#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `n x 2` planar coordinates, row-major.
    pub embedding: Vec<f64>,
    /// KL(P || Q) against the *unexaggerated* P, one entry per iteration.
    pub kl_history: Vec<f64>,
    /// Worst-case `|H - ln(perplexity)|` left after bisection, in nats.
    pub max_entropy_error: f64,
}

/// Embed `points` (`n x dim`, row-major) into the plane.
pub fn tsne(points: &[f64], dim: usize, config: &TsneConfig) -> Result<TsneResult, AnalysisError> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(AnalysisError::LengthMismatch {
            what: "t-SNE points vs dim",
            lhs: points.len(),
            rhs: dim.max(1),
        });
    }
    let n = points.len() / dim;
    if n > MAX_POINTS {
        return Err(AnalysisError::TooManyPoints { n, max: MAX_POINTS });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite { what: "t-SNE input points" });
    }
    if !(config.perplexity > 0.0 && (config.perplexity as f64) < n as f64 / 3.0) {
        return Err(AnalysisError::BadPerplexity { perplexity: config.perplexity, n });
    }

    let (p, max_entropy_error) = joint_affinities(points, n, dim, config.perplexity)?;

    // Seeded near-origin start; momentum state alongside.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<f64> = (0..2 * n)
        .map(|_| 1e-4 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let mut velocity = vec![0.0f64; 2 * n];
    let mut grad = vec![0.0f64; 2 * n];
    let mut kl_history = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        // Pass 1: the Student-t normaliser.
        let mut sum_w = 0.0;
        for i in 0..n {
            let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
            for j in (i + 1)..n {
                let d0 = yi0 - y[2 * j];
                let d1 = yi1 - y[2 * j + 1];
                sum_w += 2.0 / (1.0 + d0 * d0 + d1 * d1);
            }
        }

        // Pass 2: gradient and the KL against the true affinities.
        grad.fill(0.0);
        let mut kl = 0.0;
        for i in 0..n {
            let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
            for j in (i + 1)..n {
                let d0 = yi0 - y[2 * j];
                let d1 = yi1 - y[2 * j + 1];
                let w = 1.0 / (1.0 + d0 * d0 + d1 * d1);
                let q = (w / sum_w).max(AFFINITY_FLOOR);
                let p_ij = p[i * n + j];
                let coeff = 4.0 * (exaggeration * p_ij - q) * w;
                grad[2 * i] += coeff * d0;
                grad[2 * i + 1] += coeff * d1;
                grad[2 * j] -= coeff * d0;
                grad[2 * j + 1] -= coeff * d1;
                kl += 2.0 * p_ij * (p_ij / q).ln();
            }
        }
        kl_history.push(kl);

        for d in 0..2 * n {
            velocity[d] = momentum * velocity[d] - config.learning_rate * grad[d];
            y[d] += velocity[d];
        }

        // Keep the embedding centred so drift never accumulates.
        let mut mean = [0.0f64; 2];
        for i in 0..n {
            mean[0] += y[2 * i];
            mean[1] += y[2 * i + 1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for i in 0..n {
            y[2 * i] -= mean[0];
            y[2 * i + 1] -= mean[1];
        }
    }

    Ok(TsneResult { embedding: y, kl_history, max_entropy_error })
}

/// Build the symmetrised joint affinities P (full `n x n`, zero diagonal)
/// and report the worst entropy mismatch left by the bisection.
fn joint_affinities(
    points: &[f64],
    n: usize,
    dim: usize,
    perplexity: f64,
) -> Result<(Vec<f64>, f64), AnalysisError> {
    let target = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    let mut d2 = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    let mut max_err = 0.0f64;
    let mut any_spread = false;

    for i in 0..n {
        let xi = &points[i * dim..(i + 1) * dim];
        let mut d2_min = f64::INFINITY;
        for j in 0..n {
            if j == i {
                d2[j] = 0.0;
                continue;
            }
            let xj = &points[j * dim..(j + 1) * dim];
            let dist: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[j] = dist;
            d2_min = d2_min.min(dist);
            if dist > 0.0 {
                any_spread = true;
            }
        }

        // Bisect the bandwidth beta = 1/(2 sigma^2) until the row entropy
        // hits ln(perplexity). Distances are shifted by the row minimum;
        // the shift cancels in the normalised distribution and in H.
        let mut beta = 1.0f64;
        let mut beta_lo = 0.0f64;
        let mut beta_hi = f64::INFINITY;
        let mut err = f64::INFINITY;
        for _ in 0..BISECTION_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                if j == i {
                    weights[j] = 0.0;
                    continue;
                }
                let shifted = d2[j] - d2_min;
                let w = (-beta * shifted).exp();
                weights[j] = w;
                sum += w;
                weighted += w * shifted;
            }
            let entropy = sum.ln() + beta * weighted / sum;
            err = entropy - target;
            if err.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if err > 0.0 {
                beta_lo = beta;
                beta = if beta_hi.is_finite() { (beta + beta_hi) / 2.0 } else { beta * 2.0 };
            } else {
                beta_hi = beta;
                beta = if beta_lo > 0.0 { (beta + beta_lo) / 2.0 } else { beta / 2.0 };
            }
        }
        max_err = max_err.max(err.abs());

        let sum: f64 = weights.iter().sum();
        for j in 0..n {
            if j != i {
                p[i * n + j] = weights[j] / sum;
            }
        }
    }
    if !any_spread {
        return Err(AnalysisError::DegenerateInput);
    }

    // Symmetrise, normalise to a joint distribution, floor off-diagonals.
    let scale = 2.0 * n as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ((p[i * n + j] + p[j * n + i]) / scale).max(AFFINITY_FLOOR);
            p[i * n + j] = v;
            p[j * n + i] = v;
        }
    }
    Ok((p, max_err))
}
