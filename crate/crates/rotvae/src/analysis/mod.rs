//! Latent-space diagnostics.
//!
//! Everything here consumes encoder *means* — embeddings never include
//! sampling noise, so they are deterministic functions of the model and
//! the pixels. The tools mirror how the experiments read out a trained
//! model: scatter the latents ([`embed`]), decode a 2-D sweep
//! ([`decode_grid`]), count which rotated inputs land in a small cube
//! around a reference image's latent ([`census`]), and score class
//! separation with a k-nearest-neighbour vote ([`knn_purity`]).

mod tsne;

pub use tsne::{tsne, TsneConfig, TsneResult, AFFINITY_FLOOR, ENTROPY_TOLERANCE, MAX_POINTS};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{ImageSet, TargetTable, PIXELS};
use crate::vae::{ModelState, VaeError};

/// Images are pushed through the encoder in slices of this many records.
const EMBED_CHUNK: usize = 256;

/// Errors from the analysis tools.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("{what}: lengths differ ({lhs} vs {rhs})")]
    LengthMismatch {
        what: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("decode grid needs a 2-D latent space, model has {got}")]
    UnsupportedLatentDim { got: usize },
    #[error("bad grid: {what}")]
    BadGrid { what: String },
    #[error("digit must be 0..=9, got {0}")]
    BadDigit(u8),
    #[error("cube side must be positive and finite, got {0}")]
    BadCubeSide(f64),
    #[error("holdout fraction {fraction} leaves {holdout} test and {train} training points")]
    BadHoldout {
        fraction: f64,
        holdout: usize,
        train: usize,
    },
    #[error("k-NN vote needs at least 1 neighbour, at most the {train} training points (got k={k})")]
    BadNeighbourCount { k: usize, train: usize },
    #[error("need at least two distinct classes")]
    SingleClass,
    #[error("t-SNE input is degenerate: all points identical")]
    DegenerateInput,
    #[error("exact t-SNE supports at most {max} points, got {n}")]
    TooManyPoints { n: usize, max: usize },
    #[error("perplexity {perplexity} invalid for {n} points (need 0 < perplexity < n/3)")]
    BadPerplexity { perplexity: f64, n: usize },
    #[error("non-finite values in {what}")]
    NonFinite { what: &'static str },
}

/// Latent coordinates with the labels and angles they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPointSet {
    points: Vec<f64>,
    labels: Vec<u8>,
    angles: Vec<f64>,
    dim: usize,
}

impl LatentPointSet {
    pub fn new(
        points: Vec<f64>,
        labels: Vec<u8>,
        angles: Vec<f64>,
        dim: usize,
    ) -> Result<Self, AnalysisError> {
        if dim == 0 || points.len() != labels.len() * dim {
            return Err(AnalysisError::LengthMismatch {
                what: "latent points vs labels",
                lhs: points.len(),
                rhs: labels.len() * dim.max(1),
            });
        }
        if angles.len() != labels.len() {
            return Err(AnalysisError::LengthMismatch {
                what: "angles vs labels",
                lhs: angles.len(),
                rhs: labels.len(),
            });
        }
        Ok(LatentPointSet { points, labels, angles, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Latent width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn angle(&self, i: usize) -> f64 {
        self.angles[i]
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// Push every record through the encoder and keep the means.
pub fn embed(state: &ModelState, set: &ImageSet) -> Result<LatentPointSet, AnalysisError> {
    let k = state.latent_dim();
    let mut points = Vec::with_capacity(set.len() * k);
    let mut start = 0;
    while start < set.len() {
        let end = (start + EMBED_CHUNK).min(set.len());
        let (mu, _) = state.encode(&set.batch_range(start, end))?;
        points.extend_from_slice(mu.data());
        start = end;
    }
    let angles = (0..set.len()).map(|i| set.angle(i)).collect();
    LatentPointSet::new(points, set.labels().to_vec(), angles, k)
}

/// A decoded sweep over a 2-D latent square.
#[derive(Debug, Clone)]
pub struct Mosaic {
    steps: usize,
    coords: Vec<f64>,
    cells: Vec<f64>,
}

impl Mosaic {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// The shared axis coordinates (same for both latent dimensions).
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Decoded image at row `i` (first latent axis), column `j` (second).
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let idx = i * self.steps + j;
        &self.cells[idx * PIXELS..(idx + 1) * PIXELS]
    }

    /// Side length of the assembled image in pixels.
    pub fn side(&self) -> usize {
        self.steps * 28
    }

    /// Assemble the cells row-major into one `side x side` image, the
    /// second latent axis running horizontally.
    pub fn pixels(&self) -> Vec<f64> {
        let side = self.side();
        let mut out = vec![0.0; side * side];
        for i in 0..self.steps {
            for j in 0..self.steps {
                let cell = self.cell(i, j);
                for r in 0..28 {
                    let dst = (i * 28 + r) * side + j * 28;
                    out[dst..dst + 28].copy_from_slice(&cell[r * 28..(r + 1) * 28]);
                }
            }
        }
        out
    }
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive, endpoints exact.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|i| {
            if i + 1 == steps {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect()
}

/// Decode a `steps x steps` grid over `[lo, hi]^2`. Only defined for 2-D
/// latent spaces; each cell is decoded individually, so corner cells match
/// a direct `decode` call bit for bit.
pub fn decode_grid(
    state: &ModelState,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Mosaic, AnalysisError> {
    if state.latent_dim() != 2 {
        return Err(AnalysisError::UnsupportedLatentDim { got: state.latent_dim() });
    }
    if steps < 2 {
        return Err(AnalysisError::BadGrid { what: format!("steps must be at least 2, got {steps}") });
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(AnalysisError::BadGrid { what: format!("bad range [{lo}, {hi}]") });
    }
    let coords = linspace(lo, hi, steps);
    let mut cells = Vec::with_capacity(steps * steps * PIXELS);
    for &z1 in &coords {
        for &z2 in &coords {
            let z = crate::tensor::Tensor::new(vec![1, 2], vec![z1, z2]).expect("fixed size");
            cells.extend_from_slice(state.decode(&z)?.data());
        }
    }
    Ok(Mosaic { steps, coords, cells })
}

/// Outcome of one neighbourhood census.
#[derive(Debug, Clone, PartialEq)]
pub struct CensusResult {
    pub digit: u8,
    pub side: f64,
    /// Latent mean of the digit's reference image: the cube centre.
    pub center: Vec<f64>,
    /// How many member points carry each label 0..=9.
    pub counts: [usize; 10],
    /// Indices (into the censused set) of the points inside the cube.
    pub member_indices: Vec<usize>,
}

impl CensusResult {
    /// Total points inside the cube.
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// The most common label inside the cube (lowest wins ties), with its
    /// share of the membership. `None` when the cube is empty.
    pub fn majority(&self) -> Option<(u8, f64)> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let (label, count) = self
            .counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("ten entries");
        Some((label as u8, *count as f64 / total as f64))
    }
}

/// Count which points fall inside the axis-aligned cube of side `side`
/// centred at `center` (closed faces).
pub fn count_in_cube(
    latents: &LatentPointSet,
    center: &[f64],
    side: f64,
) -> Result<([usize; 10], Vec<usize>), AnalysisError> {
    if center.len() != latents.dim() {
        return Err(AnalysisError::LengthMismatch {
            what: "cube centre vs latent dim",
            lhs: center.len(),
            rhs: latents.dim(),
        });
    }
    if !(side.is_finite() && side > 0.0) {
        return Err(AnalysisError::BadCubeSide(side));
    }
    let half = side / 2.0;
    let mut counts = [0usize; 10];
    let mut members = Vec::new();
    for i in 0..latents.len() {
        let inside = latents
            .point(i)
            .iter()
            .zip(center)
            .all(|(p, c)| (p - c).abs() <= half);
        if inside {
            counts[latents.label(i) as usize] += 1;
            members.push(i);
        }
    }
    Ok((counts, members))
}

/// Embed `set`, centre a cube of side `side` on the latent mean of
/// `digit`'s reference image, and count the member labels.
pub fn census(
    state: &ModelState,
    set: &ImageSet,
    targets: &TargetTable,
    digit: u8,
    side: f64,
) -> Result<CensusResult, AnalysisError> {
    if digit > 9 {
        return Err(AnalysisError::BadDigit(digit));
    }
    if !(side.is_finite() && side > 0.0) {
        return Err(AnalysisError::BadCubeSide(side));
    }
    let (mu, _) = state.encode(&targets.tensor(digit))?;
    let center = mu.data().to_vec();
    let latents = embed(state, set)?;
    let (counts, member_indices) = count_in_cube(&latents, &center, side)?;
    Ok(CensusResult { digit, side, center, counts, member_indices })
}

/// Hold out a seeded fraction of the points and score how often a
/// k-nearest-neighbour majority vote over the rest recovers each held-out
/// label. Vote ties break by smaller summed distance, then lower label.
pub fn knn_purity(
    latents: &LatentPointSet,
    k_neighbours: usize,
    holdout_fraction: f64,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let n = latents.len();
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(AnalysisError::BadHoldout { fraction: holdout_fraction, holdout: 0, train: n });
    }
    let holdout = (holdout_fraction * n as f64).round() as usize;
    let train = n - holdout.min(n);
    if holdout == 0 || train == 0 {
        return Err(AnalysisError::BadHoldout { fraction: holdout_fraction, holdout, train });
    }
    if k_neighbours == 0 || k_neighbours > train {
        return Err(AnalysisError::BadNeighbourCount { k: k_neighbours, train });
    }
    {
        let first = latents.label(0);
        if latents.labels().iter().all(|&l| l == first) {
            return Err(AnalysisError::SingleClass);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = order.split_at(holdout);

    let mut correct = 0usize;
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(train);
    for &ti in test_idx {
        let q = latents.point(ti);
        scratch.clear();
        for &si in train_idx {
            let d2: f64 = q
                .iter()
                .zip(latents.point(si))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            scratch.push((d2, si));
        }
        scratch.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let neighbours = &scratch[..k_neighbours];

        let mut votes = [0usize; 10];
        let mut dist_sum = [0.0f64; 10];
        for &(d2, si) in neighbours {
            let l = latents.label(si) as usize;
            votes[l] += 1;
            dist_sum[l] += d2.sqrt();
        }
        let mut best: Option<usize> = None;
        for l in 0..10 {
            if votes[l] == 0 {
                continue;
            }
            best = Some(match best {
                None => l,
                Some(cur) => {
                    if votes[l] > votes[cur]
                        || (votes[l] == votes[cur] && dist_sum[l] < dist_sum[cur])
                    {
                        l
                    } else {
                        cur
                    }
                }
            });
        }
        if best == Some(latents.label(ti) as usize) {
            correct += 1;
        }
    }
    Ok(correct as f64 / holdout as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageSet, TargetTable};
    use crate::vae::{Mode, ModelState};
    use proptest::prelude::*;

    fn pseudo_set(n: usize, seed: u64) -> ImageSet {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let images = (0..n * PIXELS)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        ImageSet::new(images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn embed_is_deterministic_and_keeps_metadata() {
        let state = ModelState::init(2, Mode::Standard, 1.0, 3).unwrap();
        let set = crate::dataset::build_rotated(&pseudo_set(20, 1), 9);
        let a = embed(&state, &set).unwrap();
        let b = embed(&state, &set).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_eq!(a.dim(), 2);
        assert_eq!(a.labels(), set.labels());
        assert_eq!(a.angle(7), set.angle(7));
    }

    #[test]
    fn duplicate_inputs_embed_identically_across_chunks() {
        // Records 0 and 299 are the same image but land in different
        // encoder chunks; their latent rows must still agree bit for bit.
        let base = pseudo_set(300, 2);
        let mut images = Vec::new();
        for i in 0..300 {
            images.extend_from_slice(base.image(i));
        }
        images[299 * PIXELS..300 * PIXELS].copy_from_slice(&base.image(0).to_vec());
        let set = ImageSet::new(images, base.labels().to_vec()).unwrap();
        let state = ModelState::init(3, Mode::Standard, 1.0, 4).unwrap();
        let lat = embed(&state, &set).unwrap();
        assert_eq!(lat.point(0), lat.point(299));
        assert!(lat.point(0) != lat.point(1));
    }

    #[test]
    fn linspace_hits_endpoints_exactly() {
        assert_eq!(linspace(-3.0, 3.0, 2), vec![-3.0, 3.0]);
        let xs = linspace(-3.0, 3.0, 30);
        assert_eq!(xs.len(), 30);
        assert_eq!(xs[0], -3.0);
        assert_eq!(xs[29], 3.0);
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
        let mid = linspace(-1.0, 1.0, 3);
        assert_eq!(mid, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn decode_grid_corners_match_direct_decode_bit_for_bit() {
        let state = ModelState::init(2, Mode::Standard, 1.0, 5).unwrap();
        let mosaic = decode_grid(&state, -3.0, 3.0, 2).unwrap();
        for (i, j, z1, z2) in [
            (0, 0, -3.0, -3.0),
            (0, 1, -3.0, 3.0),
            (1, 0, 3.0, -3.0),
            (1, 1, 3.0, 3.0),
        ] {
            let direct = state
                .decode(&crate::tensor::Tensor::new(vec![1, 2], vec![z1, z2]).unwrap())
                .unwrap();
            assert_eq!(mosaic.cell(i, j), direct.data(), "cell ({i},{j})");
        }
    }

    #[test]
    fn mosaic_assembly_places_cells_row_major() {
        let state = ModelState::init(2, Mode::Standard, 1.0, 6).unwrap();
        let mosaic = decode_grid(&state, -1.0, 1.0, 3).unwrap();
        assert_eq!(mosaic.side(), 84);
        let img = mosaic.pixels();
        // Cell (1,2): rows 28..56, columns 56..84.
        let cell = mosaic.cell(1, 2);
        for r in 0..28 {
            for c in 0..28 {
                assert_eq!(img[(28 + r) * 84 + 56 + c], cell[r * 28 + c]);
            }
        }
    }

    #[test]
    fn decode_grid_rejects_bad_setups() {
        let k3 = ModelState::init(3, Mode::Standard, 1.0, 7).unwrap();
        assert!(matches!(
            decode_grid(&k3, -3.0, 3.0, 30),
            Err(AnalysisError::UnsupportedLatentDim { got: 3 })
        ));
        let k2 = ModelState::init(2, Mode::Standard, 1.0, 7).unwrap();
        assert!(matches!(decode_grid(&k2, -3.0, 3.0, 1), Err(AnalysisError::BadGrid { .. })));
        assert!(matches!(decode_grid(&k2, 3.0, -3.0, 4), Err(AnalysisError::BadGrid { .. })));
    }

    #[test]
    fn census_counts_tally_with_membership() {
        let state = ModelState::init(2, Mode::Targeted, 1.0, 8).unwrap();
        let set = pseudo_set(60, 3);
        let table = TargetTable::from_images(set.batch_range(0, 10).data().to_vec(), [0; 10]).unwrap();
        // A huge cube swallows every point; digit labels partition it.
        let result = census(&state, &set, &table, 4, 1e6).unwrap();
        assert_eq!(result.total(), 60);
        assert_eq!(result.member_indices.len(), 60);
        assert_eq!(result.counts, [6; 10]);
        assert_eq!(result.center.len(), 2);
        assert!(matches!(census(&state, &set, &table, 11, 0.2), Err(AnalysisError::BadDigit(11))));
        assert!(matches!(census(&state, &set, &table, 1, 0.0), Err(AnalysisError::BadCubeSide(_))));
    }

    #[test]
    fn knn_purity_separates_clean_clusters() {
        // Two tight clusters far apart: purity must be 1.
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let jitter = (i % 7) as f64 * 0.01;
            if i % 2 == 0 {
                points.extend_from_slice(&[jitter, 0.0]);
                labels.push(3u8);
            } else {
                points.extend_from_slice(&[100.0 + jitter, 5.0]);
                labels.push(8u8);
            }
        }
        let lat = LatentPointSet::new(points, labels, vec![0.0; 40], 2).unwrap();
        let p = knn_purity(&lat, 5, 0.25, 11).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn knn_purity_is_rigid_motion_invariant() {
        let mut s = 77u64;
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let points: Vec<f64> = (0..120).map(|_| next()).collect();
        let labels: Vec<u8> = (0..60).map(|i| (i % 4) as u8).collect();
        let lat = LatentPointSet::new(points.clone(), labels.clone(), vec![0.0; 60], 2).unwrap();
        let (sin, cos) = 0.83f64.sin_cos();
        let moved: Vec<f64> = points
            .chunks_exact(2)
            .flat_map(|p| [cos * p[0] - sin * p[1] + 40.0, sin * p[0] + cos * p[1] - 17.0])
            .collect();
        let lat2 = LatentPointSet::new(moved, labels, vec![0.0; 60], 2).unwrap();
        let a = knn_purity(&lat, 7, 0.3, 5).unwrap();
        let b = knn_purity(&lat2, 7, 0.3, 5).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn knn_purity_rejects_degenerate_setups() {
        let lat = LatentPointSet::new(vec![0.0; 20], vec![1; 10], vec![0.0; 10], 2).unwrap();
        assert!(matches!(knn_purity(&lat, 3, 0.2, 0), Err(AnalysisError::SingleClass)));
        let mixed =
            LatentPointSet::new(vec![0.0; 20], (0..10).map(|i| i as u8 % 2).collect(), vec![0.0; 10], 2)
                .unwrap();
        assert!(matches!(knn_purity(&mixed, 0, 0.2, 0), Err(AnalysisError::BadNeighbourCount { .. })));
        assert!(matches!(knn_purity(&mixed, 9, 0.2, 0), Err(AnalysisError::BadNeighbourCount { .. })));
        assert!(matches!(knn_purity(&mixed, 3, 0.0, 0), Err(AnalysisError::BadHoldout { .. })));
        assert!(matches!(knn_purity(&mixed, 3, 1.0, 0), Err(AnalysisError::BadHoldout { .. })));
    }

    proptest! {
        #[test]
        fn shrinking_the_cube_never_gains_points(seed in 0u64..500, side in 0.05f64..2.0) {
            let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
            let mut next = || {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            let points: Vec<f64> = (0..90).map(|_| next()).collect();
            let labels: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
            let lat = LatentPointSet::new(points, labels, vec![0.0; 30], 3).unwrap();
            let centre = [0.1, -0.2, 0.05];
            let (big, big_members) = count_in_cube(&lat, &centre, side).unwrap();
            let (small, small_members) = count_in_cube(&lat, &centre, side * 0.5).unwrap();
            for d in 0..10 {
                prop_assert!(small[d] <= big[d]);
            }
            prop_assert!(small_members.iter().all(|i| big_members.contains(i)));
            prop_assert_eq!(big.iter().sum::<usize>(), big_members.len());
        }
    }
}
