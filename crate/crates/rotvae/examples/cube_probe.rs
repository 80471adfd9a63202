//! Diagnostic: dissect the latent neighbourhood around a digit's
//! reference embedding in a saved checkpoint. Reports the census at a
//! range of cube sides, the full per-class counts, and where each class
//! centroid sits relative to the cube center.

use std::path::Path;

use rotvae::analysis::{census, embed};
use rotvae::dataset::{build_rotated, load_split, reference_targets, Split};
use rotvae::rng::{derive_seed, tags};
use rotvae::trainer::Checkpoint;
use rotvae::vae::encode_mu;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt_path = args.get(1).expect("usage: cube_probe CKPT [DIGIT]");
    let digit: u8 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);

    let ckpt = Checkpoint::load(Path::new(ckpt_path)).unwrap();
    let config = &ckpt.config;
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let base = load_split(&data, Split::Combined).unwrap();
    let targets = reference_targets(&base).unwrap();
    let working = match config.subset {
        Some(n) => base.subset(n),
        None => base,
    };
    let rotated = build_rotated(&working, derive_seed(config.seed, tags::ROTATE));

    let k = config.latent_dim;
    let center = encode_mu(&ckpt.state, &targets.tensor(digit)).unwrap();
    let c: Vec<f64> = center.data().to_vec();
    println!("reference {digit} embeds at {c:?}");

    // Census across cube sides.
    for side in [0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 1.0] {
        let r = census(&ckpt.state, &rotated, &targets, digit, side).unwrap();
        let m = match r.majority() {
            Some((l, s)) => format!("majority {l} at {s:.3}"),
            None => "empty".into(),
        };
        println!("side {side:4}: {:5} members, {m}  counts {:?}", r.total(), r.counts);
    }

    // Class centroids relative to the cube center, and each class's
    // Chebyshev distance (the cube metric) from the center.
    let latents = embed(&ckpt.state, &rotated).unwrap();
    let mut cent = vec![vec![0.0; k]; 10];
    let mut cnt = [0usize; 10];
    for i in 0..latents.len() {
        let l = latents.label(i) as usize;
        cnt[l] += 1;
        for d in 0..k {
            cent[l][d] += latents.point(i)[d];
        }
    }
    for l in 0..10 {
        for d in 0..k {
            cent[l][d] /= cnt[l].max(1) as f64;
        }
        let cheb = cent[l]
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let eucl = cent[l]
            .iter()
            .zip(&c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        println!(
            "class {l}: centroid {:?}  chebyshev-to-center {cheb:.3}  euclid {eucl:.3}",
            cent[l].iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }

    // Nearest rotated inputs to the center, labelled — the fine-grained
    // local mixture the cube is sampling.
    let mut dist: Vec<(f64, u8)> = (0..latents.len())
        .map(|i| {
            let d = latents
                .point(i)
                .iter()
                .zip(&c)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            (d, latents.label(i))
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    for n in [25, 50, 100, 200] {
        let mut counts = [0usize; 10];
        for (_, l) in &dist[..n] {
            counts[*l as usize] += 1;
        }
        let radius = dist[n - 1].0;
        println!("nearest {n:3} (chebyshev radius {radius:.3}): counts {counts:?}");
    }
}
