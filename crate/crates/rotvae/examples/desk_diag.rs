//! Diagnostic: replay the desk-scale targeted k=2 training step for step
//! while logging per-epoch loss, knn purity, and latent blob geometry.

use std::path::Path;
use std::time::Instant;

use rotvae::analysis::{census, embed, knn_purity};
use rotvae::dataset::{build_rotated, load_split, reference_targets, Split};
use rotvae::rng::{derive_seed, stream_rng, streams, tags};
use rotvae::tensor::{Graph, Tensor};
use rotvae::trainer::{Adam, TrainConfig};
use rotvae::vae::{draw_eps, Mode, ModelState, PARAM_NAMES};

use rand::seq::SliceRandom;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = if args.iter().any(|a| a == "--standard") { Mode::Standard } else { Mode::Targeted };
    let latent: usize = args
        .iter()
        .position(|a| a == "--latent")
        .map(|i| args[i + 1].parse().unwrap())
        .unwrap_or(2);
    let seed: u64 = args
        .iter()
        .position(|a| a == "--seed")
        .map(|i| args[i + 1].parse().unwrap())
        .unwrap_or(0);
    let epochs: usize = args
        .iter()
        .position(|a| a == "--epochs")
        .map(|i| args[i + 1].parse().unwrap())
        .unwrap_or(10);
    let save: Option<String> =
        args.iter().position(|a| a == "--save").map(|i| args[i + 1].clone());

    let config = TrainConfig {
        latent_dim: latent,
        mode,
        epochs,
        subset: Some(10_000),
        seed,
        ..TrainConfig::default()
    };
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let base = load_split(&data, Split::Combined).unwrap();
    let targets = match mode {
        Mode::Targeted => Some(reference_targets(&base).unwrap()),
        Mode::Standard => None,
    };
    let working = base.subset(10_000);
    let rotated = build_rotated(&working, derive_seed(config.seed, tags::ROTATE));

    let mut state = ModelState::init(config.latent_dim, config.mode, config.beta, config.seed).unwrap();
    let mut adam = Adam::for_params(&config, &state.params);
    let mut eps_rng = stream_rng(config.seed, streams::EPS);
    let n = rotated.len();

    // Irreducible BCE floor: targets reconstructed exactly.
    if let Some(t) = &targets {
        let mut floor = 0.0;
        for d in 0..10u8 {
            let img = t.tensor(d);
            let f: f64 = img
                .data()
                .iter()
                .map(|&p| {
                    let y = p.clamp(1e-7, 1.0 - 1e-7);
                    -(p * y.ln() + (1.0 - p) * (1.0 - y).ln())
                })
                .sum();
            floor += f / 10.0;
        }
        println!("bce floor over targets: {floor:.2}");
    }

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, streams::SHUFFLE + epoch as u64));

        let (mut sum_total, mut sum_recon, mut sum_kl) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch = rotated.batch(chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| rotated.label(i)).collect();
            let target = state.resolve_target(&batch, Some(&labels), targets.as_ref()).unwrap();
            let eps = draw_eps(&[chunk.len(), config.latent_dim], &mut eps_rng);

            let mut g = Graph::new();
            let p = state.insert_params(&mut g, true);
            let x = g.leaf(batch);
            let t = g.leaf(target);
            let loss = state.build_loss(&mut g, &p, x, t, &eps).unwrap();
            let total = g.value(loss.total).item();
            let recon = g.value(loss.recon).item();
            let kl = g.value(loss.kl).item();
            let mut grads = g.backward(loss.total).unwrap();
            let grad_tensors: Vec<Tensor> =
                p.list().iter().map(|&v| grads.take(v).unwrap()).collect();
            for (name, grad) in PARAM_NAMES.into_iter().zip(&grad_tensors) {
                assert!(grad.all_finite(), "non-finite grad {name}");
            }
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            adam.step(&mut state.params.list_mut(), &grad_refs);

            let w = chunk.len() as f64;
            sum_total += total * w;
            sum_recon += recon * w;
            sum_kl += kl * w;
        }

        let latents = embed(&state, &rotated).unwrap();
        let purity = knn_purity(&latents, 15, 0.2, 0).unwrap();

        // Per-class centroid and mean radius in latent space.
        let k = latents.dim();
        let mut cent = vec![vec![0.0; k]; 10];
        let mut cnt = [0usize; 10];
        for i in 0..latents.len() {
            let c = latents.label(i) as usize;
            cnt[c] += 1;
            for d in 0..k {
                cent[c][d] += latents.point(i)[d];
            }
        }
        for c in 0..10 {
            for d in 0..k {
                cent[c][d] /= cnt[c].max(1) as f64;
            }
        }
        let mut spread = [0.0f64; 10];
        for i in 0..latents.len() {
            let c = latents.label(i) as usize;
            let r2: f64 = latents
                .point(i)
                .iter()
                .zip(&cent[c])
                .map(|(p, m)| (p - m) * (p - m))
                .sum();
            spread[c] += r2.sqrt();
        }
        for c in 0..10 {
            spread[c] /= cnt[c].max(1) as f64;
        }
        let mut min_sep = f64::INFINITY;
        for a in 0..10 {
            for b in (a + 1)..10 {
                let d2: f64 =
                    cent[a].iter().zip(&cent[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                min_sep = min_sep.min(d2.sqrt());
            }
        }
        let mean_spread: f64 = spread.iter().sum::<f64>() / 10.0;

        println!(
            "epoch {:2}  total {:8.2}  recon {:8.2}  kl {:6.3}  purity {:.3}  min_sep {:.3}  mean_spread {:.3}  ({:.0}s)",
            epoch + 1,
            sum_total / n as f64,
            sum_recon / n as f64,
            sum_kl / n as f64,
            purity,
            min_sep,
            mean_spread,
            start.elapsed().as_secs_f64(),
        );
        if k == 2 {
            let cs: Vec<String> = (0..10)
                .map(|c| format!("{c}:({:+.2},{:+.2})r{:.2}", cent[c][0], cent[c][1], spread[c]))
                .collect();
            println!("         {}", cs.join(" "));
        }
        if let (Some(t), 3) = (&targets, k) {
            let result = census(&state, &rotated, t, 8, 0.2).unwrap();
            match result.majority() {
                Some((label, share)) => println!(
                    "         census(8, 0.2): {} members, majority {label} at {share:.3}",
                    result.total()
                ),
                None => println!("         census(8, 0.2): empty"),
            }
        }
    }

    if let Some(path) = save {
        let ckpt =
            rotvae::trainer::Checkpoint { config: config.clone(), state, history: Vec::new() };
        ckpt.save(Path::new(&path)).unwrap();
        println!("saved {path}");
    }
}
