//! `repro N`: one command per reproducible figure, mapping figure
//! numbers to the documented pipelines.
//!
//! The map (see README for the full table):
//!   1  unrotated k=2 scatters, standard vs targeted (two CSVs)
//!   2  unrotated k=2 decode grids (two PGMs)
//!   3  not produced here: an input sample, see `embed --dump-samples`
//!   4  rotated k=2 scatters
//!   5  rotated k=2 decode grids
//!   6  t-SNE of the figure-4 latents
//!   7  rotated k=3 scatters
//!   8  t-SNE of the figure-7 latents
//!   9  t-SNE of k=10 latents: standard rotated, targeted rotated,
//!      standard unrotated
//!   10 rotated k=2 standard run at an explicit --beta (scatter + t-SNE)
//!   11 targeted k=3 census around the digit-8 reference (CSV + member
//!      mosaic)

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use rotvae::analysis::{census, decode_grid, embed, LatentPointSet};
use rotvae::dataset::{build_rotated, load_split, ImageSet, Split, IMG, PIXELS};
use rotvae::output::{write_census_csv, write_latent_csv, write_loss_csv, write_pgm};
use rotvae::rng::{derive_seed, tags};
use rotvae::trainer::{train, Checkpoint, TrainConfig};
use rotvae::vae::Mode;

use crate::commands::{
    load_file_config, resolve_data_dir, run_tsne, split_name, DESK_EPOCHS, DESK_SUBSET,
};
use crate::fileconfig::{fmt_f64, usage, write_sidecar, AppError};

/// Figure ids this command accepts.
const KNOWN_FIGURES: &[u32] = &[1, 2, 4, 5, 6, 7, 8, 9, 10, 11];

/// t-SNE settings shared by every figure that embeds with t-SNE.
const TSNE_PERPLEXITY: f64 = 30.0;
const TSNE_ITERS: usize = 1000;
const TSNE_CAP: usize = 5000;

#[derive(Args, Debug)]
pub struct ReproArgs {
    /// Figure number: 1, 2, 4, 5, 6, 7, 8, 9, 10 or 11.
    pub figure: String,
    /// Desk-scale preset (subset 10000, epochs 10) instead of the full
    /// 70000x30 run.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// KL weight; required for figure 10, optional elsewhere.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Override the scale preset's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the scale preset's subset size.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Subsample latents above this many points before t-SNE.
    #[arg(long)]
    pub tsne_cap: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default repro/figN).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub deterministic: bool,
}

struct Plan {
    figure: u32,
    seed: u64,
    beta: f64,
    epochs: usize,
    subset: Option<usize>,
    tsne_cap: usize,
    data_dir: PathBuf,
    out_dir: PathBuf,
}

impl Plan {
    fn config(&self, mode: Mode, latent_dim: usize, rotate: bool) -> TrainConfig {
        TrainConfig {
            latent_dim,
            mode,
            beta: self.beta,
            epochs: self.epochs,
            seed: self.seed,
            rotate,
            subset: self.subset,
            data_dir: self.data_dir.clone(),
            ..TrainConfig::default()
        }
    }

    /// Train one model, save its checkpoint and loss curve under the
    /// figure directory, and return it.
    fn train_variant(
        &self,
        name: &str,
        mode: Mode,
        latent_dim: usize,
        rotate: bool,
    ) -> Result<Checkpoint, AppError> {
        let config = self.config(mode, latent_dim, rotate);
        println!(
            "[fig {}] training {name}: mode={mode} k={latent_dim} rotate={rotate} \
             epochs={} subset={}",
            self.figure,
            config.epochs,
            config.subset.map(|n| n.to_string()).unwrap_or_else(|| "full".into()),
        );
        let ckpt = train(&config)?;
        ckpt.save(&self.out_dir.join(format!("fig{}_{name}.ckpt", self.figure)))?;
        write_loss_csv(
            self.out_dir.join(format!("fig{}_{name}_losses.csv", self.figure)),
            &ckpt.history,
        )?;
        Ok(ckpt)
    }

    /// The evaluation set a trained variant is embedded on: the same
    /// working set, with the same fixed rotation when rotated.
    fn eval_set(&self, config: &TrainConfig) -> Result<ImageSet, AppError> {
        let base = load_split(&config.data_dir, config.split)?;
        let working = match config.subset {
            Some(n) => base.subset(n),
            None => base,
        };
        Ok(if config.rotate {
            build_rotated(&working, derive_seed(config.seed, tags::ROTATE))
        } else {
            working
        })
    }

    fn scatter(&self, ckpt: &Checkpoint, path: &Path) -> Result<LatentPointSet, AppError> {
        let set = self.eval_set(&ckpt.config)?;
        let latents = embed(&ckpt.state, &set)?;
        write_latent_csv(path, &latents)?;
        println!("[fig {}] wrote {}", self.figure, path.display());
        Ok(latents)
    }

    fn grid(&self, ckpt: &Checkpoint, path: &Path) -> Result<(), AppError> {
        let mosaic = decode_grid(&ckpt.state, -3.0, 3.0, 30)?;
        let side = mosaic.side();
        write_pgm(path, &mosaic.pixels(), side, side)?;
        println!("[fig {}] wrote {} ({side}x{side})", self.figure, path.display());
        Ok(())
    }

    fn tsne_of(&self, latents: &LatentPointSet, path: &Path) -> Result<(), AppError> {
        run_tsne(latents, TSNE_PERPLEXITY, TSNE_ITERS, self.seed, self.tsne_cap, path)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(format!("fig{}_{name}", self.figure))
    }
}

pub fn cmd_repro(args: &ReproArgs) -> Result<(), AppError> {
    let figure: u32 = args.figure.parse().map_err(|_| {
        usage(format!("unknown figure id {:?} (expected 1, 2, 4..11)", args.figure))
    })?;
    if figure == 3 {
        return Err(usage(
            "Fig. 3 is an input sample, reproduced by `embed --dump-samples` instead",
        ));
    }
    if !KNOWN_FIGURES.contains(&figure) {
        return Err(usage(format!("unknown figure id {figure} (expected 1, 2, 4..11)")));
    }
    let file = load_file_config(&args.config)?;
    let beta = match (args.beta, file.get::<f64>("beta")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) if figure == 10 => {
            return Err(usage(
                "figure 10 needs an explicit --beta: its two panels use different KL \
                 weights (the discussion uses 0.1 and 10)",
            ));
        }
        (None, None) => 1.0,
    };
    let seed = match (args.seed, file.get::<u64>("seed")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 0,
    };
    let data_dir = resolve_data_dir(&args.data, &file, None);
    if !data_dir.is_dir() {
        return Err(AppError::Data(format!(
            "data directory {} does not exist",
            data_dir.display()
        )));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| file.raw("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("repro/fig{figure}")));
    fs::create_dir_all(&out_dir)
        .map_err(|e| AppError::Data(format!("{}: {e}", out_dir.display())))?;

    let preset_epochs = if args.desk { DESK_EPOCHS } else { TrainConfig::default().epochs };
    let preset_subset = if args.desk { Some(DESK_SUBSET) } else { None };
    let epochs = match (args.epochs, file.get::<usize>("epochs")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => preset_epochs,
    };
    let subset = match (args.subset, file.get_subset()?) {
        (Some(v), _) => Some(v),
        (None, Some(v)) => v,
        (None, None) => preset_subset,
    };
    let tsne_cap = match (args.tsne_cap, file.get::<usize>("tsne_cap")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => TSNE_CAP,
    };
    let plan = Plan { figure, seed, beta, epochs, subset, tsne_cap, data_dir, out_dir };
    write_sidecar(
        &plan.out_dir.join("config.resolved"),
        "repro",
        &[
            ("figure", figure.to_string()),
            ("scale", if args.desk { "desk".into() } else { "full".into() }),
            ("seed", plan.seed.to_string()),
            ("beta", fmt_f64(plan.beta)),
            ("epochs", plan.epochs.to_string()),
            (
                "subset",
                plan.subset.map(|n| n.to_string()).unwrap_or_else(|| "none".into()),
            ),
            ("tsne_cap", plan.tsne_cap.to_string()),
            ("split", split_name(Split::Combined).to_string()),
            ("data_dir", plan.data_dir.display().to_string()),
        ],
    )?;

    match figure {
        1 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, false)?;
            plan.scatter(&std, &plan.artifact("standard.csv"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 2, false)?;
            plan.scatter(&tgt, &plan.artifact("targeted.csv"))?;
        }
        2 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, false)?;
            plan.grid(&std, &plan.artifact("standard.pgm"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 2, false)?;
            plan.grid(&tgt, &plan.artifact("targeted.pgm"))?;
        }
        4 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, true)?;
            plan.scatter(&std, &plan.artifact("standard.csv"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 2, true)?;
            plan.scatter(&tgt, &plan.artifact("targeted.csv"))?;
        }
        5 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, true)?;
            plan.grid(&std, &plan.artifact("standard.pgm"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 2, true)?;
            plan.grid(&tgt, &plan.artifact("targeted.pgm"))?;
        }
        6 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, true)?;
            let lat = plan.scatter(&std, &plan.artifact("standard_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("standard.csv"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 2, true)?;
            let lat = plan.scatter(&tgt, &plan.artifact("targeted_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("targeted.csv"))?;
        }
        7 => {
            let std = plan.train_variant("standard", Mode::Standard, 3, true)?;
            plan.scatter(&std, &plan.artifact("standard.csv"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 3, true)?;
            plan.scatter(&tgt, &plan.artifact("targeted.csv"))?;
        }
        8 => {
            let std = plan.train_variant("standard", Mode::Standard, 3, true)?;
            let lat = plan.scatter(&std, &plan.artifact("standard_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("standard.csv"))?;
            let tgt = plan.train_variant("targeted", Mode::Targeted, 3, true)?;
            let lat = plan.scatter(&tgt, &plan.artifact("targeted_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("targeted.csv"))?;
        }
        9 => {
            let a = plan.train_variant("standard_rotated", Mode::Standard, 10, true)?;
            let lat = plan.scatter(&a, &plan.artifact("standard_rotated_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("standard_rotated.csv"))?;
            let b = plan.train_variant("targeted_rotated", Mode::Targeted, 10, true)?;
            let lat = plan.scatter(&b, &plan.artifact("targeted_rotated_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("targeted_rotated.csv"))?;
            let c = plan.train_variant("standard_unrotated", Mode::Standard, 10, false)?;
            let lat = plan.scatter(&c, &plan.artifact("standard_unrotated_latents.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("standard_unrotated.csv"))?;
        }
        10 => {
            let std = plan.train_variant("standard", Mode::Standard, 2, true)?;
            let lat = plan.scatter(&std, &plan.artifact("scatter.csv"))?;
            plan.tsne_of(&lat, &plan.artifact("tsne.csv"))?;
        }
        11 => {
            let tgt = plan.train_variant("targeted", Mode::Targeted, 3, true)?;
            let base = load_split(&plan.data_dir, tgt.config.split)?;
            let targets = rotvae::dataset::reference_targets(&base)?;
            let working = match tgt.config.subset {
                Some(n) => base.subset(n),
                None => base,
            };
            // Fresh rotation: the census describes rotations the model
            // never saw during training.
            let set = build_rotated(&working, derive_seed(plan.seed, tags::CENSUS));
            let result = census(&tgt.state, &set, &targets, 8, 0.2)?;
            write_census_csv(plan.artifact("census.csv"), &result)?;
            let members: Vec<&[f64]> = result
                .member_indices
                .iter()
                .take(16)
                .map(|&i| set.image(i))
                .collect();
            if !members.is_empty() {
                let (pixels, side) = member_mosaic(&members);
                write_pgm(plan.artifact("members.pgm"), &pixels, side, side)?;
            }
            let counts: Vec<String> = result
                .counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(d, c)| format!("{d}:{c}"))
                .collect();
            println!(
                "[fig 11] census: {} members, counts {{{}}}",
                result.total(),
                counts.join(", ")
            );
        }
        _ => unreachable!("validated above"),
    }
    println!("[fig {figure}] artifacts in {}", plan.out_dir.display());
    Ok(())
}

/// Tile up to 16 images into a 4x4 mosaic (empty cells black).
fn member_mosaic(images: &[&[f64]]) -> (Vec<f64>, usize) {
    const CELLS: usize = 4;
    let side = CELLS * IMG;
    let mut pixels = vec![0.0; side * side];
    for (m, img) in images.iter().enumerate().take(CELLS * CELLS) {
        assert_eq!(img.len(), PIXELS);
        let (cr, cc) = (m / CELLS, m % CELLS);
        for r in 0..IMG {
            let dst = (cr * IMG + r) * side + cc * IMG;
            pixels[dst..dst + IMG].copy_from_slice(&img[r * IMG..(r + 1) * IMG]);
        }
    }
    (pixels, side)
}
