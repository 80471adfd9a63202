//! The five pipeline subcommands: train, embed, grid, tsne, census.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use rotvae::analysis::{census, decode_grid, embed, tsne, LatentPointSet, TsneConfig};
use rotvae::dataset::{build_rotated, load_split, reference_targets, ImageSet, Split, IMG};
use rotvae::output::{
    read_latent_csv, write_census_csv, write_latent_csv, write_loss_csv, write_pgm, write_tsne_csv,
};
use rotvae::rng::{derive_seed, stream_rng, streams, tags};
use rotvae::trainer::{train, Checkpoint, TrainConfig};
use rotvae::vae::Mode;

use rand::seq::SliceRandom;

use crate::fileconfig::{fmt_f64, usage, AppError, FileConfig, write_sidecar};

/// Fallback data directory when nothing else names one.
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
/// Environment variable overriding the data directory (lowest precedence
/// above the built-in default).
pub const DATA_ENV_VAR: &str = "ROTVAE_DATA";
/// `--desk` preset: a fast run that still shows the separation effect.
pub const DESK_SUBSET: usize = 10_000;
pub const DESK_EPOCHS: usize = 10;

pub fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, AppError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::empty()),
    }
}

/// Resolve the data directory: CLI flag, then config file, then the
/// environment variable, then a checkpoint's recorded path, then the
/// built-in default.
pub fn resolve_data_dir(
    cli: &Option<PathBuf>,
    file: &FileConfig,
    checkpoint: Option<&Path>,
) -> PathBuf {
    if let Some(p) = cli {
        return p.clone();
    }
    if let Some(p) = file.raw("data_dir") {
        return PathBuf::from(p);
    }
    if let Ok(p) = std::env::var(DATA_ENV_VAR) {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    if let Some(p) = checkpoint {
        return p.to_path_buf();
    }
    PathBuf::from(DEFAULT_DATA_DIR)
}

fn parse_mode(s: &str) -> Result<Mode, AppError> {
    s.parse::<Mode>().map_err(usage)
}

fn parse_split(s: &str) -> Result<Split, AppError> {
    s.parse::<Split>().map_err(usage)
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Combined => "combined",
        Split::Train => "train",
    }
}

fn subset_value(subset: Option<usize>) -> String {
    match subset {
        Some(n) => n.to_string(),
        None => "none".into(),
    }
}

/// Sidecar path for a single-file output: `<file>.resolved` alongside it.
fn sidecar_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<(), AppError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| AppError::Data(format!("{}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, AppError> {
    Ok(Checkpoint::load(path)?)
}

/// Load the evaluation set a checkpoint-driven command works on:
/// split/subset default to the checkpoint's training settings, rotation
/// is applied when requested with the given seed.
#[allow(clippy::too_many_arguments)]
fn load_eval_set(
    data_dir: &Path,
    split: Split,
    subset: Option<usize>,
    rotate: bool,
    rotation_seed: u64,
) -> Result<ImageSet, AppError> {
    let base = load_split(data_dir, split)?;
    let working = match subset {
        Some(n) => base.subset(n),
        None => base,
    };
    Ok(if rotate { build_rotated(&working, rotation_seed) } else { working })
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Plain-text `key = value` config file; CLI flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Objective: `standard` reconstructs the input, `targeted` the
    /// fixed reference image of the input's class.
    #[arg(long)]
    pub mode: Option<String>,
    /// Latent dimensions (k).
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Weight on the KL term.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on randomly rotated digits.
    #[arg(long)]
    pub rotate: bool,
    /// Force rotation off even if the config file enables it.
    #[arg(long, conflicts_with = "rotate")]
    pub no_rotate: bool,
    /// Redraw rotation angles every epoch instead of fixing them once.
    #[arg(long)]
    pub resample_rotations: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use only the first M records.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Dataset split: `combined` (70000) or `train` (60000).
    #[arg(long)]
    pub split: Option<String>,
    /// Directory with the four MNIST IDX files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for model.ckpt, losses.csv, config.resolved.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Desk-scale preset: subset 10000, epochs 10.
    #[arg(long)]
    pub desk: bool,
    /// Accepted for compatibility; numerics are already single-threaded
    /// and deterministic.
    #[arg(long)]
    pub deterministic: bool,
}

/// Merge defaults, the `--desk` preset, the config file, and CLI flags
/// (in rising precedence) into a concrete TrainConfig.
pub fn resolve_train_config(args: &TrainArgs, file: &FileConfig) -> Result<TrainConfig, AppError> {
    let mut c = TrainConfig::default();
    // The CLI contract treats rotation as opt-in.
    c.rotate = false;
    if args.desk {
        c.epochs = DESK_EPOCHS;
        c.subset = Some(DESK_SUBSET);
    }

    if let Some(v) = file.raw("mode") {
        c.mode = parse_mode(v)?;
    }
    if let Some(v) = file.get::<usize>("latent_dim")? {
        c.latent_dim = v;
    }
    if let Some(v) = file.get::<f64>("beta")? {
        c.beta = v;
    }
    if let Some(v) = file.get::<usize>("epochs")? {
        c.epochs = v;
    }
    if let Some(v) = file.get::<usize>("batch_size")? {
        c.batch_size = v;
    }
    if let Some(v) = file.get::<f64>("learning_rate")? {
        c.learning_rate = v;
    }
    if let Some(v) = file.get::<f64>("adam_beta1")? {
        c.adam_beta1 = v;
    }
    if let Some(v) = file.get::<f64>("adam_beta2")? {
        c.adam_beta2 = v;
    }
    if let Some(v) = file.get::<f64>("adam_epsilon")? {
        c.adam_epsilon = v;
    }
    if let Some(v) = file.get::<u64>("seed")? {
        c.seed = v;
    }
    if let Some(v) = file.get_bool("rotate")? {
        c.rotate = v;
    }
    if let Some(v) = file.get_bool("resample_rotations")? {
        c.resample_rotations = v;
    }
    if let Some(v) = file.raw("split") {
        c.split = parse_split(v)?;
    }
    if let Some(v) = file.get_subset()? {
        c.subset = v;
    }

    if let Some(v) = &args.mode {
        c.mode = parse_mode(v)?;
    }
    if let Some(v) = args.latent_dim {
        c.latent_dim = v;
    }
    if let Some(v) = args.beta {
        c.beta = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if args.rotate {
        c.rotate = true;
    }
    if args.no_rotate {
        c.rotate = false;
    }
    if args.resample_rotations {
        c.resample_rotations = true;
    }
    if let Some(v) = &args.split {
        c.split = parse_split(v)?;
    }
    if let Some(v) = args.subset {
        c.subset = Some(v);
    }
    c.data_dir = resolve_data_dir(&args.data, file, None);
    Ok(c)
}

/// Sidecar entries for a training config, in fixed order.
pub fn train_entries(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("mode", c.mode.to_string()),
        ("latent_dim", c.latent_dim.to_string()),
        ("beta", fmt_f64(c.beta)),
        ("epochs", c.epochs.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("learning_rate", fmt_f64(c.learning_rate)),
        ("adam_beta1", fmt_f64(c.adam_beta1)),
        ("adam_beta2", fmt_f64(c.adam_beta2)),
        ("adam_epsilon", fmt_f64(c.adam_epsilon)),
        ("seed", c.seed.to_string()),
        ("rotate", c.rotate.to_string()),
        ("resample_rotations", c.resample_rotations.to_string()),
        ("split", split_name(c.split).to_string()),
        ("subset", subset_value(c.subset)),
        ("data_dir", c.data_dir.display().to_string()),
    ]
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), AppError> {
    let file = load_file_config(&args.config)?;
    let config = resolve_train_config(args, &file)?;
    config.validate()?;
    if !config.data_dir.is_dir() {
        return Err(AppError::Data(format!(
            "data directory {} does not exist",
            config.data_dir.display()
        )));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| file.raw("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| AppError::Data(format!("{}: {e}", out_dir.display())))?;
    write_sidecar(&out_dir.join("config.resolved"), "train", &train_entries(&config))?;

    let checkpoint = train(&config)?;
    let ckpt_path = out_dir.join("model.ckpt");
    checkpoint.save(&ckpt_path)?;
    write_loss_csv(out_dir.join("losses.csv"), &checkpoint.history)?;
    let last = checkpoint.history.last().expect("at least one epoch");
    println!(
        "wrote {} and losses.csv ({} epochs, final total {:.2})",
        ckpt_path.display(),
        checkpoint.history.len(),
        last.total
    );
    Ok(())
}

// ---------------------------------------------------------------- embed

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to embed with.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Rotate the evaluation set (same angles as training unless
    /// --rot-seed is given).
    #[arg(long)]
    pub rotate: bool,
    /// Seed for the rotation angles (defaults to the training rotation).
    #[arg(long)]
    pub rot_seed: Option<u64>,
    /// Dataset split (defaults to the checkpoint's).
    #[arg(long)]
    pub split: Option<String>,
    /// Use only the first M records (defaults to the checkpoint's).
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "latents.csv")]
    pub out: PathBuf,
    /// Also dump the first 16 input images as PGM files next to the CSV.
    #[arg(long)]
    pub dump_samples: bool,
    #[arg(long)]
    pub deterministic: bool,
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<(), AppError> {
    let file = load_file_config(&args.config)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data_dir = resolve_data_dir(&args.data, &file, Some(&ckpt.config.data_dir));
    let split = match (&args.split, file.raw("split")) {
        (Some(v), _) => parse_split(v)?,
        (None, Some(v)) => parse_split(v)?,
        (None, None) => ckpt.config.split,
    };
    let subset = match (args.subset, file.get_subset()?) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => v,
        (None, None) => ckpt.config.subset,
    };
    let rot_seed = args
        .rot_seed
        .or(file.get::<u64>("rot_seed")?)
        .unwrap_or_else(|| derive_seed(ckpt.config.seed, tags::ROTATE));

    ensure_parent(&args.out)?;
    write_sidecar(
        &sidecar_for(&args.out),
        "embed",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("rotate", args.rotate.to_string()),
            ("rot_seed", rot_seed.to_string()),
            ("split", split_name(split).to_string()),
            ("subset", subset_value(subset)),
            ("data_dir", data_dir.display().to_string()),
        ],
    )?;

    let set = load_eval_set(&data_dir, split, subset, args.rotate, rot_seed)?;
    let latents = embed(&ckpt.state, &set)?;
    write_latent_csv(&args.out, &latents)?;
    println!("wrote {} ({} points, k={})", args.out.display(), latents.len(), latents.dim());

    if args.dump_samples {
        let dir = args.out.parent().unwrap_or_else(|| Path::new("."));
        let count = set.len().min(16);
        for i in 0..count {
            let path = dir.join(format!("sample_{i:02}_label{}.pgm", set.label(i)));
            write_pgm(&path, set.image(i), IMG, IMG)?;
        }
        println!("wrote {count} sample PGMs to {}", dir.display());
    }
    Ok(())
}

// ----------------------------------------------------------------- grid

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to decode with (needs a 2-D latent space).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Lower latent coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    /// Upper latent coordinate.
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    /// Cells per side.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output PGM path.
    #[arg(long, default_value = "grid.pgm")]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

pub fn cmd_grid(args: &GridArgs) -> Result<(), AppError> {
    let file = load_file_config(&args.config)?;
    let lo = match (args.lo, file.get::<f64>("lo")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => -3.0,
    };
    let hi = match (args.hi, file.get::<f64>("hi")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 3.0,
    };
    let steps = match (args.steps, file.get::<usize>("steps")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 30,
    };
    let ckpt = load_checkpoint(&args.ckpt)?;
    ensure_parent(&args.out)?;
    write_sidecar(
        &sidecar_for(&args.out),
        "grid",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("lo", fmt_f64(lo)),
            ("hi", fmt_f64(hi)),
            ("steps", steps.to_string()),
        ],
    )?;

    let mosaic = decode_grid(&ckpt.state, lo, hi, steps)?;
    let side = mosaic.side();
    write_pgm(&args.out, &mosaic.pixels(), side, side)?;
    println!("wrote {} ({side}x{side})", args.out.display());
    Ok(())
}

// ----------------------------------------------------------------- tsne

#[derive(Args, Debug)]
pub struct TsneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Latent CSV produced by `embed`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// Gradient-descent iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Deterministically subsample inputs above this many points.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Output CSV path.
    #[arg(long, default_value = "tsne.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

/// Deterministic subsample: seeded shuffle, take the first `cap`, keep
/// the original order.
pub fn subsample(latents: &LatentPointSet, cap: usize, seed: u64) -> LatentPointSet {
    if latents.len() <= cap {
        return latents.clone();
    }
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut stream_rng(seed, streams::SHUFFLE));
    let mut keep = order[..cap].to_vec();
    keep.sort_unstable();
    let k = latents.dim();
    let mut points = Vec::with_capacity(cap * k);
    let mut labels = Vec::with_capacity(cap);
    let mut angles = Vec::with_capacity(cap);
    for &i in &keep {
        points.extend_from_slice(latents.point(i));
        labels.push(latents.label(i));
        angles.push(latents.angle(i));
    }
    LatentPointSet::new(points, labels, angles, k).expect("consistent lengths")
}

/// Shared t-SNE driver: subsample, run, write CSV, report.
pub fn run_tsne(
    latents: &LatentPointSet,
    perplexity: f64,
    iters: usize,
    seed: u64,
    cap: usize,
    out: &Path,
) -> Result<(), AppError> {
    let reduced = subsample(latents, cap, seed);
    let config = TsneConfig { perplexity, iterations: iters, seed, ..TsneConfig::default() };
    let result = tsne(reduced.points(), reduced.dim(), &config)?;
    write_tsne_csv(out, &result.embedding, reduced.labels())?;
    let kl = result.kl_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "wrote {} ({} points, final KL {kl:.4}, max entropy error {:.2e})",
        out.display(),
        reduced.len(),
        result.max_entropy_error
    );
    Ok(())
}

pub fn cmd_tsne(args: &TsneArgs) -> Result<(), AppError> {
    let file = load_file_config(&args.config)?;
    let perplexity = match (args.perplexity, file.get::<f64>("perplexity")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 30.0,
    };
    let iters = match (args.iters, file.get::<usize>("iters")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 1000,
    };
    let seed = match (args.seed, file.get::<u64>("seed")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 0,
    };
    let cap = match (args.cap, file.get::<usize>("cap")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 5000,
    };

    ensure_parent(&args.out)?;
    write_sidecar(
        &sidecar_for(&args.out),
        "tsne",
        &[
            ("in", args.input.display().to_string()),
            ("perplexity", fmt_f64(perplexity)),
            ("iters", iters.to_string()),
            ("seed", seed.to_string()),
            ("cap", cap.to_string()),
        ],
    )?;

    let latents = read_latent_csv(&args.input)?;
    run_tsne(&latents, perplexity, iters, seed, cap, &args.out)
}

// --------------------------------------------------------------- census

#[derive(Args, Debug)]
pub struct CensusArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to census with.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Digit whose reference-image embedding centres the cube.
    #[arg(long)]
    pub digit: Option<u8>,
    /// Cube side length in latent units.
    #[arg(long)]
    pub side: Option<f64>,
    /// Seed for the fresh rotation of the census set.
    #[arg(long)]
    pub rot_seed: Option<u64>,
    /// Census the unrotated set instead.
    #[arg(long)]
    pub no_rotate: bool,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long, default_value = "census.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub deterministic: bool,
}

pub fn cmd_census(args: &CensusArgs) -> Result<(), AppError> {
    let file = load_file_config(&args.config)?;
    let digit = match (args.digit, file.get::<u8>("digit")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 8,
    };
    let side = match (args.side, file.get::<f64>("side")?) {
        (Some(v), _) => v,
        (None, Some(v)) => v,
        (None, None) => 0.2,
    };
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data_dir = resolve_data_dir(&args.data, &file, Some(&ckpt.config.data_dir));
    let split = match (&args.split, file.raw("split")) {
        (Some(v), _) => parse_split(v)?,
        (None, Some(v)) => parse_split(v)?,
        (None, None) => ckpt.config.split,
    };
    let subset = match (args.subset, file.get_subset()?) {
        (Some(n), _) => Some(n),
        (None, Some(v)) => v,
        (None, None) => ckpt.config.subset,
    };
    // The census set is rotated afresh by default, not with the training
    // angles: the neighbourhood count should describe unseen rotations.
    let rotate = !args.no_rotate;
    let rot_seed = args
        .rot_seed
        .or(file.get::<u64>("rot_seed")?)
        .unwrap_or_else(|| derive_seed(ckpt.config.seed, tags::CENSUS));

    ensure_parent(&args.out)?;
    write_sidecar(
        &sidecar_for(&args.out),
        "census",
        &[
            ("ckpt", args.ckpt.display().to_string()),
            ("digit", digit.to_string()),
            ("side", fmt_f64(side)),
            ("rotate", rotate.to_string()),
            ("rot_seed", rot_seed.to_string()),
            ("split", split_name(split).to_string()),
            ("subset", subset_value(subset)),
            ("data_dir", data_dir.display().to_string()),
        ],
    )?;

    let base = load_split(&data_dir, split)?;
    let targets = reference_targets(&base)?;
    let working = match subset {
        Some(n) => base.subset(n),
        None => base,
    };
    let set = if rotate { build_rotated(&working, rot_seed) } else { working };
    let result = census(&ckpt.state, &set, &targets, digit, side)?;
    write_census_csv(&args.out, &result)?;
    match result.majority() {
        Some((label, share)) => println!(
            "wrote {} ({} members, majority digit {label} at {share:.3})",
            args.out.display(),
            result.total()
        ),
        None => println!("wrote {} (empty cube)", args.out.display()),
    }
    Ok(())
}
