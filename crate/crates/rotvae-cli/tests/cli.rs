//! End-to-end tests of the `rotvae` binary: exit codes, artifact
//! shapes, config precedence, and byte-level determinism, all at tiny
//! training scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rotvae")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Run the binary in `cwd` with the given arguments.
fn run_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("ROTVAE_DATA")
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code();
    assert_eq!(
        got,
        Some(want),
        "expected exit {want}, got {got:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny checkpoints shared by the read-only tests, trained once.
struct Fixtures {
    #[allow(dead_code)]
    dir: TempDir,
    k2_ckpt: PathBuf,
    k3_ckpt: PathBuf,
}

fn fixtures() -> &'static Fixtures {
    static CELL: OnceLock<Fixtures> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = data_dir();
        let data = data.to_str().unwrap();
        for (latent, sub) in [("2", "k2"), ("3", "k3")] {
            let out = run_in(
                dir.path(),
                &[
                    "train",
                    "--mode",
                    "targeted",
                    "--latent-dim",
                    latent,
                    "--epochs",
                    "1",
                    "--subset",
                    "120",
                    "--batch-size",
                    "64",
                    "--rotate",
                    "--seed",
                    "9",
                    "--data",
                    data,
                    "--out",
                    sub,
                ],
            );
            assert_code(&out, 0);
        }
        Fixtures {
            k2_ckpt: dir.path().join("k2/model.ckpt"),
            k3_ckpt: dir.path().join("k3/model.ckpt"),
            dir,
        }
    })
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let args = [
        "train",
        "--mode",
        "targeted",
        "--latent-dim",
        "2",
        "--epochs",
        "1",
        "--subset",
        "120",
        "--batch-size",
        "64",
        "--rotate",
        "--seed",
        "11",
        "--data",
        data.to_str().unwrap(),
    ];
    for out_dir in ["a", "b"] {
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--out", out_dir]);
        assert_code(&run_in(dir.path(), &full), 0);
    }
    for name in ["model.ckpt", "losses.csv", "config.resolved"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn train_rejects_zero_latent_dim_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let out = run_in(
        dir.path(),
        &["train", "--latent-dim", "0", "--epochs", "1", "--data", data.to_str().unwrap()],
    );
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("latent_dim"), "stderr: {}", stderr_of(&out));
}

#[test]
fn train_missing_data_dir_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--epochs", "1", "--subset", "64", "--data", "no/such/dir"],
    );
    assert_code(&out, 3);
}

#[test]
fn embed_writes_labelled_latents_and_samples() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let out = run_in(
        dir.path(),
        &[
            "embed",
            "--ckpt",
            fx.k2_ckpt.to_str().unwrap(),
            "--rotate",
            "--data",
            data.to_str().unwrap(),
            "--out",
            "latents.csv",
            "--dump-samples",
        ],
    );
    assert_code(&out, 0);
    let text = fs::read_to_string(dir.path().join("latents.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,angle,z1,z2");
    assert_eq!(lines.len(), 121, "120 subset rows plus header");
    assert!(dir.path().join("latents.csv.resolved").is_file(), "sidecar missing");
    let samples = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("sample_")
        })
        .count();
    assert_eq!(samples, 16);
}

#[test]
fn grid_defaults_produce_840_square_pgm() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["grid", "--ckpt", fx.k2_ckpt.to_str().unwrap(), "--out", "grid.pgm"],
    );
    assert_code(&out, 0);
    let bytes = fs::read(dir.path().join("grid.pgm")).unwrap();
    let header = b"P5\n840 840\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 840 * 840);
}

#[test]
fn grid_rejects_non_2d_checkpoint_with_exit_2() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["grid", "--ckpt", fx.k3_ckpt.to_str().unwrap(), "--out", "grid.pgm"],
    );
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("2-D"), "stderr: {}", stderr_of(&out));
}

#[test]
fn tsne_reduces_an_embed_csv() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let out = run_in(
        dir.path(),
        &[
            "embed",
            "--ckpt",
            fx.k3_ckpt.to_str().unwrap(),
            "--rotate",
            "--data",
            data.to_str().unwrap(),
            "--out",
            "latents.csv",
        ],
    );
    assert_code(&out, 0);
    let out = run_in(
        dir.path(),
        &[
            "tsne",
            "--in",
            "latents.csv",
            "--perplexity",
            "10",
            "--iters",
            "60",
            "--seed",
            "1",
            "--out",
            "tsne.csv",
        ],
    );
    assert_code(&out, 0);
    let text = fs::read_to_string(dir.path().join("tsne.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,t1,t2");
    assert_eq!(lines.len(), 121);
}

#[test]
fn census_defaults_write_ten_rows() {
    let fx = fixtures();
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let out = run_in(
        dir.path(),
        &[
            "census",
            "--ckpt",
            fx.k3_ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            "census.csv",
        ],
    );
    assert_code(&out, 0);
    let text = fs::read_to_string(dir.path().join("census.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "digit,count");
    assert_eq!(lines.len(), 11, "header plus one row per digit");
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i},")), "row {i} is {line:?}");
    }
}

#[test]
fn repro_figure_3_redirects_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["repro", "3"]);
    assert_code(&out, 2);
    assert!(
        stderr_of(&out).contains("dump-samples"),
        "stderr should point at embed --dump-samples: {}",
        stderr_of(&out)
    );
}

#[test]
fn repro_unknown_ids_exit_2() {
    let dir = TempDir::new().unwrap();
    assert_code(&run_in(dir.path(), &["repro", "12"]), 2);
    assert_code(&run_in(dir.path(), &["repro", "0"]), 2);
    assert_code(&run_in(dir.path(), &["repro", "fig4"]), 2);
}

#[test]
fn repro_figure_10_requires_beta() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["repro", "10"]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("beta"), "stderr: {}", stderr_of(&out));
}

#[test]
fn config_file_applies_and_cli_flags_override() {
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    fs::write(
        dir.path().join("run.conf"),
        "# tiny run\nmode = targeted\nepochs = 1\nsubset = 80\nbatch_size = 64\nrotate = true\nseed = 3\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--config",
            "run.conf",
            "--subset",
            "100",
            "--data",
            data.to_str().unwrap(),
            "--out",
            "run",
        ],
    );
    assert_code(&out, 0);
    let sidecar = fs::read_to_string(dir.path().join("run/config.resolved")).unwrap();
    assert!(sidecar.contains("mode = targeted"), "file value ignored:\n{sidecar}");
    assert!(sidecar.contains("subset = 100"), "CLI override lost:\n{sidecar}");
    assert!(sidecar.contains("rotate = true"), "file boolean ignored:\n{sidecar}");
}

#[test]
fn config_file_with_unknown_key_exits_2() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.conf"), "epohcs = 3\n").unwrap();
    let out = run_in(dir.path(), &["train", "--config", "bad.conf"]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("epohcs"), "stderr: {}", stderr_of(&out));
}

#[test]
fn env_var_supplies_data_dir() {
    let dir = TempDir::new().unwrap();
    let data = data_dir();
    let out = Command::new(bin())
        .args([
            "train",
            "--epochs",
            "1",
            "--subset",
            "64",
            "--batch-size",
            "64",
            "--out",
            "envrun",
        ])
        .current_dir(dir.path())
        .env("ROTVAE_DATA", data.as_os_str())
        .output()
        .expect("binary runs");
    assert_code(&out, 0);
    let sidecar = fs::read_to_string(dir.path().join("envrun/config.resolved")).unwrap();
    assert!(
        sidecar.contains("data_dir = ") && sidecar.contains("mnist"),
        "env data dir not resolved:\n{sidecar}"
    );
}
