//! Shared plumbing: the process error taxonomy, the plain-text config
//! file, and the resolved-config sidecar.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rotvae::analysis::AnalysisError;
use rotvae::dataset::DataError;
use rotvae::output::OutputError;
use rotvae::trainer::TrainError;
use rotvae::vae::VaeError;

/// Process-level failure, carrying the exit code contract:
/// 2 = configuration/usage, 3 = data/input, 4 = numerical abort.
#[derive(Debug)]
pub enum AppError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Data(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(m) | AppError::Data(m) | AppError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<VaeError> for AppError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::NonFinite { .. } => AppError::Numeric(e.to_string()),
            _ => AppError::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Vae(inner) => inner.into(),
            TrainError::Data(inner) => inner.into(),
            TrainError::Tensor(_) | TrainError::BadConfig { .. } => AppError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } => {
                AppError::Numeric(e.to_string())
            }
            TrainError::Io { .. }
            | TrainError::CheckpointMagic { .. }
            | TrainError::UnsupportedVersion(_)
            | TrainError::Corrupt { .. }
            | TrainError::Json(_) => AppError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for AppError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Vae(inner) => inner.into(),
            AnalysisError::DegenerateInput | AnalysisError::NonFinite { .. } => {
                AppError::Data(e.to_string())
            }
            _ => AppError::Usage(e.to_string()),
        }
    }
}

impl From<OutputError> for AppError {
    fn from(e: OutputError) -> Self {
        match e {
            OutputError::Analysis(inner) => inner.into(),
            OutputError::Io { .. } | OutputError::Format { .. } => AppError::Data(e.to_string()),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

pub fn data(msg: impl Into<String>) -> AppError {
    AppError::Data(msg.into())
}

/// Keys every config file may set. Anything else is rejected so typos
/// fail loudly instead of silently using a default.
const KNOWN_KEYS: &[&str] = &[
    "latent_dim",
    "mode",
    "beta",
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "seed",
    "rotate",
    "resample_rotations",
    "split",
    "subset",
    "data_dir",
    "out",
    "lo",
    "hi",
    "steps",
    "perplexity",
    "iters",
    "digit",
    "side",
    "cap",
    "tsne_cap",
    "rot_seed",
    "ckpt",
    "in",
    "figure",
    "scale",
];

/// A parsed `key = value` config file. Values stay as strings until a
/// command asks for them with a typed getter.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
    path: Option<PathBuf>,
}

impl FileConfig {
    /// Parse `path`. Lines are `key = value`; `#` starts a comment;
    /// blank lines are ignored.
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = fs::read_to_string(path)
            .map_err(|e| data(format!("{}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(usage(format!(
                    "{}:{}: unknown key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(usage(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(FileConfig { values, path: Some(path.to_path_buf()) })
    }

    pub fn empty() -> Self {
        FileConfig::default()
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Typed getter: parse the value under `key` if present.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, AppError>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| {
                let place = self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "config".into());
                usage(format!("{place}: key {key:?}: {e}"))
            }),
        }
    }

    /// Booleans accept true/false/1/0/yes/no.
    pub fn get_bool(&self, key: &str) -> Result<Option<bool>, AppError> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(other) => Err(usage(format!(
                "key {key:?}: expected a boolean (true/false), got {other:?}"
            ))),
        }
    }

    /// `subset = none` (or the key missing) means "no subset".
    pub fn get_subset(&self) -> Result<Option<Option<usize>>, AppError> {
        match self.values.get("subset").map(String::as_str) {
            None => Ok(None),
            Some("none") => Ok(Some(None)),
            Some(v) => v
                .parse::<usize>()
                .map(|n| Some(Some(n)))
                .map_err(|e| usage(format!("key \"subset\": {e}"))),
        }
    }
}

/// Write the fully resolved configuration next to a run's outputs. The
/// format round-trips through `FileConfig::load`; entries keep the order
/// given. No timestamps, so identical runs write identical sidecars.
pub fn write_sidecar(
    path: &Path,
    command: &str,
    entries: &[(&str, String)],
) -> Result<(), AppError> {
    let mut out = String::new();
    out.push_str(&format!("# resolved configuration ({command})\n"));
    for (key, value) in entries {
        out.push_str(&format!("{key} = {value}\n"));
    }
    fs::write(path, out).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Float formatting for sidecars: shortest round-trip form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<FileConfig, AppError> {
        let dir = std::env::temp_dir().join(format!("rotvae-cli-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("t{}.conf", text.len()));
        std::fs::write(&path, text).unwrap();
        FileConfig::load(&path)
    }

    #[test]
    fn parses_keys_comments_and_blanks() {
        let c = parse("# header\nseed = 7\n\nmode = targeted # trailing\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.raw("mode"), Some("targeted"));
        assert_eq!(c.get::<u64>("epochs").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(parse("bogus = 1\n"), Err(AppError::Usage(_))));
        assert!(matches!(parse("seed = 1\nseed = 2\n"), Err(AppError::Usage(_))));
        assert!(matches!(parse("just words\n"), Err(AppError::Usage(_))));
    }

    #[test]
    fn subset_none_is_explicit_absence() {
        assert_eq!(parse("subset = none\n").unwrap().get_subset().unwrap(), Some(None));
        assert_eq!(parse("subset = 50\n").unwrap().get_subset().unwrap(), Some(Some(50)));
        assert_eq!(parse("seed = 1\n").unwrap().get_subset().unwrap(), None);
    }

    #[test]
    fn exit_codes_follow_taxonomy() {
        assert_eq!(AppError::Usage(String::new()).exit_code(), 2);
        assert_eq!(AppError::Data(String::new()).exit_code(), 3);
        assert_eq!(AppError::Numeric(String::new()).exit_code(), 4);
    }
}
