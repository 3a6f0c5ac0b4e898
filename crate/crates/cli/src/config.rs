//! Flat key=value configuration shared by every subcommand.
//!
//! Sources merge in order: config files (later files win), then command-line
//! flags. Every key a command understands is consumed through the typed
//! `take_*` accessors; whatever is left when `finish` runs is an unknown key
//! and rejects the whole invocation, so typos never pass silently.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use vflnet_core::checkpoint::CheckpointError;
use vflnet_core::data::DataError;
use vflnet_core::eval::EvalError;
use vflnet_core::train::TrainError;
use vflnet_core::TensorError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint: {m}"),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Tensor(t) => CliError::Config(t.to_string()),
            TrainError::Checkpoint(c) => CliError::Checkpoint(c.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub struct RunConfig {
    vals: BTreeMap<String, String>,
}

impl RunConfig {
    /// Builds the merged map from `--config FILE` plus `--key value` flags.
    /// Flags accept both `--key value` and `--key=value`.
    pub fn from_args(args: &[String]) -> Result<RunConfig, CliError> {
        let mut files = Vec::new();
        let mut flags = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(body) = arg.strip_prefix("--") else {
                return Err(CliError::Config(format!(
                    "unexpected positional argument {arg:?}; flags look like --key value"
                )));
            };
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| {
                        CliError::Config(format!("flag --{body} is missing a value"))
                    })?;
                    (body.to_string(), v.clone())
                }
            };
            if key.is_empty() {
                return Err(CliError::Config("empty flag name".into()));
            }
            if key == "config" {
                files.push(value);
            } else {
                flags.push((key, value));
            }
        }
        let mut vals = BTreeMap::new();
        for path in files {
            let text = std::fs::read_to_string(&path).map_err(|e| {
                CliError::Config(format!("cannot read config file {path:?}: {e}"))
            })?;
            parse_file(&text, &path, &mut vals)?;
        }
        for (k, v) in flags {
            vals.insert(k, v);
        }
        Ok(RunConfig { vals })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.vals.remove(key)
    }

    pub fn take_str(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    pub fn take_str_opt(&mut self, key: &str) -> Option<String> {
        self.take(key)
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, CliError> {
        self.take(key)
            .ok_or_else(|| CliError::Config(format!("missing required key '{key}'")))
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.require_str(key)?))
    }

    pub fn take_path_opt(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(PathBuf::from)
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| bad(key, &v, "a non-negative integer")),
        }
    }

    pub fn take_usize_opt(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| bad(key, &v, "a non-negative integer")),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| bad(key, &v, "a non-negative integer")),
        }
    }

    pub fn take_u64_opt(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| bad(key, &v, "a non-negative integer")),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.trim().parse().map_err(|_| bad(key, &v, "a number")),
        }
    }

    pub fn take_f64_opt(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.trim().parse().map(Some).map_err(|_| bad(key, &v, "a number")),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(bad(key, &v, "true or false")),
            },
        }
    }

    pub fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|_| bad(key, &v, "comma-separated numbers like 0.3,0.5")),
        }
    }

    pub fn take_usize4_opt(&mut self, key: &str) -> Result<Option<[usize; 4]>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(key, &v, "four comma-separated integers like 1,1,2,1"))?;
                let arr: [usize; 4] = parts
                    .try_into()
                    .map_err(|_| bad(key, &v, "four comma-separated integers like 1,1,2,1"))?;
                Ok(Some(arr))
            }
        }
    }

    /// Rejects whatever was not consumed, naming every leftover key.
    pub fn finish(self) -> Result<(), CliError> {
        if self.vals.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.vals.keys().map(String::as_str).collect();
        Err(CliError::Config(format!(
            "unknown key{} for this subcommand: {}; run 'vfl help' for the accepted set",
            if keys.len() == 1 { "" } else { "s" },
            keys.join(", ")
        )))
    }
}

fn bad(key: &str, value: &str, want: &str) -> CliError {
    CliError::Config(format!("key '{key}' = {value:?}: expected {want}"))
}

/// `key = value` lines; '#' starts a comment, `[section]` headers are
/// ignored, the namespace stays flat (keys keep their dots).
fn parse_file(
    text: &str,
    origin: &str,
    into: &mut BTreeMap<String, String>,
) -> Result<(), CliError> {
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{origin}:{}: expected 'key = value', got {raw:?}",
                i + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(CliError::Config(format!(
                "{origin}:{}: empty key or value in {raw:?}",
                i + 1
            )));
        }
        into.insert(key.to_string(), value.to_string());
    }
    Ok(())
}
