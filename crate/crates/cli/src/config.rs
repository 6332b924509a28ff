//! Config-file handling and the CLI's error/exit-code model.
//!
//! A run is configured by a TOML file plus command-line flags; flags win.
//! The file has an optional top-level `schema` tag, an optional top-level
//! `root-seed`, and one table per subcommand whose keys mirror that
//! subcommand's long flag names:
//!
//! ```toml
//! schema = "graft-config/1"
//! root-seed = 7
//!
//! [train-victim]
//! arch = "cnn-small"
//! images = "data/train-images.idx"
//! labels = "data/train-labels.idx"
//! epochs = 2
//! ```
//!
//! Unknown keys in a subcommand table are rejected so typos fail loudly.

use serde::de::DeserializeOwned;
use std::path::Path;
use std::process::ExitCode;

pub const CONFIG_SCHEMA: &str = "graft-config/1";

/// CLI-level error: a message plus the process exit code it maps to.
/// Exit code 1 means the user can fix it (flags, config, input files);
/// exit code 2 means a numeric failure or an internal bug.
#[derive(Debug)]
pub struct CliError {
    pub msg: String,
    pub code: u8,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

/// A user-fixable error (exit code 1).
pub fn user(msg: impl Into<String>) -> CliError {
    CliError { msg: msg.into(), code: 1 }
}

/// An internal or numeric error (exit code 2).
pub fn internal(msg: impl Into<String>) -> CliError {
    CliError { msg: msg.into(), code: 2 }
}

impl From<graft_core::Error> for CliError {
    fn from(e: graft_core::Error) -> Self {
        CliError { msg: e.to_string(), code: if e.is_internal() { 2 } else { 1 } }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        user(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        internal(format!("report serialization failed: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attach a role label to an error (`images: No such file ...`).
pub trait Ctx<T> {
    fn ctx(self, label: &str) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Ctx<T> for Result<T, E> {
    fn ctx(self, label: &str) -> CliResult<T> {
        self.map_err(|e| {
            let e = e.into();
            CliError { msg: format!("{label}: {}", e.msg), code: e.code }
        })
    }
}

/// Parsed config file: top-level settings plus the raw per-task tables.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub root_seed: Option<u64>,
    table: toml::Table,
}

pub fn load(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).ctx("config")?;
    let table: toml::Table =
        text.parse().map_err(|e| user(format!("config {}: {e}", path.display())))?;
    if let Some(schema) = table.get("schema") {
        match schema.as_str() {
            Some(CONFIG_SCHEMA) => {}
            Some(other) => {
                return Err(user(format!(
                    "config schema `{other}` is not supported (expected `{CONFIG_SCHEMA}`)"
                )))
            }
            None => return Err(user("config key `schema` must be a string")),
        }
    }
    let root_seed = match table.get("root-seed") {
        None => None,
        Some(v) => Some(
            v.as_integer()
                .and_then(|i| u64::try_from(i).ok())
                .ok_or_else(|| user("config key `root-seed` must be a non-negative integer"))?,
        ),
    };
    Ok(ConfigFile { root_seed, table })
}

/// Fill every unset field of `args` from the config table named `task`.
/// Deserialization rejects unknown keys and wrong types.
pub fn apply<T: DeserializeOwned + Overlay>(
    args: &mut T,
    cfg: &ConfigFile,
    task: &str,
) -> CliResult<()> {
    let Some(section) = cfg.table.get(task) else {
        return Ok(());
    };
    let from_file: T = section
        .clone()
        .try_into()
        .map_err(|e| user(format!("config table [{task}]: {e}")))?;
    args.overlay(from_file);
    Ok(())
}

/// Field-by-field "keep mine, else take theirs" merge for all-`Option` arg
/// structs.
pub trait Overlay {
    fn overlay(&mut self, from_file: Self);
}

macro_rules! impl_overlay {
    ($t:ty, [$($f:ident),* $(,)?]) => {
        impl crate::config::Overlay for $t {
            fn overlay(&mut self, mut from_file: Self) {
                $( if self.$f.is_none() { self.$f = from_file.$f.take(); } )*
            }
        }
    };
}
pub(crate) use impl_overlay;

/// Unwrap a required option, naming the flag/config key that supplies it.
pub fn need<T>(v: Option<T>, key: &str) -> CliResult<T> {
    v.ok_or_else(|| user(format!("missing `--{key}` (flag or config key `{key}`)")))
}

/// Fill a seed slot from the root seed when the task did not set one.
pub fn fill_seed(slot: &mut Option<u64>, root_seed: u64, label: &str) {
    if slot.is_none() {
        *slot = Some(rand::Rng::gen(&mut graft_core::rng::stream(root_seed, label)));
    }
}
