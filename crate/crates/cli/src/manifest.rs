//! Per-run manifests.
//!
//! Every subcommand writes a JSON manifest next to its primary output
//! (override with `--manifest`). The manifest records the fully resolved
//! configuration (after config-file merge and seed filling), a hash of that
//! configuration, and the SHA-256 of every input and output file — enough
//! to reproduce or audit the run. It deliberately contains no timestamps or
//! host details, so re-running the same configuration yields a
//! byte-identical manifest.

use crate::config::{CliResult, Ctx};
use graft_core::format::sha256_hex;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA: &str = "graft-run/1";

#[derive(Serialize)]
struct FileStamp {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema: &'static str,
    tool: &'static str,
    tool_version: &'static str,
    task: &'a str,
    root_seed: u64,
    config: &'a serde_json::Value,
    config_sha256: String,
    inputs: &'a BTreeMap<String, FileStamp>,
    outputs: &'a BTreeMap<String, FileStamp>,
    results: &'a serde_json::Value,
}

/// Collects the pieces of one run's manifest, then writes it.
pub struct RunManifest {
    task: &'static str,
    root_seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, FileStamp>,
    outputs: BTreeMap<String, FileStamp>,
    results: serde_json::Value,
}

impl RunManifest {
    pub fn new(task: &'static str, root_seed: u64) -> RunManifest {
        RunManifest {
            task,
            root_seed,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            results: serde_json::Value::Null,
        }
    }

    /// Record the resolved configuration (call after all defaults/seeds are
    /// filled in).
    pub fn config(&mut self, cfg: &impl Serialize) -> CliResult<()> {
        self.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    fn stamp(path: &Path) -> CliResult<FileStamp> {
        let bytes = std::fs::read(path).ctx(&path.display().to_string())?;
        Ok(FileStamp { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
    }

    pub fn input(&mut self, label: &str, path: &Path) -> CliResult<()> {
        self.inputs.insert(label.to_string(), Self::stamp(path)?);
        Ok(())
    }

    pub fn output(&mut self, label: &str, path: &Path) -> CliResult<()> {
        self.outputs.insert(label.to_string(), Self::stamp(path)?);
        Ok(())
    }

    pub fn results(&mut self, v: serde_json::Value) {
        self.results = v;
    }

    /// Write the manifest. `explicit` (the global `--manifest` flag) wins;
    /// otherwise it lands next to the primary output as
    /// `<output>.manifest.json`.
    pub fn write(self, explicit: Option<&Path>, primary_output: &Path) -> CliResult<PathBuf> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let mut s = primary_output.as_os_str().to_owned();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
        };
        let config_sha256 = sha256_hex(&serde_json::to_vec(&self.config)?);
        let doc = Manifest {
            schema: MANIFEST_SCHEMA,
            tool: "graft",
            tool_version: env!("CARGO_PKG_VERSION"),
            task: self.task,
            root_seed: self.root_seed,
            config: &self.config,
            config_sha256,
            inputs: &self.inputs,
            outputs: &self.outputs,
            results: &self.results,
        };
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        std::fs::write(&path, text).ctx("manifest")?;
        Ok(path)
    }
}
