//! `run_manifest.json`: what a command ran with and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tsbnet::config::KeyValues;

use crate::error::CliError;

pub const FILE_NAME: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, replayable with `tsbnet rerun`.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub tool_version: String,
    pub seed: u64,
    /// Resolved configuration after defaults, config file and flags.
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

static REPLAYED_ARGV: OnceLock<Vec<String>> = OnceLock::new();

/// Records `argv` in place of the process arguments, so a replayed run
/// writes the original command into its manifest.
pub fn replay_argv(argv: Vec<String>) {
    let _ = REPLAYED_ARGV.set(argv);
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: REPLAYED_ARGV.get().cloned().unwrap_or_else(|| std::env::args().collect()),
            cwd: std::env::current_dir().unwrap_or_default(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn set_config(&mut self, kv: &KeyValues) {
        self.config = kv.keys().map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string())).collect();
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    /// Stamps the end time and writes `dir/run_manifest.json` via a rename.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_unix_ms = now_ms();
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_atomic(&path, format!("{text}\n").as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
