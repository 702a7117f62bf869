use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::Utc;
use compose_probe_core::embedding::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::exit::{Outcome, OrExit, RUNTIME};

/// Everything needed to repeat a run. Two runs with equal manifests (apart
/// from the timestamps) write equal artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    /// Every flag after defaults were applied.
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of each input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(subcommand: &str, flags: &impl Serialize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv: std::env::args().skip(1).collect(),
            flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_at: Utc::now().to_rfc3339(),
            finished_at: String::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Outcome {
        let bytes = std::fs::read(path).or_exit(RUNTIME)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Outcome<PathBuf> {
        self.finished_at = Utc::now().to_rfc3339();
        let text = serde_json::to_string_pretty(&self).or_exit(RUNTIME)?;
        std::fs::write(path, text + "\n").or_exit(RUNTIME)?;
        Ok(path.to_path_buf())
    }
}

/// `dir/manifest.json` for directory outputs, `<file>.manifest.json` for a
/// single output file.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
