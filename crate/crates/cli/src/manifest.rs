//! Append-only run manifest (`manifest.jsonl`) and the experiments table.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tqnet::{Result, TqError};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EXPERIMENTS_FILE: &str = "experiments.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Identifies the run: command, config hash and flags.
    pub run_key: String,
    pub config_hash: String,
    pub code_version: String,
    /// Artifact paths relative to the output root.
    pub outputs: Vec<String>,
    pub parent: Option<String>,
    pub wall_clock_secs: f64,
    pub unix_time: u64,
}

pub fn read_manifest(root: &Path) -> Result<Vec<RunManifest>> {
    let path = root.join(MANIFEST_FILE);
    let Ok(file) = File::open(&path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TqError::format(&path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Appends one entry under an exclusive lock. Every listed output must exist.
pub fn append_manifest(root: &Path, entry: &RunManifest) -> Result<()> {
    for o in &entry.outputs {
        if !root.join(o).exists() {
            return Err(TqError::Integrity(format!("manifest output {o} does not exist")));
        }
    }
    fs::create_dir_all(root)?;
    let mut file = OpenOptions::new().create(true).append(true).open(root.join(MANIFEST_FILE))?;
    file.lock()?;
    let line = serde_json::to_string(entry)? + "\n";
    let res = file.write_all(line.as_bytes());
    file.unlock()?;
    Ok(res?)
}

/// Appends one row to `experiments.csv`, writing the header first if needed.
pub fn append_experiment(root: &Path, header: &str, row: &str) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut file = OpenOptions::new().create(true).append(true).open(root.join(EXPERIMENTS_FILE))?;
    file.lock()?;
    let mut text = String::new();
    if file.metadata()?.len() == 0 {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(row);
    text.push('\n');
    let res = file.write_all(text.as_bytes());
    file.unlock()?;
    Ok(res?)
}

/// Problems found by walking the manifest against the output tree.
pub fn integrity_problems(root: &Path) -> Result<Vec<String>> {
    let entries = read_manifest(root)?;
    let mut problems = Vec::new();
    let mut referenced = BTreeSet::new();
    for e in &entries {
        for o in &e.outputs {
            if !root.join(o).exists() {
                problems.push(format!("{} run lists missing artifact {o}", e.command));
            }
            referenced.insert(PathBuf::from(o));
        }
    }
    for dir in ["checkpoints", "reports"] {
        let Ok(listing) = fs::read_dir(root.join(dir)) else {
            continue;
        };
        for item in listing {
            let rel = Path::new(dir).join(item?.file_name());
            if !referenced.contains(&rel) {
                problems.push(format!("artifact {} is not recorded in the manifest", rel.display()));
            }
        }
    }
    if root.join("corpus").exists() && !referenced.contains(Path::new("corpus")) {
        problems.push("corpus directory is not recorded in the manifest".to_string());
    }
    Ok(problems)
}
