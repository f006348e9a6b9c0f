use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command: its arguments, the effective
/// configuration, the seed, content hashes of the inputs and the files it
/// produced. One per output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    /// Hash over the per-input digests, in order.
    pub input_hash: String,
    pub outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: `sha256("blob <len>\0" ++ content)`.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, inputs: &[PathBuf]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: file_hash(p)? }))
            .collect::<Result<Vec<_>>>()?;
        let joined: String = inputs.iter().map(|d| d.sha256.as_str()).collect::<Vec<_>>().join("\n");
        Ok(Self {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            input_hash: content_hash(joined.as_bytes()),
            inputs,
            outputs: Vec::new(),
        })
    }

    /// Lists the files already in `dir` as outputs and writes the manifest
    /// there, replacing any earlier one.
    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        let mut outputs = Vec::new();
        collect_files(dir, dir, &mut outputs)?;
        outputs.retain(|p| p != MANIFEST_FILE);
        outputs.sort();
        self.outputs = outputs;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Files of `dir`, excluding subdirectories that carry their own manifest.
fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            if !path.join(MANIFEST_FILE).exists() {
                collect_files(root, &path, out)?;
            } else {
                out.push(format!("{}/", path.strip_prefix(root)?.display()));
            }
        } else {
            out.push(path.strip_prefix(root)?.display().to_string());
        }
    }
    Ok(())
}
