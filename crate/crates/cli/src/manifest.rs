//! `manifest.json`: what a command read, what it wrote, and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<String>,
    pub seed: u64,
    /// Tree hash over `inputs`.
    pub input_hash: String,
    pub inputs: Vec<FileEntry>,
    pub output_dir: String,
    pub files: Vec<FileEntry>,
    pub started_unix: u64,
    pub finished_unix: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob {len}\0` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// SHA-256 over `name\0hash\n` lines sorted by name.
pub fn tree_hash(entries: &[FileEntry]) -> String {
    let mut sorted: Vec<&FileEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for e in sorted {
        h.update(e.name.as_bytes());
        h.update(b"\0");
        h.update(e.hash.as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn entry(name: String, content: &[u8]) -> FileEntry {
    FileEntry {
        name,
        bytes: content.len() as u64,
        hash: blob_hash(content),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sorted_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let e = e?;
        if e.file_type()?.is_file() {
            names.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

impl Manifest {
    pub fn start(command: &str, config: Option<&Path>, seed: u64, out: &Path) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_path: config.map(|p| p.display().to_string()),
            seed,
            input_hash: String::new(),
            inputs: Vec::new(),
            output_dir: out.display().to_string(),
            files: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            extra: BTreeMap::new(),
        }
    }

    pub fn add_input_text(&mut self, name: &str, text: &str) {
        self.inputs.push(entry(name.into(), text.as_bytes()));
        self.input_hash = tree_hash(&self.inputs);
    }

    pub fn add_input_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(entry(name.into(), &bytes));
        self.input_hash = tree_hash(&self.inputs);
        Ok(())
    }

    /// Every regular file of `dir`, named `data/<file>`.
    pub fn add_input_dir(&mut self, dir: &Path) -> Result<()> {
        for name in sorted_files(dir)? {
            self.add_input_file(&format!("data/{name}"), &dir.join(&name))?;
        }
        Ok(())
    }

    pub fn set_extra(&mut self, key: &str, value: serde_json::Value) {
        self.extra.insert(key.into(), value);
    }

    /// Hashes every file in `dir` and writes the manifest there.
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.files.clear();
        for name in sorted_files(dir)? {
            if name == FILE_NAME {
                continue;
            }
            let bytes = fs::read(dir.join(&name))?;
            self.files.push(entry(name, &bytes));
        }
        self.finished_unix = now();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(FILE_NAME), json + "\n").context("writing manifest.json")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(FILE_NAME)).context("reading manifest.json")?;
        serde_json::from_str(&text).context("parsing manifest.json")
    }
}
