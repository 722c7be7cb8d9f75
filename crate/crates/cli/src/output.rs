//! Atomic artifact writes and the run manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects the files of one command invocation and writes them atomically.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: &'a str,
    seed: u64,
    files: &'a BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    /// Write through a temporary file in the same directory, then rename.
    pub fn write(&mut self, name: &str, contents: &[u8]) -> std::io::Result<PathBuf> {
        let target = self.root.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.root)?;
        tmp.write_all(contents)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&target).map_err(|e| e.error)?;
        self.written.insert(name.to_string(), sha256_hex(contents));
        Ok(target)
    }

    /// The manifest carries no timestamps so identical runs are byte-identical.
    pub fn finish(mut self, command: &str, config_text: &str, seed: u64) -> std::io::Result<PathBuf> {
        let files = self.written.clone();
        let manifest = Manifest {
            tool: "quantem",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: &sha256_hex(config_text.as_bytes()),
            seed,
            files: &files,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(&format!("manifest-{command}.json"), text.as_bytes())
    }
}
