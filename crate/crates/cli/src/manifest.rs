use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Record of one invocation, written before any training starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_snapshot: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs_hash: String,
}

/// Git-style blob id: SHA-256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over the blob ids of `files`, in order.
pub fn inputs_hash(files: &[&Path]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(f).map_err(|e| CliError::new("io", format!("{}: {e}", f.display())))?;
        h.update(blob_hash(&bytes).as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command: {}", self.command);
        let config = self.config_path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "config_path: {config}");
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "out_dir: {}", self.out_dir.display());
        let _ = writeln!(s, "inputs_hash: {}", self.inputs_hash);
        let _ = writeln!(s, "--- resolved config ---");
        s.push_str(&self.config_snapshot);
        s
    }

    pub fn write(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(self.out_dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}
