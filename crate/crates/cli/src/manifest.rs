//! Run manifests and atomic output writing.
//!
//! Every output directory gets a `manifest.json` recording the tool version,
//! the root seed, a digest of the effective configuration, digests of all
//! input files, and the list of files written — enough to reproduce the
//! directory exactly. Outputs are written atomically (temp file + rename)
//! only after all aggregation is done.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::CliError;
use crate::config::RunSettings;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub root_seed: u64,
    /// SHA-256 of the canonical JSON form of `effective_config`.
    pub config_sha256: String,
    /// Input file path -> SHA-256 of its bytes.
    pub input_sha256: BTreeMap<String, String>,
    /// File names written into the manifest's directory.
    pub outputs: Vec<String>,
    pub effective_config: RunSettings,
}

impl RunManifest {
    pub fn new(
        command: &str,
        settings: &RunSettings,
        inputs: &[&Path],
    ) -> Result<RunManifest, CliError> {
        let canonical = serde_json::to_vec(settings)
            .map_err(|e| CliError::internal(format!("config serialization failed: {e}")))?;
        let mut input_sha256 = BTreeMap::new();
        for path in inputs {
            input_sha256.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            root_seed: settings.seed,
            config_sha256: sha256_hex(&canonical),
            input_sha256,
            outputs: Vec::new(),
            effective_config: settings.clone(),
        })
    }

    /// Write the manifest itself into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::internal(format!("manifest serialization failed: {e}")))?;
        json.push('\n');
        write_atomic(&dir.join(MANIFEST_NAME), json.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<RunManifest, CliError> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("bad manifest {}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = |tmp: &Path| -> std::io::Result<()> {
        let mut f = std::fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(tmp, path)
    };
    write(&tmp).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::internal(format!("cannot write {}: {e}", path.display()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"hello");
        write_atomic(&path, b"world").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"world");
        // No temp residue.
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
