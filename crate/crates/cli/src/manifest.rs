//! Stage manifests: digests of a stage's inputs, parameters and outputs.
//! A stage whose manifest still matches is skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Digest of the stage's parameters.
    pub params: String,
    pub inputs: BTreeMap<PathBuf, String>,
    pub outputs: BTreeMap<PathBuf, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// sha256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let file = File::open(path).map_err(|e| CliError::from_io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// sha256 of the JSON form of the parameters.
pub fn params_digest<T: Serialize>(params: &T) -> String {
    let json = serde_json::to_vec(params).expect("stage parameters serialize");
    hex(&Sha256::digest(&json))
}

pub fn digest_all(paths: &[PathBuf]) -> Result<BTreeMap<PathBuf, String>, CliError> {
    paths.iter().map(|p| Ok((p.clone(), file_digest(p)?))).collect()
}

pub fn manifest_path(work_dir: &Path, stage: &str) -> PathBuf {
    work_dir.join("manifests").join(format!("{stage}.json"))
}

pub fn load(work_dir: &Path, stage: &str) -> Option<Manifest> {
    let path = manifest_path(work_dir, stage);
    let text = std::fs::read_to_string(&path).ok()?;
    match serde_json::from_str(&text) {
        Ok(m) => Some(m),
        Err(err) => {
            log::warn!("ignoring unreadable manifest {}: {err}", path.display());
            None
        }
    }
}

pub fn store(work_dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let path = manifest_path(work_dir, &manifest.stage);
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    crate::write_text(&path, &body)
}

impl Manifest {
    /// True when the recorded inputs and parameters match and every output
    /// is still on disk unchanged.
    pub fn is_current(&self, params: &str, inputs: &BTreeMap<PathBuf, String>) -> bool {
        if self.params != params || &self.inputs != inputs {
            return false;
        }
        self.outputs
            .iter()
            .all(|(path, digest)| file_digest(path).is_ok_and(|d| &d == digest))
    }
}
