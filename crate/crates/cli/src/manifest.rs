//! Per-command run manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the output root.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub artifact_versions: BTreeMap<String, u32>,
    pub timings: Vec<StageTiming>,
}

pub fn artifact_versions() -> BTreeMap<String, u32> {
    use textloc::{celldb, coarse, numerics, scene};
    BTreeMap::from([
        ("cells".to_string(), celldb::CELLS_VERSION),
        ("checkpoint".to_string(), numerics::CHECKPOINT_VERSION),
        ("index".to_string(), coarse::INDEX_VERSION),
        ("manifest".to_string(), MANIFEST_VERSION),
        ("scene".to_string(), scene::SCENE_VERSION),
    ])
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), CliError> {
    let io = |e| CliError::io(path, e);
    let mut f = std::fs::File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    let hex: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, total))
}

/// Digests of `paths`, recorded relative to `root`; duplicates are dropped.
pub fn digests(root: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in paths {
        if !seen.insert(p.clone()) {
            continue;
        }
        let (sha256, bytes) = sha256_file(p)?;
        out.push(FileDigest {
            path: p.strip_prefix(root).unwrap_or(p).to_path_buf(),
            sha256,
            bytes,
        });
    }
    Ok(out)
}
