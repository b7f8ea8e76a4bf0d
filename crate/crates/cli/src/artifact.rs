//! On-disk artifacts, manifests and the working-directory lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Stage;
use crate::error::{CliError, CliResult};

/// Format version of every JSON artifact and manifest written by this build.
pub const ARTIFACT_VERSION: u64 = 1;

pub const LOCK_FILE: &str = ".competency.lock";
pub const MANIFEST_DIR: &str = "manifests";

/// Artifacts in the working directory, each with the stage that writes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    DatasetBin,
    Dataset,
    Agent,
    Strategies,
    Conditions,
    Predictors,
    Evaluation,
    Simulation { gated: bool },
    Episodes { gated: bool },
    Report,
}

impl Artifact {
    pub fn file_name(self) -> &'static str {
        match self {
            Artifact::DatasetBin => "dataset.bin",
            Artifact::Dataset => "dataset.json",
            Artifact::Agent => "agent.json",
            Artifact::Strategies => "strategies.json",
            Artifact::Conditions => "conditions.json",
            Artifact::Predictors => "predictors.json",
            Artifact::Evaluation => "evaluation.json",
            Artifact::Simulation { gated: true } => "simulation_gated.json",
            Artifact::Simulation { gated: false } => "simulation_ungated.json",
            Artifact::Episodes { gated: true } => "episodes_gated.jsonl",
            Artifact::Episodes { gated: false } => "episodes_ungated.jsonl",
            Artifact::Report => "report.json",
        }
    }

    pub fn producer(self) -> Stage {
        match self {
            Artifact::DatasetBin | Artifact::Dataset => Stage::GenData,
            Artifact::Agent => Stage::Train,
            Artifact::Strategies => Stage::Strategies,
            Artifact::Conditions => Stage::Conditions,
            Artifact::Predictors => Stage::Predictors,
            Artifact::Evaluation => Stage::Evaluate,
            Artifact::Simulation { .. } | Artifact::Episodes { .. } => Stage::Simulate,
            Artifact::Report => Stage::Report,
        }
    }

    /// Envelope `kind` tag.
    fn kind(self) -> &'static str {
        self.file_name().trim_end_matches(".json")
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub version: u64,
    pub config_hash: String,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u64,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Seconds since the Unix epoch; the only field that varies between reruns.
    pub created_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// A working directory holding one pipeline's artifacts.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> CliResult<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| CliError::io(format!("creating {}", root.display()), e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, artifact: Artifact) -> PathBuf {
        self.root.join(artifact.file_name())
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.root.join(MANIFEST_DIR).join(format!("{stage}.json"))
    }

    /// Errors with the producing command when `artifact` is absent.
    pub fn require(&self, artifact: Artifact) -> CliResult<PathBuf> {
        let path = self.path(artifact);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact {
                path,
                producer: artifact.producer().name(),
            })
        }
    }

    pub fn write_json<T: Serialize>(&self, artifact: Artifact, config_hash: &str, payload: &T) -> CliResult<PathBuf> {
        let envelope = Envelope {
            kind: artifact.kind().to_string(),
            version: ARTIFACT_VERSION,
            config_hash: config_hash.to_string(),
            payload,
        };
        let path = self.path(artifact);
        let mut bytes = serde_json::to_vec(&envelope).map_err(|e| CliError::Internal(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    /// Reads an artifact, checking kind and version before the payload.
    pub fn read_json<T: DeserializeOwned>(&self, artifact: Artifact) -> CliResult<Envelope<T>> {
        let path = self.require(artifact)?;
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let corrupt = |e: serde_json::Error| CliError::Validation(format!("{} is not a valid artifact: {e}", path.display()));
        let value: serde_json::Value = serde_json::from_str(&text).map_err(corrupt)?;
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != ARTIFACT_VERSION {
            return Err(CliError::VersionMismatch {
                path,
                found: version,
                expected: ARTIFACT_VERSION,
            });
        }
        match value.get("kind").and_then(|v| v.as_str()) {
            Some(k) if k == artifact.kind() => {}
            other => {
                return Err(CliError::Validation(format!(
                    "{} holds a {:?} artifact, expected {}",
                    path.display(),
                    other.unwrap_or("untagged"),
                    artifact.kind()
                )))
            }
        }
        serde_json::from_value(value).map_err(corrupt)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> CliResult<PathBuf> {
        let dir = self.root.join(MANIFEST_DIR);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        let path = self.manifest_path(&manifest.stage);
        let mut bytes = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read_manifest(&self, stage: &str) -> CliResult<Option<Manifest>> {
        let path = self.manifest_path(stage);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{} is not a valid manifest: {e}", path.display())))?;
        if manifest.version != ARTIFACT_VERSION {
            return Err(CliError::VersionMismatch {
                path,
                found: manifest.version,
                expected: ARTIFACT_VERSION,
            });
        }
        Ok(Some(manifest))
    }

    /// Hashes files relative to the working directory.
    pub fn hashes(&self, paths: &[PathBuf]) -> CliResult<Vec<FileHash>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: self.relative(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    /// Takes the working-directory lock until the guard drops.
    pub fn lock(&self) -> CliResult<LockGuard> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                dir: self.root.clone(),
                lock: path,
            }),
            Err(e) => Err(CliError::io(format!("creating {}", path.display()), e)),
        }
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming to {}", path.display()), e))
}

/// Buffered writer for streamed outputs (datasets, JSON lines, CSV).
pub fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("creating {}", path.display()), e))
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifact_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path()).unwrap();
        let err = wd.read_json::<serde_json::Value>(Artifact::Predictors).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("competency predictors"), "{err}");
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path()).unwrap();
        fs::write(
            wd.path(Artifact::Agent),
            r#"{"kind":"agent","version":7,"config_hash":"x","payload":{}}"#,
        )
        .unwrap();
        let err = wd.read_json::<serde_json::Value>(Artifact::Agent).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("version 7") && msg.contains("version 1"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn json_roundtrip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path()).unwrap();
        wd.write_json(Artifact::Strategies, "abc", &vec![1, 2, 3]).unwrap();
        let env: Envelope<Vec<i32>> = wd.read_json(Artifact::Strategies).unwrap();
        assert_eq!(env.payload, vec![1, 2, 3]);
        assert_eq!(env.config_hash, "abc");
        fs::copy(wd.path(Artifact::Strategies), wd.path(Artifact::Agent)).unwrap();
        assert!(wd.read_json::<Vec<i32>>(Artifact::Agent).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let wd = Workdir::new(dir.path()).unwrap();
        let guard = wd.lock().unwrap();
        assert!(matches!(wd.lock(), Err(CliError::Locked { .. })));
        drop(guard);
        wd.lock().unwrap();
    }
}
