//! Per-run JSON manifest: resolved configuration, seeds, timing, status and
//! output checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    /// Named seeds used by the run, starting with the base seed.
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub status: Status,
    pub exit_code: Option<i32>,
    pub error: Option<String>,
    /// Extra structured detail, such as failed sweep runs.
    pub details: Vec<String>,
    /// Files read by the run, such as checkpoints.
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> std::io::Result<(u64, String)> {
    let data = std::fs::read(path)?;
    Ok((data.len() as u64, hex::encode(Sha256::digest(&data))))
}

impl Manifest {
    pub fn start(command: &str, config: BTreeMap<String, String>, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::from([("base".to_string(), seed)]),
            started_unix: now(),
            finished_unix: None,
            status: Status::Running,
            exit_code: None,
            error: None,
            details: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn path(out_dir: &Path, command: &str) -> PathBuf {
        out_dir.join(format!("{command}_manifest.json"))
    }

    /// Records a written output by file name with its checksum.
    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        let (bytes, sha256) = sha256_file(path)?;
        let file = path.file_name().map_or_else(
            || path.display().to_string(),
            |f| f.to_string_lossy().into_owned(),
        );
        self.outputs.push(FileRecord {
            file,
            bytes,
            sha256,
        });
        Ok(())
    }

    /// Records an input file by its path as given.
    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let (bytes, sha256) = sha256_file(path)?;
        let file = path.display().to_string();
        self.inputs.push(FileRecord {
            file,
            bytes,
            sha256,
        });
        Ok(())
    }

    pub fn finish(&mut self, exit_code: i32, error: Option<String>) {
        self.finished_unix = Some(now());
        self.exit_code = Some(exit_code);
        self.status = if exit_code == 0 {
            Status::Ok
        } else {
            Status::Failed
        };
        self.error = error;
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }

    #[cfg(test)]
    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("a.csv");
        std::fs::write(&data, b"abc").unwrap();
        let mut m = Manifest::start("train", BTreeMap::from([("seed".into(), "3".into())]), 3);
        m.add_output(&data).unwrap();
        m.finish(0, None);
        let path = Manifest::path(dir.path(), "train");
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.status, Status::Ok);
        assert_eq!(back.outputs[0].bytes, 3);
        assert_eq!(
            back.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn nonzero_exit_marks_failure() {
        let mut m = Manifest::start("sweep", BTreeMap::new(), 0);
        m.finish(3, Some("boom".into()));
        assert_eq!(m.status, Status::Failed);
        assert!(m.finished_unix.unwrap() >= m.started_unix);
    }
}
