//! On-disk workspace: one directory per firmware id plus batch-level
//! outputs.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, IoContext, Result};
use crate::fsutil;

pub const MANIFEST: &str = "manifest.json";
pub const OUTCOME: &str = "outcome.json";
const LOCK: &str = ".lock";

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).at(&root)?;
        Ok(Workspace { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn firmware_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn tree_dir(&self, id: &str) -> PathBuf {
        self.firmware_dir(id).join("tree")
    }

    pub fn rootfs_dir(&self, id: &str) -> PathBuf {
        self.firmware_dir(id).join("rootfs")
    }

    pub fn sessions_dir(&self, id: &str) -> PathBuf {
        self.firmware_dir(id).join("sessions")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn triage_path(&self) -> PathBuf {
        self.root.join("triage.json")
    }

    /// Ingested firmware ids, sorted.
    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).at(&self.root)? {
            let entry = entry.at(&self.root)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_firmware_id(&name) && entry.path().join(MANIFEST).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Resolve a full id or a unique prefix of at least 6 characters.
    pub fn resolve_id(&self, prefix: &str) -> Result<String> {
        if prefix.len() >= 6 {
            let matches: Vec<String> = self.ids()?.into_iter().filter(|id| id.starts_with(prefix)).collect();
            if matches.len() == 1 {
                return Ok(matches.into_iter().next().unwrap());
            }
        }
        Err(Error::UnknownFirmware(prefix.to_string()))
    }

    /// Take the single-writer lock for one firmware directory.
    pub fn lock(&self, id: &str) -> Result<WorkspaceLock> {
        let dir = self.firmware_dir(id);
        fs::create_dir_all(&dir).at(&dir)?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkspaceLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(id.to_string())),
            Err(e) => Err(e).at(&path),
        }
    }
}

pub fn is_firmware_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Held while writing a firmware directory; released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.into(), source })
}
