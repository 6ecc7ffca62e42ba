//! Firmware ingestion: content-derived identity, selection filter, and the
//! workspace copy of the unpacked tree.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use firmscope_core::selection::{SelectionScan, SelectionVerdict};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::{self, EntryKind};
use crate::workspace::{read_json, write_json, Workspace, MANIFEST};

/// Content stream entry for files that cannot be read.
pub const UNREADABLE: &str = "UNREADABLE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareImage {
    pub id: String,
    pub source_path: PathBuf,
    pub vendor: Option<String>,
    /// Seconds since the Unix epoch.
    pub ingested_at: u64,
    pub selection: SelectionVerdict,
    /// Entries skipped because they could not be read.
    #[serde(default)]
    pub unreadable: u64,
}

/// Canonical identity of a tree: SHA-256 over the sorted
/// `path\0class\0content\0` stream, where class is `d`, `f`, `x` (executable
/// file) or `l`, and content is the file's SHA-256, the symlink target, or
/// [`UNREADABLE`].
pub fn tree_id(root: &Path) -> Result<(String, u64)> {
    let walk = fsutil::walk(root)?;
    let mut rows: Vec<(String, &'static str, String)> = Vec::new();
    for e in &walk.entries {
        let path = root.join(&e.rel);
        let (class, content) = match e.kind {
            EntryKind::Dir => ("d", String::new()),
            EntryKind::Symlink => (
                "l",
                fs::read_link(&path).map_or_else(|_| UNREADABLE.to_string(), |t| t.to_string_lossy().into_owned()),
            ),
            EntryKind::File => (
                if e.executable { "x" } else { "f" },
                fsutil::sha256_file(&path).unwrap_or_else(|_| UNREADABLE.to_string()),
            ),
        };
        rows.push((e.rel.clone(), class, content));
    }
    for rel in &walk.unreadable {
        rows.push((rel.clone(), "?", UNREADABLE.to_string()));
    }
    rows.sort();
    let unreadable = rows.iter().filter(|r| r.2 == UNREADABLE).count() as u64;
    let mut hasher = Sha256::new();
    for (rel, class, content) in &rows {
        for part in [rel.as_bytes(), class.as_bytes(), content.as_bytes()] {
            hasher.update(part);
            hasher.update([0u8]);
        }
    }
    Ok((hex::encode(hasher.finalize()), unreadable))
}

/// Selection verdict for a tree, plus the number of entries that could not
/// be read.
pub fn classify_selection(root: &Path) -> Result<(SelectionVerdict, u64)> {
    let walk = fsutil::walk(root)?;
    let mut scan = SelectionScan::new();
    for e in walk.non_dirs() {
        scan.observe(&e.rel);
    }
    Ok((scan.verdict(), walk.unreadable.len() as u64))
}

/// Ingest a tree. Re-ingesting an identical tree returns the existing entry.
pub fn ingest(ws: &Workspace, tree: &Path, vendor: Option<&str>) -> Result<FirmwareImage> {
    if !fs::metadata(tree).at(tree)?.is_dir() {
        return Err(Error::Io {
            path: tree.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a directory"),
        });
    }
    let (id, unreadable) = tree_id(tree)?;
    let manifest_path = ws.firmware_dir(&id).join(MANIFEST);
    if manifest_path.is_file() {
        return read_json(&manifest_path);
    }
    let _lock = ws.lock(&id)?;
    if manifest_path.is_file() {
        return read_json(&manifest_path);
    }
    let (selection, _) = classify_selection(tree)?;
    let dest = ws.tree_dir(&id);
    fsutil::remove_tree(&dest)?;
    fsutil::copy_tree(tree, &dest)?;
    let image = FirmwareImage {
        id: id.clone(),
        source_path: fs::canonicalize(tree).unwrap_or_else(|_| tree.to_path_buf()),
        vendor: vendor.map(str::to_string),
        ingested_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        selection,
        unreadable,
    };
    write_json(&manifest_path, &image)?;
    log::info!("ingested {} as {}", tree.display(), id);
    Ok(image)
}

pub fn load(ws: &Workspace, id: &str) -> Result<FirmwareImage> {
    let path = ws.firmware_dir(id).join(MANIFEST);
    if !path.is_file() {
        return Err(Error::UnknownFirmware(id.to_string()));
    }
    read_json(&path)
}
