//! Tree walking, copying, hashing and guest-relative path resolution.

use std::collections::VecDeque;
use std::fs;
use std::io::Read;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Dir,
    File,
    Symlink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    /// Path relative to the walked root, `/`-separated, never empty.
    pub rel: String,
    pub kind: EntryKind,
    pub executable: bool,
    pub len: u64,
}

/// Result of walking a tree: entries sorted by path, plus the paths that
/// could not be read.
#[derive(Debug, Clone, Default)]
pub struct Walk {
    pub entries: Vec<TreeEntry>,
    pub unreadable: Vec<String>,
}

impl Walk {
    pub fn files(&self) -> impl Iterator<Item = &TreeEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::File)
    }

    /// Regular files and symlinks.
    pub fn non_dirs(&self) -> impl Iterator<Item = &TreeEntry> {
        self.entries.iter().filter(|e| e.kind != EntryKind::Dir)
    }

    pub fn dirs(&self) -> impl Iterator<Item = &TreeEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Dir)
    }
}

fn rel_of(root: &Path, path: &Path) -> Option<String> {
    let rel = path.strip_prefix(root).ok()?;
    let s = rel.to_string_lossy().replace('\\', "/");
    (!s.is_empty()).then_some(s)
}

/// Walk `root` without following symlinks. Unreadable entries are collected
/// instead of aborting the walk.
pub fn walk(root: &Path) -> Result<Walk> {
    fs::symlink_metadata(root).at(root)?;
    let mut out = Walk::default();
    for item in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        match item {
            Ok(entry) => {
                let Some(rel) = rel_of(root, entry.path()) else { continue };
                let ft = entry.file_type();
                let kind = if ft.is_symlink() {
                    EntryKind::Symlink
                } else if ft.is_dir() {
                    EntryKind::Dir
                } else {
                    EntryKind::File
                };
                match entry.metadata() {
                    Ok(meta) => out.entries.push(TreeEntry {
                        rel,
                        kind,
                        executable: kind == EntryKind::File && meta.permissions().mode() & 0o111 != 0,
                        len: meta.len(),
                    }),
                    Err(_) => out.unreadable.push(rel),
                }
            }
            Err(err) => {
                if let Some(rel) = err.path().and_then(|p| rel_of(root, p)) {
                    out.unreadable.push(rel);
                }
            }
        }
    }
    out.entries.sort_by(|a, b| a.rel.cmp(&b.rel));
    out.unreadable.sort();
    out.unreadable.dedup();
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).at(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Read at most `limit` bytes from the start of a file.
pub fn read_prefix(path: &Path, limit: u64) -> Result<Vec<u8>> {
    let file = fs::File::open(path).at(path)?;
    let mut buf = Vec::new();
    file.take(limit).read_to_end(&mut buf).at(path)?;
    Ok(buf)
}

/// Copy a tree, recreating symlinks as symlinks and keeping permissions.
pub fn copy_tree(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst).at(dst)?;
    let walk = walk(src)?;
    for e in &walk.entries {
        let from = src.join(&e.rel);
        let to = dst.join(&e.rel);
        match e.kind {
            EntryKind::Dir => {
                fs::create_dir_all(&to).at(&to)?;
                let mode = fs::metadata(&from).at(&from)?.permissions().mode();
                fs::set_permissions(&to, fs::Permissions::from_mode(mode | 0o700)).at(&to)?;
            }
            EntryKind::File => {
                fs::copy(&from, &to).at(&to)?;
            }
            EntryKind::Symlink => {
                let target = fs::read_link(&from).at(&from)?;
                symlink(&target, &to).at(&to)?;
            }
        }
    }
    Ok(())
}

/// Remove a directory tree if it exists.
pub fn remove_tree(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e).at(path),
        _ => Ok(()),
    }
}

const MAX_LINK_HOPS: usize = 40;

/// Resolve a root-relative path inside `root`, following symlinks the way a
/// chrooted process would: absolute link targets restart at `root`, and `..`
/// never leaves it. Returns the resolved root-relative path (which may not
/// exist), or `None` on a symlink loop or a missing intermediate directory.
pub fn guest_resolve(root: &Path, rel: &str) -> Option<String> {
    let mut done: Vec<String> = Vec::new();
    let mut pending: VecDeque<String> = rel.split('/').map(str::to_string).collect();
    let mut hops = 0;
    while let Some(comp) = pending.pop_front() {
        match comp.as_str() {
            "" | "." => continue,
            ".." => {
                done.pop();
                continue;
            }
            _ => {}
        }
        done.push(comp);
        let here = root.join(done.join("/"));
        match fs::symlink_metadata(&here) {
            Ok(meta) if meta.file_type().is_symlink() => {
                hops += 1;
                if hops > MAX_LINK_HOPS {
                    return None;
                }
                let target = fs::read_link(&here).ok()?;
                let target = target.to_string_lossy().into_owned();
                done.pop();
                if target.starts_with('/') {
                    done.clear();
                }
                for (i, c) in target.split('/').enumerate() {
                    pending.insert(i, c.to_string());
                }
            }
            Ok(meta) => {
                if !meta.is_dir() && !pending.iter().all(|c| c.is_empty() || c == ".") {
                    return None;
                }
            }
            Err(_) => {
                if pending.iter().any(|c| !c.is_empty() && c != ".") {
                    return None;
                }
            }
        }
    }
    Some(done.join("/"))
}

/// Host path of a guest path after resolution, if something exists there.
pub fn guest_existing(root: &Path, rel: &str) -> Option<PathBuf> {
    let resolved = guest_resolve(root, rel)?;
    let host = if resolved.is_empty() { root.to_path_buf() } else { root.join(&resolved) };
    fs::symlink_metadata(&host).ok().map(|_| host)
}

/// The entry itself exists (a dangling symlink counts).
pub fn lexists(path: &Path) -> bool {
    fs::symlink_metadata(path).is_ok()
}

/// Atomically replace `path` with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Search `PATH` for an executable.
pub fn which(program: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|p| fs::metadata(p).map_or(false, |m| m.is_file() && m.permissions().mode() & 0o111 != 0))
}
