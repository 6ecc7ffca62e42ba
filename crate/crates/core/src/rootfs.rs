//! Root filesystem candidates and unpacking-artifact repair rules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::paths;

pub const KEY_DIRS: &[&str] = &["bin", "sbin", "etc", "usr"];
pub const KEY_FILES: &[&str] = &["init", "linuxrc", "bin/sh", "bin/bash", "bin/dash", "bin/busybox"];

/// Shell entries a chroot can be entered with.
pub const SHELL_ENTRIES: &[&str] = &["bin/sh", "bin/bash", "bin/dash", "bin/busybox"];

/// Score of one directory as a root filesystem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootScore {
    pub key_dirs: Vec<String>,
    pub key_files: Vec<String>,
}

impl RootScore {
    /// `is_dir(rel)` / `exists(rel)` answer for paths relative to the
    /// directory being scored.
    pub fn compute(is_dir: impl Fn(&str) -> bool, exists: impl Fn(&str) -> bool) -> Self {
        RootScore {
            key_dirs: KEY_DIRS.iter().filter(|d| is_dir(d)).map(|d| String::from(*d)).collect(),
            key_files: KEY_FILES.iter().filter(|f| exists(f)).map(|f| String::from(*f)).collect(),
        }
    }

    pub fn score(&self) -> u8 {
        (self.key_dirs.len() + self.key_files.len()) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredDir {
    pub rel_path: String,
    pub score: RootScore,
}

/// Keep the directories that look like root filesystems.
///
/// For every nested pair, the lower-scoring directory is dropped (the
/// ancestor on a tie) unless both carry key files of their own, in which
/// case both are genuine roots. Output is sorted by descending score, then
/// depth, then path, so it does not depend on traversal order.
pub fn select_candidates(dirs: &[ScoredDir]) -> Vec<ScoredDir> {
    let scored: Vec<&ScoredDir> = dirs.iter().filter(|d| d.score.score() >= 1).collect();
    let dominated = |me: &ScoredDir| {
        scored.iter().any(|other| {
            let (ancestor, descendant) = if paths::is_strict_ancestor(&me.rel_path, &other.rel_path) {
                (me, *other)
            } else if paths::is_strict_ancestor(&other.rel_path, &me.rel_path) {
                (*other, me)
            } else {
                return false;
            };
            if !ancestor.score.key_files.is_empty() && !descendant.score.key_files.is_empty() {
                return false;
            }
            let (a, d) = (ancestor.score.score(), descendant.score.score());
            if core::ptr::eq(me, ancestor) {
                a <= d
            } else {
                d < a
            }
        })
    };
    let mut kept: Vec<ScoredDir> = scored.iter().filter(|d| !dominated(d)).map(|d| (*d).clone()).collect();
    kept.sort_by(|a, b| {
        b.score
            .score()
            .cmp(&a.score.score())
            .then(paths::depth(&a.rel_path).cmp(&paths::depth(&b.rel_path)))
            .then(a.rel_path.cmp(&b.rel_path))
    });
    kept.dedup_by(|a, b| a.rel_path == b.rel_path);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Original,
    Sanitized(u8),
}

impl Variant {
    pub fn tag(&self) -> String {
        match self {
            Variant::Original => String::from("original"),
            Variant::Sanitized(k) => alloc::format!("sanitized{k}"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepairReason {
    TargetExists,
    TargetMissing,
    NotTextual,
}

/// A regular file that looks like a symlink flattened into a text file
/// holding its target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymlinkRepair {
    pub path: String,
    pub target: String,
    pub applied: bool,
    pub reason: RepairReason,
}

impl SymlinkRepair {
    pub fn new(path: String, target: String, reason: RepairReason) -> Self {
        SymlinkRepair { path, target, applied: false, reason }
    }

    pub fn is_repairable(&self) -> bool {
        self.reason == RepairReason::TargetExists
    }

    pub fn mark_applied(&mut self) {
        self.applied = self.is_repairable();
    }
}

/// Largest file considered as a flattened link.
pub const LINK_TEXT_MAX: usize = 4096;

/// Outcome of sniffing a regular file's content for a flattened link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkText<'a> {
    /// Not a flattened link at all.
    No,
    /// Starts like a path but is not a clean single printable line.
    NotTextual(String),
    /// A single printable path line.
    Path(&'a str),
}

pub fn sniff_link_text(content: &[u8]) -> LinkText<'_> {
    if content.len() > LINK_TEXT_MAX {
        return LinkText::No;
    }
    let looks_like_path =
        content.starts_with(b"/") || content.starts_with(b"./") || content.starts_with(b"../");
    if !looks_like_path {
        return LinkText::No;
    }
    let body = content.strip_suffix(b"\n").unwrap_or(content);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    let printable = !body.is_empty() && body.iter().all(|&b| (0x20..0x7F).contains(&b));
    match core::str::from_utf8(body) {
        Ok(s) if printable => LinkText::Path(s),
        _ => LinkText::NotTextual(String::from_utf8_lossy(&body[..body.len().min(64)]).into_owned()),
    }
}
