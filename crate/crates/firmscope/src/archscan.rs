//! Architecture vote over a root filesystem.

use std::path::Path;

use firmscope_core::arch::{detect_file_arch, ArchTally, ArchitectureGuess};
use firmscope_core::paths;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsroot::RootfsReport;
use crate::fsutil;
use crate::workspace::{write_json, Workspace};

/// Directories whose files vote even without an execute bit.
pub const BINARY_DIRS: &[&str] = &["bin", "sbin", "usr/bin", "usr/sbin", "lib", "usr/lib"];

/// Largest file inspected.
const MAX_INSPECT: u64 = 64 * 1024 * 1024;

pub fn votes_for(rel: &str, executable: bool) -> bool {
    executable || BINARY_DIRS.iter().any(|d| paths::is_strict_ancestor(d, rel))
}

/// Majority vote of per-file architecture identification. Symlinks are not
/// followed, so each binary votes once.
pub fn vote_architecture(root: &Path) -> Result<ArchitectureGuess> {
    let walk = fsutil::walk(root)?;
    let tally = walk
        .files()
        .filter(|e| votes_for(&e.rel, e.executable))
        .collect::<Vec<_>>()
        .par_iter()
        .filter_map(|e| {
            let bytes = fsutil::read_prefix(&root.join(&e.rel), MAX_INSPECT).ok()?;
            detect_file_arch(&bytes)
        })
        .fold(ArchTally::new, |mut t, a| {
            t.add(a);
            t
        })
        .reduce(ArchTally::new, |mut a, b| {
            a.merge(&b);
            a
        });
    Ok(tally.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateArch {
    pub candidate_index: usize,
    pub root_rel_path: String,
    pub guess: ArchitectureGuess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchReport {
    pub firmware_id: String,
    pub candidates: Vec<CandidateArch>,
}

impl ArchReport {
    pub fn for_candidate(&self, index: usize) -> Option<&ArchitectureGuess> {
        self.candidates.iter().find(|c| c.candidate_index == index).map(|c| &c.guess)
    }
}

/// Vote on each candidate's original variant and write `arch.json`.
pub fn detect_architectures(ws: &Workspace, rootfs: &RootfsReport) -> Result<ArchReport> {
    let mut candidates = Vec::new();
    for index in 0..rootfs.candidate_count() {
        if let Some(c) = rootfs.variants_of(index).next() {
            candidates.push(CandidateArch {
                candidate_index: index,
                root_rel_path: c.root_rel_path.clone(),
                guess: vote_architecture(&c.materialized_path)?,
            });
        }
    }
    let report = ArchReport { firmware_id: rootfs.firmware_id.clone(), candidates };
    write_json(&ws.firmware_dir(&rootfs.firmware_id).join("arch.json"), &report)?;
    Ok(report)
}
