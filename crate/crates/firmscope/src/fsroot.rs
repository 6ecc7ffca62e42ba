//! Root filesystem candidates: detection, symlink repair, variants and
//! deterministic packing.

use std::fs;
use std::io::BufWriter;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};

use firmscope_core::paths;
use firmscope_core::rootfs::{
    select_candidates, sniff_link_text, LinkText, RepairReason, RootScore, ScoredDir, SymlinkRepair, Variant,
    LINK_TEXT_MAX, SHELL_ENTRIES,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::{self, EntryKind};
use crate::workspace::{read_json, write_json, Workspace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootFsCandidate {
    pub firmware_id: String,
    /// Position of the candidate directory in score order.
    pub candidate_index: usize,
    pub root_rel_path: String,
    pub score: u8,
    pub key_dirs: Vec<String>,
    pub key_files: Vec<String>,
    pub variant: Variant,
    /// Directory holding this variant's files.
    pub materialized_path: PathBuf,
    pub packed_path: Option<PathBuf>,
    /// Repairs found in the original tree; `applied` marks those baked into
    /// this variant.
    pub repairs: Vec<SymlinkRepair>,
}

impl RootFsCandidate {
    pub fn label(&self) -> String {
        format!("c{}-{}", self.candidate_index, self.variant.tag())
    }

    pub fn has_shell(&self) -> bool {
        SHELL_ENTRIES.iter().any(|s| fsutil::lexists(&self.materialized_path.join(s)))
    }
}

fn score_dir(root: &Path) -> RootScore {
    RootScore::compute(
        |d| {
            fsutil::guest_resolve(root, d)
                .map_or(false, |r| fs::metadata(root.join(r)).map_or(false, |m| m.is_dir()))
        },
        |f| fsutil::lexists(&root.join(f)),
    )
}

/// Every directory of the tree that scores at least 1, deduplicated and
/// ordered by descending score, then depth, then path.
pub fn scan_candidates(tree: &Path) -> Result<Vec<ScoredDir>> {
    let walk = fsutil::walk(tree)?;
    let mut dirs = vec![ScoredDir { rel_path: String::new(), score: score_dir(tree) }];
    for e in walk.dirs() {
        dirs.push(ScoredDir { rel_path: e.rel.clone(), score: score_dir(&tree.join(&e.rel)) });
    }
    Ok(select_candidates(&dirs))
}

/// Regular files whose whole content is a path, i.e. symlinks flattened by a
/// lossy unpacker. Nothing is modified.
pub fn detect_broken_symlinks(root: &Path) -> Result<Vec<SymlinkRepair>> {
    let walk = fsutil::walk(root)?;
    let mut out = Vec::new();
    for e in walk.files() {
        if e.len > LINK_TEXT_MAX as u64 + 2 {
            continue;
        }
        let Ok(content) = fs::read(root.join(&e.rel)) else { continue };
        match sniff_link_text(&content) {
            LinkText::No => {}
            LinkText::NotTextual(shown) => {
                out.push(SymlinkRepair::new(e.rel.clone(), shown, RepairReason::NotTextual));
            }
            LinkText::Path(target) => {
                let exists = paths::resolve(paths::parent(&e.rel), target)
                    .filter(|t| t != &e.rel && !t.is_empty())
                    .and_then(|t| fsutil::guest_existing(root, &t))
                    .is_some();
                let reason = if exists { RepairReason::TargetExists } else { RepairReason::TargetMissing };
                out.push(SymlinkRepair::new(e.rel.clone(), target.to_string(), reason));
            }
        }
    }
    Ok(out)
}

/// Replace every repairable file with a symlink to its content string.
pub fn apply_repairs(root: &Path, repairs: &mut [SymlinkRepair]) -> Result<()> {
    for r in repairs.iter_mut().filter(|r| r.is_repairable()) {
        let path = root.join(&r.path);
        fs::remove_file(&path).at(&path)?;
        symlink(&r.target, &path).at(&path)?;
        r.mark_applied();
    }
    Ok(())
}

/// Variants of a candidate: itself, plus one sanitized copy with every
/// repairable link restored when there is any. Variants are written below
/// `variants_dir` and packed into `rootfs_dir`.
pub fn generate_variants(candidate: &RootFsCandidate, variants_dir: &Path, rootfs_dir: &Path) -> Result<Vec<RootFsCandidate>> {
    let found = detect_broken_symlinks(&candidate.materialized_path)?;
    let mut base = candidate.clone();
    if base.repairs.is_empty() {
        base.repairs = found.clone();
    }
    base.packed_path = Some(pack_rootfs(&base, &rootfs_dir.join(format!("{}.tar", base.label())))?);
    let mut out = vec![base.clone()];
    if !found.iter().any(SymlinkRepair::is_repairable) {
        return Ok(out);
    }
    let next = match candidate.variant {
        Variant::Original => 1,
        Variant::Sanitized(k) => k.saturating_add(1),
    };
    let mut sanitized = base;
    sanitized.variant = Variant::Sanitized(next);
    let dir = variants_dir.join(sanitized.label());
    fsutil::remove_tree(&dir)?;
    fsutil::copy_tree(&candidate.materialized_path, &dir)?;
    let mut repairs = found;
    apply_repairs(&dir, &mut repairs)?;
    sanitized.repairs = repairs;
    sanitized.materialized_path = dir;
    sanitized.packed_path = Some(pack_rootfs(&sanitized, &rootfs_dir.join(format!("{}.tar", sanitized.label())))?);
    out.push(sanitized);
    Ok(out)
}

/// Pack a candidate into a tar archive with sorted entries, zero
/// timestamps and owners, and symlinks kept as links.
pub fn pack_rootfs(candidate: &RootFsCandidate, out: &Path) -> Result<PathBuf> {
    if candidate.score == 0 {
        return Err(Error::EmptyCandidate(candidate.label()));
    }
    pack_dir(&candidate.materialized_path, out)?;
    Ok(out.to_path_buf())
}

pub fn pack_dir(dir: &Path, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let walk = fsutil::walk(dir)?;
    let file = fs::File::create(out).at(out)?;
    let mut builder = tar::Builder::new(BufWriter::new(file));
    builder.mode(tar::HeaderMode::Deterministic);
    for e in &walk.entries {
        let src = dir.join(&e.rel);
        let mut header = tar::Header::new_gnu();
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        match e.kind {
            EntryKind::Dir => {
                header.set_entry_type(tar::EntryType::Directory);
                header.set_mode(0o755);
                header.set_size(0);
                builder.append_data(&mut header, format!("{}/", e.rel), std::io::empty()).at(out)?;
            }
            EntryKind::File => {
                header.set_entry_type(tar::EntryType::Regular);
                header.set_mode(if e.executable { 0o755 } else { 0o644 });
                header.set_size(e.len);
                let f = fs::File::open(&src).at(&src)?;
                builder.append_data(&mut header, &e.rel, f).at(out)?;
            }
            EntryKind::Symlink => {
                let target = fs::read_link(&src).at(&src)?;
                header.set_entry_type(tar::EntryType::Symlink);
                header.set_mode(0o777);
                header.set_size(0);
                builder.append_link(&mut header, &e.rel, &target).at(out)?;
            }
        }
    }
    builder.into_inner().at(out)?.into_inner().map_err(|e| e.into_error()).at(out)?;
    Ok(())
}

/// Unpack an archive produced by [`pack_dir`] into `dest`.
pub fn unpack(archive: &Path, dest: &Path) -> Result<()> {
    fs::create_dir_all(dest).at(dest)?;
    let file = fs::File::open(archive).at(archive)?;
    let mut ar = tar::Archive::new(file);
    ar.set_preserve_permissions(true);
    ar.set_preserve_mtime(false);
    ar.unpack(dest).at(dest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootfsReport {
    pub firmware_id: String,
    /// Every variant of every candidate, candidates in score order and
    /// Original before Sanitized.
    pub candidates: Vec<RootFsCandidate>,
}

impl RootfsReport {
    pub fn candidate_count(&self) -> usize {
        self.candidates.iter().map(|c| c.candidate_index + 1).max().unwrap_or(0)
    }

    pub fn variants_of(&self, index: usize) -> impl Iterator<Item = &RootFsCandidate> {
        self.candidates.iter().filter(move |c| c.candidate_index == index)
    }
}

pub const CANDIDATES_FILE: &str = "candidates.json";

/// Scan, sanitize and pack every candidate of an ingested firmware, and
/// write `rootfs/candidates.json`.
pub fn prepare_rootfs(ws: &Workspace, id: &str) -> Result<RootfsReport> {
    let tree = ws.tree_dir(id);
    let rootfs_dir = ws.rootfs_dir(id);
    fsutil::remove_tree(&rootfs_dir)?;
    let variants_dir = rootfs_dir.join("variants");
    let mut candidates = Vec::new();
    for (index, dir) in scan_candidates(&tree)?.into_iter().enumerate() {
        let original = RootFsCandidate {
            firmware_id: id.to_string(),
            candidate_index: index,
            score: dir.score.score(),
            key_dirs: dir.score.key_dirs.clone(),
            key_files: dir.score.key_files.clone(),
            materialized_path: if dir.rel_path.is_empty() { tree.clone() } else { tree.join(&dir.rel_path) },
            root_rel_path: dir.rel_path,
            variant: Variant::Original,
            packed_path: None,
            repairs: Vec::new(),
        };
        candidates.extend(generate_variants(&original, &variants_dir, &rootfs_dir)?);
    }
    let report = RootfsReport { firmware_id: id.to_string(), candidates };
    write_json(&rootfs_dir.join(CANDIDATES_FILE), &report)?;
    Ok(report)
}

pub fn load_rootfs(ws: &Workspace, id: &str) -> Result<RootfsReport> {
    read_json(&ws.rootfs_dir(id).join(CANDIDATES_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, content: &[u8]) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, content).unwrap();
    }

    fn candidate(dir: &Path, score: u8) -> RootFsCandidate {
        RootFsCandidate {
            firmware_id: "fw".into(),
            candidate_index: 0,
            root_rel_path: String::new(),
            score,
            key_dirs: vec![],
            key_files: vec![],
            variant: Variant::Original,
            materialized_path: dir.to_path_buf(),
            packed_path: None,
            repairs: vec![],
        }
    }

    #[test]
    fn single_rootfs_scores_five() {
        let t = tempfile::tempdir().unwrap();
        write(t.path(), "rootfs/bin/busybox", b"bb");
        for d in ["rootfs/etc", "rootfs/sbin", "rootfs/usr"] {
            fs::create_dir_all(t.path().join(d)).unwrap();
        }
        let c = scan_candidates(t.path()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].rel_path, "rootfs");
        assert_eq!(c[0].score.score(), 5);
    }

    #[test]
    fn upgrade_and_factory_roots() {
        let t = tempfile::tempdir().unwrap();
        for root in ["upgrade", "factory"] {
            write(t.path(), &format!("{root}/bin/sh"), b"x");
            for d in ["etc", "sbin", "usr"] {
                fs::create_dir_all(t.path().join(root).join(d)).unwrap();
            }
        }
        let c = scan_candidates(t.path()).unwrap();
        let names: Vec<&str> = c.iter().map(|d| d.rel_path.as_str()).collect();
        assert_eq!(names, vec!["factory", "upgrade"]);
    }

    #[test]
    fn loose_html_has_no_candidate() {
        let t = tempfile::tempdir().unwrap();
        write(t.path(), "index.html", b"<html>");
        write(t.path(), "about.html", b"<html>");
        assert!(scan_candidates(t.path()).unwrap().is_empty());
    }

    #[test]
    fn flattened_links_detected() {
        let t = tempfile::tempdir().unwrap();
        write(t.path(), "bin/busybox", b"\x7fELF\x01\x01");
        write(t.path(), "usr/bin/boa", b"/bin/busybox");
        write(t.path(), "bin/ls", b"/bin/busybox\n");
        write(t.path(), "bin/gone", b"/bin/missing");
        write(t.path(), "etc/banner", b"/ weird\x01bytes");
        let mut r = detect_broken_symlinks(t.path()).unwrap();
        r.sort_by(|a, b| a.path.cmp(&b.path));
        let summary: Vec<(&str, RepairReason, bool)> = r.iter().map(|x| (x.path.as_str(), x.reason, x.applied)).collect();
        assert_eq!(
            summary,
            vec![
                ("bin/gone", RepairReason::TargetMissing, false),
                ("bin/ls", RepairReason::TargetExists, false),
                ("etc/banner", RepairReason::NotTextual, false),
                ("usr/bin/boa", RepairReason::TargetExists, false),
            ]
        );
    }

    #[test]
    fn elf_not_flagged() {
        let t = tempfile::tempdir().unwrap();
        write(t.path(), "bin/ls", b"\x7fELF\x01\x01\x01");
        assert!(detect_broken_symlinks(t.path()).unwrap().is_empty());
    }

    #[test]
    fn variants_and_fixpoint() {
        let t = tempfile::tempdir().unwrap();
        let root = t.path().join("root");
        write(&root, "bin/busybox", b"\x7fELF");
        for rel in ["bin/sh", "bin/ls", "usr/bin/id"] {
            write(&root, rel, b"/bin/busybox");
        }
        let out = t.path().join("out");
        let vs = generate_variants(&candidate(&root, 3), &out.join("variants"), &out).unwrap();
        assert_eq!(vs.iter().map(|v| v.variant).collect::<Vec<_>>(), vec![Variant::Original, Variant::Sanitized(1)]);
        let san = &vs[1];
        let links = ["bin/sh", "bin/ls", "usr/bin/id"]
            .iter()
            .filter(|r| fs::symlink_metadata(san.materialized_path.join(r)).unwrap().file_type().is_symlink())
            .count();
        assert_eq!(links, 3);
        assert!(detect_broken_symlinks(&san.materialized_path).unwrap().iter().all(|r| !r.is_repairable()));
        let again = generate_variants(san, &out.join("variants"), &out).unwrap();
        assert_eq!(again.len(), 1);
    }

    #[test]
    fn no_repairs_means_original_only() {
        let t = tempfile::tempdir().unwrap();
        write(t.path(), "root/bin/busybox", b"\x7fELF");
        let vs = generate_variants(&candidate(&t.path().join("root"), 1), &t.path().join("v"), t.path()).unwrap();
        assert_eq!(vs.len(), 1);
    }

    #[test]
    fn packing_is_deterministic_and_keeps_links() {
        let t = tempfile::tempdir().unwrap();
        let root = t.path().join("root");
        write(&root, "bin/busybox", b"bb");
        symlink("/bin/busybox", root.join("bin/sh")).unwrap();
        let c = candidate(&root, 2);
        let a = pack_rootfs(&c, &t.path().join("a.tar")).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1100));
        fs::write(root.join("bin/busybox"), b"bb").unwrap();
        let b = pack_rootfs(&c, &t.path().join("b.tar")).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let dest = t.path().join("x");
        unpack(&a, &dest).unwrap();
        assert_eq!(fs::read_link(dest.join("bin/sh")).unwrap(), PathBuf::from("/bin/busybox"));
    }

    #[test]
    fn empty_candidate_rejected() {
        let t = tempfile::tempdir().unwrap();
        assert!(matches!(pack_rootfs(&candidate(t.path(), 0), &t.path().join("x.tar")), Err(Error::EmptyCandidate(_))));
    }
}
