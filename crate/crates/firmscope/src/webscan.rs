//! Web server heuristics over a root filesystem: server binaries, configs,
//! document roots, site maps, launch commands and HTTPS material.

use std::fs;
use std::path::Path;

use firmscope_core::paths;
use firmscope_core::web::{
    build_sitemap, discover_docroots, docroot_at, pair_config, parse_server_config, synthesize_launch_commands,
    DocRoot, DocRootOrigin, HttpsMaterial, ServerConfig, ServerKind, SiteMap,
};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsroot::RootfsReport;
use crate::fsutil::{self, EntryKind};
use crate::workspace::{write_json, Workspace};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebServerProfile {
    pub kind: ServerKind,
    pub binary_rel_path: String,
    pub config_rel_path: Option<String>,
    pub parsed: Option<ServerConfig>,
    pub launch_commands: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebAnalysis {
    pub profiles: Vec<WebServerProfile>,
    pub docroots: Vec<DocRoot>,
    pub sitemaps: Vec<SiteMap>,
    pub https: HttpsMaterial,
}

/// Files whose content is checked for PEM material, besides any small file.
const PEM_EXTENSIONS: &[&str] = &["pem", "crt", "key", "cer"];
const PEM_SCAN_LIMIT: u64 = 1024 * 1024;

/// Non-directory entries of the tree (files and symlinks), sorted.
fn file_list(root: &Path) -> Result<Vec<String>> {
    Ok(fsutil::walk(root)?.non_dirs().map(|e| e.rel.clone()).collect())
}

fn read_text(root: &Path, rel: &str) -> Option<String> {
    let host = fsutil::guest_existing(root, rel)?;
    fs::read(host).ok().map(|b| String::from_utf8_lossy(&b).into_owned())
}

/// Server binaries by basename, each paired with its conventional config.
pub fn find_web_servers(root: &Path, files: &[String], docroots: &[DocRoot]) -> Vec<WebServerProfile> {
    let guest_docroots: Vec<String> = docroots.iter().map(|d| paths::to_guest(&d.dir_rel_path)).collect();
    files
        .iter()
        .filter_map(|f| ServerKind::from_binary_name(paths::basename(f)).map(|k| (k, f)))
        .map(|(kind, binary)| {
            let configs: Vec<String> = match kind.config_name() {
                Some(name) => files.iter().filter(|f| paths::basename(f) == name).cloned().collect(),
                None => Vec::new(),
            };
            let config_rel_path = pair_config(binary, &configs).cloned();
            let parsed = config_rel_path
                .as_deref()
                .and_then(|c| read_text(root, c))
                .map(|text| parse_server_config(kind, &text));
            let launch_commands = synthesize_launch_commands(
                kind,
                &paths::to_guest(binary),
                config_rel_path.as_deref().map(paths::to_guest).as_deref(),
                &guest_docroots,
            );
            WebServerProfile { kind, binary_rel_path: binary.clone(), config_rel_path, parsed, launch_commands }
        })
        .collect()
}

/// Count certificates and private keys.
pub fn detect_https_material(root: &Path) -> Result<HttpsMaterial> {
    let mut material = HttpsMaterial::default();
    for e in fsutil::walk(root)?.files() {
        let pem_named = paths::extension(&e.rel).map_or(false, |x| PEM_EXTENSIONS.contains(&x.as_str()));
        if !pem_named && e.len > PEM_SCAN_LIMIT {
            continue;
        }
        if let Ok(bytes) = fsutil::read_prefix(&root.join(&e.rel), PEM_SCAN_LIMIT) {
            material.observe(&bytes);
        }
    }
    Ok(material)
}

/// Document roots named by parsed configs come first, then discovered
/// clusters that do not overlap them.
fn collect_docroots(root: &Path, files: &[String], configured: &[String]) -> Vec<DocRoot> {
    let mut out: Vec<DocRoot> = Vec::new();
    for guest_dir in configured {
        let Some(dir) = paths::from_guest(guest_dir) else { continue };
        let dir = fsutil::guest_resolve(root, &dir).unwrap_or(dir);
        if out.iter().any(|d| d.dir_rel_path == dir) {
            continue;
        }
        if let Some(d) = docroot_at(&dir, files, DocRootOrigin::FromConfig) {
            out.push(d);
        }
    }
    for d in discover_docroots(files) {
        let overlaps = out.iter().any(|o| {
            o.dir_rel_path == d.dir_rel_path
                || paths::is_strict_ancestor(&o.dir_rel_path, &d.dir_rel_path)
                || paths::is_strict_ancestor(&d.dir_rel_path, &o.dir_rel_path)
        });
        if !overlaps {
            out.push(d);
        }
    }
    out
}

pub fn analyze_web(root: &Path) -> Result<WebAnalysis> {
    let files = file_list(root)?;
    let regular: Vec<String> = fsutil::walk(root)?
        .entries
        .into_iter()
        .filter(|e| e.kind == EntryKind::File)
        .map(|e| e.rel)
        .collect();
    let preliminary = find_web_servers(root, &files, &[]);
    let configured: Vec<String> =
        preliminary.iter().filter_map(|p| p.parsed.as_ref()?.document_root.clone()).collect();
    let docroots = collect_docroots(root, &regular, &configured);
    let profiles = find_web_servers(root, &files, &docroots);
    let sitemaps = docroots.iter().map(|d| build_sitemap(d, &regular)).collect();
    Ok(WebAnalysis { profiles, docroots, sitemaps, https: detect_https_material(root)? })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateWeb {
    pub candidate_index: usize,
    pub root_rel_path: String,
    pub analysis: WebAnalysis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebReport {
    pub firmware_id: String,
    pub candidates: Vec<CandidateWeb>,
}

impl WebReport {
    pub fn for_candidate(&self, index: usize) -> Option<&WebAnalysis> {
        self.candidates.iter().find(|c| c.candidate_index == index).map(|c| &c.analysis)
    }
}

/// Analyze each candidate's original variant and write `web.json`.
pub fn analyze_firmware_web(ws: &Workspace, rootfs: &RootfsReport) -> Result<WebReport> {
    let mut candidates = Vec::new();
    for index in 0..rootfs.candidate_count() {
        if let Some(c) = rootfs.variants_of(index).next() {
            candidates.push(CandidateWeb {
                candidate_index: index,
                root_rel_path: c.root_rel_path.clone(),
                analysis: analyze_web(&c.materialized_path)?,
            });
        }
    }
    let report = WebReport { firmware_id: rootfs.firmware_id.clone(), candidates };
    write_json(&ws.firmware_dir(&rootfs.firmware_id).join("web.json"), &report)?;
    Ok(report)
}
