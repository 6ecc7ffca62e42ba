//! Firmware selection: keep Linux-like images that carry a web interface.

use serde::{Deserialize, Serialize};

use crate::paths;
use crate::web::{ServerKind, CONFIG_NAMES};

/// Entries whose presence under a candidate root marks a Linux userland.
pub const LINUX_MARKERS: &[&str] = &["bin/sh", "bin/busybox", "sbin/init", "init", "linuxrc"];

/// Extensions counted as web content.
pub const WEB_CONTENT_EXTENSIONS: &[&str] = &["html", "shtml", "htm", "php", "asp", "cgi", "pl", "js"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionVerdict {
    pub is_linux_like: bool,
    pub has_web_server_binary: bool,
    pub has_web_config: bool,
    pub has_web_content: bool,
    pub selected: bool,
}

impl SelectionVerdict {
    pub fn new(
        is_linux_like: bool,
        has_web_server_binary: bool,
        has_web_config: bool,
        has_web_content: bool,
    ) -> Self {
        SelectionVerdict {
            is_linux_like,
            has_web_server_binary,
            has_web_config,
            has_web_content,
            selected: is_linux_like
                && (has_web_server_binary || has_web_config || has_web_content),
        }
    }
}

/// Incremental classifier fed with every file path of a tree. Feeding more
/// paths can only turn flags on.
#[derive(Debug, Clone, Default)]
pub struct SelectionScan {
    linux: bool,
    server: bool,
    config: bool,
    content: bool,
}

impl SelectionScan {
    pub fn new() -> Self {
        Self::default()
    }

    /// `rel` is a non-directory entry relative to the tree root.
    pub fn observe(&mut self, rel: &str) {
        let name = paths::basename(rel);
        if !self.linux && LINUX_MARKERS.iter().any(|m| is_marker_suffix(rel, m)) {
            self.linux = true;
        }
        if !self.server && ServerKind::from_binary_name(name).is_some() {
            self.server = true;
        }
        if !self.config && CONFIG_NAMES.contains(&name) {
            self.config = true;
        }
        if !self.content {
            if let Some(ext) = paths::extension(rel) {
                if WEB_CONTENT_EXTENSIONS.contains(&ext.as_str()) {
                    self.content = true;
                }
            }
        }
    }

    pub fn verdict(&self) -> SelectionVerdict {
        SelectionVerdict::new(self.linux, self.server, self.config, self.content)
    }
}

/// `rel` is `marker` placed under some directory of the tree ("any candidate
/// root").
fn is_marker_suffix(rel: &str, marker: &str) -> bool {
    rel == marker
        || (rel.len() > marker.len()
            && rel.ends_with(marker)
            && rel.as_bytes()[rel.len() - marker.len() - 1] == b'/')
}
