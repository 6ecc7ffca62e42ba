//! Slash-separated path helpers.
//!
//! Paths inside a root filesystem are carried as `/`-separated strings
//! relative to the root, without a leading slash; the root itself is `""`.

use alloc::string::String;
use alloc::vec::Vec;

pub fn basename(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// Parent directory, `""` for top-level entries and the root itself.
pub fn parent(path: &str) -> &str {
    match path.rfind('/') {
        Some(i) => &path[..i],
        None => "",
    }
}

/// Lowercased extension of the basename, without the dot.
pub fn extension(path: &str) -> Option<String> {
    let name = basename(path);
    let dot = name.rfind('.')?;
    if dot == 0 || dot + 1 == name.len() {
        return None;
    }
    Some(name[dot + 1..].to_ascii_lowercase())
}

/// Number of components (`""` has depth 0).
pub fn depth(path: &str) -> usize {
    if path.is_empty() {
        0
    } else {
        path.split('/').count()
    }
}

/// True when `ancestor` is a strict ancestor directory of `path`.
pub fn is_strict_ancestor(ancestor: &str, path: &str) -> bool {
    if ancestor == path {
        return false;
    }
    if ancestor.is_empty() {
        return !path.is_empty();
    }
    path.len() > ancestor.len()
        && path.starts_with(ancestor)
        && path.as_bytes()[ancestor.len()] == b'/'
}

/// True when `path` equals `dir` or lies beneath it.
pub fn is_within(dir: &str, path: &str) -> bool {
    dir == path || is_strict_ancestor(dir, path)
}

/// `path` relative to `dir`; `None` when it is not within `dir`.
pub fn strip_dir<'a>(dir: &str, path: &'a str) -> Option<&'a str> {
    if dir.is_empty() {
        return Some(path);
    }
    if path == dir {
        return Some("");
    }
    if is_strict_ancestor(dir, path) {
        Some(&path[dir.len() + 1..])
    } else {
        None
    }
}

pub fn join(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        String::from(name)
    } else if name.is_empty() {
        String::from(dir)
    } else {
        let mut s = String::with_capacity(dir.len() + 1 + name.len());
        s.push_str(dir);
        s.push('/');
        s.push_str(name);
        s
    }
}

/// Resolve `target` lexically. Absolute targets are taken from the root,
/// relative ones from `base_dir`. Returns `None` when `..` climbs above the
/// root.
pub fn resolve(base_dir: &str, target: &str) -> Option<String> {
    let mut parts: Vec<&str> = Vec::new();
    if !target.starts_with('/') {
        parts.extend(base_dir.split('/').filter(|c| !c.is_empty()));
    }
    for comp in target.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                parts.pop()?;
            }
            c => parts.push(c),
        }
    }
    Some(parts.join("/"))
}

/// Guest-absolute form (`/bin/sh`) of a root-relative path.
pub fn to_guest(path: &str) -> String {
    let mut s = String::with_capacity(path.len() + 1);
    s.push('/');
    s.push_str(path);
    s
}

/// Root-relative form of a guest-absolute path, normalized.
pub fn from_guest(path: &str) -> Option<String> {
    resolve("", path)
}
