//! Hosted transplant: serve a firmware's document root from a web server on
//! the analysis host. Scripts run under host interpreters.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, UNIX_EPOCH};

use firmscope_core::arch::ArchId;
use firmscope_core::paths;
use firmscope_core::probe::MARKER_DIR;
use firmscope_core::snapshot::{FileEntry, Proto, Service};
use serde::{Deserialize, Serialize};

use super::httpd::{Handler, HttpServer, Request, Response};
use super::{Backend, BackendKind, EmulationPlan, ExecOutput, Guest};
use crate::error::{IoContext, Result};
use crate::fsutil::{self, EntryKind};

pub const HOSTED_BANNER: &str = "firmscope-hosted";
const CGI_TIMEOUT: Duration = Duration::from_secs(10);
const INDEX_NAMES: &[&str] = &["index.html", "index.htm", "index.shtml", "index.cgi", "index.php", "default.html"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShebangRewrite {
    pub path: String,
    pub from: String,
    pub to: String,
}

/// Result of copying a document root onto the host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostedSite {
    pub content_dir: PathBuf,
    pub rewritten: Vec<ShebangRewrite>,
    /// `.htaccess` files renamed to `.htaccess.disabled`.
    pub disabled: Vec<String>,
    /// Scripts left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Host interpreter for a guest interpreter path.
pub fn host_interpreter(guest_interp: &str) -> Option<PathBuf> {
    let base = paths::basename(guest_interp);
    let names: &[&str] = match base {
        "sh" | "ash" | "hush" | "dash" | "busybox" => &["sh"],
        "php" | "php-cgi" => &["php-cgi", "php"],
        "perl" | "microperl" => &["perl"],
        "lua" => &["lua"],
        other => return fsutil::which(other),
    };
    names.iter().find_map(|n| fsutil::which(n))
}

/// Interpreter and arguments of a `#!` line; `env` is looked through.
fn parse_shebang(line: &str) -> Option<(String, Vec<String>)> {
    let mut words = line.strip_prefix("#!")?.split_whitespace().map(str::to_string);
    let mut interp = words.next()?;
    let mut args: Vec<String> = words.collect();
    if paths::basename(&interp) == "env" && !args.is_empty() {
        interp = args.remove(0);
    }
    Some((interp, args))
}

/// Copy `docroot_rel` of the guest under `host_root/content`, resolving
/// symlinks the way the guest would, rewriting shebangs and disabling
/// `.htaccess` files.
pub fn hosted_transplant(guest_root: &Path, docroot_rel: &str, host_root: &Path) -> Result<HostedSite> {
    let content_dir = host_root.join("content");
    fsutil::remove_tree(&content_dir)?;
    fs::create_dir_all(&content_dir).at(&content_dir)?;
    let doc = fsutil::guest_resolve(guest_root, docroot_rel).unwrap_or_else(|| docroot_rel.to_string());
    let src = guest_root.join(&doc);
    let mut site = HostedSite { content_dir: content_dir.clone(), rewritten: Vec::new(), disabled: Vec::new(), skipped: Vec::new() };
    for e in fsutil::walk(&src)?.entries {
        let to = content_dir.join(&e.rel);
        let from = match e.kind {
            EntryKind::Dir => {
                fs::create_dir_all(&to).at(&to)?;
                continue;
            }
            EntryKind::File => src.join(&e.rel),
            EntryKind::Symlink => {
                match fsutil::guest_existing(guest_root, &paths::join(&doc, &e.rel)) {
                    Some(p) if p.is_file() => p,
                    _ => {
                        site.skipped.push((e.rel.clone(), "symlink does not resolve to a file".into()));
                        continue;
                    }
                }
            }
        };
        if let Some(parent) = to.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        if paths::basename(&e.rel) == ".htaccess" {
            let disabled = to.with_file_name(".htaccess.disabled");
            fs::copy(&from, &disabled).at(&disabled)?;
            site.disabled.push(e.rel.clone());
            continue;
        }
        let bytes = fs::read(&from).at(&from)?;
        if !bytes.starts_with(b"#!") {
            fs::write(&to, &bytes).at(&to)?;
            continue;
        }
        let text = String::from_utf8_lossy(&bytes);
        let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let Some((interp, args)) = parse_shebang(first.trim_end()) else {
            site.skipped.push((e.rel.clone(), "empty shebang".into()));
            continue;
        };
        let Some(host) = host_interpreter(&interp) else {
            log::warn!("hosted: no host interpreter for {interp}, skipping {}", e.rel);
            site.skipped.push((e.rel.clone(), format!("no host interpreter for {interp}")));
            continue;
        };
        let mut line = format!("#!{}", host.display());
        for a in &args {
            line.push(' ');
            line.push_str(a);
        }
        fs::write(&to, format!("{line}\n{rest}")).at(&to)?;
        fs::set_permissions(&to, fs::Permissions::from_mode(0o755)).at(&to)?;
        site.rewritten.push(ShebangRewrite { path: e.rel.clone(), from: first.to_string(), to: line });
    }
    Ok(site)
}

fn run_cgi(script: &Path, req: &Request, script_name: &str) -> Response {
    let mut cmd = Command::new(script);
    cmd.env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("GATEWAY_INTERFACE", "CGI/1.1")
        .env("SERVER_PROTOCOL", "HTTP/1.1")
        .env("SERVER_SOFTWARE", HOSTED_BANNER)
        .env("REQUEST_METHOD", &req.method)
        .env("QUERY_STRING", &req.query)
        .env("SCRIPT_NAME", script_name)
        .env("REMOTE_ADDR", "127.0.0.1")
        .env("CONTENT_LENGTH", req.body.len().to_string())
        .env("CONTENT_TYPE", req.header("content-type").unwrap_or(""));
    for (k, v) in &req.headers {
        cmd.env(format!("HTTP_{}", k.to_ascii_uppercase().replace('-', "_")), v);
    }
    if let Some(dir) = script.parent() {
        cmd.current_dir(dir);
    }
    let mut child = match cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::null()).spawn() {
        Ok(c) => c,
        Err(e) => return Response::html(500, format!("<h1>500</h1><pre>cannot run {script_name}: {e}</pre>")),
    };
    if let Some(mut stdin) = child.stdin.take() {
        let _ = stdin.write_all(&req.body);
    }
    let mut stdout = child.stdout.take().expect("piped");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let deadline = Instant::now() + CGI_TIMEOUT;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return Response::html(504, "<h1>504</h1>");
            }
        }
    }
    parse_cgi_output(&reader.join().unwrap_or_default())
}

/// Split CGI output into headers and body; `Status:` sets the code.
pub fn parse_cgi_output(raw: &[u8]) -> Response {
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .map(|p| (p, p + 4))
        .or_else(|| raw.windows(2).position(|w| w == b"\n\n").map(|p| (p, p + 2)));
    let Some((head_end, body_start)) = split else {
        return Response::html(502, "<h1>502</h1><p>malformed CGI response</p>");
    };
    let head = String::from_utf8_lossy(&raw[..head_end]);
    let mut status = 200;
    let mut headers = Vec::new();
    for line in head.lines() {
        let Some((k, v)) = line.split_once(':') else { continue };
        let (k, v) = (k.trim(), v.trim());
        if k.eq_ignore_ascii_case("status") {
            status = v.split_whitespace().next().and_then(|s| s.parse().ok()).unwrap_or(200);
        } else {
            if k.eq_ignore_ascii_case("location") && status == 200 {
                status = 302;
            }
            headers.push((k.to_string(), v.to_string()));
        }
    }
    Response { status, headers, body: raw[body_start..].to_vec() }
}

fn serve(content: &Path, req: &Request) -> Response {
    let Some(rel) = paths::resolve("", req.path.trim_start_matches('/')) else {
        return Response::html(403, "<h1>403 Forbidden</h1>");
    };
    let mut host = content.join(&rel);
    if host.is_dir() {
        match INDEX_NAMES.iter().map(|n| host.join(n)).find(|p| p.is_file()) {
            Some(p) => host = p,
            None => return Response::html(404, "<h1>404 Not Found</h1>"),
        }
    }
    let Ok(bytes) = fs::read(&host) else { return Response::html(404, "<h1>404 Not Found</h1>") };
    let executable = fs::metadata(&host).map_or(false, |m| m.permissions().mode() & 0o111 != 0);
    if bytes.starts_with(b"#!") && executable {
        return run_cgi(&host, req, &format!("/{rel}"));
    }
    let ctype = match paths::extension(&rel).as_deref() {
        Some("html" | "htm" | "shtml") => "text/html",
        Some("css") => "text/css",
        Some("js") => "application/javascript",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    };
    Response::new(200, ctype, bytes)
}

pub struct HostedGuest {
    host_root: PathBuf,
    site: Option<HostedSite>,
    marker_prefix: String,
    server: Option<HttpServer>,
}

impl HostedGuest {
    pub fn site(&self) -> Option<&HostedSite> {
        self.site.as_ref()
    }

    fn marker_files(&self) -> Vec<PathBuf> {
        let Ok(dir) = fs::read_dir(MARKER_DIR) else { return Vec::new() };
        let mut out: Vec<PathBuf> = dir
            .filter_map(|e| e.ok())
            .filter(|e| !self.marker_prefix.is_empty() && e.file_name().to_string_lossy().starts_with(&self.marker_prefix))
            .map(|e| e.path())
            .collect();
        out.sort();
        out
    }
}

impl Guest for HostedGuest {
    fn root(&self) -> &Path {
        self.site.as_ref().map_or(&self.host_root, |s| &s.content_dir)
    }

    fn chroot_capable(&self) -> bool {
        false
    }

    fn exec(&mut self, _arch: ArchId, command: &str, _timeout: Duration) -> ExecOutput {
        ExecOutput::fail(127, format!("hosted: no chroot to run {command}"))
    }

    fn launch(&mut self, _arch: ArchId, command: &str, _timeout: Duration) -> ExecOutput {
        let Some(site) = &self.site else {
            return ExecOutput::fail(1, "hosted: no document root to transplant");
        };
        if self.server.is_some() {
            return ExecOutput::ok(format!("hosted: already serving ({command} ignored)"));
        }
        let content = site.content_dir.clone();
        let handler: Handler = Arc::new(move |r: &Request| serve(&content, r).with_header("Server", HOSTED_BANNER));
        match HttpServer::start(handler) {
            Ok(s) => {
                let msg = format!(
                    "hosted: serving {} at http://{}/ ({} shebangs rewritten, {} skipped)",
                    site.content_dir.display(),
                    s.addr(),
                    site.rewritten.len(),
                    site.skipped.len()
                );
                self.server = Some(s);
                ExecOutput::ok(msg)
            }
            Err(e) => ExecOutput::fail(1, format!("hosted: can't bind: {e}")),
        }
    }

    fn forwarded(&self, _guest_port: u16) -> Option<SocketAddr> {
        self.server.as_ref().map(HttpServer::addr)
    }

    fn settled(&self) -> bool {
        true
    }

    fn services(&mut self) -> Vec<Service> {
        match &self.server {
            Some(s) => vec![Service { proto: Proto::TCP, port: s.addr().port(), program: HOSTED_BANNER.into() }],
            None => Vec::new(),
        }
    }

    /// Marker files scripts created in the host `/tmp`.
    fn extra_manifest(&self) -> BTreeMap<String, FileEntry> {
        self.marker_files()
            .into_iter()
            .filter_map(|p| {
                let meta = fs::metadata(&p).ok()?;
                let mtime = meta.modified().ok()?.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64);
                let hash = fsutil::sha256_file(&p).ok()?;
                let name = p.file_name()?.to_string_lossy().into_owned();
                Some((format!("{MARKER_DIR}/{name}"), FileEntry { size: meta.len(), mtime, content_hash: hash }))
            })
            .collect()
    }

    fn stop(&mut self) {
        if let Some(mut s) = self.server.take() {
            s.shutdown();
        }
        for p in self.marker_files() {
            let _ = fs::remove_file(p);
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HostedBackend;

impl Backend for HostedBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::HostedTransplant
    }

    fn supports(&self, _arch: ArchId) -> bool {
        true
    }

    fn prepare(&self, plan: &EmulationPlan, guest_dir: &Path, marker_prefix: &str) -> Result<Box<dyn Guest>> {
        let host_root = guest_dir.parent().unwrap_or(guest_dir).join("hosted");
        let site = match plan.docroots.first() {
            Some(d) => Some(hosted_transplant(guest_dir, &d.dir_rel_path, &host_root)?),
            None => None,
        };
        fs::create_dir_all(&host_root).at(&host_root)?;
        Ok(Box::new(HostedGuest { host_root, site, marker_prefix: marker_prefix.to_string(), server: None }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(root: &Path, rel: &str, bytes: &[u8]) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }

    #[test]
    fn shebang_parsing() {
        assert_eq!(parse_shebang("#!/bin/sh"), Some(("/bin/sh".into(), vec![])));
        assert_eq!(parse_shebang("#!/usr/bin/env perl -w"), Some(("perl".into(), vec!["-w".into()])));
        assert_eq!(parse_shebang("#!"), None);
    }

    #[test]
    fn transplant_rewrites_and_disables() {
        let g = tempfile::tempdir().unwrap();
        let h = tempfile::tempdir().unwrap();
        put(g.path(), "www/index.html", b"<html>hi</html>");
        put(g.path(), "www/.htaccess", b"deny from all");
        put(g.path(), "www/cgi-bin/t.cgi", b"#!/bin/ash\necho\n");
        put(g.path(), "www/x.pl", b"#!/usr/bin/nonexistent-interp\n");
        let site = hosted_transplant(g.path(), "www", h.path()).unwrap();
        let c = &site.content_dir;
        assert_eq!(fs::read(c.join("index.html")).unwrap(), b"<html>hi</html>");
        assert!(c.join(".htaccess.disabled").exists() && !c.join(".htaccess").exists());
        let sh = fsutil::which("sh").unwrap();
        let script = fs::read_to_string(c.join("cgi-bin/t.cgi")).unwrap();
        assert!(script.starts_with(&format!("#!{}\n", sh.display())));
        assert_eq!(site.skipped.len(), 1);
        assert!(!c.join("x.pl").exists());
    }

    #[test]
    fn cgi_output_parsing() {
        let r = parse_cgi_output(b"Status: 404 Not Found\nContent-Type: text/plain\n\nnope");
        assert_eq!((r.status, r.body.as_slice()), (404, &b"nope"[..]));
        let r = parse_cgi_output(b"Location: /x\r\n\r\n");
        assert_eq!(r.status, 302);
    }

    #[test]
    fn serves_real_cgi() {
        let g = tempfile::tempdir().unwrap();
        let h = tempfile::tempdir().unwrap();
        put(g.path(), "www/cgi-bin/q.cgi", b"#!/bin/sh\nprintf 'Content-Type: text/plain\\n\\n%s' \"$QUERY_STRING\"\n");
        let site = hosted_transplant(g.path(), "www", h.path()).unwrap();
        let mut guest = HostedGuest { host_root: h.path().into(), site: Some(site), marker_prefix: String::new(), server: None };
        assert_eq!(guest.launch(ArchId::UNKNOWN, "x", Duration::from_secs(1)).exit_code, 0);
        let addr = guest.forwarded(80).unwrap();
        let body = ureq::get(&format!("http://{addr}/cgi-bin/q.cgi?a=1")).call().unwrap().into_string().unwrap();
        assert_eq!(body, "a=1");
        guest.stop();
    }
}
