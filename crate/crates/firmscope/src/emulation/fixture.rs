//! Deterministic in-process backend.
//!
//! Guest programs are simulated: ELF files carry `FSCOPE-FIXTURE: key=value`
//! directives in their padding, shell scripts are interpreted line by line,
//! and web servers become [`HttpServer`]s serving the guest document root.
//! Architecture checks use the real ELF header, so a binary built for the
//! wrong CPU fails exactly like under a real chroot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use firmscope_core::arch::{detect_file_arch, ArchId, ELF_MAGIC};
use firmscope_core::paths;
use firmscope_core::snapshot::{parse_proc_net, Proto, Service};
use firmscope_core::web::{parse_server_config, ServerKind};

use super::httpd::{html_escape, Handler, HttpServer, Request, Response};
use super::{Backend, BackendKind, EmulationPlan, ExecOutput, Guest};
use crate::error::Result;
use crate::fsutil;

/// Tag preceding each directive embedded in a fixture ELF.
pub const DIRECTIVE_TAG: &str = "FSCOPE-FIXTURE: ";

/// Script comment that registers a listening service when the line runs.
pub const SERVICE_LINE: &str = "# fixture-service:";
/// Script comment that never returns.
pub const HANG_LINE: &str = "# fixture-hang";
/// Script comment selecting the simulated CGI behaviour.
pub const APP_LINE: &str = "# fixture-app:";

const PATH_DIRS: &[&str] = &["bin", "sbin", "usr/bin", "usr/sbin"];
const MAX_DEPTH: usize = 8;
const INDEX_NAMES: &[&str] = &["index.html", "index.htm", "index.shtml", "index.cgi", "index.php", "index.asp", "default.html"];
const SCRIPT_EXTENSIONS: &[&str] = &["cgi", "sh", "pl", "php", "asp"];

/// `key=value` directives found in a binary, in order.
pub fn directives(bytes: &[u8]) -> Vec<(String, String)> {
    let tag = DIRECTIVE_TAG.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + tag.len() <= bytes.len() {
        if &bytes[i..i + tag.len()] == tag {
            let start = i + tag.len();
            let end = bytes[start..].iter().position(|b| *b == b'\n' || *b == 0).map_or(bytes.len(), |p| start + p);
            let text = String::from_utf8_lossy(&bytes[start..end]).into_owned();
            let (k, v) = text.split_once('=').unwrap_or((text.as_str(), ""));
            out.push((k.trim().to_string(), v.to_string()));
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

fn directive<'a>(d: &'a [(String, String)], key: &str) -> Option<&'a str> {
    d.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn default_banner(kind: ServerKind) -> Option<&'static str> {
    match kind {
        ServerKind::Boa => Some("Boa/0.94.14rc21"),
        ServerKind::Lighttpd => Some("lighttpd/1.4.35"),
        ServerKind::Thttpd => Some("thttpd/2.25b 29dec2003"),
        ServerKind::Minihttpd => Some("mini_httpd/1.19 19dec2003"),
        ServerKind::Httpd => Some("httpd"),
        ServerKind::Goahead | ServerKind::Webs => Some("GoAhead-Webs"),
        ServerKind::Unknown => None,
    }
}

type ServiceTable = Arc<Mutex<BTreeSet<Service>>>;

/// What a resolved program turned out to be.
enum Program {
    Elf { guest: String, bytes: Vec<u8> },
    Script { guest: String, text: String },
    Other { guest: String },
}

/// The simulated userland: resolves programs inside the guest root and runs
/// them.
#[derive(Clone)]
struct Vm {
    root: PathBuf,
    arch: ArchId,
    services: ServiceTable,
}

impl Vm {
    fn lookup(&self, name: &str) -> Option<Program> {
        let candidates: Vec<String> = if name.contains('/') {
            vec![paths::from_guest(name).unwrap_or_else(|| name.trim_start_matches("./").to_string())]
        } else {
            PATH_DIRS.iter().map(|d| paths::join(d, name)).collect()
        };
        for rel in candidates {
            let Some(resolved) = fsutil::guest_resolve(&self.root, &rel) else { continue };
            let host = self.root.join(&resolved);
            if !host.is_file() {
                continue;
            }
            let bytes = fs::read(&host).ok()?;
            let guest = paths::to_guest(&rel);
            return Some(if bytes.starts_with(&ELF_MAGIC) {
                Program::Elf { guest, bytes }
            } else if bytes.starts_with(b"#!") {
                Program::Script { guest, text: String::from_utf8_lossy(&bytes).into_owned() }
            } else {
                Program::Other { guest }
            });
        }
        None
    }

    fn exec_format(guest: &str) -> ExecOutput {
        ExecOutput::fail(126, format!("chroot: failed to run command '{guest}': Exec format error"))
    }

    fn run_argv(&self, argv: &[String], depth: usize) -> ExecOutput {
        let Some(name) = argv.first() else { return ExecOutput::ok("") };
        if depth > MAX_DEPTH {
            return ExecOutput::fail(126, format!("{name}: too many levels of interpreters"));
        }
        match self.lookup(name) {
            None => ExecOutput::fail(127, format!("sh: {name}: not found")),
            Some(Program::Other { guest }) => Self::exec_format(&guest),
            Some(Program::Script { guest, text }) => {
                let first = text.lines().next().unwrap_or("");
                let mut interp: Vec<String> = first[2..].split_whitespace().map(str::to_string).collect();
                if interp.is_empty() {
                    return Self::exec_format(&guest);
                }
                interp.push(guest);
                interp.extend(argv[1..].iter().cloned());
                self.run_argv(&interp, depth + 1)
            }
            Some(Program::Elf { guest, bytes }) => {
                if let Some(a) = detect_file_arch(&bytes) {
                    if a != self.arch {
                        return Self::exec_format(&guest);
                    }
                }
                let d = directives(&bytes);
                let base = paths::basename(name).to_string();
                let (applet, args) = match directive(&d, "applet") {
                    Some("busybox") if base == "busybox" => match argv.get(1) {
                        Some(a) => (a.clone(), &argv[2..]),
                        None => return ExecOutput::ok("BusyBox v1.19.4 multi-call binary."),
                    },
                    Some("busybox") | None => (base, &argv[1..]),
                    Some(other) => (other.to_string(), &argv[1..]),
                };
                self.run_applet(&applet, args, &d, depth)
            }
        }
    }

    fn run_applet(&self, applet: &str, args: &[String], d: &[(String, String)], depth: usize) -> ExecOutput {
        if directive(d, "hang").is_some() {
            return ExecOutput::hung("");
        }
        let mut out = match applet {
            "sh" | "ash" | "bash" | "dash" | "hush" => match args.first().map(String::as_str) {
                Some("-c") => self.run_script(args.get(1).map_or("", String::as_str), depth + 1),
                Some(path) => match fsutil::guest_existing(&self.root, &paths::from_guest(path).unwrap_or_default())
                    .and_then(|p| fs::read_to_string(p).ok())
                {
                    Some(text) => self.run_script(&text, depth + 1),
                    None => ExecOutput::fail(2, format!("sh: can't open '{path}'")),
                },
                None => ExecOutput::ok(""),
            },
            "echo" => ExecOutput::ok(args.join(" ")),
            "touch" => self.touch(args),
            "init" | "linuxrc" => match fsutil::guest_existing(&self.root, "etc/init.d/rcS") {
                Some(_) => self.run_argv(&["/etc/init.d/rcS".to_string()], depth + 1),
                None => ExecOutput::fail(1, "init: can't open /etc/inittab: No such file or directory"),
            },
            "false" => ExecOutput::fail(1, ""),
            _ => ExecOutput::ok(""),
        };
        if let Some(text) = directive(d, "output") {
            out.output = if out.output.is_empty() { text.to_string() } else { format!("{text}\n{}", out.output) };
        }
        if let Some(code) = directive(d, "exit").and_then(|c| c.parse().ok()) {
            out.exit_code = code;
        }
        out
    }

    fn touch(&self, args: &[String]) -> ExecOutput {
        for a in args.iter().filter(|a| !a.starts_with('-')) {
            let Some(rel) = paths::from_guest(a) else { continue };
            let parent = paths::parent(&rel);
            let Some(dir) = fsutil::guest_resolve(&self.root, parent) else {
                return ExecOutput::fail(1, format!("touch: {a}: No such file or directory"));
            };
            let host = self.root.join(paths::join(&dir, paths::basename(&rel)));
            if OpenOptions::new().create(true).append(true).open(&host).is_err() {
                return ExecOutput::fail(1, format!("touch: {a}: Permission denied"));
            }
        }
        ExecOutput::ok("")
    }

    /// Interpret a shell script. `;` separates commands; only `exit` and a
    /// few builtins are understood, everything else runs as a program.
    fn run_script(&self, text: &str, depth: usize) -> ExecOutput {
        let mut lines_out: Vec<String> = Vec::new();
        let mut status = 0;
        for raw in text.lines() {
            let line = raw.trim();
            if let Some(spec) = line.strip_prefix(SERVICE_LINE) {
                self.register_service(spec);
                continue;
            }
            if line.starts_with(HANG_LINE) {
                return ExecOutput { exit_code: -1, output: lines_out.join("\n"), timed_out: true };
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for segment in line.split(';') {
                let segment = segment.trim().trim_end_matches('&').trim();
                let Some(argv) = shlex::split(segment) else {
                    lines_out.push(format!("sh: syntax error: {segment}"));
                    status = 2;
                    continue;
                };
                let Some(cmd) = argv.first() else { continue };
                let r = match cmd.as_str() {
                    "exit" => {
                        let code = argv.get(1).and_then(|c| c.parse().ok()).unwrap_or(status);
                        return ExecOutput { exit_code: code, output: lines_out.join("\n"), timed_out: false };
                    }
                    "echo" => ExecOutput::ok(argv[1..].join(" ")),
                    ":" | "true" | "export" | "cd" | "[" | "test" => ExecOutput::ok(""),
                    _ => self.run_argv(&argv, depth),
                };
                if !r.output.is_empty() {
                    lines_out.push(r.output);
                }
                if r.timed_out {
                    return ExecOutput { exit_code: -1, output: lines_out.join("\n"), timed_out: true };
                }
                status = r.exit_code;
            }
        }
        ExecOutput { exit_code: status, output: lines_out.join("\n"), timed_out: false }
    }

    /// `tcp 23 telnetd`
    fn register_service(&self, spec: &str) {
        let parts: Vec<&str> = spec.split_whitespace().collect();
        let proto = match parts.first().map(|p| p.to_ascii_lowercase()) {
            Some(p) if p == "tcp" => Proto::TCP,
            Some(p) if p == "udp" => Proto::UDP,
            _ => return,
        };
        let (Some(port), Some(program)) = (parts.get(1).and_then(|p| p.parse().ok()), parts.get(2)) else { return };
        self.services.lock().unwrap().insert(Service { proto, port, program: program.to_string() });
    }
}

/// Simulated CGI behaviours, selected by a `# fixture-app:` line.
#[derive(Debug, Clone, PartialEq, Eq)]
enum App {
    /// Splits the parameter on `;` and runs the tail through the shell;
    /// pipes, backticks and `$` are rejected.
    CmdInject(String),
    /// Treats the parameter as a single quoted argument.
    CmdSafe(String),
    Echo(String),
    EchoEscaped(String),
    /// Writes the parameter into a guest file.
    Save(String, String),
    /// Fails with a leaking error page.
    Error,
    Static,
}

fn parse_app(text: &str) -> App {
    let Some(line) = text.lines().find_map(|l| l.trim().strip_prefix(APP_LINE)) else { return App::Static };
    let mut words = line.split_whitespace();
    let kind = words.next().unwrap_or("");
    let opts: BTreeMap<&str, &str> = words.filter_map(|w| w.split_once('=')).collect();
    let param = opts.get("param").copied().unwrap_or("q").to_string();
    match kind {
        "cmd-inject" => App::CmdInject(param),
        "cmd-safe" => App::CmdSafe(param),
        "echo" => App::Echo(param),
        "echo-escaped" => App::EchoEscaped(param),
        "save" => App::Save(param, opts.get("file").copied().unwrap_or("/tmp/saved.conf").to_string()),
        "error" => App::Error,
        _ => App::Static,
    }
}

fn content_type(rel: &str) -> &'static str {
    match paths::extension(rel).as_deref() {
        Some("html" | "htm" | "shtml" | "asp" | "php" | "cgi" | "sh" | "pl") => "text/html",
        Some("css") => "text/css",
        Some("js") => "application/javascript",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

struct Site {
    vm: Vm,
    docroot: String,
    banner: Option<String>,
    access_log: String,
}

impl Site {
    fn handle(&self, req: &Request) -> Response {
        let resp = self.route(req);
        let resp = match &self.banner {
            Some(b) => resp.with_header("Server", b),
            None => resp,
        };
        self.log(req, resp.status);
        resp
    }

    fn log(&self, req: &Request, status: u16) {
        let host = self.vm.root.join(&self.access_log);
        if let Some(dir) = host.parent() {
            let _ = fs::create_dir_all(dir);
        }
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(host) {
            let q = if req.query.is_empty() { String::new() } else { format!("?{}", req.query) };
            let _ = writeln!(f, "{} {}{} {}", req.method, req.path, q, status);
        }
    }

    fn route(&self, req: &Request) -> Response {
        if !matches!(req.method.as_str(), "GET" | "POST" | "HEAD") {
            return Response::html(405, "<h1>405 Method Not Allowed</h1>");
        }
        let Some(rel) = paths::resolve("", req.path.trim_start_matches('/')) else {
            return Response::html(403, "<h1>403 Forbidden</h1>");
        };
        let guest_rel = paths::join(&self.docroot, &rel);
        let Some(resolved) = fsutil::guest_resolve(&self.vm.root, &guest_rel) else {
            return Response::html(404, "<h1>404 Not Found</h1>");
        };
        let mut file_rel = resolved.clone();
        if self.vm.root.join(&resolved).is_dir() {
            match INDEX_NAMES.iter().map(|n| paths::join(&resolved, n)).find(|p| self.vm.root.join(p).is_file()) {
                Some(p) => file_rel = p,
                None => return Response::html(404, "<h1>404 Not Found</h1>"),
            }
        }
        let host = self.vm.root.join(&file_rel);
        let Ok(bytes) = fs::read(&host) else { return Response::html(404, "<h1>404 Not Found</h1>") };
        let is_script = paths::extension(&file_rel).map_or(false, |x| SCRIPT_EXTENSIONS.contains(&x.as_str()));
        if !is_script {
            return Response::new(200, content_type(&file_rel), bytes);
        }
        self.run_app(req, &paths::to_guest(&file_rel), &String::from_utf8_lossy(&bytes))
    }

    fn run_app(&self, req: &Request, script: &str, text: &str) -> Response {
        let value = |p: &str| req.param(p).unwrap_or_default();
        let page = |title: &str, body: String| {
            Response::html(200, format!("<html><head><title>{title}</title></head><body>{body}</body></html>"))
        };
        match parse_app(text) {
            App::Static => page("ok", String::new()),
            App::CmdInject(p) => {
                let v = value(&p);
                if v.contains(['|', '`', '$']) {
                    return page("ping", "<p>invalid characters in address</p>".into());
                }
                let mut parts = v.split(';');
                let host = parts.next().unwrap_or("").trim().to_string();
                let mut out = format!("PING {host}: 56 data bytes");
                for cmd in parts.map(str::trim).filter(|c| !c.is_empty()) {
                    let r = self.vm.run_script(cmd, 1);
                    if !r.output.is_empty() {
                        out.push('\n');
                        out.push_str(&r.output);
                    }
                }
                page("ping", format!("<pre>{}</pre>", html_escape(&out)))
            }
            App::CmdSafe(p) => {
                let v = value(&p);
                page("ping", format!("<pre>{}</pre>", html_escape(&format!("ping: unknown host {v}"))))
            }
            App::Echo(p) => page("search", format!("<p>Results for {}</p>", value(&p))),
            App::EchoEscaped(p) => page("search", format!("<p>Results for {}</p>", html_escape(&value(&p)))),
            App::Save(p, file) => {
                if let Some(rel) = paths::from_guest(&file) {
                    if let Some(dir) = fsutil::guest_resolve(&self.vm.root, paths::parent(&rel)) {
                        let _ = fs::write(self.vm.root.join(paths::join(&dir, paths::basename(&rel))), value(&p));
                    }
                }
                page("saved", "<p>settings saved</p>".into())
            }
            App::Error => Response::html(
                500,
                format!("<h1>500</h1><pre>Fatal error: cannot open /var/run/app.pid in {script} on line 12</pre>"),
            ),
        }
    }
}

/// Options a simulated server picks out of its command line.
#[derive(Debug, Default)]
struct LaunchArgs {
    config: Option<String>,
    docroot: Option<String>,
    port: Option<u16>,
}

fn parse_launch_args(args: &[String]) -> LaunchArgs {
    let mut out = LaunchArgs::default();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "-f" | "-c" => out.config = it.next().cloned(),
            "-d" | "-h" => out.docroot = it.next().cloned(),
            "-p" => out.port = it.next().and_then(|p| p.parse().ok()),
            _ => {}
        }
    }
    out
}

pub struct FixtureGuest {
    vm: Vm,
    servers: Vec<(u16, HttpServer)>,
}

impl FixtureGuest {
    pub fn new(root: &Path) -> Self {
        FixtureGuest {
            vm: Vm { root: root.to_path_buf(), arch: ArchId::UNKNOWN, services: Arc::default() },
            servers: Vec::new(),
        }
    }

    /// The guest's `/proc/net/tcp` and `/proc/net/udp` as text, with an
    /// inode per service.
    fn proc_net(&self) -> (String, String, BTreeMap<u64, String>) {
        let header = "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n";
        let (mut tcp, mut udp) = (header.to_string(), header.to_string());
        let mut inodes = BTreeMap::new();
        for (i, s) in self.vm.services.lock().unwrap().iter().enumerate() {
            let inode = 4000 + i as u64;
            inodes.insert(inode, s.program.clone());
            let (table, state) = match s.proto {
                Proto::TCP => (&mut tcp, "0A"),
                Proto::UDP => (&mut udp, "07"),
            };
            table.push_str(&format!(
                "{i:4}: 00000000:{:04X} 00000000:0000 {state} 00000000:00000000 00:00000000 00000000     0        0 {inode} 1 0000000000000000 100 0 0 10 0\n",
                s.port
            ));
        }
        (tcp, udp, inodes)
    }

    fn start_server(&mut self, arch: ArchId, applet: &str, kind: ServerKind, args: &[String], d: &[(String, String)]) -> ExecOutput {
        let launch = parse_launch_args(args);
        let mut docroot = launch.docroot.clone();
        let mut port = launch.port;
        if let Some(cfg) = &launch.config {
            let text = paths::from_guest(cfg)
                .and_then(|rel| fsutil::guest_existing(&self.vm.root, &rel))
                .and_then(|p| fs::read_to_string(p).ok());
            let Some(text) = text else {
                return ExecOutput::fail(1, format!("{applet}: Couldn't open config file {cfg}: No such file or directory"));
            };
            let parsed = parse_server_config(kind, &text);
            docroot = docroot.or(parsed.document_root);
            port = port.or(parsed.port);
        }
        let docroot = docroot.unwrap_or_else(|| "/www".to_string());
        let Some(doc_rel) = paths::from_guest(&docroot).and_then(|r| fsutil::guest_resolve(&self.vm.root, &r)) else {
            return ExecOutput::fail(1, format!("{applet}: document root {docroot}: No such file or directory"));
        };
        if !self.vm.root.join(&doc_rel).is_dir() {
            return ExecOutput::fail(1, format!("{applet}: document root {docroot}: No such file or directory"));
        }
        let port = port.unwrap_or(80);
        if self.servers.iter().any(|(p, _)| *p == port) {
            return ExecOutput::fail(1, format!("{applet}: bind: Address already in use"));
        }
        let banner = match directive(d, "banner") {
            Some("") => None,
            Some(b) => Some(b.to_string()),
            None => default_banner(kind).map(str::to_string),
        };
        let site = Site {
            vm: Vm { arch, ..self.vm.clone() },
            docroot: doc_rel,
            banner,
            access_log: format!("var/log/{applet}-access.log"),
        };
        let handler: Handler = Arc::new(move |r: &Request| site.handle(r));
        match HttpServer::start(handler) {
            Ok(server) => {
                self.servers.push((port, server));
                self.vm.services.lock().unwrap().insert(Service { proto: Proto::TCP, port, program: applet.to_string() });
                ExecOutput::ok(format!("{applet}: serving {docroot} on port {port}"))
            }
            Err(e) => ExecOutput::fail(1, format!("{applet}: can't bind: {e}")),
        }
    }
}

impl Guest for FixtureGuest {
    fn root(&self) -> &Path {
        &self.vm.root
    }

    fn exec(&mut self, arch: ArchId, command: &str, _timeout: Duration) -> ExecOutput {
        self.vm.arch = arch;
        match shlex::split(command) {
            Some(argv) => self.vm.run_argv(&argv, 0),
            None => ExecOutput::fail(2, format!("sh: syntax error: {command}")),
        }
    }

    fn launch(&mut self, arch: ArchId, command: &str, timeout: Duration) -> ExecOutput {
        self.vm.arch = arch;
        let Some(argv) = shlex::split(command).filter(|a| !a.is_empty()) else {
            return ExecOutput::fail(2, format!("sh: syntax error: {command}"));
        };
        let Some(Program::Elf { guest, bytes }) = self.vm.lookup(&argv[0]) else {
            return self.exec(arch, command, timeout);
        };
        if detect_file_arch(&bytes).map_or(false, |a| a != arch) {
            return Vm::exec_format(&guest);
        }
        let d = directives(&bytes);
        let applet = match directive(&d, "applet") {
            Some("busybox") | None => paths::basename(&argv[0]).to_string(),
            Some(a) => a.to_string(),
        };
        let Some(kind) = ServerKind::from_binary_name(&applet) else {
            return self.exec(arch, command, timeout);
        };
        if directive(&d, "hang").is_some() {
            return ExecOutput::hung("");
        }
        let errors: Vec<&str> = d.iter().filter(|(k, _)| k == "web-error").map(|(_, v)| v.as_str()).collect();
        if !errors.is_empty() {
            return ExecOutput::fail(1, errors.join("\n"));
        }
        self.start_server(arch, &applet, kind, &argv[1..], &d)
    }

    fn forwarded(&self, guest_port: u16) -> Option<SocketAddr> {
        self.servers.iter().find(|(p, _)| *p == guest_port).map(|(_, s)| s.addr())
    }

    fn settled(&self) -> bool {
        true
    }

    fn services(&mut self) -> Vec<Service> {
        let (tcp, udp, inodes) = self.proc_net();
        let mut out: Vec<Service> = [(Proto::TCP, tcp), (Proto::UDP, udp)]
            .into_iter()
            .flat_map(|(proto, table)| {
                parse_proc_net(&table, proto)
                    .into_iter()
                    .map(|(port, inode)| Service {
                        proto,
                        port,
                        program: inodes.get(&inode).cloned().unwrap_or_else(|| "?".into()),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        out.sort();
        out
    }

    fn stop(&mut self) {
        for (_, mut s) in self.servers.drain(..) {
            s.shutdown();
        }
        self.vm.services.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FixtureBackend;

impl Backend for FixtureBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Fixture
    }

    fn supports(&self, _arch: ArchId) -> bool {
        true
    }

    fn prepare(&self, _plan: &EmulationPlan, guest_dir: &Path, _marker_prefix: &str) -> Result<Box<dyn Guest>> {
        Ok(Box::new(FixtureGuest::new(guest_dir)))
    }
}
