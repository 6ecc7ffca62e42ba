//! Emulation backends and the session lifecycle that drives them.
//!
//! A [`Backend`] turns a plan and an unpacked guest filesystem into a
//! [`Guest`]. [`EmulationSession`] runs the same boot, init-chain and web
//! launch sequence on every backend and keeps the logs triage reads.

pub mod fixture;
pub mod hosted;
pub mod httpd;
pub mod qemu;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use firmscope_core::arch::ArchId;
use firmscope_core::rootfs::{Variant, SHELL_ENTRIES};
use firmscope_core::session::{Lifecycle, SessionState};
use firmscope_core::snapshot::{FileEntry, Service, SnapshotLabel};
use firmscope_core::triage::{CHROOT_MARKER, TIMEOUT_MARKER};
use firmscope_core::web::DocRoot;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsroot::{self, RootFsCandidate};
use crate::fsutil;
use crate::webscan::WebServerProfile;
use crate::workspace::{read_json, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    QemuChroot,
    HostedTransplant,
    Fixture,
}

impl BackendKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BackendKind::QemuChroot => "qemu",
            BackendKind::HostedTransplant => "hosted",
            BackendKind::Fixture => "fixture",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qemu" => Ok(BackendKind::QemuChroot),
            "hosted" => Ok(BackendKind::HostedTransplant),
            "fixture" => Ok(BackendKind::Fixture),
            other => Err(Error::Config(format!("unknown backend {other:?} (qemu, hosted, fixture)"))),
        }
    }
}

/// Default ports probed after the configured one.
pub const DEFAULT_PORTS: &[u16] = &[80, 8080, 443];

/// Entries tried by the init chain, in order.
pub const INIT_CHAIN: &[&str] = &["/sbin/init", "/init", "/etc/init", "/etc/rc", "/etc/rc.d/rcS", "/etc/init.d/rcS"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmulationPlan {
    pub firmware_id: String,
    pub candidate: RootFsCandidate,
    /// Architectures to try in order; ties of the vote are all present.
    pub arch_list: Vec<ArchId>,
    pub backend: BackendKind,
    pub profiles: Vec<WebServerProfile>,
    pub docroots: Vec<DocRoot>,
    pub boot_timeout_s: u64,
    pub web_timeout_s: u64,
    pub port_candidates: Vec<u16>,
}

impl EmulationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.arch_list.is_empty() {
            return Err(Error::InvalidPlan("empty architecture list".into()));
        }
        if self.boot_timeout_s == 0 || self.web_timeout_s == 0 {
            return Err(Error::InvalidPlan("timeouts must be positive".into()));
        }
        if self.candidate.packed_path.is_none() {
            return Err(Error::InvalidPlan(format!("candidate {} was never packed", self.candidate.label())));
        }
        Ok(())
    }
}

/// Why a session ended in `Failed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmuFailure {
    PartialFirmware,
    ExecFormatError,
    UnsupportedArch,
    ChrootFailed,
    BootTimeout,
    NoWebServer,
    WebLaunchFailed,
    WebTimeout,
    BackendUnavailable,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecOutput {
    pub exit_code: i32,
    pub output: String,
    pub timed_out: bool,
}

impl ExecOutput {
    pub fn ok(output: impl Into<String>) -> Self {
        ExecOutput { exit_code: 0, output: output.into(), timed_out: false }
    }

    pub fn fail(exit_code: i32, output: impl Into<String>) -> Self {
        ExecOutput { exit_code, output: output.into(), timed_out: false }
    }

    pub fn hung(output: impl Into<String>) -> Self {
        ExecOutput { exit_code: -1, output: output.into(), timed_out: true }
    }
}

/// A running guest as seen by the session.
pub trait Guest: Send {
    /// Host directory mirroring the guest filesystem.
    fn root(&self) -> &Path;

    /// False when the backend never chroots (hosted transplant).
    fn chroot_capable(&self) -> bool {
        true
    }

    /// Run a command inside the chroot and wait for it.
    fn exec(&mut self, arch: ArchId, command: &str, timeout: Duration) -> ExecOutput;

    /// Start a daemon; returns what it printed while starting.
    fn launch(&mut self, arch: ArchId, command: &str, timeout: Duration) -> ExecOutput;

    /// Host address reaching a guest TCP port, if forwarded.
    fn forwarded(&self, guest_port: u16) -> Option<SocketAddr>;

    /// True when nothing launched so far can still start listening later.
    fn settled(&self) -> bool {
        false
    }

    /// Listening services, as a netstat-equivalent would report them.
    fn services(&mut self) -> Vec<Service>;

    /// Files outside [`Guest::root`] that belong in snapshots
    /// (guest-absolute keys).
    fn extra_manifest(&self) -> BTreeMap<String, FileEntry> {
        BTreeMap::new()
    }

    fn stop(&mut self);
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn supports(&self, arch: ArchId) -> bool;
    /// Bring up a guest over the unpacked filesystem at `guest_dir`.
    fn prepare(&self, plan: &EmulationPlan, guest_dir: &Path, marker_prefix: &str) -> Result<Box<dyn Guest>>;
}

/// Persisted view of a session (`session.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub firmware_id: String,
    pub candidate_index: usize,
    pub variant: Variant,
    pub backend: BackendKind,
    pub state: SessionState,
    pub reached_web: bool,
    pub base_url: Option<String>,
    pub web_port: Option<u16>,
    /// Server header of the first answer; `Some(None)` when absent.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "firmscope_core::report::double_option"
    )]
    pub banner: Option<Option<String>>,
    pub active_arch: Option<ArchId>,
    pub init_entry: Option<String>,
    pub launch_command: Option<String>,
    pub snapshots: Vec<SnapshotLabel>,
    pub failure: Option<EmuFailure>,
    pub marker_prefix: String,
}

pub const SESSION_FILE: &str = "session.json";
pub const BOOT_LOG: &str = "boot.log";
pub const WEB_LOG: &str = "web.log";
pub const PLAN_FILE: &str = "plan.json";

pub struct EmulationSession {
    pub record: SessionRecord,
    pub plan: EmulationPlan,
    lifecycle: Lifecycle,
    dir: PathBuf,
    supported: Vec<ArchId>,
    guest: Option<Box<dyn Guest>>,
    boot_log: String,
    web_log: String,
}

impl fmt::Debug for EmulationSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmulationSession").field("record", &self.record).finish()
    }
}

fn append(path: &Path, buf: &mut String, line: &str) {
    buf.push_str(line);
    buf.push('\n');
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
        let _ = writeln!(f, "{line}");
    }
}

impl EmulationSession {
    /// Unpack the plan's archive into `<dir>/guest` and prepare the backend.
    /// A backend that cannot run yields a session already in `Failed`.
    pub fn create(backend: &dyn Backend, plan: EmulationPlan, dir: &Path, session_id: &str, marker_prefix: &str) -> Result<Self> {
        plan.validate()?;
        fsutil::remove_tree(dir)?;
        fs::create_dir_all(dir.join("snapshots")).at(dir)?;
        let guest_dir = dir.join("guest");
        fsroot::unpack(plan.candidate.packed_path.as_ref().expect("validated"), &guest_dir)?;
        let supported = plan.arch_list.iter().copied().filter(|a| backend.supports(*a)).collect();
        let record = SessionRecord {
            session_id: session_id.to_string(),
            firmware_id: plan.firmware_id.clone(),
            candidate_index: plan.candidate.candidate_index,
            variant: plan.candidate.variant,
            backend: backend.kind(),
            state: SessionState::Prepared,
            reached_web: false,
            base_url: None,
            web_port: None,
            banner: None,
            active_arch: None,
            init_entry: None,
            launch_command: None,
            snapshots: Vec::new(),
            failure: None,
            marker_prefix: marker_prefix.to_string(),
        };
        let mut session = EmulationSession {
            record,
            plan,
            lifecycle: Lifecycle::default(),
            dir: dir.to_path_buf(),
            supported,
            guest: None,
            boot_log: String::new(),
            web_log: String::new(),
        };
        session.log_boot(&format!(
            "session {} backend={} candidate={} variant={} archs=[{}]",
            session_id,
            backend.kind(),
            session.plan.candidate.root_rel_path,
            session.plan.candidate.variant,
            session.plan.arch_list.iter().map(|a| a.tag()).collect::<Vec<_>>().join(",")
        ));
        match backend.prepare(&session.plan, &guest_dir, marker_prefix) {
            Ok(g) => session.guest = Some(g),
            Err(Error::BackendUnavailable(why)) => {
                session.log_boot(&format!("backend unavailable: {why}"));
                session.fail(EmuFailure::BackendUnavailable)?;
            }
            Err(e) => return Err(e),
        }
        write_json(&dir.join(PLAN_FILE), &session.plan)?;
        session.save()?;
        Ok(session)
    }

    /// Bring a persisted session back up in this process. The guest tree
    /// keeps its changes; boot and web launch are replayed and snapshot
    /// history is preserved.
    pub fn resume(backend: &dyn Backend, dir: &Path) -> Result<Self> {
        let record: SessionRecord = read_json(&dir.join(SESSION_FILE))?;
        let plan: EmulationPlan = read_json(&dir.join(PLAN_FILE))?;
        if record.backend != backend.kind() {
            return Err(Error::Config(format!(
                "session {} was created with backend {}, not {}",
                record.session_id,
                record.backend,
                backend.kind()
            )));
        }
        let guest = backend.prepare(&plan, &dir.join("guest"), &record.marker_prefix)?;
        let supported = plan.arch_list.iter().copied().filter(|a| backend.supports(*a)).collect();
        let record = SessionRecord {
            state: SessionState::Prepared,
            reached_web: false,
            base_url: None,
            web_port: None,
            banner: None,
            active_arch: None,
            init_entry: None,
            launch_command: None,
            failure: None,
            ..record
        };
        let mut session = EmulationSession {
            record,
            plan,
            lifecycle: Lifecycle::default(),
            dir: dir.to_path_buf(),
            supported,
            guest: Some(guest),
            boot_log: String::new(),
            web_log: String::new(),
        };
        session.log_boot(&format!("session {} resumed", session.record.session_id));
        session.boot()?;
        session.launch_web()?;
        Ok(session)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> SessionState {
        self.lifecycle.state()
    }

    pub fn boot_log(&self) -> &str {
        &self.boot_log
    }

    pub fn web_log(&self) -> &str {
        &self.web_log
    }

    pub fn guest(&self) -> Option<&dyn Guest> {
        self.guest.as_deref()
    }

    pub fn guest_mut(&mut self) -> Option<&mut (dyn Guest + 'static)> {
        self.guest.as_deref_mut()
    }

    pub fn log_boot(&mut self, line: &str) {
        append(&self.dir.join(BOOT_LOG), &mut self.boot_log, line);
    }

    pub fn log_web(&mut self, line: &str) {
        append(&self.dir.join(WEB_LOG), &mut self.web_log, line);
    }

    fn advance(&mut self, to: SessionState) -> Result<()> {
        self.lifecycle.advance(to)?;
        self.record.state = to;
        self.record.reached_web = self.lifecycle.reached_web();
        Ok(())
    }

    fn fail(&mut self, why: EmuFailure) -> Result<()> {
        self.record.failure = Some(why);
        self.advance(SessionState::Failed)
    }

    pub fn save(&self) -> Result<()> {
        write_json(&self.dir.join(SESSION_FILE), &self.record)
    }

    /// Enter the chroot with the first architecture that executes the
    /// shell, then run the init chain.
    pub fn boot(&mut self) -> Result<SessionState> {
        if self.state() != SessionState::Prepared {
            return Ok(self.state());
        }
        let timeout = Duration::from_secs(self.plan.boot_timeout_s);
        let guest = self.guest.as_mut().expect("prepared session has a guest");
        if !guest.chroot_capable() {
            self.log_boot("no chroot for this backend; userland not started");
            self.record.active_arch = self.plan.arch_list.first().copied();
            self.advance(SessionState::Booted)?;
            self.save()?;
            return Ok(self.state());
        }
        let root = guest.root().to_path_buf();
        let Some(shell) = SHELL_ENTRIES.iter().find(|s| fsutil::lexists(&root.join(s))) else {
            self.log_boot("no shell or busybox binary (bin/sh, bin/bash, bin/dash, bin/busybox) in the root filesystem");
            self.fail(EmuFailure::PartialFirmware)?;
            self.save()?;
            return Ok(self.state());
        };
        let shell_cmd = if shell.ends_with("busybox") { format!("/{shell} sh") } else { format!("/{shell}") };
        for arch in self.plan.arch_list.clone() {
            if !self.supported.contains(&arch) {
                self.log_boot(&format!("backend {} cannot run {}", self.record.backend, arch.tag()));
                continue;
            }
            let cmd = format!("{shell_cmd} -c 'echo {CHROOT_MARKER}'");
            self.log_boot(&format!("[{}] $ chroot guest {cmd}", arch.tag()));
            let out = self.guest.as_mut().unwrap().exec(arch, &cmd, timeout);
            for line in out.output.lines() {
                self.log_boot(line);
            }
            if out.timed_out {
                self.log_boot(&format!("supervisor: chroot probe {TIMEOUT_MARKER} after {}s", self.plan.boot_timeout_s));
                self.fail(EmuFailure::BootTimeout)?;
                self.save()?;
                return Ok(self.state());
            }
            if out.exit_code == 0 && out.output.contains(CHROOT_MARKER) {
                self.record.active_arch = Some(arch);
                break;
            }
        }
        let Some(arch) = self.record.active_arch else {
            let why = if self.supported.is_empty() {
                EmuFailure::UnsupportedArch
            } else if self.boot_log.to_ascii_lowercase().contains("exec format error") {
                EmuFailure::ExecFormatError
            } else {
                EmuFailure::ChrootFailed
            };
            self.fail(why)?;
            self.save()?;
            return Ok(self.state());
        };
        self.run_init_chain(arch, &shell_cmd)?;
        self.save()?;
        Ok(self.state())
    }

    /// Run the first init entry present; nonzero exits are warnings.
    fn run_init_chain(&mut self, arch: ArchId, shell_cmd: &str) -> Result<()> {
        let timeout = Duration::from_secs(self.plan.boot_timeout_s);
        let root = self.guest.as_ref().unwrap().root().to_path_buf();
        let entry = INIT_CHAIN
            .iter()
            .find(|e| fsutil::guest_existing(&root, &e[1..]).is_some())
            .map(|e| e.to_string());
        let command = match &entry {
            Some(e) => e.clone(),
            None => {
                self.log_boot("init chain: no init entry found, falling back to the shell");
                shell_cmd.to_string()
            }
        };
        self.log_boot(&format!("[{}] $ chroot guest {command}", arch.tag()));
        let out = self.guest.as_mut().unwrap().exec(arch, &command, timeout);
        for line in out.output.lines() {
            self.log_boot(line);
        }
        self.record.init_entry = Some(command.clone());
        if out.timed_out {
            self.log_boot(&format!("supervisor: {command} {TIMEOUT_MARKER} after {}s", self.plan.boot_timeout_s));
            return self.fail(EmuFailure::BootTimeout);
        }
        if out.exit_code != 0 {
            self.log_boot(&format!("warning: {command} exited with status {}", out.exit_code));
        }
        self.advance(SessionState::Booted)
    }

    /// Try every launch command until one answers HTTP.
    pub fn launch_web(&mut self) -> Result<SessionState> {
        if self.state() != SessionState::Booted {
            return Ok(self.state());
        }
        let arch = self.record.active_arch.expect("booted session has an arch");
        let timeout = Duration::from_secs(self.plan.web_timeout_s);
        let hosted = !self.guest.as_ref().unwrap().chroot_capable();
        let mut attempts: Vec<(Option<u16>, String)> = self
            .plan
            .profiles
            .iter()
            .flat_map(|p| {
                let port = p.parsed.as_ref().and_then(|c| c.port);
                p.launch_commands.iter().map(move |c| (port, c.clone()))
            })
            .collect();
        if hosted {
            attempts.truncate(1);
            if attempts.is_empty() {
                attempts.push((None, "hosted-httpd".into()));
            }
        }
        if attempts.is_empty() {
            self.log_web("no web server binary found in the root filesystem");
            self.fail(EmuFailure::NoWebServer)?;
            self.save()?;
            return Ok(self.state());
        }
        let mut launch_failed = false;
        for (config_port, cmd) in attempts {
            self.log_web(&format!("[{}] $ chroot guest {cmd}", arch.tag()));
            let out = self.guest.as_mut().unwrap().launch(arch, &cmd, timeout);
            for line in out.output.lines() {
                self.log_web(line);
            }
            launch_failed |= out.exit_code != 0;
            let mut ports: Vec<u16> = config_port.into_iter().collect();
            for p in &self.plan.port_candidates {
                if !ports.contains(p) {
                    ports.push(*p);
                }
            }
            if self.probe_web_up(&ports, timeout) {
                self.record.launch_command = Some(cmd);
                self.advance(SessionState::WebUp)?;
                self.save()?;
                return Ok(self.state());
            }
        }
        self.fail(if launch_failed { EmuFailure::WebLaunchFailed } else { EmuFailure::WebTimeout })?;
        self.save()?;
        Ok(self.state())
    }

    /// Poll candidate ports until any HTTP response arrives or the timeout
    /// passes. Records base URL and banner on success.
    pub fn probe_web_up(&mut self, ports: &[u16], timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(3)).redirects(0).build();
        loop {
            for &port in ports {
                let Some(addr) = self.guest.as_ref().unwrap().forwarded(port) else { continue };
                let url = format!("http://{addr}/");
                let resp = match agent.get(&url).call() {
                    Ok(r) => Some(r),
                    Err(ureq::Error::Status(_, r)) => Some(r),
                    Err(_) => None,
                };
                if let Some(r) = resp {
                    let banner = r.header("server").map(str::to_string);
                    self.log_web(&format!(
                        "port {port}: HTTP {} (Server: {})",
                        r.status(),
                        banner.as_deref().unwrap_or("<none>")
                    ));
                    self.record.base_url = Some(url);
                    self.record.web_port = Some(port);
                    self.record.banner = Some(banner);
                    return true;
                }
            }
            if self.guest.as_ref().unwrap().settled() || Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        self.log_web(&format!(
            "no HTTP response on ports {:?} within {}s ({TIMEOUT_MARKER})",
            ports,
            timeout.as_secs()
        ));
        false
    }

    pub fn note_snapshot(&mut self, label: SnapshotLabel) -> Result<()> {
        self.record.snapshots.push(label);
        self.save()
    }

    pub fn stop(&mut self) -> Result<()> {
        if let Some(g) = self.guest.as_mut() {
            g.stop();
        }
        if self.state() != SessionState::Stopped {
            self.advance(SessionState::Stopped)?;
        }
        self.save()
    }
}

impl Drop for EmulationSession {
    fn drop(&mut self) {
        if let Some(g) = self.guest.as_mut() {
            g.stop();
        }
    }
}

/// Build a backend by kind.
pub fn make_backend(kind: BackendKind, qemu_images: Option<PathBuf>) -> Box<dyn Backend> {
    match kind {
        BackendKind::Fixture => Box::new(fixture::FixtureBackend),
        BackendKind::HostedTransplant => Box::new(hosted::HostedBackend),
        BackendKind::QemuChroot => Box::new(qemu::QemuBackend::new(qemu_images)),
    }
}
