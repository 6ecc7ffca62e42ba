//! QEMU chroot backend: a generic guest system per architecture boots with
//! the packed root filesystem attached as a second drive, and commands run
//! over SSH inside `chroot /mnt/fw`.
//!
//! Guest images live under `<images>/<arch-tag>/{kernel,rootfs.qcow2}`.
//! Without `qemu-system-*`, `ssh` or the images, [`QemuBackend::prepare`]
//! returns `BackendUnavailable`.

use std::io::Read;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use firmscope_core::arch::{ArchFamily, ArchId, Endianness};
use firmscope_core::snapshot::{parse_proc_net, Proto, Service};

use super::{Backend, BackendKind, EmulationPlan, ExecOutput, Guest};
use crate::error::{Error, Result};
use crate::fsutil;

/// Mount point of the firmware root inside the generic guest.
pub const GUEST_MOUNT: &str = "/mnt/fw";
const SSH_BOOT_WAIT: Duration = Duration::from_secs(180);

/// `qemu-system-<suffix>` for the architectures with a generic guest.
pub fn system_suffix(arch: ArchId) -> Option<&'static str> {
    match (arch.family(), arch.endianness()) {
        (ArchFamily::ARM, Endianness::Little) => Some("arm"),
        (ArchFamily::MIPS, _) => Some("mips"),
        (ArchFamily::MIPSel, _) => Some("mipsel"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestImage {
    pub kernel: PathBuf,
    pub disk: PathBuf,
}

impl GuestImage {
    pub fn locate(images: &Path, arch: ArchId) -> Option<GuestImage> {
        let dir = images.join(arch.tag());
        let kernel = ["kernel", "zImage", "vmlinux"].iter().map(|k| dir.join(k)).find(|p| p.is_file())?;
        let disk = dir.join("rootfs.qcow2");
        disk.is_file().then_some(GuestImage { kernel, disk })
    }
}

/// Full argument vector (program first).
pub fn command_line(arch: ArchId, image: &GuestImage, packed: &Path, forwards: &[(u16, u16)]) -> Option<Vec<String>> {
    let suffix = system_suffix(arch)?;
    let (machine, root_dev, disk_if) = match suffix {
        "arm" => ("virt", "/dev/vda", "virtio"),
        _ => ("malta", "/dev/sda", "ide"),
    };
    let hostfwd: String = forwards.iter().map(|(h, g)| format!(",hostfwd=tcp:127.0.0.1:{h}-:{g}")).collect();
    Some(vec![
        format!("qemu-system-{suffix}"),
        "-M".into(),
        machine.into(),
        "-m".into(),
        "256".into(),
        "-nographic".into(),
        "-kernel".into(),
        image.kernel.display().to_string(),
        "-append".into(),
        format!("root={root_dev} console=ttyS0 rw"),
        "-drive".into(),
        format!("file={},format=qcow2,if={disk_if},snapshot=on", image.disk.display()),
        "-drive".into(),
        format!("file={},format=raw,if={disk_if},readonly=on", packed.display()),
        "-netdev".into(),
        format!("user,id=n0{hostfwd}"),
        "-device".into(),
        if suffix == "arm" { "virtio-net-device,netdev=n0".into() } else { "pcnet,netdev=n0".into() },
    ])
}

fn free_port() -> Option<u16> {
    TcpListener::bind("127.0.0.1:0").ok()?.local_addr().ok().map(|a| a.port())
}

pub struct QemuGuest {
    root: PathBuf,
    child: Child,
    ssh_port: u16,
    forwards: Vec<(u16, u16)>,
}

impl QemuGuest {
    fn ssh(&self, remote: &str, timeout: Duration) -> ExecOutput {
        let spawned = Command::new("ssh")
            .args(["-p", &self.ssh_port.to_string(), "-o", "StrictHostKeyChecking=no", "-o", "UserKnownHostsFile=/dev/null"])
            .args(["-o", "BatchMode=yes", "root@127.0.0.1", remote])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn();
        let mut child = match spawned {
            Ok(c) => c,
            Err(e) => return ExecOutput::fail(127, format!("ssh: {e}")),
        };
        let mut out = child.stdout.take().expect("piped");
        let mut err = child.stderr.take().expect("piped");
        let r1 = thread::spawn(move || {
            let mut s = String::new();
            let _ = out.read_to_string(&mut s);
            s
        });
        let r2 = thread::spawn(move || {
            let mut s = String::new();
            let _ = err.read_to_string(&mut s);
            s
        });
        let deadline = Instant::now() + timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(50)),
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
            }
        };
        let text = format!("{}{}", r1.join().unwrap_or_default(), r2.join().unwrap_or_default());
        match status {
            Some(s) => ExecOutput { exit_code: s.code().unwrap_or(-1), output: text.trim_end().to_string(), timed_out: false },
            None => ExecOutput::hung(text.trim_end().to_string()),
        }
    }

    fn wait_for_ssh(&mut self) -> bool {
        let deadline = Instant::now() + SSH_BOOT_WAIT;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return false;
            }
            if TcpStream::connect(("127.0.0.1", self.ssh_port)).is_ok() && self.ssh("true", Duration::from_secs(10)).exit_code == 0 {
                return true;
            }
            thread::sleep(Duration::from_secs(1));
        }
        false
    }
}

fn quote(s: &str) -> String {
    shlex::try_quote(s).map(|c| c.into_owned()).unwrap_or_else(|_| format!("'{s}'"))
}

impl Guest for QemuGuest {
    fn root(&self) -> &Path {
        &self.root
    }

    fn exec(&mut self, _arch: ArchId, command: &str, timeout: Duration) -> ExecOutput {
        self.ssh(&format!("chroot {GUEST_MOUNT} /bin/sh -c {}", quote(command)), timeout)
    }

    fn launch(&mut self, _arch: ArchId, command: &str, timeout: Duration) -> ExecOutput {
        let bg = format!("chroot {GUEST_MOUNT} /bin/sh -c {} >/tmp/web.out 2>&1 & sleep 3; cat /tmp/web.out", quote(command));
        self.ssh(&bg, timeout)
    }

    fn forwarded(&self, guest_port: u16) -> Option<SocketAddr> {
        self.forwards.iter().find(|(_, g)| *g == guest_port).map(|(h, _)| SocketAddr::from(([127, 0, 0, 1], *h)))
    }

    fn services(&mut self) -> Vec<Service> {
        let mut out = Vec::new();
        for (proto, table) in [(Proto::TCP, "tcp"), (Proto::UDP, "udp")] {
            let text = self.ssh(&format!("cat /proc/net/{table}"), Duration::from_secs(10)).output;
            for (port, inode) in parse_proc_net(&text, proto) {
                let who = self.ssh(
                    &format!("for p in /proc/[0-9]*; do ls -l $p/fd 2>/dev/null | grep -q 'socket:\\[{inode}\\]' && cat $p/comm && break; done"),
                    Duration::from_secs(10),
                );
                let program = who.output.lines().next().unwrap_or("?").to_string();
                out.push(Service { proto, port, program });
            }
        }
        out.sort();
        out
    }

    fn stop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, Default)]
pub struct QemuBackend {
    images: Option<PathBuf>,
}

impl QemuBackend {
    pub fn new(images: Option<PathBuf>) -> Self {
        QemuBackend { images }
    }
}

impl Backend for QemuBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::QemuChroot
    }

    fn supports(&self, arch: ArchId) -> bool {
        system_suffix(arch).is_some()
    }

    fn prepare(&self, plan: &EmulationPlan, guest_dir: &Path, _marker_prefix: &str) -> Result<Box<dyn Guest>> {
        let arch = plan
            .arch_list
            .iter()
            .copied()
            .find(|a| self.supports(*a))
            .ok_or_else(|| Error::BackendUnavailable("no generic guest for these architectures".into()))?;
        let suffix = system_suffix(arch).expect("supported");
        let binary = format!("qemu-system-{suffix}");
        if fsutil::which(&binary).is_none() {
            return Err(Error::BackendUnavailable(format!("{binary} not found on PATH")));
        }
        if fsutil::which("ssh").is_none() {
            return Err(Error::BackendUnavailable("ssh not found on PATH".into()));
        }
        let images = self.images.as_deref().ok_or_else(|| Error::BackendUnavailable("no guest image directory configured".into()))?;
        let image = GuestImage::locate(images, arch)
            .ok_or_else(|| Error::BackendUnavailable(format!("no guest image under {}", images.join(arch.tag()).display())))?;
        let packed = plan.candidate.packed_path.clone().expect("validated plan");
        let ssh_port = free_port().ok_or_else(|| Error::BackendUnavailable("no free port".into()))?;
        let mut forwards = vec![(ssh_port, 22)];
        for p in &plan.port_candidates {
            forwards.push((free_port().ok_or_else(|| Error::BackendUnavailable("no free port".into()))?, *p));
        }
        let argv = command_line(arch, &image, &packed, &forwards).expect("supported");
        let child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::BackendUnavailable(format!("{binary}: {e}")))?;
        let mut guest = QemuGuest { root: guest_dir.to_path_buf(), child, ssh_port, forwards: forwards[1..].to_vec() };
        if !guest.wait_for_ssh() {
            guest.stop();
            return Err(Error::BackendUnavailable("guest command channel did not come up".into()));
        }
        let disk = if suffix == "arm" { "/dev/vdb" } else { "/dev/sdb" };
        let setup = guest.ssh(&format!("mkdir -p {GUEST_MOUNT} && tar -xf {disk} -C {GUEST_MOUNT}"), SSH_BOOT_WAIT);
        if setup.exit_code != 0 {
            guest.stop();
            return Err(Error::BackendUnavailable(format!("unpacking the root filesystem failed: {}", setup.output)));
        }
        Ok(Box::new(guest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_shape() {
        let img = GuestImage { kernel: "/i/k".into(), disk: "/i/d.qcow2".into() };
        let mipsel = ArchId::new(ArchFamily::MIPSel, Endianness::Little);
        let argv = command_line(mipsel, &img, Path::new("/w/c0.tar"), &[(2222, 22), (8000, 80)]).unwrap();
        assert_eq!(argv[0], "qemu-system-mipsel");
        assert!(argv.contains(&"user,id=n0,hostfwd=tcp:127.0.0.1:2222-:22,hostfwd=tcp:127.0.0.1:8000-:80".to_string()));
        assert!(argv.iter().any(|a| a.starts_with("file=/w/c0.tar,format=raw")));
        let ppc = ArchId::new(ArchFamily::PowerPC, Endianness::Big);
        assert!(command_line(ppc, &img, Path::new("x"), &[]).is_none());
    }

    #[test]
    fn unavailable_without_images() {
        let b = QemuBackend::new(None);
        assert!(b.supports(ArchId::new(ArchFamily::ARM, Endianness::Little)));
        assert!(!b.supports(ArchId::UNKNOWN));
    }
}
