//! Failure classification from emulation logs and extrapolation of cause
//! proportions.
//!
//! Chroot failures and web-launch failures each get a fixed-precedence
//! classifier; every log maps to exactly one cause. Fixability follows the
//! manual judgement: wrong architecture, undetected chroot success, PID-1
//! init complaints and server launch errors are easy; missing devices and
//! partial firmware (replacing absent utilities makes the image diverge from
//! the device) are not.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::stats::{estimate_proportion, ProportionEstimate, StatsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureStage {
    Chroot,
    WebServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cause {
    ExecFormatError,
    PartialFirmware,
    FalsePositiveChroot,
    MissingDevice,
    InitPid,
    WebLaunchError,
    Unknown,
}

impl Cause {
    pub const ALL: [Cause; 7] = [
        Cause::ExecFormatError,
        Cause::PartialFirmware,
        Cause::FalsePositiveChroot,
        Cause::MissingDevice,
        Cause::InitPid,
        Cause::WebLaunchError,
        Cause::Unknown,
    ];

    pub fn fixability(&self) -> Fixability {
        match self {
            Cause::ExecFormatError | Cause::FalsePositiveChroot | Cause::InitPid | Cause::WebLaunchError => {
                Fixability::Easy
            }
            Cause::PartialFirmware | Cause::MissingDevice => Fixability::Hard,
            Cause::Unknown => Fixability::Unknown,
        }
    }

    pub fn stage(&self) -> Option<FailureStage> {
        match self {
            Cause::ExecFormatError | Cause::PartialFirmware | Cause::FalsePositiveChroot => {
                Some(FailureStage::Chroot)
            }
            Cause::MissingDevice | Cause::InitPid | Cause::WebLaunchError => Some(FailureStage::WebServer),
            Cause::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Fixability {
    Easy,
    Hard,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub firmware_id: String,
    pub stage: FailureStage,
    pub cause: Cause,
    pub fixability: Fixability,
    pub evidence: String,
}

impl FailureRecord {
    pub fn new(firmware_id: &str, stage: FailureStage, cause: Cause, evidence: &str) -> Self {
        FailureRecord {
            firmware_id: firmware_id.to_string(),
            stage,
            cause,
            fixability: cause.fixability(),
            evidence: evidence.to_string(),
        }
    }
}

/// Line the emulator prints once a shell inside the chroot answered.
pub const CHROOT_MARKER: &str = "FSCOPE_CHROOT_OK";

/// Substring printed by the supervisor when it gave up waiting.
pub const TIMEOUT_MARKER: &str = "timed out";

/// What the classifier needs to know about the root filesystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootfsFacts {
    /// Any of bin/sh, bin/bash, bin/dash, bin/busybox exists.
    pub has_shell: bool,
}

fn find_line<'a>(log: &'a str, pred: impl Fn(&str) -> bool) -> Option<&'a str> {
    log.lines().find(|l| pred(l)).map(str::trim)
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_ascii_lowercase().contains(&needle.to_ascii_lowercase())
}

pub fn classify_chroot_failure(firmware_id: &str, boot_log: &str, facts: RootfsFacts) -> FailureRecord {
    let stage = FailureStage::Chroot;
    if let Some(line) =
        find_line(boot_log, |l| contains_ci(l, "exec format error") || contains_ci(l, "illegal instruction"))
    {
        return FailureRecord::new(firmware_id, stage, Cause::ExecFormatError, line);
    }
    if !facts.has_shell {
        return FailureRecord::new(
            firmware_id,
            stage,
            Cause::PartialFirmware,
            "no shell or busybox binary in the root filesystem",
        );
    }
    if boot_log.contains(CHROOT_MARKER) {
        if let Some(line) = find_line(boot_log, |l| contains_ci(l, TIMEOUT_MARKER)) {
            return FailureRecord::new(firmware_id, stage, Cause::FalsePositiveChroot, line);
        }
    }
    let last = boot_log.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    FailureRecord::new(firmware_id, stage, Cause::Unknown, last)
}

/// `prefix` followed by at least one digit, not preceded by an alphanumeric
/// character (`eth1`, `br0`).
fn mentions_interface(line: &str, prefix: &str) -> bool {
    let bytes = line.as_bytes();
    let mut from = 0;
    while let Some(off) = line[from..].find(prefix) {
        let at = from + off;
        let before_ok = at == 0 || !bytes[at - 1].is_ascii_alphanumeric();
        let after = at + prefix.len();
        if before_ok && bytes.get(after).map_or(false, u8::is_ascii_digit) {
            return true;
        }
        from = at + 1;
    }
    false
}

const DEVICE_PATHS: &[&str] = &["/dev/gpio", "/dev/mtd", "/dev/nvram"];

fn is_missing_device_line(line: &str) -> bool {
    contains_ci(line, "no such device")
        || DEVICE_PATHS.iter().any(|d| line.contains(d))
        || mentions_interface(line, "eth")
        || mentions_interface(line, "br")
}

const INIT_PID_MARKERS: &[&str] = &["must be run as PID 1", "Init is the parent of all processes"];

const LAUNCH_ERROR_MARKERS: &[&str] = &[
    "loading plugins finally failed",
    "opening errorlog",
    "can't bind",
    "cannot bind",
    "bind: Address already in use",
    "Couldn't open config",
    "No such file or directory",
];

pub fn classify_web_failure(firmware_id: &str, web_log: &str) -> FailureRecord {
    let stage = FailureStage::WebServer;
    if let Some(line) = find_line(web_log, is_missing_device_line) {
        return FailureRecord::new(firmware_id, stage, Cause::MissingDevice, line);
    }
    if let Some(line) = find_line(web_log, |l| INIT_PID_MARKERS.iter().any(|m| l.contains(m))) {
        return FailureRecord::new(firmware_id, stage, Cause::InitPid, line);
    }
    if let Some(line) = find_line(web_log, |l| LAUNCH_ERROR_MARKERS.iter().any(|m| l.contains(m))) {
        return FailureRecord::new(firmware_id, stage, Cause::WebLaunchError, line);
    }
    let last = web_log.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    FailureRecord::new(firmware_id, stage, Cause::Unknown, last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EasyFixBound {
    pub stage: FailureStage,
    pub estimate: ProportionEstimate,
    /// Lower end of the interval: the "at least" share of fixable failures.
    pub lower_bound: f64,
}

/// Share of easily fixable failures in a classified sample, extrapolated to
/// `population` failures at `stage`.
pub fn easy_fix_bound(
    records: &[FailureRecord],
    stage: FailureStage,
    population: u64,
    z: f64,
) -> Result<EasyFixBound, StatsError> {
    let sample: Vec<&FailureRecord> = records.iter().filter(|r| r.stage == stage).collect();
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let easy = sample.iter().filter(|r| r.fixability == Fixability::Easy).count() as u64;
    let estimate = estimate_proportion(easy, sample.len() as u64, population, z)?;
    Ok(EasyFixBound { stage, lower_bound: estimate.lower, estimate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseEstimate {
    pub cause: Cause,
    pub estimate: ProportionEstimate,
}

/// Per-cause proportions at `stage`, for every cause seen in the sample.
pub fn cause_estimates(
    records: &[FailureRecord],
    stage: FailureStage,
    population: u64,
    z: f64,
) -> Result<Vec<CauseEstimate>, StatsError> {
    let sample: Vec<&FailureRecord> = records.iter().filter(|r| r.stage == stage).collect();
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    Cause::ALL
        .iter()
        .filter_map(|cause| {
            let k = sample.iter().filter(|r| r.cause == *cause).count() as u64;
            (k > 0).then_some((cause, k))
        })
        .map(|(cause, k)| {
            Ok(CauseEstimate { cause: *cause, estimate: estimate_proportion(k, sample.len() as u64, population, z)? })
        })
        .collect()
}
