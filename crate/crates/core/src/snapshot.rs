//! Filesystem and service snapshots, their differences, and the HTTP
//! transcript used to attribute side effects to requests.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::finding::{Category, Finding, Locator, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SnapshotLabel {
    PreEmulation,
    PostBoot,
    PostScan,
}

impl SnapshotLabel {
    pub const ALL: [SnapshotLabel; 3] =
        [SnapshotLabel::PreEmulation, SnapshotLabel::PostBoot, SnapshotLabel::PostScan];

    pub fn tag(&self) -> &'static str {
        match self {
            SnapshotLabel::PreEmulation => "pre-emulation",
            SnapshotLabel::PostBoot => "post-boot",
            SnapshotLabel::PostScan => "post-scan",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.tag() == tag)
    }
}

impl fmt::Display for SnapshotLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub size: u64,
    pub mtime: i64,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Proto {
    TCP,
    UDP,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Service {
    pub proto: Proto,
    pub port: u16,
    pub program: String,
}

/// Manifest of a guest filesystem (keys are guest-absolute paths) plus its
/// listening services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub label: SnapshotLabel,
    pub files: BTreeMap<String, FileEntry>,
    pub services: Vec<Service>,
}

impl Snapshot {
    pub fn new(label: SnapshotLabel) -> Self {
        Snapshot { label, files: BTreeMap::new(), services: Vec::new() }
    }
}

/// Guest pseudo-filesystems left out of manifests.
pub const PSEUDO_TREES: &[&str] = &["/proc", "/sys", "/dev"];

pub fn is_pseudo_path(path: &str) -> bool {
    PSEUDO_TREES
        .iter()
        .any(|p| path == *p || (path.starts_with(p) && path.as_bytes().get(p.len()) == Some(&b'/')))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotDiff {
    pub added: Vec<String>,
    pub modified: Vec<String>,
    pub deleted: Vec<String>,
    pub new_services: Vec<Service>,
    pub log_files: Vec<String>,
}

impl SnapshotDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty()
            && self.modified.is_empty()
            && self.deleted.is_empty()
            && self.new_services.is_empty()
    }

    /// Difference from `a` to `b` without checking label order.
    pub fn between(a: &Snapshot, b: &Snapshot) -> SnapshotDiff {
        let mut diff = SnapshotDiff::default();
        for (path, entry) in &b.files {
            match a.files.get(path) {
                None => diff.added.push(path.clone()),
                Some(old) if old.content_hash != entry.content_hash => diff.modified.push(path.clone()),
                Some(_) => {}
            }
        }
        diff.deleted = a.files.keys().filter(|p| !b.files.contains_key(*p)).cloned().collect();
        let before: BTreeSet<&Service> = a.services.iter().collect();
        let mut new_services: Vec<Service> =
            b.services.iter().filter(|s| !before.contains(s)).cloned().collect();
        new_services.sort();
        new_services.dedup();
        diff.new_services = new_services;
        diff.log_files = diff
            .added
            .iter()
            .chain(&diff.modified)
            .filter(|p| is_log_path(p))
            .cloned()
            .collect();
        diff.log_files.sort();
        diff
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelOrderError {
    pub from: SnapshotLabel,
    pub to: SnapshotLabel,
}

impl fmt::Display for LabelOrderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "snapshot {} does not precede {}", self.from, self.to)
    }
}

impl core::error::Error for LabelOrderError {}

/// Difference between two snapshots of one session, `a` taken before `b`.
pub fn diff_snapshots(a: &Snapshot, b: &Snapshot) -> Result<SnapshotDiff, LabelOrderError> {
    if a.label >= b.label {
        return Err(LabelOrderError { from: a.label, to: b.label });
    }
    Ok(SnapshotDiff::between(a, b))
}

pub fn is_log_path(path: &str) -> bool {
    path.ends_with(".log") || path.starts_with("/var/log/") || path.starts_with("/tmp/log/")
}

/// One CommandExecution finding per added file whose basename starts with
/// the scanner's marker prefix.
pub fn detect_injection_artifacts(diff: &SnapshotDiff, marker_prefix: &str, firmware_id: &str) -> Vec<Finding> {
    if marker_prefix.is_empty() {
        return Vec::new();
    }
    diff.added
        .iter()
        .filter(|p| crate::paths::basename(p).starts_with(marker_prefix))
        .map(|p| {
            Finding::new(
                Category::CommandExecution,
                Source::Dynamic,
                Locator::new(p.clone()),
                format!("file {p} created during the scan"),
                firmware_id,
            )
        })
        .collect()
}

/// Largest body kept in a transcript entry.
pub const BODY_LIMIT: usize = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub method: String,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
    #[serde(default)]
    pub truncated: bool,
}

impl RecordedResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn headers_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.headers.iter().filter(move |(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Cut a body to [`BODY_LIMIT`] bytes on a character boundary.
pub fn truncate_body(body: &str) -> (String, bool) {
    if body.len() <= BODY_LIMIT {
        return (body.to_string(), false);
    }
    let mut end = BODY_LIMIT;
    while !body.is_char_boundary(end) {
        end -= 1;
    }
    (body[..end].to_string(), true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub request: RecordedRequest,
    pub response: RecordedResponse,
    /// Milliseconds since the Unix epoch.
    pub t: u64,
}

/// Ordered request/response log; `seq` strictly increases.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpTranscript {
    entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqOrderError {
    pub previous: u64,
    pub got: u64,
}

impl HttpTranscript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.seq + 1)
    }

    pub fn push(&mut self, entry: TranscriptEntry) -> Result<(), SeqOrderError> {
        if let Some(last) = self.entries.last() {
            if entry.seq <= last.seq {
                return Err(SeqOrderError { previous: last.seq, got: entry.seq });
            }
        }
        self.entries.push(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerMatch {
    /// Sequence numbers of matching requests, ascending.
    pub seqs: Vec<u64>,
    /// No request carries the nonce; the whole transcript must be replayed
    /// to look for combined effects.
    pub full_window: bool,
}

/// Requests whose URL or body carries `artifact_name` (the marker file's
/// basename), in sequence order.
pub fn find_trigger_requests(transcript: &HttpTranscript, artifact_name: &str) -> TriggerMatch {
    let needle = crate::paths::basename(artifact_name);
    if needle.is_empty() {
        return TriggerMatch { seqs: Vec::new(), full_window: true };
    }
    let seqs: Vec<u64> = transcript
        .entries
        .iter()
        .filter(|e| {
            let r = &e.request;
            r.url.contains(needle)
                || r.body.contains(needle)
                || percent_decode(&r.url).contains(needle)
                || percent_decode(&r.body).contains(needle)
        })
        .map(|e| e.seq)
        .collect();
    TriggerMatch { full_window: seqs.is_empty(), seqs }
}

/// `application/x-www-form-urlencoded` decoding; malformed escapes are kept
/// verbatim.
pub fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'+' => out.push(b' '),
            b'%' if i + 2 < bytes.len() => {
                let hex = |b: u8| (b as char).to_digit(16);
                match (hex(bytes[i + 1]), hex(bytes[i + 2])) {
                    (Some(h), Some(l)) => {
                        out.push((h * 16 + l) as u8);
                        i += 3;
                        continue;
                    }
                    _ => out.push(b'%'),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// Listening sockets from a `/proc/net/tcp` or `/proc/net/udp` table as
/// `(port, inode)` pairs. TCP rows count when in LISTEN state, UDP rows when
/// unconnected (state 07).
pub fn parse_proc_net(table: &str, proto: Proto) -> Vec<(u16, u64)> {
    let wanted = match proto {
        Proto::TCP => "0A",
        Proto::UDP => "07",
    };
    let mut out: Vec<(u16, u64)> = table
        .lines()
        .skip(1)
        .filter_map(|line| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 10 || !cols[3].eq_ignore_ascii_case(wanted) {
                return None;
            }
            let port_hex = cols[1].rsplit(':').next()?;
            let port = u16::from_str_radix(port_hex, 16).ok()?;
            let inode = cols[9].parse().ok()?;
            Some((port, inode))
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn entry(hash: &str) -> FileEntry {
        FileEntry { size: 1, mtime: 0, content_hash: hash.into() }
    }

    fn snap(label: SnapshotLabel, files: &[(&str, &str)]) -> Snapshot {
        let mut s = Snapshot::new(label);
        for (p, h) in files {
            s.files.insert((*p).into(), entry(h));
        }
        s
    }

    #[test]
    fn added_file() {
        let a = snap(SnapshotLabel::PostBoot, &[("/x", "1")]);
        let b = snap(SnapshotLabel::PostScan, &[("/x", "1"), ("/y", "2")]);
        let d = diff_snapshots(&a, &b).unwrap();
        assert_eq!(d.added, vec![String::from("/y")]);
        assert!(d.modified.is_empty() && d.deleted.is_empty());
    }

    #[test]
    fn modification_is_by_hash_not_mtime() {
        let a = snap(SnapshotLabel::PostBoot, &[("/x", "1")]);
        let mut b = snap(SnapshotLabel::PostScan, &[("/x", "1")]);
        b.files.get_mut("/x").unwrap().mtime = 99;
        assert!(diff_snapshots(&a, &b).unwrap().is_empty());
        b.files.get_mut("/x").unwrap().content_hash = "2".into();
        assert_eq!(diff_snapshots(&a, &b).unwrap().modified, vec![String::from("/x")]);
    }

    #[test]
    fn label_order_enforced() {
        let a = snap(SnapshotLabel::PostScan, &[]);
        let b = snap(SnapshotLabel::PostBoot, &[]);
        assert!(diff_snapshots(&a, &b).is_err());
        assert!(diff_snapshots(&a, &a).is_err());
    }

    #[test]
    fn new_services_census_shape() {
        let a = snap(SnapshotLabel::PreEmulation, &[]);
        let mut b = snap(SnapshotLabel::PostBoot, &[]);
        b.services = vec![
            Service { proto: Proto::TCP, port: 554, program: "rtspd".into() },
            Service { proto: Proto::TCP, port: 23, program: "telnetd".into() },
        ];
        let d = diff_snapshots(&a, &b).unwrap();
        assert_eq!(d.new_services.len(), 2);
        assert_eq!(d.new_services[0].port, 23);
    }

    #[test]
    fn log_file_heuristics() {
        let a = snap(SnapshotLabel::PostBoot, &[]);
        let b = snap(
            SnapshotLabel::PostScan,
            &[("/var/log/messages", "1"), ("/tmp/log/lighttpd/error.log", "2"), ("/www/x.log", "3"), ("/tmp/a", "4")],
        );
        let d = diff_snapshots(&a, &b).unwrap();
        assert_eq!(d.log_files.len(), 3);
    }

    #[test]
    fn injection_marker_detection() {
        let diff = SnapshotDiff {
            added: vec!["/tmp/fscope-inj-7f3a".into(), "/var/log/messages".into()],
            ..SnapshotDiff::default()
        };
        let found = detect_injection_artifacts(&diff, "fscope-inj-", "fw");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].category, Category::CommandExecution);
        assert!(found[0].is_high());
        assert_eq!(found[0].locator.target, "/tmp/fscope-inj-7f3a");
        let none = SnapshotDiff { added: vec!["/var/log/messages".into()], ..SnapshotDiff::default() };
        assert!(detect_injection_artifacts(&none, "fscope-inj-", "fw").is_empty());
    }

    fn req(seq: u64, url: &str, body: &str) -> TranscriptEntry {
        TranscriptEntry {
            seq,
            request: RecordedRequest {
                method: "GET".into(),
                url: url.into(),
                headers: vec![],
                body: body.into(),
                truncated: false,
            },
            response: RecordedResponse { status: 200, headers: vec![], body: String::new(), truncated: false },
            t: 0,
        }
    }

    #[test]
    fn trigger_attribution() {
        let mut t = HttpTranscript::new();
        t.push(req(0, "/index.html", "")).unwrap();
        t.push(req(1, "/cgi-bin/ping.cgi?ip=%3B+touch+%2Ftmp%2Ffscope-inj-7f3a", "")).unwrap();
        t.push(req(2, "/cgi-bin/ping.cgi", "ip=1")).unwrap();
        t.push(req(3, "/cgi-bin/x.cgi", "a=touch /tmp/fscope-inj-7f3a")).unwrap();
        let m = find_trigger_requests(&t, "/tmp/fscope-inj-7f3a");
        assert_eq!(m.seqs, vec![1, 3]);
        assert!(!m.full_window);
        let none = find_trigger_requests(&t, "fscope-inj-0000");
        assert!(none.seqs.is_empty() && none.full_window);
    }

    #[test]
    fn transcript_seq_strictly_increases() {
        let mut t = HttpTranscript::new();
        t.push(req(0, "/", "")).unwrap();
        assert!(t.push(req(0, "/", "")).is_err());
        assert_eq!(t.next_seq(), 1);
    }

    #[test]
    fn percent_decoding() {
        assert_eq!(percent_decode("a%3Bb+c%2"), "a;b c%2");
        assert_eq!(percent_decode("%zz%"), "%zz%");
    }

    #[test]
    fn body_truncation() {
        let big = "é".repeat(BODY_LIMIT);
        let (cut, truncated) = truncate_body(&big);
        assert!(truncated && cut.len() <= BODY_LIMIT);
        assert_eq!(truncate_body("x"), ("x".into(), false));
    }

    #[test]
    fn proc_net_listeners() {
        let tcp = "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n   0: 00000000:0050 00000000:0000 0A 00000000:00000000 00:00000000 00000000     0        0 1234 1 0 100 0 0 10 0\n   1: 0100007F:0017 0100007F:9C40 01 00000000:00000000 00:00000000 00000000     0        0 99 1\n";
        assert_eq!(parse_proc_net(tcp, Proto::TCP), vec![(80, 1234)]);
    }

    #[test]
    fn pseudo_paths() {
        assert!(is_pseudo_path("/proc/net/tcp"));
        assert!(is_pseudo_path("/dev"));
        assert!(!is_pseudo_path("/device"));
    }
}
