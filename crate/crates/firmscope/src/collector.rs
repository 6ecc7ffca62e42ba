//! Snapshots of the guest filesystem and services, their diffs, the HTTP
//! transcript and injection-artifact attribution.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use firmscope_core::finding::Finding;
use firmscope_core::paths;
use firmscope_core::session::SessionState;
use firmscope_core::snapshot::{
    detect_injection_artifacts, diff_snapshots, find_trigger_requests, is_pseudo_path, truncate_body, FileEntry,
    HttpTranscript, RecordedRequest, RecordedResponse, Snapshot, SnapshotDiff, SnapshotLabel, TranscriptEntry,
    TriggerMatch,
};
use serde::{Deserialize, Serialize};

use crate::emulation::{EmulationSession, SessionRecord, SESSION_FILE};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{self, EntryKind};
use crate::workspace::{read_json, write_json};

pub const TRANSCRIPT: &str = "transcript.jsonl";
pub const COLLECT_FILE: &str = "collect.json";

/// Guest-absolute manifest of regular files and symlinks under `root`.
/// Symlinks hash their target text.
pub fn manifest(root: &Path) -> Result<BTreeMap<String, FileEntry>> {
    let mut out = BTreeMap::new();
    for e in fsutil::walk(root)?.entries {
        let key = paths::to_guest(&e.rel);
        if e.kind == EntryKind::Dir || is_pseudo_path(&key) {
            continue;
        }
        let host = root.join(&e.rel);
        let meta = fs::symlink_metadata(&host).at(&host)?;
        let mtime = meta.modified().ok().and_then(|t| t.duration_since(UNIX_EPOCH).ok()).map_or(0, |d| d.as_secs() as i64);
        let (size, content_hash) = match e.kind {
            EntryKind::Symlink => {
                let target = fs::read_link(&host).at(&host)?.to_string_lossy().into_owned();
                (target.len() as u64, fsutil::sha256_hex(format!("symlink:{target}").as_bytes()))
            }
            _ => (meta.len(), fsutil::sha256_file(&host).unwrap_or_else(|_| crate::corpus::UNREADABLE.to_string())),
        };
        out.insert(key, FileEntry { size, mtime, content_hash });
    }
    Ok(out)
}

fn admits(state: SessionState, label: SnapshotLabel) -> bool {
    match label {
        SnapshotLabel::PreEmulation => state == SessionState::Prepared,
        SnapshotLabel::PostBoot => matches!(state, SessionState::Booted | SessionState::WebUp),
        SnapshotLabel::PostScan => state == SessionState::WebUp,
    }
}

pub fn snapshot_path(session_dir: &Path, label: SnapshotLabel) -> PathBuf {
    session_dir.join("snapshots").join(format!("{}.json", label.tag()))
}

/// Capture and persist a snapshot. Labels are unique per session and must
/// follow capture order.
pub fn snapshot_fs(session: &mut EmulationSession, label: SnapshotLabel) -> Result<Snapshot> {
    if !admits(session.state(), label) {
        return Err(Error::Snapshot(format!("{label} not allowed in state {:?}", session.state())));
    }
    if session.record.snapshots.iter().any(|l| *l >= label) {
        return Err(Error::Snapshot(format!("{label} taken out of order or twice")));
    }
    let guest = session.guest_mut().ok_or_else(|| Error::Snapshot("guest unreachable".into()))?;
    let mut files = manifest(guest.root())?;
    files.extend(guest.extra_manifest());
    let services = if label == SnapshotLabel::PreEmulation { Vec::new() } else { guest.services() };
    let snap = Snapshot { label, files, services };
    write_json(&snapshot_path(session.dir(), label), &snap)?;
    session.note_snapshot(label)?;
    Ok(snap)
}

pub fn load_snapshot(session_dir: &Path, label: SnapshotLabel) -> Result<Option<Snapshot>> {
    let p = snapshot_path(session_dir, label);
    if !p.exists() {
        return Ok(None);
    }
    read_json(&p).map(Some)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Single writer of a session's `transcript.jsonl`.
pub struct TranscriptRecorder {
    file: File,
    transcript: HttpTranscript,
}

impl TranscriptRecorder {
    /// Open for appending; sequence numbers continue after existing entries.
    pub fn open(path: &Path) -> Result<Self> {
        let transcript = load_transcript(path)?;
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        Ok(TranscriptRecorder { file, transcript })
    }

    pub fn record(&mut self, mut request: RecordedRequest, mut response: RecordedResponse) -> Result<u64> {
        let (body, cut) = truncate_body(&request.body);
        request.body = body;
        request.truncated |= cut;
        let (body, cut) = truncate_body(&response.body);
        response.body = body;
        response.truncated |= cut;
        let seq = self.transcript.next_seq();
        let entry = TranscriptEntry { seq, request, response, t: now_ms() };
        let line = serde_json::to_string(&entry).expect("transcript entries serialize");
        writeln!(self.file, "{line}").map_err(|source| Error::Io { path: TRANSCRIPT.into(), source })?;
        self.transcript.push(entry).expect("seq is next_seq");
        Ok(seq)
    }

    pub fn transcript(&self) -> &HttpTranscript {
        &self.transcript
    }
}

/// Read a transcript; malformed lines are skipped.
pub fn load_transcript(path: &Path) -> Result<HttpTranscript> {
    let mut t = HttpTranscript::new();
    let Ok(file) = File::open(path) else { return Ok(t) };
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        if let Ok(entry) = serde_json::from_str::<TranscriptEntry>(&line) {
            if t.push(entry).is_err() {
                log::warn!("{}: sequence out of order, entry ignored", path.display());
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub from: SnapshotLabel,
    pub to: SnapshotLabel,
    pub diff: SnapshotDiff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub artifact: String,
    pub trigger: TriggerMatch,
    /// URLs of the matching requests, in sequence order.
    pub urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectReport {
    pub session_id: String,
    pub diffs: Vec<DiffRecord>,
    pub findings: Vec<Finding>,
    pub attributions: Vec<Attribution>,
}

impl CollectReport {
    /// Services that appeared after the pre-emulation snapshot.
    pub fn new_services(&self) -> Vec<firmscope_core::snapshot::Service> {
        let mut s: Vec<_> = self.diffs.iter().filter(|d| d.from == SnapshotLabel::PreEmulation).flat_map(|d| d.diff.new_services.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Diff consecutive snapshots, detect injection artifacts in what the scan
/// added, and attribute each artifact to the requests carrying its name.
pub fn collect(session_dir: &Path) -> Result<CollectReport> {
    let record: SessionRecord = read_json(&session_dir.join(SESSION_FILE))?;
    let snaps: Vec<Snapshot> =
        SnapshotLabel::ALL.iter().filter_map(|l| load_snapshot(session_dir, *l).transpose()).collect::<Result<_>>()?;
    let mut diffs = Vec::new();
    for pair in snaps.windows(2) {
        let diff = diff_snapshots(&pair[0], &pair[1]).map_err(|e| Error::Snapshot(e.to_string()))?;
        write_json(&session_dir.join(format!("diff-{}-{}.json", pair[0].label.tag(), pair[1].label.tag())), &diff)?;
        diffs.push(DiffRecord { from: pair[0].label, to: pair[1].label, diff });
    }
    let transcript = load_transcript(&session_dir.join(TRANSCRIPT))?;
    let mut findings = Vec::new();
    let mut attributions = Vec::new();
    if let Some(scan) = diffs.iter().find(|d| d.to == SnapshotLabel::PostScan) {
        for mut f in detect_injection_artifacts(&scan.diff, &record.marker_prefix, &record.firmware_id) {
            let trigger = find_trigger_requests(&transcript, &f.locator.target);
            let urls: Vec<String> = trigger
                .seqs
                .iter()
                .filter_map(|s| transcript.entries().iter().find(|e| e.seq == *s))
                .map(|e| e.request.url.clone())
                .collect();
            if let Some(first) = urls.first() {
                f.evidence = format!("{}; triggered by request #{} {}", f.evidence, trigger.seqs[0], first);
            }
            attributions.push(Attribution { artifact: f.locator.target.clone(), trigger, urls });
            findings.push(f);
        }
    }
    let report = CollectReport { session_id: record.session_id, diffs, findings, attributions };
    write_json(&session_dir.join(COLLECT_FILE), &report)?;
    Ok(report)
}
