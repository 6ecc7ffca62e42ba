//! Stage chain per firmware, the batch worker pool, and report rendering.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use firmscope_core::aggregate::select_high_impact;
use firmscope_core::finding::Severity;
use firmscope_core::probe::NonceSource;
use firmscope_core::report::{render_markdown, BatchReport, FirmwareSummary, FunnelStage, TriageParams};
use firmscope_core::session::SessionState;
use firmscope_core::snapshot::SnapshotLabel;
use firmscope_core::triage::{FailureRecord, RootfsFacts};
use firmscope_core::web::{DocRoot, DocRootOrigin, SiteMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archscan::{self, ArchReport};
use crate::collector::{self, CollectReport, TranscriptRecorder, TRANSCRIPT};
use crate::emulation::{self, Backend, BackendKind, EmulationPlan, EmulationSession, DEFAULT_PORTS};
use crate::error::{Error, Result};
use crate::fsroot::{self, RootFsCandidate, RootfsReport};
use crate::scanner::{BuiltinScanner, ExternalScanner, ScanJob, ScanOutcome, ScannerAdapter};
use crate::staticintake::{focus_urls, load_static_findings};
use crate::triage::{z_for_confidence, Classifier, ClassifierRule};
use crate::webscan::{self, WebAnalysis, WebReport};
use crate::workspace::{read_json, write_json, Workspace, OUTCOME};
use crate::{corpus, fsutil};

pub const REPORT_MD: &str = "report.md";
pub const SCAN_FILE: &str = "scan.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriageConfig {
    pub confidence: f64,
    pub half_width: f64,
    pub seed: u64,
}

impl Default for TriageConfig {
    fn default() -> Self {
        TriageConfig { confidence: 0.95, half_width: 0.10, seed: 0 }
    }
}

impl TriageConfig {
    pub fn params(&self) -> Result<TriageParams> {
        Ok(TriageParams { half_width: self.half_width, z: z_for_confidence(self.confidence)?, seed: self.seed })
    }
}

/// Batch configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub boot_timeout_s: u64,
    pub web_timeout_s: u64,
    pub port_candidates: Vec<u16>,
    /// Emulation attempts per firmware (candidates times variants).
    pub max_attempts: usize,
    /// Seed for marker prefixes and scanner nonces.
    pub seed: u64,
    pub qemu_images: Option<PathBuf>,
    /// External scanner command line; the built-in scanner when absent.
    pub scanner: Option<Vec<String>>,
    pub triage: TriageConfig,
    pub classifier: Vec<ClassifierRule>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            boot_timeout_s: 60,
            web_timeout_s: 30,
            port_candidates: DEFAULT_PORTS.to_vec(),
            max_attempts: 6,
            seed: 0,
            qemu_images: None,
            scanner: None,
            triage: TriageConfig::default(),
            classifier: Vec::new(),
        }
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?.parse()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boot_timeout_s == 0 || self.web_timeout_s == 0 {
            return Err(Error::Config("timeouts must be positive".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        if self.scanner.as_ref().map_or(false, |a| a.is_empty()) {
            return Err(Error::Config("empty scanner command".into()));
        }
        Classifier::new(&self.classifier)?;
        self.triage.params()?;
        Ok(())
    }

    fn scanner(&self, firmware_id: &str, seed: u64) -> Box<dyn ScannerAdapter> {
        match &self.scanner {
            Some(argv) => Box::new(ExternalScanner { argv: argv.clone() }),
            None => Box::new(BuiltinScanner::new(firmware_id, seed)),
        }
    }
}

/// Per-session seed derived from the batch seed and the session id.
pub fn session_seed(seed: u64, session_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{session_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn session_id(firmware_id: &str, candidate: &RootFsCandidate) -> String {
    format!("{}-{}", &firmware_id[..firmware_id.len().min(12)], candidate.label())
}

/// Session directory for an id printed by `emulate`.
pub fn find_session(ws: &Workspace, session_id: &str) -> Result<PathBuf> {
    let prefix = session_id.split('-').next().unwrap_or("");
    let id = ws.resolve_id(prefix).map_err(|_| Error::UnknownSession(session_id.to_string()))?;
    let dir = ws.sessions_dir(&id).join(session_id);
    if dir.join(emulation::SESSION_FILE).is_file() {
        Ok(dir)
    } else {
        Err(Error::UnknownSession(session_id.to_string()))
    }
}

/// Static analysis stages for one firmware.
#[derive(Debug, Clone)]
pub struct StaticStages {
    pub rootfs: RootfsReport,
    pub arch: ArchReport,
    pub web: WebReport,
}

pub fn static_stages(ws: &Workspace, id: &str) -> Result<StaticStages> {
    let rootfs = fsroot::prepare_rootfs(ws, id)?;
    let arch = archscan::detect_architectures(ws, &rootfs)?;
    let web = webscan::analyze_firmware_web(ws, &rootfs)?;
    Ok(StaticStages { rootfs, arch, web })
}

pub fn plan_for(
    stages: &StaticStages,
    candidate: &RootFsCandidate,
    backend: BackendKind,
    config: &Config,
) -> Option<EmulationPlan> {
    let guess = stages.arch.for_candidate(candidate.candidate_index)?;
    let web = stages.web.for_candidate(candidate.candidate_index)?;
    Some(EmulationPlan {
        firmware_id: candidate.firmware_id.clone(),
        candidate: candidate.clone(),
        arch_list: guess.arch_list(),
        backend,
        profiles: web.profiles.clone(),
        docroots: web.docroots.clone(),
        boot_timeout_s: config.boot_timeout_s,
        web_timeout_s: config.web_timeout_s,
        port_candidates: config.port_candidates.clone(),
    })
}

/// Create, boot and launch one session, then take the pre-emulation and
/// post-boot snapshots that apply.
pub fn emulate_candidate(
    ws: &Workspace,
    backend: &dyn Backend,
    plan: EmulationPlan,
    config: &Config,
) -> Result<EmulationSession> {
    let sid = session_id(&plan.firmware_id, &plan.candidate);
    let dir = ws.sessions_dir(&plan.firmware_id).join(&sid);
    let prefix = NonceSource::new(session_seed(config.seed, &sid)).marker_prefix();
    let mut session = EmulationSession::create(backend, plan, &dir, &sid, &prefix)?;
    if session.state() != SessionState::Prepared {
        return Ok(session);
    }
    collector::snapshot_fs(&mut session, SnapshotLabel::PreEmulation)?;
    if session.boot()? == SessionState::Booted && session.launch_web()? == SessionState::WebUp {
        collector::snapshot_fs(&mut session, SnapshotLabel::PostBoot)?;
    }
    Ok(session)
}

/// Site map scanned for a web-up session: the first document root, or the
/// server root alone when none was found.
fn scan_sitemap(plan: &EmulationPlan, web: Option<&WebAnalysis>) -> SiteMap {
    web.and_then(|w| w.sitemaps.first().cloned()).filter(|s| !s.urls.is_empty()).unwrap_or_else(|| SiteMap {
        docroot: plan.docroots.first().cloned().unwrap_or(DocRoot {
            dir_rel_path: String::new(),
            index_files: Vec::new(),
            technologies: Default::default(),
            origin: DocRootOrigin::Discovered,
        }),
        urls: vec!["/".to_string()],
    })
}

/// The emulate stage alone: try candidates until one serves HTTP and
/// return every session record, in attempt order.
pub fn emulate_firmware(
    ws: &Workspace,
    id: &str,
    backend: &dyn Backend,
    config: &Config,
) -> Result<Vec<emulation::SessionRecord>> {
    let stages = static_stages(ws, id)?;
    let mut records = Vec::new();
    for candidate in stages.rootfs.candidates.iter().take(config.max_attempts) {
        let Some(plan) = plan_for(&stages, candidate, backend.kind(), config) else { continue };
        let session = emulate_candidate(ws, backend, plan, config)?;
        let up = session.record.reached_web;
        records.push(session.record.clone());
        if up {
            break;
        }
    }
    Ok(records)
}

/// Scan a web-up session, snapshot after the scan and collect.
pub fn scan_and_collect(
    session: &mut EmulationSession,
    sitemap: SiteMap,
    focus: Option<Vec<String>>,
    config: &Config,
) -> Result<(ScanOutcome, CollectReport)> {
    let base_url = session.record.base_url.clone().ok_or_else(|| Error::Snapshot("session has no web interface".into()))?;
    let job = ScanJob {
        base_url,
        sitemap,
        injection_marker_prefix: session.record.marker_prefix.clone(),
        focus_paths: focus,
    };
    let seed = session_seed(config.seed, &session.record.session_id).wrapping_add(1);
    let scanner = config.scanner(&session.record.firmware_id, seed);
    let mut recorder = TranscriptRecorder::open(&session.dir().join(TRANSCRIPT))?;
    let outcome = scanner.scan(&job, &mut recorder)?;
    write_json(&session.dir().join(SCAN_FILE), &outcome)?;
    collector::snapshot_fs(session, SnapshotLabel::PostScan)?;
    let report = collector::collect(session.dir())?;
    Ok((outcome, report))
}

/// Focus paths from stored High static findings under `docroot`.
pub fn static_focus(ws: &Workspace, id: &str, docroot_rel: &str) -> Result<Option<Vec<String>>> {
    let files = select_high_impact(&load_static_findings(ws, id)?);
    let urls = focus_urls(&files, docroot_rel);
    Ok((!urls.is_empty()).then_some(urls))
}

/// 3 when the web interface answered, 2 when only the web launch failed,
/// 1 for chroot-stage failures.
fn attempt_rank(session: &EmulationSession) -> u8 {
    use emulation::EmuFailure::*;
    match session.record.failure {
        _ if session.record.reached_web => 3,
        Some(NoWebServer | WebLaunchFailed | WebTimeout) => 2,
        _ => 1,
    }
}

/// Run every stage for one firmware and persist `outcome.json`.
pub fn analyze_firmware(ws: &Workspace, id: &str, backend: &dyn Backend, config: &Config) -> Result<FirmwareSummary> {
    let image = corpus::load(ws, id)?;
    let mut summary = FirmwareSummary::new(id);
    summary.outcome.detail = format!("selection {:?}", image.selection);
    let stages = static_stages(ws, id)?;
    let static_findings = load_static_findings(ws, id)?;
    summary.findings.extend(static_findings.iter().cloned());
    if stages.rootfs.candidates.is_empty() {
        summary.outcome.detail = "no root filesystem candidate".into();
        write_json(&ws.firmware_dir(id).join(OUTCOME), &summary)?;
        return Ok(summary);
    }
    summary.outcome.stage = FunnelStage::Candidate;
    summary.arch = stages.arch.for_candidate(0).map(|g| g.winner);
    if let Some(w) = stages.web.for_candidate(0) {
        summary.https = w.https;
    }
    let classifier = Classifier::new(&config.classifier)?;

    struct Best {
        rank: u8,
        failure: Option<FailureRecord>,
        label: String,
    }
    let mut best: Option<Best> = None;
    let mut unavailable = 0usize;
    let attempts: Vec<&RootFsCandidate> = stages.rootfs.candidates.iter().take(config.max_attempts).collect();
    for candidate in &attempts {
        let Some(plan) = plan_for(&stages, candidate, backend.kind(), config) else { continue };
        let mut session = emulate_candidate(ws, backend, plan, config)?;
        if session.record.failure == Some(emulation::EmuFailure::BackendUnavailable) {
            unavailable += 1;
            continue;
        }
        let rank = attempt_rank(&session);
        let failure = match rank {
            1 => Some(classifier.chroot(id, session.boot_log(), RootfsFacts { has_shell: candidate.has_shell() })),
            2 => Some(classifier.web(id, session.web_log())),
            _ => None,
        };
        if best.as_ref().map_or(true, |b| rank > b.rank) {
            if rank >= 2 {
                summary.arch = session.record.active_arch.or(summary.arch);
            }
            if let Some(w) = stages.web.for_candidate(candidate.candidate_index) {
                summary.https = w.https;
            }
            best = Some(Best { rank, failure, label: candidate.label() });
        }
        if rank == 3 {
            let web = stages.web.for_candidate(candidate.candidate_index);
            let sitemap = scan_sitemap(&session.plan, web);
            let focus = static_focus(ws, id, &sitemap.docroot.dir_rel_path)?;
            summary.banner = session.record.banner.clone();
            summary.technologies = sitemap.docroot.technologies.clone();
            let (outcome, collected) = scan_and_collect(&mut session, sitemap, focus, config)?;
            summary.new_services = collected.new_services();
            summary.findings.extend(outcome.findings);
            summary.findings.extend(collected.findings);
            session.stop()?;
            break;
        }
        session.stop()?;
    }
    if best.is_none() && unavailable > 0 {
        return Err(Error::BackendUnavailable(format!("{} cannot run firmware {id}", backend.kind())));
    }
    summary.findings.sort();
    summary.findings.dedup();
    if let Some(b) = best {
        match b.rank {
            3 => {
                summary.outcome.stage = FunnelStage::WebServerOK;
                summary.outcome.detail = format!("web interface up via {}", b.label);
                if summary.findings.iter().any(|f| f.severity == Severity::High) {
                    summary.outcome.stage = FunnelStage::Vulnerable;
                    let n = summary.findings.iter().filter(|f| f.severity == Severity::High).count();
                    summary.outcome.detail = format!("{n} high-impact findings via {}", b.label);
                }
            }
            2 => {
                summary.outcome.stage = FunnelStage::ChrootOK;
                summary.outcome.detail = format!("web launch failed via {}", b.label);
            }
            _ => summary.outcome.detail = format!("chroot failed via {}", b.label),
        }
        summary.failures.extend(b.failure);
    }
    write_json(&ws.firmware_dir(id).join(OUTCOME), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOptions {
    pub backend: BackendKind,
    pub jobs: usize,
    /// Recompute firmware that already have an outcome.
    pub fresh: bool,
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn run_one(ws: &Workspace, id: &str, backend: &dyn Backend, config: &Config, fresh: bool) -> Result<FirmwareSummary> {
    let path = ws.firmware_dir(id).join(OUTCOME);
    if !fresh {
        if let Ok(s) = read_json::<FirmwareSummary>(&path) {
            return Ok(s);
        }
    }
    let _lock = ws.lock(id)?;
    let result = panic::catch_unwind(AssertUnwindSafe(|| analyze_firmware(ws, id, backend, config)));
    let detail = match result {
        Ok(Ok(s)) => return Ok(s),
        Ok(Err(e @ Error::BackendUnavailable(_))) => return Err(e),
        Ok(Err(e)) => format!("error: {e}"),
        Err(p) => format!("panic: {}", panic_text(p.as_ref())),
    };
    log::error!("firmware {id}: {detail}");
    let mut summary = FirmwareSummary::new(id);
    summary.outcome.detail = detail;
    write_json(&path, &summary)?;
    Ok(summary)
}

/// Analyze every ingested firmware in a bounded pool and write
/// `report.json` and `report.md`.
pub fn run_batch(ws: &Workspace, config: &Config, opts: &BatchOptions) -> Result<BatchReport> {
    config.validate()?;
    let params = config.triage.params()?;
    let backend = emulation::make_backend(opts.backend, config.qemu_images.clone());
    let ids = ws.ids()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<FirmwareSummary>> =
        pool.install(|| ids.par_iter().map(|id| run_one(ws, id, backend.as_ref(), config, opts.fresh)).collect());
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = BatchReport::build(&summaries, &params)?;
    write_json(&ws.report_path(), &report)?;
    fsutil::write_atomic(&ws.root().join(REPORT_MD), render_markdown(&report).as_bytes())?;
    Ok(report)
}

/// Stored outcomes of every ingested firmware that has one.
pub fn load_summaries(ws: &Workspace) -> Result<Vec<FirmwareSummary>> {
    let mut out = Vec::new();
    for id in ws.ids()? {
        let p = ws.firmware_dir(&id).join(OUTCOME);
        if p.is_file() {
            out.push(read_json(&p)?);
        }
    }
    Ok(out)
}

/// Rebuild the batch report from stored outcomes.
pub fn build_report(ws: &Workspace, config: &Config) -> Result<BatchReport> {
    Ok(BatchReport::build(&load_summaries(ws)?, &config.triage.params()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?} (json, md)"))),
        }
    }
}

pub fn render_report(report: &BatchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("reports serialize") + "\n",
        ReportFormat::Markdown => render_markdown(report),
    }
}
