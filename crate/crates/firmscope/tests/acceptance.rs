//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use firmscope::collector::{self, load_transcript, TRANSCRIPT};
use firmscope::corpus;
use firmscope::emulation::{fixture::FixtureBackend, BackendKind};
use firmscope::fixtures::{build_corpus, default_specs, fake_elf, FixtureSpec, FixtureTrait};
use firmscope::fsroot::{detect_broken_symlinks, generate_variants, RootFsCandidate};
use firmscope::pipeline::{analyze_firmware, load_summaries, run_batch, BatchOptions, Config};
use firmscope::workspace::Workspace;
use firmscope_core::arch::{ArchFamily, ArchId, ArchTally, Endianness};
use firmscope_core::finding::{Category, Source};
use firmscope_core::report::{BatchReport, FirmwareSummary, FunnelStage};
use firmscope_core::rootfs::{RepairReason, Variant};
use firmscope_core::snapshot::{percent_decode, FileEntry, Snapshot, SnapshotDiff, SnapshotLabel};
use firmscope_core::stats::{estimate_proportion, plan_sample, Z_95};
use firmscope_core::triage::{easy_fix_bound, Cause, FailureRecord, FailureStage};
use firmscope_core::web::discover_docroots;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Percentage-point tolerances.
const POINT_TOL_PP: f64 = 0.1;
const HALF_WIDTH_TOL_PP: f64 = 0.2;
const BOUND_TOL_PP: f64 = 0.2;

const FUNNEL: [u64; 5] = [12, 10, 8, 6, 3];
const FUNNEL_DEADLINE: Duration = Duration::from_secs(60);
const BENIGN_SEEDS: u64 = 100;
const VULN_SEEDS: u64 = 10;
const RANDOM_TREES: u64 = 1000;
const SANITIZE_TREES: u64 = 60;
const RANDOM_MANIFESTS: u64 = 1000;
const VOTE_SHUFFLES: u64 = 200;

/// (k, n, N, point %, half-width %) as published.
const PUBLISHED: [(u64, u64, u64, f64, f64); 7] = [
    (36, 88, 1092, 40.9, 9.8),
    (10, 88, 1092, 11.3, 6.3),
    (26, 88, 1092, 29.5, 9.1),
    (52, 88, 1092, 59.1, 9.8),
    (62, 88, 1092, 70.4, 9.1),
    (45, 69, 242, 65.2, 9.5),
    (9, 69, 242, 13.0, 6.7),
];

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn pct(x: f64) -> f64 {
    x * 100.0
}

fn c1_intervals() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    for (k, n, big_n, point, hw) in PUBLISHED {
        let e = estimate_proportion(k, n, big_n, Z_95).map_err(|e| e.to_string())?;
        let (dp, dh) = ((pct(e.p) - point).abs(), (pct(e.half_width) - hw).abs());
        ensure(dp <= POINT_TOL_PP && dh <= HALF_WIDTH_TOL_PP, || {
            format!("({k},{n},{big_n}) gave {:.2}% ± {:.2}%, published {point}% ± {hw}%", pct(e.p), pct(e.half_width))
        })?;
        worst = (worst.0.max(dp), worst.1.max(dh));
    }
    Ok(format!("7/7 within tolerance, max error {:.3} pp point, {:.3} pp half-width", worst.0, worst.1))
}

fn records(stage: FailureStage, mix: &[(Cause, usize)]) -> Vec<FailureRecord> {
    mix.iter()
        .flat_map(|&(cause, count)| (0..count).map(move |i| FailureRecord::new(&format!("fw{i}"), stage, cause, "")))
        .collect()
}

fn c2_lower_bounds() -> Check {
    // Chroot sample: 10 exec-format + 52 false positives easy, 26 partial.
    let chroot = records(
        FailureStage::Chroot,
        &[(Cause::ExecFormatError, 10), (Cause::FalsePositiveChroot, 52), (Cause::PartialFirmware, 26)],
    );
    // Web sample: 15 init + 9 launch errors easy, 45 missing devices.
    let web = records(
        FailureStage::WebServer,
        &[(Cause::InitPid, 15), (Cause::WebLaunchError, 9), (Cause::MissingDevice, 45)],
    );
    let mut out = Vec::new();
    for (recs, stage, big_n, want) in [(&chroot, FailureStage::Chroot, 1092, 61.3), (&web, FailureStage::WebServer, 242, 25.2)] {
        let b = easy_fix_bound(recs, stage, big_n, Z_95).map_err(|e| e.to_string())?;
        let got = pct(b.lower_bound);
        ensure((got - want).abs() <= BOUND_TOL_PP, || format!("{stage:?}: {got:.2}% vs {want}%"))?;
        out.push(format!("{stage:?} {got:.2}%"));
    }
    Ok(out.join(", "))
}

/// Half-width in percent under the usual formula, computed without the core
/// crate.
fn oracle_half_width(k: u64, n: u64, big_n: u64) -> f64 {
    let p = k as f64 / n as f64;
    100.0 * 1.96 * (p * (1.0 - p) / n as f64).sqrt() * ((big_n - n) as f64 / (big_n - 1) as f64).sqrt()
}

fn renders_as(value: f64, shown: f64) -> bool {
    let rounded = (value * 10.0).round() / 10.0;
    let truncated = (value * 10.0 + 1e-9).floor() / 10.0;
    (rounded - shown).abs() < 1e-6 || (truncated - shown).abs() < 1e-6
}

/// Sample sizes consistent with every published (point, ±) pair for `big_n`.
fn oracle_sample_sizes(big_n: u64) -> BTreeSet<u64> {
    let rows: Vec<_> = PUBLISHED.iter().filter(|r| r.2 == big_n).collect();
    (2..big_n)
        .filter(|&n| {
            rows.iter().all(|&&(_, _, _, point, hw)| {
                (0..=n).any(|k| renders_as(100.0 * k as f64 / n as f64, point) && renders_as(oracle_half_width(k, n, big_n), hw))
            })
        })
        .collect()
}

fn c3_planner() -> Check {
    let mut out = Vec::new();
    for (big_n, want) in [(1092u64, 88u64), (242, 69)] {
        let solved = oracle_sample_sizes(big_n);
        ensure(solved == BTreeSet::from([want]), || format!("oracle solutions for N={big_n}: {solved:?}"))?;
        let planned = plan_sample(big_n, 0.10, 1.96).map_err(|e| e.to_string())?.n;
        ensure(planned == want, || format!("plan_sample({big_n}) = {planned}, oracle {want}"))?;
        out.push(format!("N={big_n} -> {planned}"));
    }
    Ok(out.join(", ") + " (oracle solution unique)")
}

/// A built fixture corpus plus a map from firmware id to fixture name.
struct Corpus {
    _dir: tempfile::TempDir,
    trees: Vec<(FixtureSpec, PathBuf)>,
}

impl Corpus {
    fn build() -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_specs();
        let trees = build_corpus(&specs, &dir.path().join("corpus"), 0).unwrap();
        Corpus { trees: specs.into_iter().zip(trees).collect(), _dir: dir }
    }

    fn ingest(&self, ws: &Workspace, only: impl Fn(&FixtureSpec) -> bool) -> BTreeMap<String, String> {
        self.trees
            .iter()
            .filter(|(s, _)| only(s))
            .map(|(s, t)| (corpus::ingest(ws, t, None).unwrap().id, s.name.clone()))
            .collect()
    }
}

struct Batch {
    _dir: tempfile::TempDir,
    ws: Workspace,
    names: BTreeMap<String, String>,
    report: BatchReport,
    elapsed: Duration,
}

impl Batch {
    fn run(corpus: &Corpus, jobs: usize) -> Batch {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path().join("ws")).unwrap();
        let start = Instant::now();
        let names = corpus.ingest(&ws, |_| true);
        let opts = BatchOptions { backend: BackendKind::Fixture, jobs, fresh: true };
        let report = run_batch(&ws, &Config::default(), &opts).unwrap();
        Batch { elapsed: start.elapsed(), _dir: dir, ws, names, report }
    }

    fn summary(&self, name: &str) -> FirmwareSummary {
        load_summaries(&self.ws)
            .unwrap()
            .into_iter()
            .find(|s| self.names[&s.outcome.firmware_id] == name)
            .unwrap()
    }

    fn id(&self, name: &str) -> String {
        self.names.iter().find(|(_, n)| *n == name).unwrap().0.clone()
    }
}

fn c4_funnel(one: &Batch, eight: &Batch) -> Check {
    let counts: Vec<u64> = FunnelStage::ALL.iter().map(|s| one.report.funnel_count(*s)).collect();
    ensure(counts == FUNNEL, || format!("funnel {counts:?}, expected {FUNNEL:?}"))?;
    for b in [one, eight] {
        ensure(b.elapsed < FUNNEL_DEADLINE, || format!("run took {:?}", b.elapsed))?;
    }
    ensure(one.report == eight.report, || "jobs 1 and jobs 8 reports differ".into())?;
    Ok(format!(
        "funnel {counts:?}, {:.2}s (jobs 1) / {:.2}s (jobs 8), reports identical",
        one.elapsed.as_secs_f64(),
        eight.elapsed.as_secs_f64()
    ))
}

fn session_dirs(ws: &Workspace, id: &str) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(ws.sessions_dir(id))
        .map(|rd| rd.map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    dirs.sort();
    dirs
}

fn guest_markers(session: &Path) -> usize {
    walkdir::WalkDir::new(session.join("guest"))
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("fscope-inj-"))
        .count()
}

/// Every injection finding of a vulnerable session is in the PostBoot to
/// PostScan diff and attributed to requests carrying its nonce.
fn check_injection_session(session: &Path) -> Result<usize, String> {
    let report = collector::collect(session).map_err(|e| e.to_string())?;
    let scan_diff = report
        .diffs
        .iter()
        .find(|d| d.from == SnapshotLabel::PostBoot && d.to == SnapshotLabel::PostScan)
        .ok_or("no PostBoot -> PostScan diff")?;
    let hits: Vec<_> = report.findings.iter().filter(|f| f.category == Category::CommandExecution).collect();
    ensure(!hits.is_empty(), || format!("{}: no CommandExecution finding", session.display()))?;
    let transcript = load_transcript(&session.join(TRANSCRIPT)).map_err(|e| e.to_string())?;
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(session.join("session.json")).unwrap()).unwrap();
    let prefix = record["marker_prefix"].as_str().unwrap();
    for f in &hits {
        let artifact = &f.locator.target;
        ensure(scan_diff.diff.added.contains(artifact), || format!("{artifact} not added during the scan"))?;
        let name = artifact.rsplit('/').next().unwrap();
        let nonce = name.strip_prefix(prefix).filter(|n| !n.is_empty()).ok_or(format!("{name} lacks the session prefix"))?;
        let a = report.attributions.iter().find(|a| &a.artifact == artifact).ok_or(format!("{artifact} unattributed"))?;
        ensure(!a.trigger.seqs.is_empty(), || format!("{artifact}: empty trigger set"))?;
        for seq in &a.trigger.seqs {
            let e = transcript.entries().iter().find(|e| e.seq == *seq).ok_or("dangling seq")?;
            let carried = percent_decode(&e.request.url) + &percent_decode(&e.request.body);
            ensure(carried.contains(nonce), || format!("request {seq} lacks nonce {nonce}"))?;
        }
    }
    Ok(hits.len())
}

fn c5_injection_oracle(corpus: &Corpus) -> Check {
    let t = tempfile::tempdir().unwrap();
    let ws = Workspace::open(t.path().join("ws")).unwrap();
    let emulated_benign = |s: &FixtureSpec| s.has(FixtureTrait::Benign) && s.has(FixtureTrait::FullRootfs);
    let names = corpus.ingest(&ws, |s| s.has(FixtureTrait::VulnCmdInjection) || emulated_benign(s));
    let backend = FixtureBackend;
    let (mut vuln_runs, mut benign_runs, mut artifacts) = (0, 0, 0);
    let mut prefixes = BTreeSet::new();
    for (id, name) in &names {
        let vulnerable = corpus.trees.iter().any(|(s, _)| &s.name == name && s.has(FixtureTrait::VulnCmdInjection));
        let seeds = if vulnerable { VULN_SEEDS } else { BENIGN_SEEDS };
        for seed in 0..seeds {
            let config = Config { seed, ..Config::default() };
            let summary = analyze_firmware(&ws, id, &backend, &config).map_err(|e| e.to_string())?;
            let sessions = session_dirs(&ws, id);
            let dynamic_cmd =
                summary.findings.iter().filter(|f| f.category == Category::CommandExecution && f.source == Source::Dynamic).count();
            if vulnerable {
                let up: Vec<_> = sessions.iter().filter(|s| s.join(TRANSCRIPT).is_file()).collect();
                ensure(up.len() == 1, || format!("{name}: {} scanned sessions", up.len()))?;
                artifacts += check_injection_session(up[0]).map_err(|e| format!("{name} seed {seed}: {e}"))?;
                vuln_runs += 1;
            } else {
                ensure(summary.outcome.stage == FunnelStage::WebServerOK, || format!("{name} seed {seed}: {:?}", summary.outcome.stage))?;
                ensure(dynamic_cmd == 0, || format!("{name} seed {seed}: {dynamic_cmd} CommandExecution findings"))?;
                let markers: usize = sessions.iter().map(|s| guest_markers(s)).sum();
                ensure(markers == 0, || format!("{name} seed {seed}: {markers} marker files"))?;
                benign_runs += 1;
            }
            for s in &sessions {
                let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("session.json")).unwrap()).unwrap();
                prefixes.insert((name.clone(), record["marker_prefix"].as_str().unwrap().to_string()));
            }
        }
    }
    ensure(vuln_runs > 0 && benign_runs > 0, || "fixture corpus lacks vulnerable or benign trees".into())?;
    let benign = names.len() - corpus.trees.iter().filter(|(s, _)| s.has(FixtureTrait::VulnCmdInjection)).count();
    ensure(benign_runs == benign as u64 * BENIGN_SEEDS, || format!("{benign_runs} benign runs"))?;
    ensure(prefixes.len() as u64 >= BENIGN_SEEDS, || "seeds do not vary the marker prefix".into())?;
    Ok(format!(
        "{vuln_runs} vulnerable runs with {artifacts} attributed artifacts; {benign_runs} benign runs with 0 markers, 0 CommandExecution"
    ))
}

fn dynamic(s: &FirmwareSummary, c: Category) -> usize {
    s.findings.iter().filter(|f| f.category == c && f.source == Source::Dynamic).count()
}

fn transcript_hits(b: &Batch, name: &str, path: &str) -> usize {
    session_dirs(&b.ws, &b.id(name))
        .iter()
        .filter_map(|s| load_transcript(&s.join(TRANSCRIPT)).ok())
        .map(|t| t.entries().iter().filter(|e| e.request.url.contains(path)).count())
        .sum()
}

fn c6_xss_csrf(b: &Batch) -> Check {
    let xss = dynamic(&b.summary("xss-lighttpd"), Category::XSS);
    ensure(xss >= 1, || "reflected XSS not detected".into())?;
    // The benign search page escapes its echo and posts with a token.
    ensure(transcript_hits(b, "benign-lighttpd", "/cgi-bin/search.cgi") > 0, || "escaping form never probed".into())?;
    let escaped = dynamic(&b.summary("benign-lighttpd"), Category::XSS);
    ensure(escaped == 0, || format!("escaping fixture flagged {escaped} times"))?;
    let csrf = dynamic(&b.summary("csrf-boa"), Category::CSRF);
    ensure(csrf >= 1, || "token-less POST form not flagged".into())?;
    for n in ["benign-lighttpd", "benign-noconfig-https", "benign-tworoots"] {
        let c = dynamic(&b.summary(n), Category::CSRF);
        ensure(c == 0, || format!("tokened form on {n} flagged"))?;
    }
    Ok(format!("XSS {xss} on reflecting fixture, 0 on escaping; CSRF {csrf} token-less, 0 tokened"))
}

const DIR_NAMES: [&str; 6] = ["www", "web", "cgi-bin", "admin", "recovery", "a"];
const FILE_NAMES: [&str; 10] = [
    "index.html", "INDEX.HTM", "default.asp", "index.cgi", "index.txt", "indexhtml", "style.css", "main.php", "default.shtml", "x.index.html",
];

fn random_tree(rng: &mut ChaCha8Rng) -> Vec<String> {
    let count = rng.gen_range(0..12);
    let mut files: BTreeSet<String> = BTreeSet::new();
    for _ in 0..count {
        let depth = rng.gen_range(0..4);
        let mut parts: Vec<&str> = (0..depth).map(|_| *DIR_NAMES.choose(rng).unwrap()).collect();
        parts.push(FILE_NAMES.choose(rng).unwrap());
        files.insert(parts.join("/"));
    }
    files.into_iter().collect()
}

fn oracle_is_index(file: &str) -> bool {
    let name = file.rsplit('/').next().unwrap().to_lowercase();
    ["index", "default"]
        .iter()
        .flat_map(|stem| ["html", "htm", "shtml", "php", "asp", "cgi"].map(|ext| format!("{stem}.{ext}")))
        .any(|candidate| candidate == name)
}

fn oracle_parent(file: &str) -> String {
    file.rsplit_once('/').map_or(String::new(), |(d, _)| d.to_string())
}

fn oracle_strictly_inside(ancestor: &str, dir: &str) -> bool {
    ancestor != dir && (ancestor.is_empty() || dir.starts_with(&format!("{ancestor}/")))
}

/// Every directory of the tree, index-bearing or not, brute-forced.
fn oracle_docroots(files: &[String]) -> BTreeSet<String> {
    let mut all_dirs: BTreeSet<String> = BTreeSet::from([String::new()]);
    for f in files {
        let mut d = oracle_parent(f);
        while !d.is_empty() {
            all_dirs.insert(d.clone());
            d = oracle_parent(&d);
        }
    }
    let bearing = |d: &str| files.iter().any(|f| oracle_parent(f) == d && oracle_is_index(f));
    all_dirs
        .iter()
        .filter(|d| bearing(d) && !all_dirs.iter().any(|a| oracle_strictly_inside(a, d) && bearing(a)))
        .cloned()
        .collect()
}

fn c7_docroots() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut nonempty = 0;
    for case in 0..RANDOM_TREES {
        let files = random_tree(&mut rng);
        let got: BTreeSet<String> = discover_docroots(&files).into_iter().map(|d| d.dir_rel_path).collect();
        let want = oracle_docroots(&files);
        ensure(got == want, || format!("tree {case} {files:?}: got {got:?}, oracle {want:?}"))?;
        nonempty += usize::from(!want.is_empty());
    }
    let recovery = ["www/index.html".to_string(), "recovery/web/default.html".to_string()];
    let roots: Vec<String> = discover_docroots(&recovery).into_iter().map(|d| d.dir_rel_path).collect();
    ensure(roots == ["recovery/web", "www"], || format!("recovery case gave {roots:?}"))?;
    Ok(format!("{RANDOM_TREES} seeded trees ({nonempty} with docroots) match the oracle; recovery case gives 2 docroots"))
}

/// ELF machine numbers and the family each names, written out from the ELF
/// specification independently of the core constants.
fn oracle_family(machine: u16, little: bool) -> ArchFamily {
    match machine {
        3 => ArchFamily::I386,
        8 if little => ArchFamily::MIPSel,
        8 => ArchFamily::MIPS,
        20 | 21 => ArchFamily::PowerPC,
        40 => ArchFamily::ARM,
        45 | 93 | 195 => ArchFamily::ARC,
        76 => ArchFamily::CRIS,
        113 => ArchFamily::NiosII,
        _ => ArchFamily::Unknown,
    }
}

fn elf_header(ei_data: u8, machine: u16) -> Vec<u8> {
    let mut h = vec![0u8; 52];
    h[..4].copy_from_slice(b"\x7fELF");
    h[4] = 1;
    h[5] = ei_data;
    h[6] = 1;
    let m = if ei_data == 2 { machine.to_be_bytes() } else { machine.to_le_bytes() };
    h[18..20].copy_from_slice(&m);
    h
}

fn c8_architecture() -> Check {
    use firmscope_core::arch::detect_file_arch;
    let mut checked = 0;
    for machine in (0u16..=256).chain([0x3E, 0xB7, 0xF3, 0xFFFF]) {
        for ei_data in 0u8..=3 {
            let got = detect_file_arch(&elf_header(ei_data, machine));
            let want = match ei_data {
                1 | 2 => {
                    let endian = if ei_data == 1 { Endianness::Little } else { Endianness::Big };
                    Some(ArchId::new(oracle_family(machine, ei_data == 1), endian))
                }
                _ => None,
            };
            ensure(got == want, || format!("e_machine {machine} EI_DATA {ei_data}: {got:?} vs {want:?}"))?;
            if let Some(a) = got {
                let endian_ok = a.endianness() == if ei_data == 1 { Endianness::Little } else { Endianness::Big };
                ensure(endian_ok, || format!("e_machine {machine} EI_DATA {ei_data}: endianness {:?}", a.endianness()))?;
            }
            checked += 1;
        }
    }

    let pool = ["arm", "armeb", "mips", "mipsel", "ppc", "i386"].map(|t| ArchId::from_tag(t).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..VOTE_SHUFFLES {
        let mut votes: Vec<ArchId> = (0..rng.gen_range(1..40)).map(|_| *pool.choose(&mut rng).unwrap()).collect();
        let reference = ArchTally::from(votes.clone()).finish();
        for _ in 0..5 {
            votes.shuffle(&mut rng);
            let again = ArchTally::from(votes.clone()).finish();
            ensure(again == reference, || format!("vote depends on order: {votes:?}"))?;
        }
    }

    // A rootfs with two binaries each for ARM and MIPS.
    let t = tempfile::tempdir().unwrap();
    let (arm, mips) = (ArchId::from_tag("arm").unwrap(), ArchId::from_tag("mips").unwrap());
    fs::create_dir_all(t.path().join("bin")).unwrap();
    for (i, a) in [arm, arm, mips, mips].into_iter().enumerate() {
        fs::write(t.path().join(format!("bin/tool{i}")), fake_elf(a, &[], &[])).unwrap();
    }
    let guess = firmscope::archscan::vote_architecture(t.path()).map_err(|e| e.to_string())?;
    let list = guess.arch_list();
    ensure(guess.tie && list.contains(&arm) && list.contains(&mips) && list.len() == 2, || format!("tie gave {guess:?}"))?;
    Ok(format!("{checked} header cells agree; {VOTE_SHUFFLES} shuffled tallies stable; tie lists {:?}", list.iter().map(|a| a.tag()).collect::<Vec<_>>()))
}

fn lexists(p: &Path) -> bool {
    fs::symlink_metadata(p).is_ok()
}

/// Random tree with real files and text files that look like flattened
/// links, some pointing at existing paths and some dangling.
fn random_rootfs(rng: &mut ChaCha8Rng, root: &Path) -> Vec<String> {
    let dirs = ["bin", "sbin", "usr/bin", "lib", "etc", "www"];
    for d in dirs {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let mut real: Vec<String> = Vec::new();
    for i in 0..rng.gen_range(1..8) {
        let rel = format!("{}/real{i}", dirs.choose(rng).unwrap());
        fs::write(root.join(&rel), format!("content {i}\n{}", "x".repeat(rng.gen_range(0..300)))).unwrap();
        real.push(rel);
    }
    let mut all = real.clone();
    for i in 0..rng.gen_range(0..10) {
        let dir = *dirs.choose(rng).unwrap();
        let rel = format!("{dir}/link{i}");
        let target = match rng.gen_range(0..5) {
            0 => format!("/{}", real.choose(rng).unwrap()),
            1 => {
                let t = real.choose(rng).unwrap();
                format!("{}{}", "../".repeat(dir.split('/').count()), t)
            }
            2 => format!("/missing/thing{i}"),
            3 => format!("/{}", all.choose(rng).unwrap()),
            _ => dir.to_string(),
        };
        fs::write(root.join(&rel), target).unwrap();
        all.push(rel);
    }
    all
}

fn c9_sanitization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut sanitized_trees, mut applied) = (0, 0);
    for case in 0..SANITIZE_TREES {
        let t = tempfile::tempdir().unwrap();
        let root = t.path().join("orig");
        let paths = random_rootfs(&mut rng, &root);
        let candidate = RootFsCandidate {
            firmware_id: "0".repeat(64),
            candidate_index: 0,
            root_rel_path: String::new(),
            score: 1,
            key_dirs: Vec::new(),
            key_files: Vec::new(),
            variant: Variant::Original,
            materialized_path: root.clone(),
            packed_path: None,
            repairs: Vec::new(),
        };
        let variants = generate_variants(&candidate, &t.path().join("variants"), &t.path().join("rootfs")).map_err(|e| e.to_string())?;
        let repairable = detect_broken_symlinks(&root).unwrap().iter().filter(|r| r.reason == RepairReason::TargetExists).count();
        ensure(variants.len() == 1 + usize::from(repairable > 0), || format!("tree {case}: {} variants for {repairable} repairable", variants.len()))?;
        for v in &variants[1..] {
            sanitized_trees += 1;
            applied += v.repairs.iter().filter(|r| r.applied).count();
            let left = detect_broken_symlinks(&v.materialized_path).map_err(|e| e.to_string())?;
            let exists: Vec<_> = left.iter().filter(|r| r.reason == RepairReason::TargetExists).collect();
            ensure(exists.is_empty(), || format!("tree {case}: still repairable {exists:?}"))?;
            let lost: Vec<_> = paths.iter().filter(|p| !lexists(&v.materialized_path.join(p))).collect();
            ensure(lost.is_empty(), || format!("tree {case}: sanitizing lost {lost:?}"))?;
            let again = generate_variants(v, &t.path().join("variants2"), &t.path().join("rootfs2")).map_err(|e| e.to_string())?;
            ensure(again.len() == 1, || format!("tree {case}: sanitizing is not a fixpoint"))?;
        }
    }
    ensure(sanitized_trees > 0, || "no generated tree had a repairable link".into())?;
    Ok(format!("{SANITIZE_TREES} seeded trees, {sanitized_trees} sanitized variants ({applied} links restored), no TargetExists left, no path lost"))
}

fn random_snapshot(rng: &mut ChaCha8Rng, label: SnapshotLabel) -> Snapshot {
    let mut s = Snapshot::new(label);
    for _ in 0..rng.gen_range(0..25) {
        let path = format!("/{}/f{}", ["etc", "tmp", "var/log", "www"].choose(rng).unwrap(), rng.gen_range(0..12));
        let hash = format!("{:x}", rng.gen_range(0..3u8));
        s.files.insert(path, FileEntry { size: rng.gen_range(0..100), mtime: rng.gen_range(0..5), content_hash: hash });
    }
    s
}

fn c10_snapshot_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..RANDOM_MANIFESTS {
        let a = random_snapshot(&mut rng, SnapshotLabel::PostBoot);
        let b = random_snapshot(&mut rng, SnapshotLabel::PostScan);
        let (ab, ba) = (SnapshotDiff::between(&a, &b), SnapshotDiff::between(&b, &a));
        ensure(ab.added == ba.deleted && ab.deleted == ba.added, || format!("case {case}: added/deleted not mirrored"))?;
        ensure(ab.modified == ba.modified, || format!("case {case}: modified not symmetric"))?;
        ensure(SnapshotDiff::between(&a, &a).is_empty(), || format!("case {case}: self diff not empty"))?;
    }
    Ok(format!("{RANDOM_MANIFESTS} seeded manifest pairs"))
}

fn report(number: u32, name: &str, check: impl FnOnce() -> Check) -> bool {
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    match result {
        Ok(detail) => {
            println!("PASS criterion {number} ({name}): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL criterion {number} ({name}): {detail}");
            false
        }
    }
}

fn main() -> ExitCode {
    let corpus = Corpus::build();
    let one = Batch::run(&corpus, 1);
    let eight = Batch::run(&corpus, 8);
    let results = [
        report(1, "confidence intervals", c1_intervals),
        report(2, "easy-fix lower bounds", c2_lower_bounds),
        report(3, "sample-size planner", c3_planner),
        report(4, "fixture funnel", || c4_funnel(&one, &eight)),
        report(5, "injection oracle", || c5_injection_oracle(&corpus)),
        report(6, "XSS and CSRF probes", || c6_xss_csrf(&one)),
        report(7, "docroot discovery", c7_docroots),
        report(8, "architecture detection", c8_architecture),
        report(9, "sanitization fixpoint", c9_sanitization),
        report(10, "snapshot algebra", c10_snapshot_algebra),
    ];
    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
