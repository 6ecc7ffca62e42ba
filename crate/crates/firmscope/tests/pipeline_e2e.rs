use std::collections::BTreeMap;

use firmscope::corpus;
use firmscope::emulation::BackendKind;
use firmscope::fixtures::{build_corpus, default_specs};
use firmscope::pipeline::{load_summaries, run_batch, BatchOptions, Config};
use firmscope::workspace::Workspace;
use firmscope_core::finding::{Category, Severity, Source};
use firmscope_core::report::{FirmwareSummary, FunnelStage, EMPTY_BANNER};
use firmscope_core::triage::Cause;

struct Run {
    _dir: tempfile::TempDir,
    ws: Workspace,
    by_name: BTreeMap<String, FirmwareSummary>,
}

fn run(jobs: usize) -> (Run, firmscope_core::report::BatchReport) {
    let t = tempfile::tempdir().unwrap();
    let specs = default_specs();
    let trees = build_corpus(&specs, &t.path().join("corpus"), 0).unwrap();
    let ws = Workspace::open(t.path().join("ws")).unwrap();
    let mut ids = BTreeMap::new();
    for (spec, tree) in specs.iter().zip(&trees) {
        ids.insert(corpus::ingest(&ws, tree, None).unwrap().id, spec.name.clone());
    }
    let opts = BatchOptions { backend: BackendKind::Fixture, jobs, fresh: true };
    let report = run_batch(&ws, &Config::default(), &opts).unwrap();
    let by_name = load_summaries(&ws)
        .unwrap()
        .into_iter()
        .map(|s| (ids[&s.outcome.firmware_id].clone(), s))
        .collect();
    (Run { _dir: t, ws, by_name }, report)
}

fn dynamic_high(s: &FirmwareSummary, c: Category) -> usize {
    s.findings.iter().filter(|f| f.category == c && f.source == Source::Dynamic).count()
}

#[test]
fn every_fixture_ends_where_its_traits_say() {
    let (r, report) = run(4);
    let counts: Vec<u64> = FunnelStage::ALL.iter().map(|s| report.funnel_count(*s)).collect();
    assert_eq!(counts, vec![12, 10, 8, 6, 3]);

    let stage = |n: &str| r.by_name[n].outcome.stage;
    let cause = |n: &str| r.by_name[n].failures.iter().map(|f| f.cause).collect::<Vec<_>>();
    assert_eq!(stage("blob"), FunnelStage::Ingested);
    assert_eq!(stage("loose-html"), FunnelStage::Ingested);
    assert_eq!((stage("partial"), cause("partial")), (FunnelStage::Candidate, vec![Cause::PartialFirmware]));
    assert_eq!((stage("wrongarch"), cause("wrongarch")), (FunnelStage::Candidate, vec![Cause::ExecFormatError]));
    assert_eq!((stage("web-device"), cause("web-device")), (FunnelStage::ChrootOK, vec![Cause::MissingDevice]));
    assert_eq!((stage("web-plugins"), cause("web-plugins")), (FunnelStage::ChrootOK, vec![Cause::WebLaunchError]));

    let cmd = &r.by_name["cmdinj-boa"];
    assert_eq!(cmd.outcome.stage, FunnelStage::Vulnerable);
    assert_eq!(dynamic_high(cmd, Category::CommandExecution), 1);
    assert_eq!(dynamic_high(&r.by_name["xss-lighttpd"], Category::XSS), 1);
    let csrf = &r.by_name["csrf-boa"];
    assert_eq!(dynamic_high(csrf, Category::CSRF), 1);
    assert!(csrf.outcome.detail.contains("sanitized"), "{}", csrf.outcome.detail);

    for n in ["benign-lighttpd", "benign-noconfig-https", "benign-tworoots"] {
        let s = &r.by_name[n];
        assert_eq!(s.outcome.stage, FunnelStage::WebServerOK, "{n}");
        assert!(s.findings.iter().all(|f| f.severity != Severity::High), "{n}: {:?}", s.findings);
        assert!(s.failures.is_empty());
    }
    assert_eq!(r.by_name["benign-noconfig-https"].banner, Some(None));
    assert!(r.by_name["benign-noconfig-https"].https.cert_count > 0);
    assert!(report.banners.iter().any(|b| b.label == EMPTY_BANNER && b.count == 1));
    assert!(report.services.iter().any(|s| s.port == 23 && s.program == "telnetd"));
    assert!(r.ws.report_path().is_file());
}

#[test]
fn parallelism_does_not_change_the_report() {
    let (_a, one) = run(1);
    let (_b, eight) = run(8);
    assert_eq!(one, eight);
}
