//! The hosted backend runs the fixture CGI scripts with the host shell, so
//! injected commands really execute.

use firmscope::corpus;
use firmscope::emulation::BackendKind;
use firmscope::fixtures::{build_corpus, default_specs};
use firmscope::fsutil::which;
use firmscope::pipeline::{run_batch, BatchOptions, Config};
use firmscope::workspace::Workspace;
use firmscope_core::finding::Category;
use firmscope_core::report::FunnelStage;

#[test]
fn hosted_backend_detects_real_injection_only_where_it_exists() {
    if which("sh").is_none() || which("sed").is_none() {
        eprintln!("skipped: no host shell");
        return;
    }
    let t = tempfile::tempdir().unwrap();
    let specs: Vec<_> =
        default_specs().into_iter().filter(|s| s.name == "cmdinj-boa" || s.name == "benign-lighttpd").collect();
    let trees = build_corpus(&specs, &t.path().join("corpus"), 0).unwrap();
    let ws = Workspace::open(t.path().join("ws")).unwrap();
    let ids: Vec<String> = trees.iter().map(|tree| corpus::ingest(&ws, tree, None).unwrap().id).collect();
    let config = Config { seed: 11, ..Config::default() };
    let opts = BatchOptions { backend: BackendKind::HostedTransplant, jobs: 1, fresh: true };
    let report = run_batch(&ws, &config, &opts).unwrap();
    assert_eq!(report.funnel_count(FunnelStage::WebServerOK), 2);
    assert_eq!(report.funnel_count(FunnelStage::Vulnerable), 1);
    let cmd = report.findings.per_firmware.get(&ids[0]).expect("cmdinj-boa has findings");
    assert!(cmd.high_impact);
    let injected = report.findings.category_totals.iter().find(|c| c.category == Category::CommandExecution);
    assert_eq!(injected.map(|c| c.count), Some(1));
    // The session cleaned its marker files out of the host /tmp.
    let leftovers = std::fs::read_dir("/tmp")
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("fscope-inj-"))
        .count();
    assert_eq!(leftovers, 0);
}
