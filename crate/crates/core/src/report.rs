//! Batch outcomes, the stage funnel, and report rendering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, AggregateReport, TableRow};
use crate::arch::ArchId;
use crate::finding::Finding;
use crate::snapshot::Service;
use crate::stats::{plan_sample, SamplePlan, StatsError};
use crate::triage::{cause_estimates, easy_fix_bound, CauseEstimate, EasyFixBound, FailureRecord, FailureStage};
use crate::web::{HttpsMaterial, Technology};

/// Funnel stages, in order. A firmware at a stage has passed all earlier
/// ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FunnelStage {
    Ingested,
    Candidate,
    ChrootOK,
    WebServerOK,
    Vulnerable,
}

impl FunnelStage {
    pub const ALL: [FunnelStage; 5] = [
        FunnelStage::Ingested,
        FunnelStage::Candidate,
        FunnelStage::ChrootOK,
        FunnelStage::WebServerOK,
        FunnelStage::Vulnerable,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FunnelStage::Ingested => "Ingested",
            FunnelStage::Candidate => "Candidate rootfs",
            FunnelStage::ChrootOK => "Chroot OK",
            FunnelStage::WebServerOK => "Web server OK",
            FunnelStage::Vulnerable => "Vulnerable (high impact)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub firmware_id: String,
    pub stage: FunnelStage,
    pub detail: String,
}

/// Everything the report needs from one firmware's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmwareSummary {
    pub outcome: StageOutcome,
    pub arch: Option<ArchId>,
    /// Server banner of the launched interface; `Some(None)` when the
    /// server sent no `Server` header. `None` when no interface came up.
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "double_option")]
    pub banner: Option<Option<String>>,
    pub technologies: BTreeSet<Technology>,
    pub https: HttpsMaterial,
    pub new_services: Vec<Service>,
    pub findings: Vec<Finding>,
    pub failures: Vec<FailureRecord>,
}

impl FirmwareSummary {
    pub fn new(firmware_id: &str) -> Self {
        FirmwareSummary {
            outcome: StageOutcome {
                firmware_id: firmware_id.to_string(),
                stage: FunnelStage::Ingested,
                detail: String::new(),
            },
            arch: None,
            banner: None,
            technologies: BTreeSet::new(),
            https: HttpsMaterial::default(),
            new_services: Vec::new(),
            findings: Vec::new(),
            failures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelRow {
    pub stage: FunnelStage,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchRow {
    pub arch: String,
    pub original: u64,
    pub chroot_ok: u64,
    pub web_ok: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistRow {
    pub label: String,
    pub count: u64,
    pub percent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRow {
    pub proto: String,
    pub port: u16,
    pub program: String,
    pub firmware: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageSummary {
    pub stage: FailureStage,
    pub population: u64,
    pub plan: SamplePlan,
    pub sampled: Vec<String>,
    pub causes: Vec<CauseEstimate>,
    pub easy_fix: EasyFixBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageParams {
    pub half_width: f64,
    pub z: f64,
    pub seed: u64,
}

impl Default for TriageParams {
    fn default() -> Self {
        TriageParams { half_width: crate::stats::DEFAULT_HALF_WIDTH, z: crate::stats::Z_95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub funnel: Vec<FunnelRow>,
    pub per_arch: Vec<ArchRow>,
    pub banners: Vec<DistRow>,
    pub technologies: Vec<DistRow>,
    pub https_firmware: u64,
    pub services: Vec<ServiceRow>,
    pub findings: AggregateReport,
    pub triage: Vec<TriageSummary>,
    pub outcomes: Vec<StageOutcome>,
}

/// Label used for interfaces that answered without a `Server` header.
/// Keeps `Some(None)` distinct from `None` in self-describing formats:
/// `None` is an absent field, `Some(None)` is `null`.
pub fn double_option<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

pub const EMPTY_BANNER: &str = "empty banner";

/// `count / total` as a percentage with one decimal, rounded half up.
pub fn format_percent(count: u64, total: u64) -> String {
    if total == 0 {
        return String::from("0.0%");
    }
    let tenths = (count as u128 * 2000 + total as u128) / (2 * total as u128);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// A fraction in [0, 1] as a percentage with one decimal, rounded half up.
pub fn format_ratio(value: f64) -> String {
    let tenths = libm::floor(value * 1000.0 + 0.5) as i64;
    format!("{}.{}%", tenths / 10, (tenths % 10).abs())
}

fn distribution(counts: BTreeMap<String, u64>, total: u64) -> Vec<DistRow> {
    let mut rows: Vec<DistRow> = counts
        .into_iter()
        .map(|(label, count)| DistRow { percent: format_percent(count, total), label, count })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then(a.label.cmp(&b.label)));
    rows
}

fn triage_summary(
    failures: &[FailureRecord],
    stage: FailureStage,
    params: &TriageParams,
) -> Result<Option<TriageSummary>, StatsError> {
    let mut population: Vec<&FailureRecord> = failures.iter().filter(|f| f.stage == stage).collect();
    if population.is_empty() {
        return Ok(None);
    }
    population.sort_by(|a, b| a.firmware_id.cmp(&b.firmware_id));
    let plan = plan_sample(population.len() as u64, params.half_width, params.z)?;
    let picked: Vec<FailureRecord> =
        plan.draw(params.seed).into_iter().map(|i| population[i as usize].clone()).collect();
    let n = population.len() as u64;
    Ok(Some(TriageSummary {
        stage,
        population: n,
        sampled: picked.iter().map(|r| r.firmware_id.clone()).collect(),
        causes: cause_estimates(&picked, stage, n, params.z)?,
        easy_fix: easy_fix_bound(&picked, stage, n, params.z)?,
        plan,
    }))
}

impl BatchReport {
    /// Reduce per-firmware summaries. The result depends only on the set of
    /// summaries, not their order.
    pub fn build(summaries: &[FirmwareSummary], params: &TriageParams) -> Result<BatchReport, StatsError> {
        let mut sorted: Vec<&FirmwareSummary> = summaries.iter().collect();
        sorted.sort_by(|a, b| a.outcome.firmware_id.cmp(&b.outcome.firmware_id));

        let funnel = FunnelStage::ALL
            .iter()
            .map(|stage| FunnelRow {
                stage: *stage,
                count: sorted.iter().filter(|s| s.outcome.stage >= *stage).count() as u64,
            })
            .collect();

        let mut arch_rows: BTreeMap<ArchId, ArchRow> = BTreeMap::new();
        for s in &sorted {
            if let Some(arch) = s.arch {
                let row = arch_rows.entry(arch).or_insert_with(|| ArchRow {
                    arch: arch.tag().to_string(),
                    original: 0,
                    chroot_ok: 0,
                    web_ok: 0,
                });
                row.original += 1;
                row.chroot_ok += (s.outcome.stage >= FunnelStage::ChrootOK) as u64;
                row.web_ok += (s.outcome.stage >= FunnelStage::WebServerOK) as u64;
            }
        }

        let web_ok: Vec<&&FirmwareSummary> =
            sorted.iter().filter(|s| s.outcome.stage >= FunnelStage::WebServerOK).collect();
        let mut banners: BTreeMap<String, u64> = BTreeMap::new();
        let mut techs: BTreeMap<String, u64> = BTreeMap::new();
        for s in &web_ok {
            let label = match &s.banner {
                Some(Some(b)) if !b.trim().is_empty() => b.trim().to_string(),
                _ => EMPTY_BANNER.to_string(),
            };
            *banners.entry(label).or_insert(0) += 1;
            for t in &s.technologies {
                *techs.entry(t.label().to_string()).or_insert(0) += 1;
            }
        }

        let mut services: BTreeMap<(String, u16, String), u64> = BTreeMap::new();
        for s in &sorted {
            let distinct: BTreeSet<&Service> = s.new_services.iter().collect();
            for svc in distinct {
                *services.entry((format!("{:?}", svc.proto), svc.port, svc.program.clone())).or_insert(0) += 1;
            }
        }

        let findings: Vec<Finding> = sorted.iter().flat_map(|s| s.findings.iter().cloned()).collect();
        let failures: Vec<FailureRecord> = sorted.iter().flat_map(|s| s.failures.iter().cloned()).collect();
        let mut triage = Vec::new();
        for stage in [FailureStage::Chroot, FailureStage::WebServer] {
            if let Some(t) = triage_summary(&failures, stage, params)? {
                triage.push(t);
            }
        }

        Ok(BatchReport {
            funnel,
            per_arch: arch_rows.into_values().collect(),
            banners: distribution(banners, web_ok.len() as u64),
            technologies: distribution(techs, web_ok.len() as u64),
            https_firmware: sorted.iter().filter(|s| s.https.cert_count > 0).count() as u64,
            services: services
                .into_iter()
                .map(|((proto, port, program), firmware)| ServiceRow { proto, port, program, firmware })
                .collect(),
            findings: aggregate(&findings),
            triage,
            outcomes: sorted.iter().map(|s| s.outcome.clone()).collect(),
        })
    }

    pub fn funnel_count(&self, stage: FunnelStage) -> u64 {
        self.funnel.iter().find(|r| r.stage == stage).map_or(0, |r| r.count)
    }
}

fn table_md(out: &mut String, rows: &[TableRow]) {
    for r in rows {
        let _ = writeln!(out, "| {} | {} | {} |", r.label, r.issues, r.firmware);
    }
}

/// Markdown rendering of a batch report.
pub fn render_markdown(report: &BatchReport) -> String {
    let mut out = String::new();
    let ingested = report.funnel_count(FunnelStage::Ingested);

    out.push_str("## Analysis funnel\n\n| Stage | Firmware | Share |\n|---|---|---|\n");
    for row in &report.funnel {
        let _ = writeln!(out, "| {} | {} | {} |", row.stage.label(), row.count, format_percent(row.count, ingested));
    }

    out.push_str("\n## CPU architectures\n\n| Architecture | Original | Chroot OK | Web OK |\n|---|---|---|---|\n");
    for r in &report.per_arch {
        let _ = writeln!(
            out,
            "| {} | {} | {} ({}) | {} ({}) |",
            r.arch,
            r.original,
            r.chroot_ok,
            format_percent(r.chroot_ok, r.original),
            r.web_ok,
            format_percent(r.web_ok, r.original)
        );
    }

    out.push_str("\n## Web server banners\n\n| Banner | Firmware | Share |\n|---|---|---|\n");
    for r in &report.banners {
        let _ = writeln!(out, "| {} | {} | {} |", r.label, r.count, r.percent);
    }

    out.push_str("\n## Web technologies\n\n| Technology | Firmware | Share |\n|---|---|---|\n");
    for r in &report.technologies {
        let _ = writeln!(out, "| {} | {} | {} |", r.label, r.count, r.percent);
    }

    let _ = writeln!(out, "\nFirmware with at least one HTTPS certificate: {}", report.https_firmware);

    if !report.services.is_empty() {
        out.push_str("\n## Network services started\n\n| Proto | Port | Program | Firmware |\n|---|---|---|---|\n");
        for s in &report.services {
            let _ = writeln!(out, "| {} | {} | {} | {} |", s.proto, s.port, s.program, s.firmware);
        }
    }

    let f = &report.findings;
    out.push_str("\n## Static analysis findings\n\n| Category | Issues | Firmware |\n|---|---|---|\n");
    table_md(&mut out, &f.static_table);
    out.push_str("\n## Dynamic analysis findings\n\n| Category | Issues | Firmware |\n|---|---|---|\n");
    table_md(&mut out, &f.dynamic_table.high);
    let _ = writeln!(
        out,
        "| Sub-total HIGH impact | {} | {} |",
        f.dynamic_table.high_subtotal.issues, f.dynamic_table.high_subtotal.firmware
    );
    table_md(&mut out, &f.dynamic_table.low);
    let _ = writeln!(
        out,
        "| Sub-total LOW impact | {} | {} |",
        f.dynamic_table.low_subtotal.issues, f.dynamic_table.low_subtotal.firmware
    );
    let _ = writeln!(out, "\nVulnerable firmware (static or dynamic): {}", f.unique_vulnerable_firmware);

    if !report.triage.is_empty() {
        out.push_str("\n## Failure triage\n\n| Stage | Failures | Sampled | Cause | Count | Estimate |\n|---|---|---|---|---|---|\n");
        for t in &report.triage {
            for c in &t.causes {
                let _ = writeln!(
                    out,
                    "| {:?} | {} | {} | {:?} | {} | {} ± {} |",
                    t.stage,
                    t.population,
                    t.plan.n,
                    c.cause,
                    c.estimate.successes,
                    format_ratio(c.estimate.p),
                    format_ratio(c.estimate.half_width)
                );
            }
            let _ = writeln!(
                out,
                "| {:?} | {} | {} | easy to fix | {} | {} ± {} (at least {}) |",
                t.stage,
                t.population,
                t.plan.n,
                t.easy_fix.estimate.successes,
                format_ratio(t.easy_fix.estimate.p),
                format_ratio(t.easy_fix.estimate.half_width),
                format_ratio(t.easy_fix.lower_bound)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn summary(id: &str, stage: FunnelStage, banner: Option<Option<&str>>) -> FirmwareSummary {
        let mut s = FirmwareSummary::new(id);
        s.outcome.stage = stage;
        s.banner = banner.map(|b| b.map(String::from));
        s
    }

    #[test]
    fn missing_banner_survives_json() {
        for banner in [None, Some(None), Some(Some("Boa/0.94.14rc21"))] {
            let s = summary("fw", FunnelStage::WebServerOK, banner);
            let back: FirmwareSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn percent_rounding_half_up() {
        assert_eq!(format_percent(1, 2), "50.0%");
        assert_eq!(format_percent(1, 3), "33.3%");
        assert_eq!(format_percent(2, 3), "66.7%");
        assert_eq!(format_percent(1, 8), "12.5%");
        assert_eq!(format_percent(1, 16), "6.3%");
        assert_eq!(format_percent(0, 0), "0.0%");
        assert_eq!(format_ratio(0.6131), "61.3%");
        assert_eq!(format_ratio(0.0625), "6.3%");
    }

    #[test]
    fn empty_banner_row() {
        let summaries = vec![
            summary("a", FunnelStage::WebServerOK, Some(None)),
            summary("b", FunnelStage::Vulnerable, Some(None)),
            summary("c", FunnelStage::WebServerOK, Some(Some("Boa/0.94.14rc21"))),
            summary("d", FunnelStage::WebServerOK, Some(Some("lighttpd/1.4.35"))),
            summary("e", FunnelStage::ChrootOK, None),
        ];
        let r = BatchReport::build(&summaries, &TriageParams::default()).unwrap();
        assert_eq!(r.banners[0], DistRow { label: EMPTY_BANNER.into(), count: 2, percent: "50.0%".into() });
        assert!(render_markdown(&r).contains("| empty banner | 2 | 50.0% |"));
    }

    #[test]
    fn funnel_rows_monotone() {
        let mut summaries = Vec::new();
        let stages = [(FunnelStage::Ingested, 3), (FunnelStage::Candidate, 3), (FunnelStage::ChrootOK, 2), (FunnelStage::WebServerOK, 2), (FunnelStage::Vulnerable, 2)];
        let mut i = 0;
        for (stage, n) in stages {
            for _ in 0..n {
                summaries.push(summary(&format!("fw{i:02}"), stage, None));
                i += 1;
            }
        }
        let r = BatchReport::build(&summaries, &TriageParams::default()).unwrap();
        let counts: Vec<u64> = r.funnel.iter().map(|f| f.count).collect();
        assert_eq!(counts, vec![12, 9, 6, 4, 2]);
        let md = render_markdown(&r);
        let funnel_rows = md.lines().filter(|l| FunnelStage::ALL.iter().any(|s| l.starts_with(&format!("| {} |", s.label())))).count();
        assert_eq!(funnel_rows, 5);
    }

    #[test]
    fn empty_batch() {
        let r = BatchReport::build(&[], &TriageParams::default()).unwrap();
        assert!(r.funnel.iter().all(|f| f.count == 0));
        assert!(r.triage.is_empty());
        assert_eq!(r.findings.unique_vulnerable_firmware, 0);
    }

    #[test]
    fn order_independent() {
        let a = vec![summary("x", FunnelStage::ChrootOK, None), summary("y", FunnelStage::WebServerOK, Some(None))];
        let b = vec![a[1].clone(), a[0].clone()];
        let p = TriageParams::default();
        assert_eq!(BatchReport::build(&a, &p).unwrap(), BatchReport::build(&b, &p).unwrap());
    }
}
