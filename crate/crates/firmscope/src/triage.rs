//! Failure classification with configurable patterns, and the sampled
//! extrapolation written to `triage.json`.

use firmscope_core::report::{BatchReport, TriageParams, TriageSummary};
use firmscope_core::triage::{
    classify_chroot_failure, classify_web_failure, Cause, FailureRecord, FailureStage, RootfsFacts,
};
use regex::Regex;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::pipeline::load_summaries;
use crate::workspace::{write_json, Workspace};

/// A configured pattern; fixability follows the cause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierRule {
    pub stage: FailureStage,
    pub pattern: String,
    pub cause: Cause,
}

/// Configured rules first (first matching line wins), then the built-in
/// precedence.
#[derive(Debug, Clone, Default)]
pub struct Classifier {
    rules: Vec<(FailureStage, Regex, Cause)>,
}

impl Classifier {
    pub fn new(rules: &[ClassifierRule]) -> Result<Self> {
        let rules = rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (r.stage, re, r.cause))
                    .map_err(|e| Error::Config(format!("classifier pattern {:?}: {e}", r.pattern)))
            })
            .collect::<Result<_>>()?;
        Ok(Classifier { rules })
    }

    fn configured(&self, id: &str, stage: FailureStage, log: &str) -> Option<FailureRecord> {
        self.rules.iter().filter(|(s, _, _)| *s == stage).find_map(|(_, re, cause)| {
            log.lines().find(|l| re.is_match(l)).map(|l| FailureRecord::new(id, stage, *cause, l.trim()))
        })
    }

    pub fn chroot(&self, id: &str, boot_log: &str, facts: RootfsFacts) -> FailureRecord {
        self.configured(id, FailureStage::Chroot, boot_log).unwrap_or_else(|| classify_chroot_failure(id, boot_log, facts))
    }

    pub fn web(&self, id: &str, web_log: &str) -> FailureRecord {
        self.configured(id, FailureStage::WebServer, web_log).unwrap_or_else(|| classify_web_failure(id, web_log))
    }
}

/// Two-sided normal quantile for a confidence level, to two decimals
/// (0.95 gives 1.96).
pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} outside (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    Ok((z * 100.0).round() / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageFile {
    pub params: TriageParams,
    pub summaries: Vec<TriageSummary>,
    pub records: Vec<FailureRecord>,
}

/// Sample failures per stage, extrapolate, and write `triage.json`.
pub fn run_triage(ws: &Workspace, params: &TriageParams, stage: Option<FailureStage>) -> Result<TriageFile> {
    let summaries = load_summaries(ws)?;
    let report = BatchReport::build(&summaries, params)?;
    let keep = |s: FailureStage| stage.map_or(true, |want| want == s);
    let mut records: Vec<FailureRecord> =
        summaries.iter().flat_map(|s| s.failures.iter().cloned()).filter(|r| keep(r.stage)).collect();
    records.sort_by(|a, b| (a.stage, &a.firmware_id).cmp(&(b.stage, &b.firmware_id)));
    let file = TriageFile {
        params: *params,
        summaries: report.triage.into_iter().filter(|t| keep(t.stage)).collect(),
        records,
    };
    write_json(&ws.triage_path(), &file)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_values() {
        assert_eq!(z_for_confidence(0.95).unwrap(), 1.96);
        assert_eq!(z_for_confidence(0.99).unwrap(), 2.58);
        assert_eq!(z_for_confidence(0.90).unwrap(), 1.64);
        assert!(z_for_confidence(1.0).is_err());
    }

    #[test]
    fn configured_rules_take_priority() {
        let c = Classifier::new(&[ClassifierRule {
            stage: FailureStage::WebServer,
            pattern: r"nvram_get\b.*failed".into(),
            cause: Cause::MissingDevice,
        }])
        .unwrap();
        let r = c.web("fw", "httpd: nvram_get(lan_ipaddr) failed\nloading plugins finally failed");
        assert_eq!(r.cause, Cause::MissingDevice);
        let r = c.web("fw", "(server.c.621) loading plugins finally failed");
        assert_eq!(r.cause, Cause::WebLaunchError);
        assert!(Classifier::new(&[ClassifierRule { stage: FailureStage::Chroot, pattern: "(".into(), cause: Cause::Unknown }]).is_err());
    }
}
