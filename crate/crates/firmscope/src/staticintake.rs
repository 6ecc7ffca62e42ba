//! Intake of external static-analysis reports (JSON Lines or CSV).

use std::fs;
use std::path::Path;

use firmscope_core::finding::{Category, Finding, Locator, Source};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::fsutil;
use crate::workspace::Workspace;

pub const STATIC_DIR: &str = "static";
pub const STATIC_FINDINGS: &str = "findings.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticReportLine {
    #[serde(default)]
    pub tool: String,
    pub file: String,
    #[serde(default)]
    pub line: Option<u64>,
    #[serde(alias = "category_raw")]
    pub category: String,
    #[serde(default)]
    pub message: String,
}

impl StaticReportLine {
    pub fn to_finding(&self, firmware_id: &str) -> Finding {
        let category = Category::from_static_label(&self.category);
        let mut locator = Locator::new(self.file.clone());
        locator.line = self.line;
        let evidence = if self.tool.is_empty() { self.message.clone() } else { format!("[{}] {}", self.tool, self.message) };
        let mut f = Finding::new(category, Source::Static, locator, evidence, firmware_id);
        f.raw_category = Some(self.category.clone());
        f
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parsed {
    pub lines: Vec<StaticReportLine>,
    /// Malformed lines or records, skipped.
    pub skipped: u64,
}

pub fn parse_jsonl(text: &str) -> Parsed {
    let mut out = Parsed::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<StaticReportLine>(line) {
            Ok(l) => out.lines.push(l),
            Err(e) => {
                log::warn!("static report: skipping malformed line: {e}");
                out.skipped += 1;
            }
        }
    }
    out
}

/// CSV with a header row naming at least `file` and `category`.
pub fn parse_csv(text: &str) -> Parsed {
    let mut out = Parsed::default();
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    for record in reader.deserialize::<StaticReportLine>() {
        match record {
            Ok(l) => out.lines.push(l),
            Err(e) => {
                log::warn!("static report: skipping malformed record: {e}");
                out.skipped += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticIntake {
    pub findings: Vec<Finding>,
    pub skipped: u64,
}

/// Parse a report by extension (`.csv`, anything else is JSON Lines).
pub fn ingest_static_report(path: &Path, firmware_id: &str) -> Result<StaticIntake> {
    let text = String::from_utf8_lossy(&fs::read(path).at(path)?).into_owned();
    let is_csv = path.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv"));
    let parsed = if is_csv { parse_csv(&text) } else { parse_jsonl(&text) };
    let findings = parsed.lines.iter().map(|l| l.to_finding(firmware_id)).collect();
    Ok(StaticIntake { findings, skipped: parsed.skipped })
}

/// Merge a report into the firmware's stored static findings.
pub fn store_static_report(ws: &Workspace, id: &str, report: &Path) -> Result<StaticIntake> {
    let intake = ingest_static_report(report, id)?;
    let mut all = load_static_findings(ws, id)?;
    all.extend(intake.findings.iter().cloned());
    all.sort();
    all.dedup();
    let text: String = all.iter().map(|f| serde_json::to_string(f).expect("findings serialize") + "\n").collect();
    fsutil::write_atomic(&ws.firmware_dir(id).join(STATIC_DIR).join(STATIC_FINDINGS), text.as_bytes())?;
    Ok(intake)
}

pub fn load_static_findings(ws: &Workspace, id: &str) -> Result<Vec<Finding>> {
    let p = ws.firmware_dir(id).join(STATIC_DIR).join(STATIC_FINDINGS);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&p).at(&p)?;
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

/// URL paths for static findings' files under a document root.
pub fn focus_urls(files: &[String], docroot_rel: &str) -> Vec<String> {
    let mut out: Vec<String> = files
        .iter()
        .filter_map(|f| firmscope_core::paths::strip_dir(docroot_rel, f.trim_start_matches('/')))
        .filter(|r| !r.is_empty())
        .map(|r| format!("/{r}"))
        .collect();
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use firmscope_core::finding::Severity;

    #[test]
    fn jsonl_mapping_and_skips() {
        let text = r#"{"tool":"rips","file":"www/boardData.php","line":12,"category":"Command execution","message":"exec($_GET[x])"}
not json
{"tool":"rips","file":"www/a.php","line":3,"category":"Fancy new sink","message":"?"}
"#;
        let p = parse_jsonl(text);
        assert_eq!((p.lines.len(), p.skipped), (2, 1));
        let f = p.lines[0].to_finding("fw");
        assert_eq!((f.category, f.severity, f.locator.line), (Category::CommandExecution, Severity::High, Some(12)));
        let u = p.lines[1].to_finding("fw");
        assert_eq!(u.category, Category::Unmapped);
        assert_eq!(u.raw_category.as_deref(), Some("Fancy new sink"));
    }

    #[test]
    fn csv_export() {
        let text = "tool,file,line,category,message\nrips,www/x.php,7,Cross-site scripting,echo\nrips,www/y.php,oops,SQL injection,q\n";
        let p = parse_csv(text);
        assert_eq!((p.lines.len(), p.skipped), (1, 1));
        assert_eq!(p.lines[0].to_finding("fw").category, Category::XSS);
    }

    #[test]
    fn empty_report() {
        assert_eq!(parse_jsonl(""), Parsed::default());
    }

    #[test]
    fn focus_urls_strip_docroot() {
        let files = vec!["www/cgi-bin/a.php".to_string(), "etc/x.php".to_string(), "www/cgi-bin/a.php".to_string()];
        assert_eq!(focus_urls(&files, "www"), vec!["/cgi-bin/a.php".to_string()]);
    }
}
