//! Site-map-restricted dynamic probing.
//!
//! The built-in scanner visits only site-map URLs, the form actions found on
//! them and their backup-file variants. Command-injection payloads are sent
//! but never judged here; the collector's filesystem diff decides.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use firmscope_core::finding::Finding;
use firmscope_core::paths;
use firmscope_core::probe::{
    backup_variants, check_reflected_xss, extract_forms, injection_payloads, is_valid_marker_prefix, probe_csrf,
    probe_low_severity, xss_token, HtmlForm, InjectionPayload, NonceSource, ObservedResponse,
};
use firmscope_core::snapshot::{RecordedRequest, RecordedResponse};
use firmscope_core::web::SiteMap;
use serde::{Deserialize, Serialize};

use crate::collector::TranscriptRecorder;
use crate::error::{Error, Result};

const BODY_READ_LIMIT: u64 = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanJob {
    pub base_url: String,
    pub sitemap: SiteMap,
    pub injection_marker_prefix: String,
    /// URL paths scanned before the rest of the site map.
    #[serde(default)]
    pub focus_paths: Option<Vec<String>>,
}

impl ScanJob {
    pub fn validate(&self) -> Result<()> {
        if self.sitemap.urls.is_empty() {
            return Err(Error::InvalidPlan("scan job with an empty site map".into()));
        }
        if !is_valid_marker_prefix(&self.injection_marker_prefix) {
            return Err(Error::InvalidPlan(format!("weak marker prefix {:?}", self.injection_marker_prefix)));
        }
        Ok(())
    }

    /// Site-map URLs with focus paths first, each once.
    pub fn url_order(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let focus = self.focus_paths.iter().flatten().filter(|u| self.sitemap.urls.contains(u));
        focus.chain(self.sitemap.urls.iter()).filter(|u| seen.insert((*u).clone())).cloned().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub findings: Vec<Finding>,
    pub requests: u64,
    pub payloads: Vec<InjectionPayload>,
    /// Set when the target stopped answering; findings are partial.
    pub error: Option<String>,
}

pub trait ScannerAdapter {
    fn name(&self) -> &str;
    fn scan(&self, job: &ScanJob, recorder: &mut TranscriptRecorder) -> Result<ScanOutcome>;
}

/// Path of a form action relative to the server root, or `None` when it
/// leaves the target origin.
pub fn resolve_action(page: &str, action: Option<&str>, origin: &str) -> Option<String> {
    let action = action.map(|a| a.split('#').next().unwrap_or("").trim()).unwrap_or("");
    let action = action.split('?').next().unwrap_or("");
    if action.is_empty() {
        return Some(page.to_string());
    }
    let path = if action.contains("://") {
        action.strip_prefix(origin)?.to_string()
    } else {
        action.to_string()
    };
    let base = paths::parent(page.trim_start_matches('/'));
    paths::resolve(base, &path).map(|p| format!("/{p}"))
}

fn encode(params: &[(String, String)]) -> String {
    form_urlencoded::Serializer::new(String::new()).extend_pairs(params).finish()
}

fn default_value(v: &str) -> String {
    if v.is_empty() {
        "1".into()
    } else {
        v.to_string()
    }
}

struct Client<'a> {
    agent: ureq::Agent,
    origin: String,
    recorder: &'a mut TranscriptRecorder,
    requests: u64,
    error: Option<String>,
}

impl Client<'_> {
    fn send(&mut self, method: &str, path: &str, params: &[(String, String)]) -> Option<RecordedResponse> {
        if self.error.is_some() {
            return None;
        }
        let encoded = encode(params);
        let (url, body, headers) = if method == "POST" {
            let h = vec![("Content-Type".to_string(), "application/x-www-form-urlencoded".to_string())];
            (format!("{}{path}", self.origin), encoded, h)
        } else if encoded.is_empty() {
            (format!("{}{path}", self.origin), String::new(), Vec::new())
        } else {
            (format!("{}{path}?{encoded}", self.origin), String::new(), Vec::new())
        };
        let mut req = self.agent.request(method, &url);
        for (k, v) in &headers {
            req = req.set(k, v);
        }
        let result = if method == "POST" { req.send_string(&body) } else { req.call() };
        let resp = match result {
            Ok(r) | Err(ureq::Error::Status(_, r)) => r,
            Err(e) => {
                self.error = Some(format!("target stopped answering after {} requests: {e}", self.requests));
                return None;
            }
        };
        self.requests += 1;
        let status = resp.status();
        let mut resp_headers = Vec::new();
        for name in resp.headers_names() {
            for v in resp.all(&name) {
                resp_headers.push((name.clone(), v.to_string()));
            }
        }
        let mut raw = Vec::new();
        let _ = resp.into_reader().take(BODY_READ_LIMIT).read_to_end(&mut raw);
        let recorded = RecordedResponse {
            status,
            headers: resp_headers,
            body: String::from_utf8_lossy(&raw).into_owned(),
            truncated: false,
        };
        let request = RecordedRequest { method: method.to_string(), url, headers, body, truncated: false };
        if let Err(e) = self.recorder.record(request, recorded.clone()) {
            log::warn!("transcript write failed: {e}");
        }
        Some(recorded)
    }
}

/// Deterministic built-in scanner.
#[derive(Debug, Clone)]
pub struct BuiltinScanner {
    pub firmware_id: String,
    pub seed: u64,
    pub timeout: Duration,
}

impl BuiltinScanner {
    pub fn new(firmware_id: &str, seed: u64) -> Self {
        BuiltinScanner { firmware_id: firmware_id.to_string(), seed, timeout: Duration::from_secs(10) }
    }
}

/// A form target probed once per job.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Target {
    path: String,
    method: String,
    params: Vec<(String, String)>,
}

impl Target {
    fn from_form(form: &HtmlForm, path: String) -> Self {
        let params = form.fuzzable().map(|i| (i.name.clone(), default_value(&i.value))).collect();
        let method = if form.method == "POST" { "POST" } else { "GET" };
        Target { path, method: method.to_string(), params }
    }

    fn with(&self, name: &str, value: &str) -> Vec<(String, String)> {
        self.params.iter().map(|(k, v)| (k.clone(), if k == name { value.to_string() } else { v.clone() })).collect()
    }
}

impl ScannerAdapter for BuiltinScanner {
    fn name(&self) -> &str {
        "builtin"
    }

    fn scan(&self, job: &ScanJob, recorder: &mut TranscriptRecorder) -> Result<ScanOutcome> {
        job.validate()?;
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).redirects(0).build();
        let origin = job.base_url.trim_end_matches('/').to_string();
        let mut client = Client { agent, origin: origin.clone(), recorder, requests: 0, error: None };
        let mut nonces = NonceSource::new(self.seed);
        let mut findings: Vec<Finding> = Vec::new();
        let mut observed: Vec<(String, RecordedResponse, bool)> = Vec::new();
        let mut payloads = Vec::new();
        let mut probed: BTreeSet<Target> = BTreeSet::new();

        for url in job.url_order() {
            let Some(page) = client.send("GET", &url, &[]) else { break };
            observed.push((url.clone(), page.clone(), false));
            findings.extend(probe_csrf(&url, &page.body, &self.firmware_id));
            for form in extract_forms(&page.body) {
                let Some(path) = resolve_action(&url, form.action.as_deref(), &origin) else { continue };
                let target = Target::from_form(&form, path);
                if !probed.insert(target.clone()) {
                    continue;
                }
                for (name, _) in &target.params {
                    let token = xss_token(&nonces.next_hex(8));
                    if let Some(r) = client.send(&target.method, &target.path, &target.with(name, &token)) {
                        findings.extend(check_reflected_xss(&target.path, name, &token, &r.body, &self.firmware_id));
                        observed.push((target.path.clone(), r, false));
                    }
                    let base = target.params.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone()).unwrap_or_default();
                    for p in injection_payloads(&job.injection_marker_prefix, &mut nonces) {
                        let _ = client.send(&target.method, &target.path, &target.with(name, &format!("{base}{}", p.value)));
                        payloads.push(p);
                    }
                }
            }
        }
        for url in &job.sitemap.urls {
            for variant in backup_variants(url) {
                if let Some(r) = client.send("GET", &variant, &[]) {
                    observed.push((variant, r, true));
                }
            }
        }
        let views: Vec<ObservedResponse<'_>> =
            observed.iter().map(|(u, r, b)| ObservedResponse { url: u, response: r, backup_probe: *b }).collect();
        findings.extend(probe_low_severity(&views, &self.firmware_id));
        findings.sort();
        findings.dedup();
        Ok(ScanOutcome { findings, requests: client.requests, payloads, error: client.error })
    }
}

/// External scanner: job JSON on stdin, findings as JSON Lines on stdout.
/// Its traffic bypasses the transcript.
#[derive(Debug, Clone)]
pub struct ExternalScanner {
    pub argv: Vec<String>,
}

impl ScannerAdapter for ExternalScanner {
    fn name(&self) -> &str {
        self.argv.first().map_or("external", String::as_str)
    }

    fn scan(&self, job: &ScanJob, _recorder: &mut TranscriptRecorder) -> Result<ScanOutcome> {
        job.validate()?;
        let (prog, args) = self.argv.split_first().ok_or_else(|| Error::Config("empty external scanner command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start {prog}: {e}")))?;
        let job_json = serde_json::to_string(job).expect("jobs serialize");
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(job_json.as_bytes());
        }
        let mut findings = Vec::new();
        let mut malformed = 0;
        for line in BufReader::new(child.stdout.take().expect("piped")).lines().map_while(std::result::Result::ok) {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Finding>(&line) {
                Ok(f) => findings.push(f),
                Err(_) => malformed += 1,
            }
        }
        let status = child.wait().map_err(|e| Error::Config(format!("{prog}: {e}")))?;
        let mut error = (!status.success()).then(|| format!("{prog} exited with {status}"));
        if malformed > 0 {
            log::warn!("{prog}: {malformed} malformed finding lines skipped");
            error.get_or_insert_with(|| format!("{malformed} malformed finding lines"));
        }
        findings.sort();
        findings.dedup();
        Ok(ScanOutcome { findings, requests: 0, payloads: Vec::new(), error })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_resolution() {
        let o = "http://127.0.0.1:9";
        assert_eq!(resolve_action("/admin/a.html", None, o).as_deref(), Some("/admin/a.html"));
        assert_eq!(resolve_action("/admin/a.html", Some("set.cgi?x=1"), o).as_deref(), Some("/admin/set.cgi"));
        assert_eq!(resolve_action("/a.html", Some("/cgi-bin/p.cgi"), o).as_deref(), Some("/cgi-bin/p.cgi"));
        assert_eq!(resolve_action("/a.html", Some("http://127.0.0.1:9/x.cgi"), o).as_deref(), Some("/x.cgi"));
        assert_eq!(resolve_action("/a.html", Some("http://evil.example/x"), o), None);
        assert_eq!(resolve_action("/a.html", Some("../../x"), o), None);
    }

    #[test]
    fn focus_first_and_restricted() {
        use firmscope_core::web::{DocRoot, DocRootOrigin};
        let docroot = DocRoot {
            dir_rel_path: "www".into(),
            index_files: vec![],
            technologies: Default::default(),
            origin: DocRootOrigin::Discovered,
        };
        let job = ScanJob {
            base_url: "http://x/".into(),
            sitemap: SiteMap { docroot, urls: vec!["/a.html".into(), "/b.cgi".into()] },
            injection_marker_prefix: "fscope-inj-0123abcd-".into(),
            focus_paths: Some(vec!["/b.cgi".into(), "/elsewhere.php".into()]),
        };
        assert_eq!(job.url_order(), vec!["/b.cgi".to_string(), "/a.html".to_string()]);
        job.validate().unwrap();
    }

    #[test]
    fn encoding_round_trips() {
        let p = vec![("ip".to_string(), "1; touch /tmp/x".to_string())];
        assert_eq!(encode(&p), "ip=1%3B+touch+%2Ftmp%2Fx");
    }
}
