//! Probe payloads and response verdicts for the built-in scanner.
//!
//! Network access lives in the companion crate; everything here works on
//! recorded responses so verdicts are reproducible from a transcript.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::finding::{Category, Finding, Locator, Source};
use crate::snapshot::RecordedResponse;

/// Fixed part of every injection marker; a random segment follows.
pub const MARKER_STEM: &str = "fscope-inj-";

/// Directory the injected commands write into.
pub const MARKER_DIR: &str = "/tmp";

/// Unique random hex tokens for one scan job.
#[derive(Debug, Clone)]
pub struct NonceSource {
    rng: ChaCha8Rng,
    issued: BTreeSet<String>,
}

impl NonceSource {
    pub fn new(seed: u64) -> Self {
        NonceSource { rng: ChaCha8Rng::seed_from_u64(seed), issued: BTreeSet::new() }
    }

    /// `len` lowercase hex characters never issued before by this source.
    pub fn next_hex(&mut self, len: usize) -> String {
        loop {
            let s: String = (0..len)
                .map(|_| char::from_digit(self.rng.gen_range(0..16), 16).unwrap_or('0'))
                .collect();
            if self.issued.insert(s.clone()) {
                return s;
            }
        }
    }

    /// Job-wide marker prefix: the stem, eight random hex characters and a
    /// dash.
    pub fn marker_prefix(&mut self) -> String {
        format!("{MARKER_STEM}{}-", self.next_hex(8))
    }
}

/// Marker prefixes must carry at least eight random hex characters.
pub fn is_valid_marker_prefix(prefix: &str) -> bool {
    prefix.chars().filter(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()).count() >= 8
        && prefix.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InjectionForm {
    Semicolon,
    Pipe,
    Backtick,
    Subshell,
}

impl InjectionForm {
    pub const ALL: [InjectionForm; 4] =
        [InjectionForm::Semicolon, InjectionForm::Pipe, InjectionForm::Backtick, InjectionForm::Subshell];

    pub fn wrap(&self, command: &str) -> String {
        match self {
            InjectionForm::Semicolon => format!("; {command}"),
            InjectionForm::Pipe => format!("| {command}"),
            InjectionForm::Backtick => format!("`{command}`"),
            InjectionForm::Subshell => format!("$({command})"),
        }
    }
}

/// One command-injection attempt: the raw parameter value and the file it
/// creates when the injection lands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPayload {
    pub form: InjectionForm,
    pub value: String,
    pub artifact: String,
}

/// The four payload shapes, each touching its own marker file.
pub fn injection_payloads(marker_prefix: &str, nonces: &mut NonceSource) -> Vec<InjectionPayload> {
    InjectionForm::ALL
        .iter()
        .map(|form| {
            let artifact = format!("{MARKER_DIR}/{marker_prefix}{}", nonces.next_hex(8));
            InjectionPayload { form: *form, value: form.wrap(&format!("touch {artifact}")), artifact }
        })
        .collect()
}

/// Reflected-XSS probe token `<fsx…>`.
pub fn xss_token(nonce: &str) -> String {
    format!("<fsx{nonce}>")
}

/// Context window kept as evidence around a reflected token.
pub const EVIDENCE_WINDOW: usize = 80;

/// A finding when `body` reflects `token` with its angle brackets intact.
pub fn check_reflected_xss(
    url: &str,
    param: &str,
    token: &str,
    body: &str,
    firmware_id: &str,
) -> Option<Finding> {
    let start = body.find(token)?;
    let end = start + token.len();
    let pad = EVIDENCE_WINDOW.saturating_sub(token.len()) / 2;
    let mut lo = start.saturating_sub(pad);
    while !body.is_char_boundary(lo) {
        lo -= 1;
    }
    let mut hi = (end + pad).min(body.len());
    while !body.is_char_boundary(hi) {
        hi += 1;
    }
    Some(Finding::new(
        Category::XSS,
        Source::Dynamic,
        Locator::new(url).with_parameter(param),
        &body[lo..hi],
        firmware_id,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormInput {
    pub name: String,
    /// Lowercased `type` attribute; `text` when absent, `select`/`textarea`
    /// for those elements.
    pub kind: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtmlForm {
    pub action: Option<String>,
    /// Uppercased method, `GET` when absent.
    pub method: String,
    pub inputs: Vec<FormInput>,
}

impl HtmlForm {
    /// Parameters a probe may set (everything except buttons).
    pub fn fuzzable(&self) -> impl Iterator<Item = &FormInput> {
        self.inputs.iter().filter(|i| !matches!(i.kind.as_str(), "submit" | "button" | "image" | "reset"))
    }
}

struct Tag<'a> {
    name: String,
    closing: bool,
    attrs: Vec<(String, &'a str)>,
}

impl Tag<'_> {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

/// Minimal tag scanner: yields start/end tags with attributes, skipping
/// comments. Good enough for the form markup embedded devices emit.
fn tags(html: &str) -> Vec<Tag<'_>> {
    let bytes = html.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = html[i..].find('<') {
        i += off + 1;
        if html[i..].starts_with("!--") {
            match html[i..].find("-->") {
                Some(end) => {
                    i += end + 3;
                    continue;
                }
                None => break,
            }
        }
        let closing = bytes.get(i) == Some(&b'/');
        if closing {
            i += 1;
        }
        let name_start = i;
        while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
            i += 1;
        }
        if i == name_start {
            continue;
        }
        let name = html[name_start..i].to_ascii_lowercase();
        let mut attrs = Vec::new();
        loop {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'/') {
                i += 1;
            }
            if i >= bytes.len() || bytes[i] == b'>' {
                i += 1;
                break;
            }
            let key_start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() && !matches!(bytes[i], b'=' | b'>' | b'/') {
                i += 1;
            }
            let key = html[key_start..i].to_ascii_lowercase();
            if i == key_start {
                i += 1;
                continue;
            }
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let mut value = "";
            if bytes.get(i) == Some(&b'=') {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                match bytes.get(i) {
                    Some(&q @ (b'"' | b'\'')) => {
                        let start = i + 1;
                        let end = html[start..].find(q as char).map_or(html.len(), |e| start + e);
                        value = &html[start..end];
                        i = (end + 1).min(html.len());
                    }
                    Some(_) => {
                        let start = i;
                        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'>' {
                            i += 1;
                        }
                        value = &html[start..i];
                    }
                    None => {}
                }
            }
            attrs.push((key, value));
        }
        out.push(Tag { name, closing, attrs });
        if i >= bytes.len() {
            break;
        }
    }
    out
}

/// Forms on a page, in document order. Inputs outside any form are ignored.
pub fn extract_forms(html: &str) -> Vec<HtmlForm> {
    let mut forms = Vec::new();
    let mut current: Option<HtmlForm> = None;
    for tag in tags(html) {
        match (tag.name.as_str(), tag.closing) {
            ("form", false) => {
                if let Some(f) = current.take() {
                    forms.push(f);
                }
                current = Some(HtmlForm {
                    action: tag.attr("action").filter(|a| !a.is_empty()).map(decode_entities),
                    method: tag.attr("method").unwrap_or("GET").to_ascii_uppercase(),
                    inputs: Vec::new(),
                });
            }
            ("form", true) => {
                if let Some(f) = current.take() {
                    forms.push(f);
                }
            }
            ("input" | "select" | "textarea", false) => {
                if let (Some(form), Some(name)) = (current.as_mut(), tag.attr("name")) {
                    if name.is_empty() {
                        continue;
                    }
                    let kind = match tag.name.as_str() {
                        "input" => tag.attr("type").unwrap_or("text").to_ascii_lowercase(),
                        other => other.to_string(),
                    };
                    form.inputs.push(FormInput {
                        name: decode_entities(name),
                        kind,
                        value: decode_entities(tag.attr("value").unwrap_or("")),
                    });
                }
            }
            _ => {}
        }
    }
    if let Some(f) = current {
        forms.push(f);
    }
    forms
}

fn decode_entities(s: &str) -> String {
    s.replace("&amp;", "&").replace("&quot;", "\"").replace("&#39;", "'").replace("&lt;", "<").replace("&gt;", ">")
}

const TOKEN_NAMES: &[&str] = &["csrf", "token", "nonce", "xsrf"];
const SENSITIVE_NAMES: &[&str] = &["pass", "pwd", "config", "cfg"];

fn name_contains_any(name: &str, needles: &[&str]) -> bool {
    let lower = name.to_ascii_lowercase();
    needles.iter().any(|n| lower.contains(n))
}

/// A form changes state when it posts, or when a GET form carries password
/// or configuration fields.
pub fn is_state_changing(form: &HtmlForm) -> bool {
    form.method == "POST"
        || form
            .inputs
            .iter()
            .any(|i| i.kind == "password" || name_contains_any(&i.name, SENSITIVE_NAMES))
}

pub fn has_csrf_token(form: &HtmlForm) -> bool {
    form.inputs.iter().any(|i| i.kind == "hidden" && name_contains_any(&i.name, TOKEN_NAMES))
}

/// CSRF findings for the state-changing, token-less forms on `page_url`.
pub fn probe_csrf(page_url: &str, html: &str, firmware_id: &str) -> Vec<Finding> {
    extract_forms(html)
        .into_iter()
        .filter(|f| is_state_changing(f) && !has_csrf_token(f))
        .map(|f| {
            let target = f.action.clone().unwrap_or_else(|| page_url.to_string());
            let fields: Vec<&str> = f.inputs.iter().map(|i| i.name.as_str()).collect();
            Finding::new(
                Category::CSRF,
                Source::Dynamic,
                Locator::new(target),
                format!("{} form on {} without anti-CSRF token (fields: {})", f.method, page_url, fields.join(", ")),
                firmware_id,
            )
        })
        .collect()
}

/// A response as seen by the low-severity checks.
#[derive(Debug, Clone)]
pub struct ObservedResponse<'a> {
    pub url: &'a str,
    pub response: &'a RecordedResponse,
    /// The request was a backup-file guess (`~` or `.bak` suffix).
    pub backup_probe: bool,
}

const LEAK_MARKERS: &[&str] = &[
    "Traceback (most recent call last)",
    "Stack trace",
    "stack trace",
    "Fatal error",
    "Exception",
    " on line ",
    "at line ",
    "/usr/",
    "/var/",
    "/www/",
    "/home/",
];

fn is_html(resp: &RecordedResponse) -> bool {
    resp.header("content-type").map_or(false, |ct| ct.to_ascii_lowercase().contains("text/html"))
}

fn cookie_is_httponly(set_cookie: &str) -> bool {
    set_cookie.split(';').skip(1).any(|attr| attr.trim().eq_ignore_ascii_case("httponly"))
}

/// Header, cookie, backup-file and error-leak findings, at most one per
/// (category, URL).
pub fn probe_low_severity(responses: &[ObservedResponse<'_>], firmware_id: &str) -> Vec<Finding> {
    let mut seen: BTreeSet<(Category, String)> = BTreeSet::new();
    let mut out = Vec::new();
    let mut emit = |cat: Category, url: &str, evidence: String| {
        if seen.insert((cat, url.to_string())) {
            out.push(Finding::new(cat, Source::Dynamic, Locator::new(url), evidence, firmware_id));
        }
    };
    for obs in responses {
        let resp = obs.response;
        if obs.backup_probe {
            if resp.status == 200 {
                emit(Category::BackupFile, obs.url, format!("{} answered 200", obs.url));
            }
            continue;
        }
        for cookie in resp.headers_named("set-cookie") {
            if !cookie_is_httponly(cookie) {
                emit(Category::CookieNoHttpOnly, obs.url, format!("Set-Cookie: {cookie}"));
            }
        }
        if (200..300).contains(&resp.status) && is_html(resp) {
            if resp.header("x-content-type-options").is_none() {
                emit(Category::NoXContentTypeOptions, obs.url, "X-Content-Type-Options header absent".into());
            }
            if resp.header("x-frame-options").is_none() {
                emit(Category::NoXFrameOptions, obs.url, "X-Frame-Options header absent".into());
            }
        }
        if resp.status >= 500 {
            if let Some(marker) = LEAK_MARKERS.iter().find(|m| resp.body.contains(*m)) {
                emit(Category::AppErrorInfo, obs.url, format!("{} response leaks {marker:?}", resp.status));
            }
        }
    }
    out
}

/// Backup-file guesses for a site-map URL.
pub fn backup_variants(url: &str) -> [String; 2] {
    [format!("{url}~"), format!("{url}.bak")]
}
