//! Vulnerability finding taxonomy shared by static intake and dynamic probes.

use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    CommandExecution,
    XSS,
    CSRF,
    FileManipulation,
    FileInclusion,
    FileDisclosure,
    SQLInjection,
    FlowControl,
    CodeExecution,
    HTTPResponseSplitting,
    Unserialize,
    POPGadget,
    HTTPHeaderInjection,
    CookieNoHttpOnly,
    NoXContentTypeOptions,
    NoXFrameOptions,
    BackupFile,
    AppErrorInfo,
    /// Static-report category with no counterpart here; the raw label is
    /// kept on the finding.
    Unmapped,
}

/// The twelve static-analysis (PHP) categories with their report labels.
pub const STATIC_CATEGORIES: &[(Category, &str)] = &[
    (Category::XSS, "Cross-site scripting"),
    (Category::FileManipulation, "File manipulation"),
    (Category::CommandExecution, "Command execution"),
    (Category::FileInclusion, "File inclusion"),
    (Category::FileDisclosure, "File disclosure"),
    (Category::SQLInjection, "SQL injection"),
    (Category::FlowControl, "Possible flow control"),
    (Category::CodeExecution, "Code execution"),
    (Category::HTTPResponseSplitting, "HTTP response splitting"),
    (Category::Unserialize, "Unserialize"),
    (Category::POPGadget, "POP gadgets"),
    (Category::HTTPHeaderInjection, "HTTP header injection"),
];

/// Dynamic-scan categories with their report labels, High ones first.
pub const DYNAMIC_CATEGORIES: &[(Category, &str)] = &[
    (Category::CommandExecution, "Command execution"),
    (Category::XSS, "Cross-site scripting"),
    (Category::CSRF, "Cross-site request forgery"),
    (Category::CookieNoHttpOnly, "Cookies w/o HttpOnly"),
    (Category::NoXContentTypeOptions, "Missing X-Content-Type-Options"),
    (Category::NoXFrameOptions, "Missing X-Frame-Options"),
    (Category::BackupFile, "Backup file"),
    (Category::AppErrorInfo, "Application error information"),
];

impl Category {
    /// Map a static report label case-insensitively onto the taxonomy.
    pub fn from_static_label(label: &str) -> Category {
        let label = label.trim();
        STATIC_CATEGORIES
            .iter()
            .find(|(_, name)| name.eq_ignore_ascii_case(label))
            .map(|(c, _)| *c)
            .unwrap_or(Category::Unmapped)
    }

    pub fn label(&self) -> &'static str {
        STATIC_CATEGORIES
            .iter()
            .chain(DYNAMIC_CATEGORIES)
            .find(|(c, _)| c == self)
            .map(|(_, l)| *l)
            .unwrap_or("Unmapped")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Static,
    Dynamic,
    Manual,
}

/// Severity a category carries for a given source.
pub fn severity_for(category: Category, source: Source) -> Severity {
    use Category::*;
    let high = match source {
        Source::Dynamic | Source::Manual => matches!(category, CommandExecution | XSS | CSRF),
        Source::Static => {
            matches!(category, CommandExecution | CodeExecution | SQLInjection | FileInclusion | XSS)
        }
    };
    if high {
        Severity::High
    } else {
        Severity::Low
    }
}

/// Where a finding lives: a URL path or a file path, plus the parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Locator {
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<u64>,
}

impl Locator {
    pub fn new(target: impl Into<String>) -> Self {
        Locator { target: target.into(), parameter: None, line: None }
    }

    pub fn with_parameter(mut self, parameter: impl Into<String>) -> Self {
        self.parameter = Some(parameter.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub category: Category,
    pub severity: Severity,
    pub source: Source,
    pub locator: Locator,
    pub evidence: String,
    pub firmware_id: String,
    /// Original label for static findings; always set for `Unmapped`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_category: Option<String>,
}

impl Finding {
    /// Build a finding with the severity the taxonomy assigns.
    pub fn new(
        category: Category,
        source: Source,
        locator: Locator,
        evidence: impl Into<String>,
        firmware_id: impl Into<String>,
    ) -> Self {
        Finding {
            category,
            severity: severity_for(category, source),
            source,
            locator,
            evidence: evidence.into(),
            firmware_id: firmware_id.into(),
            raw_category: None,
        }
    }

    pub fn is_high(&self) -> bool {
        self.severity == Severity::High
    }
}
