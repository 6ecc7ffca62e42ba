//! Roll static and dynamic findings up per firmware and per category.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::finding::{Category, Finding, Severity, Source, DYNAMIC_CATEGORIES, STATIC_CATEGORIES};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareTally {
    pub static_issue_count: u64,
    pub dynamic_issue_count: u64,
    pub high_impact: bool,
}

/// One row of a findings table: issue count and number of firmware images
/// with at least one such issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub category: Category,
    pub label: String,
    pub issues: u64,
    pub firmware: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicTable {
    pub high: Vec<TableRow>,
    pub high_subtotal: TableTotals,
    pub low: Vec<TableRow>,
    pub low_subtotal: TableTotals,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableTotals {
    pub issues: u64,
    pub firmware: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTotal {
    pub category: Category,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_firmware: BTreeMap<String, FirmwareTally>,
    pub unique_vulnerable_firmware: u64,
    pub total_findings: u64,
    pub category_totals: Vec<CategoryTotal>,
    /// Static (PHP) findings by category, including an `Unmapped` row when
    /// any exist.
    pub static_table: Vec<TableRow>,
    pub dynamic_table: DynamicTable,
}

fn table_rows<'a>(
    findings: impl Iterator<Item = &'a Finding> + Clone,
    categories: impl Iterator<Item = (Category, &'static str)>,
) -> Vec<TableRow> {
    categories
        .map(|(category, label)| {
            let matching = findings.clone().filter(|f| f.category == category);
            let firmware: BTreeSet<&str> = matching.clone().map(|f| f.firmware_id.as_str()).collect();
            TableRow {
                category,
                label: label.to_string(),
                issues: matching.count() as u64,
                firmware: firmware.len() as u64,
            }
        })
        .collect()
}

fn subtotal<'a>(findings: impl Iterator<Item = &'a Finding>, rows: &[TableRow]) -> TableTotals {
    let cats: BTreeSet<Category> = rows.iter().map(|r| r.category).collect();
    let matching: Vec<&Finding> = findings.filter(|f| cats.contains(&f.category)).collect();
    let firmware: BTreeSet<&str> = matching.iter().map(|f| f.firmware_id.as_str()).collect();
    TableTotals { issues: matching.len() as u64, firmware: firmware.len() as u64 }
}

/// Aggregate a findings multiset. The result does not depend on order.
pub fn aggregate(findings: &[Finding]) -> AggregateReport {
    let mut per_firmware: BTreeMap<String, FirmwareTally> = BTreeMap::new();
    let mut totals: BTreeMap<Category, u64> = BTreeMap::new();
    for f in findings {
        let tally = per_firmware.entry(f.firmware_id.clone()).or_default();
        match f.source {
            Source::Static => tally.static_issue_count += 1,
            Source::Dynamic | Source::Manual => tally.dynamic_issue_count += 1,
        }
        tally.high_impact |= f.severity == Severity::High;
        *totals.entry(f.category).or_insert(0) += 1;
    }

    let statics = findings.iter().filter(|f| f.source == Source::Static);
    let mut static_rows: Vec<(Category, &'static str)> = STATIC_CATEGORIES.to_vec();
    if statics.clone().any(|f| f.category == Category::Unmapped) {
        static_rows.push((Category::Unmapped, "Unmapped"));
    }
    let static_table = table_rows(statics, static_rows.into_iter());

    let dynamics = findings.iter().filter(|f| f.source != Source::Static);
    let (high_cats, low_cats): (Vec<_>, Vec<_>) = DYNAMIC_CATEGORIES
        .iter()
        .copied()
        .partition(|(c, _)| crate::finding::severity_for(*c, Source::Dynamic) == Severity::High);
    let high = table_rows(dynamics.clone(), high_cats.into_iter());
    let low = table_rows(dynamics.clone(), low_cats.into_iter());
    let dynamic_table = DynamicTable {
        high_subtotal: subtotal(dynamics.clone(), &high),
        low_subtotal: subtotal(dynamics, &low),
        high,
        low,
    };

    AggregateReport {
        unique_vulnerable_firmware: per_firmware.len() as u64,
        total_findings: findings.len() as u64,
        category_totals: totals.into_iter().map(|(category, count)| CategoryTotal { category, count }).collect(),
        per_firmware,
        static_table,
        dynamic_table,
    }
}

/// Distinct files carrying High static findings, in first-seen order.
pub fn select_high_impact(findings: &[Finding]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    findings
        .iter()
        .filter(|f| f.source == Source::Static && f.severity == Severity::High)
        .filter(|f| seen.insert(f.locator.target.clone()))
        .map(|f| f.locator.target.clone())
        .collect()
}
