//! Dashboard aggregates.
//!
//! `top_defects` counts annotations whose `created_at` lies in
//! `(now - window_days, now]`, grouped by class. `monthly_defect_rate`
//! covers the 12 calendar months ending with the current one (UTC); for
//! each month, inspections created in it with at least one annotation over
//! all inspections created in it, 0 when the month has none.

use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, Duration, Utc};
use pipescan_core::domain::{AnnotationSource, Inspection};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceFilter {
    #[default]
    All,
    Manual,
    Automatic,
}

impl SourceFilter {
    pub fn parse(s: &str) -> Option<SourceFilter> {
        match s {
            "all" => Some(SourceFilter::All),
            "manual" => Some(SourceFilter::Manual),
            "automatic" => Some(SourceFilter::Automatic),
            _ => None,
        }
    }

    fn admits(self, source: AnnotationSource) -> bool {
        match self {
            SourceFilter::All => true,
            SourceFilter::Manual => source == AnnotationSource::Manual,
            SourceFilter::Automatic => source == AnnotationSource::Automatic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRate {
    /// `YYYY-MM`
    pub month: String,
    pub inspections: u64,
    pub with_defects: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsResult {
    pub window_days: u32,
    pub source: SourceFilter,
    pub top_defects: Vec<ClassCount>,
    pub monthly_defect_rate: Vec<MonthRate>,
}

/// `(year, month)` of the 12 months ending at `now`, oldest first.
pub fn trailing_months(now: DateTime<Utc>) -> Vec<(i32, u32)> {
    let idx = now.year() * 12 + now.month0() as i32;
    (0..12).rev().map(|k| {
        let m = idx - k;
        (m.div_euclid(12), m.rem_euclid(12) as u32 + 1)
    }).collect()
}

pub fn compute_statistics(
    inspections: &[Inspection],
    now: DateTime<Utc>,
    window_days: u32,
    source: SourceFilter,
) -> StatisticsResult {
    let from = now - Duration::days(window_days as i64);
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for a in inspections.iter().flat_map(|i| &i.annotations) {
        if source.admits(a.source) && a.created_at > from && a.created_at <= now {
            *counts.entry(a.detection.class.as_str()).or_default() += 1;
        }
    }
    let mut top_defects: Vec<ClassCount> = counts
        .into_iter()
        .map(|(class, count)| ClassCount {
            class: class.to_string(),
            count,
        })
        .collect();
    // BTreeMap order is by name, so a stable sort on count keeps name ties.
    top_defects.sort_by(|a, b| b.count.cmp(&a.count));

    let months = trailing_months(now);
    let mut per_month: BTreeMap<(i32, u32), (u64, u64)> = months.iter().map(|m| (*m, (0, 0))).collect();
    for insp in inspections {
        let key = (insp.created_at.year(), insp.created_at.month());
        if let Some(slot) = per_month.get_mut(&key) {
            slot.0 += 1;
            if insp.annotations.iter().any(|a| source.admits(a.source)) {
                slot.1 += 1;
            }
        }
    }
    let monthly_defect_rate = months
        .iter()
        .map(|m| {
            let (total, with) = per_month[m];
            MonthRate {
                month: format!("{:04}-{:02}", m.0, m.1),
                inspections: total,
                with_defects: with,
                rate: if total == 0 { 0.0 } else { with as f64 / total as f64 },
            }
        })
        .collect();
    StatisticsResult {
        window_days,
        source,
        top_defects,
        monthly_defect_rate,
    }
}
