use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::model::{Language, PersistenceRecord, RepoId, Severity};

/// One release and the CVEs reported in it.
#[derive(Debug, Clone)]
pub struct ReleaseCves {
    pub tag: String,
    pub date: DateTime<Utc>,
    pub cves: BTreeSet<String>,
}

/// Whole UTC calendar days from `a` to `b`.
pub fn day_diff(a: DateTime<Utc>, b: DateTime<Utc>) -> i64 {
    (b.date_naive() - a.date_naive()).num_days()
}

/// For each CVE: the first release reporting it and the first later release
/// that no longer does. CVEs never absent afterwards yield no record.
pub fn persistence(repo: &RepoId, releases: &[ReleaseCves]) -> Vec<PersistenceRecord> {
    let mut ordered: Vec<&ReleaseCves> = releases.iter().collect();
    ordered.sort_by(|a, b| a.date.cmp(&b.date).then(a.tag.cmp(&b.tag)));
    let all: BTreeSet<&String> = ordered.iter().flat_map(|r| r.cves.iter()).collect();
    let mut out = Vec::new();
    for cve in all {
        let Some(first) = ordered.iter().position(|r| r.cves.contains(cve)) else {
            continue;
        };
        let Some(clean) = ordered[first + 1..].iter().find(|r| !r.cves.contains(cve)) else {
            continue;
        };
        let vuln = ordered[first];
        out.push(PersistenceRecord {
            repo_id: repo.clone(),
            cve_id: cve.clone(),
            first_vulnerable_release: vuln.tag.clone(),
            first_vulnerable_date: vuln.date,
            first_clean_release: clean.tag.clone(),
            first_clean_date: clean.date,
            days: day_diff(vuln.date, clean.date).max(0) as u64,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub days: u64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBin {
    pub from_days: u64,
    pub to_days: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceCurve {
    pub language: Option<Language>,
    pub severity: Severity,
    pub records: usize,
    pub mean_days: f64,
    /// Cumulative fraction of records persisting at most `days`, one point
    /// per distinct day count.
    pub points: Vec<CurvePoint>,
    /// Percent of records per `[from, to)` day bin.
    pub bins: Vec<CurveBin>,
}

impl PersistenceCurve {
    pub fn cumulative_at(&self, days: u64) -> f64 {
        self.points
            .iter()
            .take_while(|p| p.days <= days)
            .last()
            .map_or(0.0, |p| p.cumulative)
    }
}

pub const DEFAULT_BIN_DAYS: u64 = 90;

fn curve(language: Option<Language>, severity: Severity, mut days: Vec<u64>, bin_days: u64) -> PersistenceCurve {
    days.sort_unstable();
    let n = days.len();
    let mut points: Vec<CurvePoint> = Vec::new();
    for (i, d) in days.iter().enumerate() {
        let cumulative = (i + 1) as f64 / n as f64;
        match points.last_mut() {
            Some(p) if p.days == *d => p.cumulative = cumulative,
            _ => points.push(CurvePoint { days: *d, cumulative }),
        }
    }
    let mut bins = Vec::new();
    if let Some(max) = days.last() {
        let width = bin_days.max(1);
        let mut from = 0;
        while from <= *max {
            let count = days.iter().filter(|d| **d >= from && **d < from + width).count();
            bins.push(CurveBin {
                from_days: from,
                to_days: from + width,
                percent: 100.0 * count as f64 / n as f64,
            });
            from += width;
        }
    }
    let mean_days = if n == 0 { 0.0 } else { days.iter().sum::<u64>() as f64 / n as f64 };
    PersistenceCurve {
        language,
        severity,
        records: n,
        mean_days,
        points,
        bins,
    }
}

/// Per (language, severity) cumulative persistence, plus an all-languages
/// partition (`language: None`). Empty partitions are omitted.
pub fn persistence_curves(
    records: &[(PersistenceRecord, Language, Severity)],
    bin_days: u64,
) -> Vec<PersistenceCurve> {
    let mut parts: BTreeMap<(Option<Language>, Severity), Vec<u64>> = BTreeMap::new();
    for (r, lang, sev) in records {
        parts.entry((Some(*lang), *sev)).or_default().push(r.days);
        parts.entry((None, *sev)).or_default().push(r.days);
    }
    parts
        .into_iter()
        .map(|((lang, sev), days)| curve(lang, sev, days, bin_days))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::date;
    use proptest::prelude::*;

    fn rel(tag: &str, d: chrono::DateTime<Utc>, cves: &[&str]) -> ReleaseCves {
        ReleaseCves {
            tag: tag.into(),
            date: d,
            cves: cves.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn hand_built_timelines() {
        let r = RepoId("r".into());
        let d0 = date(2022, 1, 1);
        let rels = [
            rel("r1", d0, &["CVE-1", "CVE-ALL"]),
            rel("r2", d0 + chrono::Duration::days(30), &["CVE-1", "CVE-ALL", "CVE-2"]),
            rel("r3", d0 + chrono::Duration::days(45), &["CVE-ALL"]),
        ];
        let recs = persistence(&r, &rels);
        let by: BTreeMap<&str, u64> = recs.iter().map(|x| (x.cve_id.as_str(), x.days)).collect();
        assert_eq!(by, BTreeMap::from([("CVE-1", 45), ("CVE-2", 15)]));

        // present only in r2, absent in r3 ten days later
        let rels = [
            rel("r1", d0, &[]),
            rel("r2", date(2022, 3, 1), &["CVE-X"]),
            rel("r3", date(2022, 3, 11), &[]),
        ];
        let recs = persistence(&r, &rels);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].days as i64, day_diff(date(2022, 3, 1), date(2022, 3, 11)));
        assert_eq!(recs[0].days, 10);
    }

    #[test]
    fn partial_days_are_truncated_to_dates() {
        let a = date(2022, 1, 1) + chrono::Duration::hours(23);
        let b = date(2022, 1, 2) + chrono::Duration::hours(1);
        assert_eq!(day_diff(a, b), 1);
    }

    fn rec(days: u64) -> PersistenceRecord {
        PersistenceRecord {
            repo_id: RepoId("r".into()),
            cve_id: format!("CVE-{days}"),
            first_vulnerable_release: "a".into(),
            first_vulnerable_date: date(2020, 1, 1),
            first_clean_release: "b".into(),
            first_clean_date: date(2020, 1, 1),
            days,
        }
    }

    #[test]
    fn curve_examples() {
        let recs: Vec<_> = [10, 20, 30].iter().map(|d| (rec(*d), Language::Go, Severity::High)).collect();
        let c = &persistence_curves(&recs, 10)[0];
        let cum: Vec<f64> = c.points.iter().map(|p| p.cumulative).collect();
        assert_eq!(cum, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);

        let recs: Vec<_> = (0..5).map(|_| (rec(100), Language::Go, Severity::Low)).collect();
        let c = &persistence_curves(&recs, 30)[0];
        assert_eq!(c.cumulative_at(99), 0.0);
        assert_eq!(c.cumulative_at(100), 1.0);
        assert!(persistence_curves(&[], 30).is_empty());
    }

    proptest! {
        #[test]
        fn curves_match_sort_and_count(
            recs in prop::collection::vec((0u64..800, 0usize..3, 0usize..4), 1..80),
            probe in 0u64..900,
        ) {
            let langs = [Language::Go, Language::Rust, Language::Java];
            let sevs = [Severity::Low, Severity::Medium, Severity::High, Severity::Critical];
            let input: Vec<_> = recs.iter().map(|&(d, l, s)| (rec(d), langs[l], sevs[s])).collect();
            for c in persistence_curves(&input, 90) {
                let mut days: Vec<u64> = input
                    .iter()
                    .filter(|(_, l, s)| *s == c.severity && c.language.is_none_or(|x| x == *l))
                    .map(|(r, _, _)| r.days)
                    .collect();
                days.sort_unstable();
                let expected = days.iter().filter(|d| **d <= probe).count() as f64 / days.len() as f64;
                prop_assert!((c.cumulative_at(probe) - expected).abs() < 1e-12);
                prop_assert!(c.points.windows(2).all(|w| w[0].cumulative <= w[1].cumulative && w[0].days < w[1].days));
                prop_assert_eq!(c.points.last().unwrap().cumulative, 1.0);
                let total: f64 = c.bins.iter().map(|b| b.percent).sum();
                prop_assert!((total - 100.0).abs() < 1e-9);
            }
        }

        #[test]
        fn records_non_negative_and_unique(sets in prop::collection::vec(prop::collection::btree_set(0u8..6, 0..4), 1..10)) {
            let rels: Vec<ReleaseCves> = sets
                .iter()
                .enumerate()
                .map(|(i, s)| ReleaseCves {
                    tag: format!("v{i}"),
                    date: date(2020, 1, 1) + chrono::Duration::days(7 * i as i64),
                    cves: s.iter().map(|c| format!("CVE-{c}")).collect(),
                })
                .collect();
            let recs = persistence(&RepoId("r".into()), &rels);
            let ids: BTreeSet<&str> = recs.iter().map(|r| r.cve_id.as_str()).collect();
            prop_assert_eq!(ids.len(), recs.len());
            for r in &recs {
                prop_assert!(r.first_clean_date > r.first_vulnerable_date);
            }
        }
    }
}
