//! Longitudinal metrics over mined releases and their matches.
//!
//! Everything here is computed from a [`Dataset`] snapshot of the store.
//! Only releases whose SBOM was generated (`DONE`) take part. Unless a
//! function takes a [`View`], "reported in a release" means known at release
//! time.

mod persistence;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Datelike, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::model::{Language, Release, ReleaseState, Repository, Severity};
use crate::repominer::release_cycle_stats;
use crate::sbom::HISTOGRAM_BUCKETS;
use crate::store::{LinkRow, ReleaseMatchRow, Store, StoreError};

pub use persistence::{
    day_diff, persistence, persistence_curves, CurveBin, CurvePoint, PersistenceCurve, ReleaseCves, DEFAULT_BIN_DAYS,
};
pub use stats::pearson;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("UNDEFINED_CORRELATION: a vector is constant")]
    UndefinedCorrelation,
    #[error("vectors differ in length ({x} vs {y})")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 2 points, have {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// Vulnerabilities published on or before the release date.
    KnownAt,
    /// Every match, regardless of publication date.
    AllTime,
}

#[derive(Debug, Clone)]
pub struct ReleaseView {
    pub release: Release,
    pub links: Vec<LinkRow>,
    pub matches: Vec<ReleaseMatchRow>,
}

impl ReleaseView {
    pub fn visible(&self, view: View) -> impl Iterator<Item = &ReleaseMatchRow> {
        self.matches
            .iter()
            .filter(move |m| view == View::AllTime || m.published <= self.release.release_date)
    }

    pub fn cves(&self, view: View) -> BTreeSet<String> {
        self.visible(view).map(|m| m.cve_id.clone()).collect()
    }

    pub fn vulnerable(&self, view: View) -> bool {
        self.visible(view).next().is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RepoView {
    pub repo: Repository,
    /// Ordered by release date, then tag.
    pub releases: Vec<ReleaseView>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub repos: Vec<RepoView>,
}

impl Dataset {
    pub fn load(store: &Store) -> Result<Dataset, StoreError> {
        let mut repos = Vec::new();
        for repo in store.list_repositories()? {
            let mut links: BTreeMap<String, Vec<LinkRow>> = BTreeMap::new();
            for l in store.release_links(&repo.id)? {
                links.entry(l.tag.clone()).or_default().push(l);
            }
            let mut matches: BTreeMap<String, Vec<ReleaseMatchRow>> = BTreeMap::new();
            for m in store.release_matches(&repo.id)? {
                matches.entry(m.tag.clone()).or_default().push(m);
            }
            let releases = store
                .list_releases(&repo.id)?
                .into_iter()
                .filter(|r| r.state == ReleaseState::Done)
                .map(|r| ReleaseView {
                    links: links.remove(&r.tag).unwrap_or_default(),
                    matches: matches.remove(&r.tag).unwrap_or_default(),
                    release: r,
                })
                .collect();
            repos.push(RepoView { repo, releases });
        }
        Ok(Dataset { repos })
    }

    pub fn repo(&self, id: &str) -> Option<&RepoView> {
        self.repos.iter().find(|r| r.repo.id.0 == id)
    }
}

// ---- persistence ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersistenceRow {
    pub repo_id: String,
    pub language: Language,
    pub cve_id: String,
    pub severity: Severity,
    pub first_vulnerable_release: String,
    pub first_vulnerable_date: DateTime<Utc>,
    pub first_clean_release: String,
    pub first_clean_date: DateTime<Utc>,
    pub days: u64,
}

pub fn persistence_rows(data: &Dataset) -> Vec<PersistenceRow> {
    let mut out = Vec::new();
    for rv in &data.repos {
        let timeline: Vec<ReleaseCves> = rv
            .releases
            .iter()
            .map(|r| ReleaseCves {
                tag: r.release.tag.clone(),
                date: r.release.release_date,
                cves: r.cves(View::KnownAt),
            })
            .collect();
        let severity: BTreeMap<&str, Severity> = rv
            .releases
            .iter()
            .flat_map(|r| r.matches.iter())
            .map(|m| (m.cve_id.as_str(), m.severity))
            .collect();
        for rec in persistence(&rv.repo.id, &timeline) {
            out.push(PersistenceRow {
                repo_id: rec.repo_id.0.clone(),
                language: rv.repo.primary_language,
                severity: severity.get(rec.cve_id.as_str()).copied().unwrap_or(Severity::None),
                cve_id: rec.cve_id,
                first_vulnerable_release: rec.first_vulnerable_release,
                first_vulnerable_date: rec.first_vulnerable_date,
                first_clean_release: rec.first_clean_release,
                first_clean_date: rec.first_clean_date,
                days: rec.days,
            });
        }
    }
    out
}

pub fn curves_for(rows: &[PersistenceRow], bin_days: u64) -> Vec<PersistenceCurve> {
    let input: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                crate::model::PersistenceRecord {
                    repo_id: crate::model::RepoId(r.repo_id.clone()),
                    cve_id: r.cve_id.clone(),
                    first_vulnerable_release: r.first_vulnerable_release.clone(),
                    first_vulnerable_date: r.first_vulnerable_date,
                    first_clean_release: r.first_clean_release.clone(),
                    first_clean_date: r.first_clean_date,
                    days: r.days,
                },
                r.language,
                r.severity,
            )
        })
        .collect();
    persistence_curves(&input, bin_days)
}

// ---- correlation -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub repo_id: String,
    pub language: Language,
    pub tag: String,
    pub date: DateTime<Utc>,
    pub commits: u64,
    pub contributors: u64,
    pub vulnerabilities: u64,
}

pub fn metric_rows(data: &Dataset) -> Vec<MetricRow> {
    data.repos
        .iter()
        .flat_map(|rv| {
            rv.releases.iter().map(move |r| MetricRow {
                repo_id: rv.repo.id.0.clone(),
                language: rv.repo.primary_language,
                tag: r.release.tag.clone(),
                date: r.release.release_date,
                commits: r.release.commit_count,
                contributors: r.release.contributor_count,
                vulnerabilities: r.cves(View::KnownAt).len() as u64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    /// Every release is one observation.
    PerRelease,
    /// The latest release of each repository is one observation.
    PerRepo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub language: Language,
    pub unit: Unit,
    pub n: usize,
    /// `None` when undefined (a constant vector).
    pub commits_vs_vulnerabilities: Option<f64>,
    pub contributors_vs_vulnerabilities: Option<f64>,
}

/// Pearson r of commits and of contributors against vulnerability counts, per
/// language and unit. Partitions with fewer than 2 rows are omitted.
pub fn correlation_table(rows: &[MetricRow]) -> Vec<CorrelationRow> {
    let mut latest: BTreeMap<&str, &MetricRow> = BTreeMap::new();
    for r in rows {
        let e = latest.entry(r.repo_id.as_str()).or_insert(r);
        if (r.date, &r.tag) > (e.date, &e.tag) {
            *e = r;
        }
    }
    let mut parts: BTreeMap<(Language, Unit), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        parts.entry((r.language, Unit::PerRelease)).or_default().push(r);
    }
    for r in latest.values() {
        parts.entry((r.language, Unit::PerRepo)).or_default().push(r);
    }
    parts
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|((language, unit), v)| {
            let vulns: Vec<f64> = v.iter().map(|r| r.vulnerabilities as f64).collect();
            let commits: Vec<f64> = v.iter().map(|r| r.commits as f64).collect();
            let contributors: Vec<f64> = v.iter().map(|r| r.contributors as f64).collect();
            CorrelationRow {
                language,
                unit,
                n: v.len(),
                commits_vs_vulnerabilities: pearson(&commits, &vulns).ok(),
                contributors_vs_vulnerabilities: pearson(&contributors, &vulns).ok(),
            }
        })
        .collect()
}

// ---- timelines -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Month,
    Year,
}

impl std::str::FromStr for Granularity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "month" => Ok(Granularity::Month),
            "year" => Ok(Granularity::Year),
            other => Err(format!("unknown granularity {other:?} (month|year)")),
        }
    }
}

/// Calendar period as a sortable ordinal: months since year 0, or the year.
fn period_of(d: DateTime<Utc>, g: Granularity) -> i64 {
    match g {
        Granularity::Month => i64::from(d.year()) * 12 + i64::from(d.month0()),
        Granularity::Year => i64::from(d.year()),
    }
}

fn period_label(p: i64, g: Granularity) -> String {
    match g {
        Granularity::Month => format!("{:04}-{:02}", p.div_euclid(12), p.rem_euclid(12) + 1),
        Granularity::Year => format!("{p:04}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineBucket {
    /// `None` is the all-languages partition.
    pub language: Option<Language>,
    pub period: String,
    pub releases: u64,
    pub vulnerable: u64,
}

/// Release counts and vulnerable-release counts per calendar period, every
/// period between a partition's first and last release included.
pub fn release_timelines(data: &Dataset, g: Granularity, view: View) -> Vec<TimelineBucket> {
    let mut parts: BTreeMap<Option<Language>, BTreeMap<i64, (u64, u64)>> = BTreeMap::new();
    for rv in &data.repos {
        for r in &rv.releases {
            let p = period_of(r.release.release_date, g);
            let vuln = u64::from(r.vulnerable(view));
            for key in [Some(rv.repo.primary_language), None] {
                let slot = parts.entry(key).or_default().entry(p).or_default();
                slot.0 += 1;
                slot.1 += vuln;
            }
        }
    }
    fill_periods(parts, g)
}

fn fill_periods(parts: BTreeMap<Option<Language>, BTreeMap<i64, (u64, u64)>>, g: Granularity) -> Vec<TimelineBucket> {
    let mut out = Vec::new();
    for (language, counts) in parts {
        let (Some(first), Some(last)) = (counts.keys().next().copied(), counts.keys().last().copied()) else {
            continue;
        };
        for p in first..=last {
            let (releases, vulnerable) = counts.get(&p).copied().unwrap_or((0, 0));
            out.push(TimelineBucket {
                language,
                period: period_label(p, g),
                releases,
                vulnerable,
            });
        }
    }
    out
}

/// Timeline restricted to one CVE: per period, releases and releases that
/// contain it. Used for case studies around a disclosure.
pub fn cve_timeline(data: &Dataset, cve: &str, g: Granularity, view: View) -> Vec<TimelineBucket> {
    let mut parts: BTreeMap<Option<Language>, BTreeMap<i64, (u64, u64)>> = BTreeMap::new();
    for rv in &data.repos {
        for r in &rv.releases {
            let slot = parts
                .entry(None)
                .or_default()
                .entry(period_of(r.release.release_date, g))
                .or_default();
            slot.0 += 1;
            slot.1 += u64::from(r.visible(view).any(|m| m.cve_id == cve));
        }
    }
    fill_periods(parts, g)
}

// ---- depth -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthHistogram {
    pub language: Option<Language>,
    /// Dependency links counted (unreachable links excluded).
    pub total: u64,
    pub vulnerable_total: u64,
    pub unreachable: u64,
    /// Percent of links per depth bucket 0..=5 (5 means 5 or deeper).
    pub all: [f64; HISTOGRAM_BUCKETS],
    pub vulnerable: [f64; HISTOGRAM_BUCKETS],
}

fn percents(counts: &[u64; HISTOGRAM_BUCKETS]) -> [f64; HISTOGRAM_BUCKETS] {
    let total: u64 = counts.iter().sum();
    let mut out = [0.0; HISTOGRAM_BUCKETS];
    if total > 0 {
        for (o, c) in out.iter_mut().zip(counts) {
            *o = 100.0 * *c as f64 / total as f64;
        }
    }
    out
}

/// Depth distribution of all dependency links and of vulnerable ones (links
/// whose component has a known-at match in that release), per language.
pub fn depth_report(data: &Dataset) -> Vec<DepthHistogram> {
    #[derive(Default)]
    struct Acc {
        all: [u64; HISTOGRAM_BUCKETS],
        vuln: [u64; HISTOGRAM_BUCKETS],
        unreachable: u64,
    }
    let mut parts: BTreeMap<Option<Language>, Acc> = BTreeMap::new();
    for rv in &data.repos {
        for r in &rv.releases {
            let vulnerable: BTreeSet<&str> = r.visible(View::KnownAt).map(|m| m.purl.as_str()).collect();
            for l in r.links.iter().filter(|l| !l.synthetic) {
                for key in [Some(rv.repo.primary_language), None] {
                    let acc = parts.entry(key).or_default();
                    match l.depth {
                        None => acc.unreachable += 1,
                        Some(d) => {
                            let b = (d as usize).min(HISTOGRAM_BUCKETS - 1);
                            acc.all[b] += 1;
                            if vulnerable.contains(l.purl.as_str()) {
                                acc.vuln[b] += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    parts
        .into_iter()
        .map(|(language, a)| DepthHistogram {
            language,
            total: a.all.iter().sum(),
            vulnerable_total: a.vuln.iter().sum(),
            unreachable: a.unreachable,
            all: percents(&a.all),
            vulnerable: percents(&a.vuln),
        })
        .collect()
}

// ---- release cycles ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRow {
    pub repo_id: String,
    pub language: Language,
    pub releases: usize,
    pub avg_days_between_releases: f64,
    pub avg_commits_per_release: f64,
}

/// Release cadence per repository; repositories with fewer than two
/// releases are left out.
pub fn cycle_rows(data: &Dataset) -> Vec<CycleRow> {
    data.repos
        .iter()
        .filter_map(|rv| {
            let rels: Vec<Release> = rv.releases.iter().map(|r| r.release.clone()).collect();
            let (days, commits) = release_cycle_stats(&rels).ok()?;
            Some(CycleRow {
                repo_id: rv.repo.id.0.clone(),
                language: rv.repo.primary_language,
                releases: rels.len(),
                avg_days_between_releases: days,
                avg_commits_per_release: commits,
            })
        })
        .collect()
}
