//! Report files: `<out>/<scope>/<kind>.json` plus a CSV table next to it.
//!
//! Report bodies depend only on store contents, so re-running a scan over the
//! same inputs reproduces them byte for byte. Generation times live in
//! `<out>/<scope>/metadata.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::analytics::{
    correlation_table, curves_for, cycle_rows, depth_report, metric_rows, persistence_rows, release_timelines,
    Dataset, Granularity, View, DEFAULT_BIN_DAYS,
};
use crate::genmachine::sanitize_tag;
use crate::matcher::match_report;
use crate::model::{Language, RepoId};
use crate::store::{Store, StoreError};

pub const SCHEMA_VERSION: u32 = 1;
/// Directory name for reports spanning every repository.
pub const ALL_SCOPE: &str = "_all";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown repository {0}")]
    UnknownRepo(String),
    #[error("unknown release {repo}@{tag}")]
    UnknownRelease { repo: String, tag: String },
    #[error("a release report needs a repository")]
    ReleaseNeedsRepo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportKind {
    Timeline,
    Depth,
    Correlation,
    Persistence,
    Release(String),
}

impl ReportKind {
    pub const AGGREGATES: [ReportKind; 4] = [
        ReportKind::Timeline,
        ReportKind::Depth,
        ReportKind::Correlation,
        ReportKind::Persistence,
    ];

    pub fn file_stem(&self) -> String {
        match self {
            ReportKind::Release(tag) => format!("release-{}", sanitize_tag(tag)),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportKind::Timeline => f.write_str("timeline"),
            ReportKind::Depth => f.write_str("depth"),
            ReportKind::Correlation => f.write_str("correlation"),
            ReportKind::Persistence => f.write_str("persistence"),
            ReportKind::Release(tag) => write!(f, "release {tag}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Repo(RepoId),
}

impl Scope {
    pub fn dir_name(&self) -> String {
        match self {
            Scope::All => ALL_SCOPE.to_string(),
            Scope::Repo(id) => sanitize_tag(&id.0),
        }
    }

    fn label(&self) -> &str {
        match self {
            Scope::All => "all",
            Scope::Repo(id) => &id.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataEntry {
    generated_at: DateTime<Utc>,
    schema_version: u32,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn lang(l: Option<Language>) -> String {
    l.map_or_else(|| "all".to_string(), |l| l.as_str().to_string())
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Table {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn to_bytes(&self) -> Result<Vec<u8>, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
    }
}

fn scoped(data: Dataset, scope: &Scope) -> Result<Dataset, ReportError> {
    match scope {
        Scope::All => Ok(data),
        Scope::Repo(id) => {
            let repos: Vec<_> = data.repos.into_iter().filter(|r| &r.repo.id == id).collect();
            if repos.is_empty() {
                return Err(ReportError::UnknownRepo(id.0.clone()));
            }
            Ok(Dataset { repos })
        }
    }
}

/// Builds the JSON body and CSV table for one report.
pub fn render(store: &Store, scope: &Scope, kind: &ReportKind) -> Result<(Value, Vec<u8>), ReportError> {
    let data = scoped(Dataset::load(store)?, scope)?;
    let (body, table) = match kind {
        ReportKind::Timeline => {
            let mut t = Table::new(&["granularity", "view", "language", "period", "releases", "vulnerable"]);
            let mut body = serde_json::Map::new();
            for (gname, g) in [("month", Granularity::Month), ("year", Granularity::Year)] {
                let mut views = serde_json::Map::new();
                for (vname, v) in [("known_at", View::KnownAt), ("all_time", View::AllTime)] {
                    let buckets = release_timelines(&data, g, v);
                    for b in &buckets {
                        t.push(vec![
                            gname.into(),
                            vname.into(),
                            lang(b.language),
                            b.period.clone(),
                            b.releases.to_string(),
                            b.vulnerable.to_string(),
                        ]);
                    }
                    views.insert(vname.into(), json!(buckets));
                }
                body.insert(gname.into(), Value::Object(views));
            }
            body.insert("release_cycles".into(), json!(cycle_rows(&data)));
            (Value::Object(body), t)
        }
        ReportKind::Depth => {
            let hist = depth_report(&data);
            let mut t = Table::new(&["language", "histogram", "depth", "percent", "links"]);
            for h in &hist {
                for (name, percents, total) in [("all", &h.all, h.total), ("vulnerable", &h.vulnerable, h.vulnerable_total)] {
                    for (i, p) in percents.iter().enumerate() {
                        let depth = if i + 1 == percents.len() { format!("{i}+") } else { i.to_string() };
                        t.push(vec![lang(h.language), name.into(), depth, p.to_string(), total.to_string()]);
                    }
                }
            }
            (json!({ "histograms": hist }), t)
        }
        ReportKind::Correlation => {
            let metrics = metric_rows(&data);
            let rows = correlation_table(&metrics);
            let mut t = Table::new(&["language", "unit", "n", "commits_r", "contributors_r"]);
            for r in &rows {
                let unit = serde_json::to_value(r.unit).expect("unit serializes");
                t.push(vec![
                    r.language.as_str().into(),
                    unit.as_str().unwrap_or_default().into(),
                    r.n.to_string(),
                    num(r.commits_vs_vulnerabilities),
                    num(r.contributors_vs_vulnerabilities),
                ]);
            }
            (json!({ "view": View::KnownAt, "table": rows, "observations": metrics }), t)
        }
        ReportKind::Persistence => {
            let records = persistence_rows(&data);
            let curves = curves_for(&records, DEFAULT_BIN_DAYS);
            let mut t = Table::new(&["language", "severity", "days", "cumulative"]);
            for c in &curves {
                for p in &c.points {
                    t.push(vec![
                        lang(c.language),
                        c.severity.as_str().into(),
                        p.days.to_string(),
                        p.cumulative.to_string(),
                    ]);
                }
            }
            (json!({ "view": View::KnownAt, "bin_days": DEFAULT_BIN_DAYS, "records": records, "curves": curves }), t)
        }
        ReportKind::Release(tag) => {
            let Scope::Repo(id) = scope else {
                return Err(ReportError::ReleaseNeedsRepo);
            };
            let release = store.get_release(id, tag)?.ok_or_else(|| ReportError::UnknownRelease {
                repo: id.0.clone(),
                tag: tag.clone(),
            })?;
            let rows = match_report(store, id, tag)?;
            let mut t = Table::new(&["purl", "cve_id", "severity", "cvss", "epss", "source", "known_at_release"]);
            for r in &rows {
                t.push(vec![
                    r.purl.clone(),
                    r.cve_id.clone(),
                    r.severity.as_str().into(),
                    num(r.cvss),
                    num(r.epss_score),
                    r.source.clone(),
                    r.known_at_release.to_string(),
                ]);
            }
            let body = json!({
                "tag": release.tag,
                "release_date": release.release_date,
                "state": release.state,
                "fail_reason": release.fail_reason,
                "commit_count": release.commit_count,
                "contributor_count": release.contributor_count,
                "matches": rows,
            });
            (body, t)
        }
    };
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": kind.file_stem(),
        "scope": scope.label(),
        "data": body,
    });
    Ok((doc, table.to_bytes()?))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

/// Writes one report and records its generation time in the scope's
/// metadata file.
pub fn write_report(
    store: &Store,
    out: &Path,
    scope: &Scope,
    kind: &ReportKind,
    now: DateTime<Utc>,
) -> Result<ReportFiles, ReportError> {
    let (doc, csv) = render(store, scope, kind)?;
    let dir = out.join(scope.dir_name());
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let stem = kind.file_stem();
    let files = ReportFiles {
        json: dir.join(format!("{stem}.json")),
        csv: dir.join(format!("{stem}.csv")),
    };
    let mut json = serde_json::to_vec_pretty(&doc).expect("report serializes");
    json.push(b'\n');
    write_atomic(&files.json, &json)?;
    write_atomic(&files.csv, &csv)?;

    let meta_path = dir.join("metadata.json");
    let mut meta: BTreeMap<String, MetadataEntry> = fs::read(&meta_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    meta.insert(
        stem,
        MetadataEntry {
            generated_at: now,
            schema_version: SCHEMA_VERSION,
        },
    );
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    bytes.push(b'\n');
    write_atomic(&meta_path, &bytes)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::date;

    #[test]
    fn empty_store_gives_empty_reports() {
        let store = Store::open_in_memory().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = write_report(&store, dir.path(), &Scope::All, &ReportKind::Persistence, date(2024, 1, 1)).unwrap();
        let doc: Value = serde_json::from_slice(&fs::read(&f.json).unwrap()).unwrap();
        assert_eq!(doc["data"]["records"], json!([]));
        assert_eq!(fs::read_to_string(&f.csv).unwrap(), "language,severity,days,cumulative\n");
        assert!(f.json.starts_with(dir.path().join(ALL_SCOPE)));
    }

    #[test]
    fn bodies_do_not_depend_on_generation_time() {
        let store = Store::open_in_memory().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut seen = Vec::new();
        for now in [date(2024, 1, 1), date(2025, 6, 1)] {
            for kind in ReportKind::AGGREGATES {
                let f = write_report(&store, dir.path(), &Scope::All, &kind, now).unwrap();
                seen.push((fs::read(&f.json).unwrap(), fs::read(&f.csv).unwrap()));
            }
        }
        assert_eq!(seen[..4], seen[4..]);
        let meta: Value = serde_json::from_slice(&fs::read(dir.path().join(ALL_SCOPE).join("metadata.json")).unwrap()).unwrap();
        assert_eq!(meta["timeline"]["generated_at"], json!("2025-06-01T00:00:00Z"));
    }

    #[test]
    fn release_report_needs_a_known_repo() {
        let store = Store::open_in_memory().unwrap();
        let kind = ReportKind::Release("v1".into());
        assert!(matches!(render(&store, &Scope::All, &kind), Err(ReportError::ReleaseNeedsRepo)));
        assert!(matches!(
            render(&store, &Scope::Repo(RepoId("nope".into())), &kind),
            Err(ReportError::UnknownRepo(_))
        ));
    }
}
