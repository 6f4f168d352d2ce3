//! Single-file embedded store backed by SQLite.
//!
//! Every write runs inside one transaction; a reader never observes a
//! half-ingested feed or a half-registered SBOM. The schema is versioned via
//! `PRAGMA user_version` and migrated on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, NaiveDate, TimeZone, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction, TransactionBehavior};
use thiserror::Error;

use crate::model::{
    AffectedSpec, AnalysisState, Component, EpssEntry, Language, MatchSource, PackageUrl,
    ReleaseState, Release, RepoId, Repository, Severity, Vulnerability,
};
use crate::purl::{self, format_purl, parse_purl};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("state conflict on {entity}: expected {expected}, found {found}")]
    Conflict {
        entity: String,
        expected: String,
        found: String,
    },
    #[error("integrity violation on {entity}: {detail}")]
    Integrity { entity: String, detail: String },
    #[error("no such {kind}: {id}")]
    NotFound { kind: &'static str, id: String },
    #[error("store schema version {found} is newer than supported {supported}")]
    SchemaTooNew { found: i64, supported: i64 },
}

pub type Result<T> = std::result::Result<T, StoreError>;

const SCHEMA_V1: &str = r#"
CREATE TABLE repositories (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    clone_url TEXT NOT NULL,
    primary_language TEXT NOT NULL,
    stargazers INTEGER NOT NULL CHECK (stargazers >= 0),
    contributor_count INTEGER NOT NULL,
    first_seen INTEGER NOT NULL,
    locator TEXT NOT NULL
);
CREATE TABLE releases (
    repo_id TEXT NOT NULL REFERENCES repositories(id),
    tag TEXT NOT NULL,
    release_date INTEGER NOT NULL,
    commit_count INTEGER NOT NULL,
    contributor_count INTEGER NOT NULL,
    file_count INTEGER NOT NULL,
    lines_of_code INTEGER NOT NULL,
    lines_of_comments INTEGER NOT NULL,
    state TEXT NOT NULL CHECK (state IN ('NEW', 'DONE', 'FAIL')),
    fail_reason TEXT,
    sbom_path TEXT,
    PRIMARY KEY (repo_id, tag)
);
CREATE TABLE components (
    id INTEGER PRIMARY KEY,
    purl TEXT NOT NULL UNIQUE,
    ecosystem TEXT NOT NULL,
    product_key TEXT NOT NULL,
    grp TEXT,
    display_name TEXT NOT NULL,
    version TEXT NOT NULL,
    hashes TEXT NOT NULL,
    synthetic INTEGER NOT NULL,
    state TEXT NOT NULL CHECK (state IN ('NEW', 'ANALYZED')),
    claimed_by INTEGER
);
CREATE INDEX components_state ON components(state, claimed_by);
CREATE TABLE release_components (
    repo_id TEXT NOT NULL,
    tag TEXT NOT NULL,
    component_id INTEGER NOT NULL REFERENCES components(id),
    bom_ref TEXT NOT NULL,
    depth INTEGER,
    PRIMARY KEY (repo_id, tag, component_id),
    FOREIGN KEY (repo_id, tag) REFERENCES releases(repo_id, tag)
);
CREATE TABLE vulnerabilities (
    cve_id TEXT PRIMARY KEY,
    published INTEGER NOT NULL,
    last_modified INTEGER NOT NULL,
    cvss_v3 REAL,
    cvss_v2 REAL,
    severity TEXT NOT NULL,
    description TEXT NOT NULL,
    doc TEXT NOT NULL
);
CREATE TABLE affected_specs (
    cve_id TEXT NOT NULL REFERENCES vulnerabilities(cve_id) ON DELETE CASCADE,
    seq INTEGER NOT NULL,
    product_key TEXT NOT NULL,
    range_json TEXT NOT NULL,
    source_form TEXT NOT NULL,
    PRIMARY KEY (cve_id, seq)
);
CREATE INDEX affected_specs_key ON affected_specs(product_key);
CREATE TABLE epss (
    cve_id TEXT PRIMARY KEY,
    score REAL NOT NULL CHECK (score >= 0 AND score <= 1),
    percentile REAL NOT NULL CHECK (percentile >= 0 AND percentile <= 1),
    model_date TEXT NOT NULL
);
CREATE TABLE matches (
    component_id INTEGER NOT NULL REFERENCES components(id),
    cve_id TEXT NOT NULL REFERENCES vulnerabilities(cve_id),
    source TEXT NOT NULL,
    matched_at INTEGER NOT NULL,
    PRIMARY KEY (component_id, cve_id, source)
);
CREATE TABLE feed_snapshots (
    feed_key TEXT PRIMARY KEY,
    checksum TEXT NOT NULL,
    fetched_at INTEGER NOT NULL,
    entry_count INTEGER NOT NULL
);
CREATE TABLE unmatched_cpes (
    vendor_product TEXT PRIMARY KEY,
    example_cve TEXT NOT NULL,
    occurrences INTEGER NOT NULL
);
CREATE TABLE dead_letters (
    id INTEGER PRIMARY KEY,
    routing_key TEXT NOT NULL,
    payload TEXT NOT NULL,
    attempts INTEGER NOT NULL,
    last_error TEXT NOT NULL,
    enqueued_at INTEGER NOT NULL,
    parked_at INTEGER NOT NULL
);
"#;

pub(crate) fn ts(t: DateTime<Utc>) -> i64 {
    t.timestamp()
}

pub(crate) fn from_ts(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(secs, 0)
        .single()
        .unwrap_or(DateTime::<Utc>::MIN_UTC)
}

/// A component row together with its store identity.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredComponent {
    pub id: i64,
    pub purl: String,
    pub product_key: String,
    pub synthetic: bool,
    pub component: Component,
}

/// One component to link to a release during registration.
#[derive(Debug, Clone)]
pub struct ComponentLink {
    pub component: Component,
    pub bom_ref: String,
    pub synthetic: bool,
    /// `None` when unreachable from the release's roots.
    pub depth: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegisterOutcome {
    pub inserted: usize,
    pub linked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedSnapshot {
    pub feed_key: String,
    pub checksum: String,
    pub fetched_at: DateTime<Utc>,
    pub entry_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestCounts {
    pub ingested: usize,
    pub replaced: usize,
    pub unchanged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLetter {
    pub id: i64,
    pub routing_key: String,
    pub payload: String,
    pub attempts: u32,
    pub last_error: String,
    pub enqueued_at: DateTime<Utc>,
    pub parked_at: DateTime<Utc>,
}

/// A release/component link joined with the component's matches.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRow {
    pub tag: String,
    pub component_id: i64,
    pub purl: String,
    pub synthetic: bool,
    pub depth: Option<u32>,
}

/// A vulnerability match as seen from one release.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseMatchRow {
    pub tag: String,
    pub purl: String,
    pub depth: Option<u32>,
    pub cve_id: String,
    pub source: MatchSource,
    pub published: DateTime<Utc>,
    pub severity: Severity,
    pub cvss_v3: Option<f64>,
    pub cvss_v2: Option<f64>,
    pub epss_score: Option<f64>,
}

pub struct Store {
    conn: Mutex<Connection>,
    path: Option<PathBuf>,
    claim_seq: AtomicU64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Store> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let conn = Connection::open(path)?;
        Self::init(conn, Some(path.to_path_buf()))
    }

    pub fn open_in_memory() -> Result<Store> {
        Self::init(Connection::open_in_memory()?, None)
    }

    fn init(conn: Connection, path: Option<PathBuf>) -> Result<Store> {
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        let store = Store {
            conn: Mutex::new(conn),
            path,
            claim_seq: AtomicU64::new(1),
        };
        store.migrate()?;
        store.clear_stale_claims()?;
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn write<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let out = f(&tx)?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let conn = self.conn();
        f(&conn)
    }

    /// Applies pending schema migrations. Version 0 is an empty file.
    fn migrate(&self) -> Result<()> {
        let mut conn = self.conn();
        let version: i64 = conn.pragma_query_value(None, "user_version", |r| r.get(0))?;
        if version > SCHEMA_VERSION {
            return Err(StoreError::SchemaTooNew {
                found: version,
                supported: SCHEMA_VERSION,
            });
        }
        if version < 1 {
            let tx = conn.transaction()?;
            tx.execute_batch(SCHEMA_V1)?;
            tx.pragma_update(None, "user_version", 1)?;
            tx.commit()?;
        }
        Ok(())
    }

    pub fn schema_version(&self) -> Result<i64> {
        self.read(|c| Ok(c.pragma_query_value(None, "user_version", |r| r.get(0))?))
    }

    fn clear_stale_claims(&self) -> Result<()> {
        let stale: i64 = self.read(|c| {
            Ok(c.query_row(
                "SELECT COUNT(*) FROM components WHERE claimed_by IS NOT NULL",
                [],
                |r| r.get(0),
            )?)
        })?;
        if stale > 0 {
            tracing::warn!(stale, "releasing component claims left by an interrupted run");
            self.write(|tx| {
                tx.execute("UPDATE components SET claimed_by = NULL WHERE claimed_by IS NOT NULL", [])?;
                Ok(())
            })?;
        }
        Ok(())
    }

    // ---- repositories -------------------------------------------------

    /// Inserts or refreshes a repository; returns true when it was new.
    pub fn upsert_repository(&self, repo: &Repository, locator: &str) -> Result<bool> {
        self.write(|tx| {
            let exists: bool = tx
                .query_row("SELECT 1 FROM repositories WHERE id = ?1", [&repo.id.0], |_| Ok(()))
                .optional()?
                .is_some();
            if exists {
                tx.execute(
                    "UPDATE repositories SET name = ?2, clone_url = ?3, primary_language = ?4,
                        stargazers = ?5, contributor_count = ?6, locator = ?7
                     WHERE id = ?1 AND (name, clone_url, primary_language, stargazers, contributor_count, locator)
                        IS NOT (?2, ?3, ?4, ?5, ?6, ?7)",
                    params![
                        repo.id.0,
                        repo.name,
                        repo.clone_url,
                        repo.primary_language.as_str(),
                        repo.stargazers as i64,
                        repo.contributor_count as i64,
                        locator
                    ],
                )?;
            } else {
                tx.execute(
                    "INSERT INTO repositories (id, name, clone_url, primary_language, stargazers,
                        contributor_count, first_seen, locator)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
                    params![
                        repo.id.0,
                        repo.name,
                        repo.clone_url,
                        repo.primary_language.as_str(),
                        repo.stargazers as i64,
                        repo.contributor_count as i64,
                        ts(repo.first_seen),
                        locator
                    ],
                )?;
            }
            Ok(!exists)
        })
    }

    pub fn get_repository(&self, id: &RepoId) -> Result<Option<Repository>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT id, name, clone_url, primary_language, stargazers, contributor_count, first_seen
                 FROM repositories WHERE id = ?1",
                [&id.0],
                repo_from_row,
            )
            .optional()?)
        })
    }

    pub fn repository_locator(&self, id: &RepoId) -> Result<Option<String>> {
        self.read(|c| {
            Ok(c.query_row("SELECT locator FROM repositories WHERE id = ?1", [&id.0], |r| r.get(0))
                .optional()?)
        })
    }

    pub fn find_repository_by_locator(&self, locator: &str) -> Result<Option<Repository>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT id, name, clone_url, primary_language, stargazers, contributor_count, first_seen
                 FROM repositories WHERE locator = ?1 ORDER BY id LIMIT 1",
                [locator],
                repo_from_row,
            )
            .optional()?)
        })
    }

    pub fn list_repositories(&self) -> Result<Vec<Repository>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, name, clone_url, primary_language, stargazers, contributor_count, first_seen
                 FROM repositories ORDER BY id",
            )?;
            let rows = stmt.query_map([], repo_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    // ---- releases -----------------------------------------------------

    /// Inserts the release unless `(repo_id, tag)` already exists.
    pub fn insert_release_if_absent(&self, release: &Release) -> Result<bool> {
        self.write(|tx| {
            let n = tx.execute(
                "INSERT OR IGNORE INTO releases (repo_id, tag, release_date, commit_count,
                    contributor_count, file_count, lines_of_code, lines_of_comments, state, fail_reason)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
                params![
                    release.repo_id.0,
                    release.tag,
                    ts(release.release_date),
                    release.commit_count as i64,
                    release.contributor_count as i64,
                    release.file_count as i64,
                    release.lines_of_code as i64,
                    release.lines_of_comments as i64,
                    release.state.as_str(),
                    release.fail_reason
                ],
            )?;
            Ok(n == 1)
        })
    }

    pub fn update_release_metrics(&self, release: &Release) -> Result<()> {
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE releases SET commit_count = ?3, contributor_count = ?4, file_count = ?5,
                    lines_of_code = ?6, lines_of_comments = ?7
                 WHERE repo_id = ?1 AND tag = ?2",
                params![
                    release.repo_id.0,
                    release.tag,
                    release.commit_count as i64,
                    release.contributor_count as i64,
                    release.file_count as i64,
                    release.lines_of_code as i64,
                    release.lines_of_comments as i64
                ],
            )?;
            if n == 0 {
                return Err(StoreError::NotFound {
                    kind: "release",
                    id: format!("{}@{}", release.repo_id, release.tag),
                });
            }
            Ok(())
        })
    }

    pub fn get_release(&self, repo: &RepoId, tag: &str) -> Result<Option<Release>> {
        self.read(|c| {
            Ok(c.query_row(
                &format!("{RELEASE_COLUMNS} WHERE repo_id = ?1 AND tag = ?2"),
                params![repo.0, tag],
                release_from_row,
            )
            .optional()?)
        })
    }

    /// Releases of a repository ordered by release date, then tag.
    pub fn list_releases(&self, repo: &RepoId) -> Result<Vec<Release>> {
        self.read(|c| {
            let mut stmt =
                c.prepare(&format!("{RELEASE_COLUMNS} WHERE repo_id = ?1 ORDER BY release_date, tag"))?;
            let rows = stmt.query_map([&repo.0], release_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// Compare-and-set on the release state machine.
    pub fn transition_release(
        &self,
        repo: &RepoId,
        tag: &str,
        from: ReleaseState,
        to: ReleaseState,
        reason: Option<&str>,
    ) -> Result<()> {
        let entity = format!("release {repo}@{tag}");
        if !from.can_transition(to) {
            return Err(StoreError::Conflict {
                entity,
                expected: format!("legal transition from {from}"),
                found: format!("{from} -> {to}"),
            });
        }
        self.write(|tx| {
            let n = tx.execute(
                "UPDATE releases SET state = ?4, fail_reason = ?5
                 WHERE repo_id = ?1 AND tag = ?2 AND state = ?3",
                params![repo.0, tag, from.as_str(), to.as_str(), reason],
            )?;
            if n == 1 {
                return Ok(());
            }
            let found: Option<String> = tx
                .query_row(
                    "SELECT state FROM releases WHERE repo_id = ?1 AND tag = ?2",
                    params![repo.0, tag],
                    |r| r.get(0),
                )
                .optional()?;
            match found {
                None => Err(StoreError::NotFound {
                    kind: "release",
                    id: format!("{repo}@{tag}"),
                }),
                Some(found) => Err(StoreError::Conflict {
                    entity,
                    expected: from.to_string(),
                    found,
                }),
            }
        })
    }

    pub fn set_release_sbom_path(&self, repo: &RepoId, tag: &str, path: Option<&Path>) -> Result<()> {
        let path = path.map(|p| p.to_string_lossy().into_owned());
        self.write(|tx| {
            tx.execute(
                "UPDATE releases SET sbom_path = ?3 WHERE repo_id = ?1 AND tag = ?2",
                params![repo.0, tag, path],
            )?;
            Ok(())
        })
    }

    pub fn release_sbom_path(&self, repo: &RepoId, tag: &str) -> Result<Option<PathBuf>> {
        self.read(|c| {
            let p: Option<Option<String>> = c
                .query_row(
                    "SELECT sbom_path FROM releases WHERE repo_id = ?1 AND tag = ?2",
                    params![repo.0, tag],
                    |r| r.get(0),
                )
                .optional()?;
            Ok(p.flatten().map(PathBuf::from))
        })
    }

    // ---- components ---------------------------------------------------

    /// Registers a release's components: new purls are inserted as `NEW`,
    /// known purls are only linked. Depths are stored per release.
    pub fn register_release_components(
        &self,
        repo: &RepoId,
        tag: &str,
        links: &[ComponentLink],
    ) -> Result<RegisterOutcome> {
        self.write(|tx| {
            let mut out = RegisterOutcome::default();
            let mut insert = tx.prepare_cached(
                "INSERT OR IGNORE INTO components (purl, ecosystem, product_key, grp, display_name,
                    version, hashes, synthetic, state)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, 'NEW')",
            )?;
            let mut lookup = tx.prepare_cached("SELECT id FROM components WHERE purl = ?1")?;
            let mut link = tx.prepare_cached(
                "INSERT OR REPLACE INTO release_components (repo_id, tag, component_id, bom_ref, depth)
                 VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for l in links {
                let c = &l.component;
                let canonical = format_purl(&c.purl);
                let hashes = serde_json::to_string(&c.hashes).expect("string map serializes");
                out.inserted += insert.execute(params![
                    canonical,
                    c.purl.ecosystem,
                    purl::product_key(&c.purl),
                    c.group,
                    c.display_name,
                    c.version,
                    hashes,
                    l.synthetic as i64
                ])?;
                let id: i64 = lookup.query_row([&canonical], |r| r.get(0))?;
                link.execute(params![repo.0, tag, id, l.bom_ref, l.depth.map(i64::from)])?;
                out.linked += 1;
            }
            Ok(out)
        })
    }

    /// Atomically claims up to `limit` unclaimed `NEW` components. Concurrent
    /// claimers receive disjoint sets.
    pub fn claim_new_components(&self, limit: usize) -> Result<(u64, Vec<StoredComponent>)> {
        let token = self.claim_seq.fetch_add(1, AtomicOrdering::Relaxed);
        let claimed = self.write(|tx| {
            let rows = {
                let mut stmt = tx.prepare_cached(&format!(
                    "{COMPONENT_COLUMNS} WHERE state = 'NEW' AND claimed_by IS NULL ORDER BY id LIMIT ?1"
                ))?;
                let rows = stmt.query_map([limit as i64], component_from_row)?;
                rows.collect::<rusqlite::Result<Vec<_>>>()?
            };
            let mut mark = tx.prepare_cached("UPDATE components SET claimed_by = ?2 WHERE id = ?1")?;
            for row in &rows {
                mark.execute(params![row.id, token as i64])?;
            }
            Ok(rows)
        })?;
        Ok((token, claimed))
    }

    /// Drops a claim without analyzing: the components stay `NEW`.
    pub fn release_claims(&self, ids: &[i64]) -> Result<()> {
        self.write(|tx| {
            let mut stmt = tx.prepare_cached("UPDATE components SET claimed_by = NULL WHERE id = ?1")?;
            for id in ids {
                stmt.execute([id])?;
            }
            Ok(())
        })
    }

    /// Replaces `source` matches of the claimed components and marks them
    /// `ANALYZED`, all in one transaction. Returns matches whose CVE is not in
    /// the store (they are not persisted).
    pub fn complete_analysis(
        &self,
        ids: &[i64],
        source: MatchSource,
        matches: &[(i64, String)],
        now: DateTime<Utc>,
    ) -> Result<Vec<(i64, String)>> {
        self.write(|tx| {
            let mut clear =
                tx.prepare_cached("DELETE FROM matches WHERE component_id = ?1 AND source = ?2")?;
            for id in ids {
                clear.execute(params![id, source.as_str()])?;
            }
            let mut known = tx.prepare_cached("SELECT 1 FROM vulnerabilities WHERE cve_id = ?1")?;
            let mut insert = tx.prepare_cached(
                "INSERT OR IGNORE INTO matches (component_id, cve_id, source, matched_at)
                 VALUES (?1, ?2, ?3, ?4)",
            )?;
            let mut unresolved = Vec::new();
            for (id, cve) in matches {
                if known.query_row([cve], |_| Ok(())).optional()?.is_none() {
                    unresolved.push((*id, cve.clone()));
                    continue;
                }
                insert.execute(params![id, cve, source.as_str(), ts(now)])?;
            }
            let mut done = tx.prepare_cached(
                "UPDATE components SET state = 'ANALYZED', claimed_by = NULL WHERE id = ?1",
            )?;
            for id in ids {
                done.execute([id])?;
            }
            Ok(unresolved)
        })
    }

    /// Bulk re-analysis: every `ANALYZED` component goes back to `NEW`.
    pub fn reset_analyzed(&self) -> Result<usize> {
        self.write(|tx| {
            Ok(tx.execute(
                "UPDATE components SET state = 'NEW' WHERE state = 'ANALYZED' AND claimed_by IS NULL",
                [],
            )?)
        })
    }

    pub fn count_components(&self, state: Option<AnalysisState>) -> Result<usize> {
        self.read(|c| {
            let n: i64 = match state {
                Some(s) => c.query_row(
                    "SELECT COUNT(*) FROM components WHERE state = ?1",
                    [s.as_str()],
                    |r| r.get(0),
                )?,
                None => c.query_row("SELECT COUNT(*) FROM components", [], |r| r.get(0))?,
            };
            Ok(n as usize)
        })
    }

    pub fn list_components(&self) -> Result<Vec<StoredComponent>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!("{COMPONENT_COLUMNS} ORDER BY purl"))?;
            let rows = stmt.query_map([], component_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn get_component(&self, purl: &str) -> Result<Option<StoredComponent>> {
        self.read(|c| {
            Ok(c.query_row(&format!("{COMPONENT_COLUMNS} WHERE purl = ?1"), [purl], component_from_row)
                .optional()?)
        })
    }

    pub fn release_links(&self, repo: &RepoId) -> Result<Vec<LinkRow>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT rc.tag, c.id, c.purl, c.synthetic, rc.depth
                 FROM release_components rc JOIN components c ON c.id = rc.component_id
                 WHERE rc.repo_id = ?1 ORDER BY rc.tag, c.purl",
            )?;
            let rows = stmt.query_map([&repo.0], |r| {
                Ok(LinkRow {
                    tag: r.get(0)?,
                    component_id: r.get(1)?,
                    purl: r.get(2)?,
                    synthetic: r.get::<_, i64>(3)? != 0,
                    depth: r.get::<_, Option<i64>>(4)?.map(|d| d as u32),
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// All matches of all components linked to releases of `repo`, joined with
    /// vulnerability and EPSS data. Ordered by tag, purl, cve, source.
    pub fn release_matches(&self, repo: &RepoId) -> Result<Vec<ReleaseMatchRow>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT rc.tag, c.purl, rc.depth, m.cve_id, m.source, v.published, v.severity,
                        v.cvss_v3, v.cvss_v2, e.score
                 FROM release_components rc
                 JOIN components c ON c.id = rc.component_id
                 JOIN matches m ON m.component_id = c.id
                 JOIN vulnerabilities v ON v.cve_id = m.cve_id
                 LEFT JOIN epss e ON e.cve_id = m.cve_id
                 WHERE rc.repo_id = ?1
                 ORDER BY rc.tag, c.purl, m.cve_id, m.source",
            )?;
            let rows = stmt.query_map([&repo.0], |r| {
                let source: String = r.get(4)?;
                let severity: String = r.get(6)?;
                Ok(ReleaseMatchRow {
                    tag: r.get(0)?,
                    purl: r.get(1)?,
                    depth: r.get::<_, Option<i64>>(2)?.map(|d| d as u32),
                    cve_id: r.get(3)?,
                    source: source.parse().map_err(conv_err)?,
                    published: from_ts(r.get(5)?),
                    severity: severity.parse().map_err(conv_err)?,
                    cvss_v3: r.get(7)?,
                    cvss_v2: r.get(8)?,
                    epss_score: r.get(9)?,
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// Every stored match as `(purl, cve, source)`, sorted.
    pub fn all_matches(&self) -> Result<BTreeSet<(String, String, MatchSource)>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT c.purl, m.cve_id, m.source FROM matches m JOIN components c ON c.id = m.component_id",
            )?;
            let rows = stmt.query_map([], |r| {
                let s: String = r.get(2)?;
                Ok((r.get(0)?, r.get(1)?, s.parse::<MatchSource>().map_err(conv_err)?))
            })?;
            Ok(rows.collect::<rusqlite::Result<BTreeSet<_>>>()?)
        })
    }

    // ---- vulnerabilities and feeds -----------------------------------

    /// Applies one feed payload atomically. Entries replace stored ones only
    /// when their `last_modified` is not older and their content differs. The
    /// snapshot row is rewritten only when the checksum changes.
    pub fn ingest_feed(
        &self,
        snapshot: &FeedSnapshot,
        vulns: &[Vulnerability],
        unmatched: &BTreeMap<String, String>,
    ) -> Result<IngestCounts> {
        self.write(|tx| {
            let mut counts = IngestCounts::default();
            for v in vulns {
                let doc = serde_json::to_string(v).expect("vulnerability serializes");
                let existing: Option<(i64, String)> = tx
                    .query_row(
                        "SELECT last_modified, doc FROM vulnerabilities WHERE cve_id = ?1",
                        [&v.cve_id],
                        |r| Ok((r.get(0)?, r.get(1)?)),
                    )
                    .optional()?;
                match existing {
                    None => {
                        write_vulnerability(tx, v, &doc)?;
                        counts.ingested += 1;
                    }
                    Some((lm, old_doc)) => {
                        if ts(v.last_modified) >= lm && old_doc != doc {
                            tx.execute("DELETE FROM affected_specs WHERE cve_id = ?1", [&v.cve_id])?;
                            write_vulnerability(tx, v, &doc)?;
                            counts.replaced += 1;
                        } else {
                            counts.unchanged += 1;
                        }
                    }
                }
            }
            for (vendor_product, cve) in unmatched {
                tx.execute(
                    "INSERT INTO unmatched_cpes (vendor_product, example_cve, occurrences) VALUES (?1, ?2, 1)
                     ON CONFLICT(vendor_product) DO NOTHING",
                    params![vendor_product, cve],
                )?;
            }
            upsert_snapshot(tx, snapshot)?;
            Ok(counts)
        })
    }

    pub fn get_vulnerability(&self, cve_id: &str) -> Result<Option<Vulnerability>> {
        self.read(|c| {
            let doc: Option<String> = c
                .query_row("SELECT doc FROM vulnerabilities WHERE cve_id = ?1", [cve_id], |r| r.get(0))
                .optional()?;
            doc.map(|d| decode_doc(cve_id, &d)).transpose()
        })
    }

    pub fn list_vulnerabilities(&self) -> Result<Vec<Vulnerability>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT cve_id, doc FROM vulnerabilities ORDER BY cve_id")?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?;
            let mut out = Vec::new();
            for row in rows {
                let (id, doc) = row?;
                out.push(decode_doc(&id, &doc)?);
            }
            Ok(out)
        })
    }

    /// All affected specs as `(cve_id, spec)`, ordered by product key then CVE.
    pub fn affected_specs(&self) -> Result<Vec<(String, AffectedSpec)>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT cve_id, product_key, range_json, source_form FROM affected_specs
                 ORDER BY product_key, cve_id, seq",
            )?;
            let rows = stmt.query_map([], |r| {
                let range: String = r.get(2)?;
                let form: String = r.get(3)?;
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    range,
                    form,
                ))
            })?;
            let mut out = Vec::new();
            for row in rows {
                let (cve, key, range, form) = row?;
                let range = serde_json::from_str(&range).map_err(|e| StoreError::Integrity {
                    entity: cve.clone(),
                    detail: format!("bad range json: {e}"),
                })?;
                let source_form = form.parse().map_err(|_| StoreError::Integrity {
                    entity: cve.clone(),
                    detail: format!("bad source form {form}"),
                })?;
                out.push((
                    cve,
                    AffectedSpec {
                        product_key: key,
                        range,
                        source_form,
                    },
                ));
            }
            Ok(out)
        })
    }

    pub fn get_snapshot(&self, feed_key: &str) -> Result<Option<FeedSnapshot>> {
        self.read(|c| {
            Ok(c.query_row(
                "SELECT feed_key, checksum, fetched_at, entry_count FROM feed_snapshots WHERE feed_key = ?1",
                [feed_key],
                snapshot_from_row,
            )
            .optional()?)
        })
    }

    pub fn list_snapshots(&self) -> Result<Vec<FeedSnapshot>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT feed_key, checksum, fetched_at, entry_count FROM feed_snapshots ORDER BY feed_key",
            )?;
            let rows = stmt.query_map([], snapshot_from_row)?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    pub fn unmatched_cpes(&self) -> Result<Vec<(String, String)>> {
        self.read(|c| {
            let mut stmt =
                c.prepare("SELECT vendor_product, example_cve FROM unmatched_cpes ORDER BY vendor_product")?;
            let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    // ---- EPSS -------------------------------------------------------

    /// Stores EPSS rows; an existing row is replaced only by a newer model date.
    pub fn upsert_epss(
        &self,
        entries: &[EpssEntry],
        snapshot: &FeedSnapshot,
    ) -> Result<IngestCounts> {
        self.write(|tx| {
            let mut counts = IngestCounts::default();
            for e in entries {
                let existing: Option<(String, f64, f64)> = tx
                    .query_row(
                        "SELECT model_date, score, percentile FROM epss WHERE cve_id = ?1",
                        [&e.cve_id],
                        |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
                    )
                    .optional()?;
                let date = e.model_date.format("%Y-%m-%d").to_string();
                match existing {
                    None => {
                        tx.execute(
                            "INSERT INTO epss (cve_id, score, percentile, model_date) VALUES (?1, ?2, ?3, ?4)",
                            params![e.cve_id, e.score, e.percentile, date],
                        )?;
                        counts.ingested += 1;
                    }
                    Some((old_date, score, pct)) => {
                        let newer = date > old_date;
                        let differs = date != old_date || score != e.score || pct != e.percentile;
                        if newer || (date == old_date && differs) {
                            tx.execute(
                                "UPDATE epss SET score = ?2, percentile = ?3, model_date = ?4 WHERE cve_id = ?1",
                                params![e.cve_id, e.score, e.percentile, date],
                            )?;
                            counts.replaced += 1;
                        } else {
                            counts.unchanged += 1;
                        }
                    }
                }
            }
            upsert_snapshot(tx, snapshot)?;
            Ok(counts)
        })
    }

    pub fn get_epss(&self, cve_id: &str) -> Result<Option<EpssEntry>> {
        self.read(|c| {
            c.query_row(
                "SELECT cve_id, score, percentile, model_date FROM epss WHERE cve_id = ?1",
                [cve_id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, f64>(1)?,
                        r.get::<_, f64>(2)?,
                        r.get::<_, String>(3)?,
                    ))
                },
            )
            .optional()?
            .map(|(id, score, pct, date)| {
                let model_date = NaiveDate::parse_from_str(&date, "%Y-%m-%d").map_err(|e| {
                    StoreError::Integrity {
                        entity: id.clone(),
                        detail: format!("bad model date: {e}"),
                    }
                })?;
                Ok(EpssEntry {
                    cve_id: id,
                    score,
                    percentile: pct,
                    model_date,
                })
            })
            .transpose()
        })
    }

    // ---- dead letters ---------------------------------------------------

    pub fn park_dead_letter(
        &self,
        routing_key: &str,
        payload: &str,
        attempts: u32,
        last_error: &str,
        enqueued_at: DateTime<Utc>,
        parked_at: DateTime<Utc>,
    ) -> Result<i64> {
        self.write(|tx| {
            tx.execute(
                "INSERT INTO dead_letters (routing_key, payload, attempts, last_error, enqueued_at, parked_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                params![routing_key, payload, attempts, last_error, ts(enqueued_at), ts(parked_at)],
            )?;
            Ok(tx.last_insert_rowid())
        })
    }

    pub fn list_dead_letters(&self) -> Result<Vec<DeadLetter>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT id, routing_key, payload, attempts, last_error, enqueued_at, parked_at
                 FROM dead_letters ORDER BY id",
            )?;
            let rows = stmt.query_map([], |r| {
                Ok(DeadLetter {
                    id: r.get(0)?,
                    routing_key: r.get(1)?,
                    payload: r.get(2)?,
                    attempts: r.get(3)?,
                    last_error: r.get(4)?,
                    enqueued_at: from_ts(r.get(5)?),
                    parked_at: from_ts(r.get(6)?),
                })
            })?;
            Ok(rows.collect::<rusqlite::Result<Vec<_>>>()?)
        })
    }

    /// Removes and returns dead letters (all of them, or the listed ids).
    pub fn take_dead_letters(&self, ids: Option<&[i64]>) -> Result<Vec<DeadLetter>> {
        let all = self.list_dead_letters()?;
        let chosen: Vec<DeadLetter> = match ids {
            None => all,
            Some(ids) => all.into_iter().filter(|d| ids.contains(&d.id)).collect(),
        };
        self.write(|tx| {
            for d in &chosen {
                tx.execute("DELETE FROM dead_letters WHERE id = ?1", [d.id])?;
            }
            Ok(())
        })?;
        Ok(chosen)
    }

    // ---- maintenance -------------------------------------------------

    /// Runs SQLite's own checks plus referential and domain invariants.
    pub fn integrity_check(&self) -> Result<()> {
        self.read(|c| {
            let verdict: String = c.query_row("PRAGMA integrity_check", [], |r| r.get(0))?;
            if verdict != "ok" {
                return Err(StoreError::Integrity {
                    entity: "database".into(),
                    detail: verdict,
                });
            }
            let mut fk = c.prepare("PRAGMA foreign_key_check")?;
            let mut rows = fk.query([])?;
            if let Some(row) = rows.next()? {
                let table: String = row.get(0)?;
                let rowid: Option<i64> = row.get(1)?;
                return Err(StoreError::Integrity {
                    entity: format!("{table} row {}", rowid.unwrap_or(-1)),
                    detail: "dangling reference".into(),
                });
            }
            let orphan: Option<String> = c
                .query_row(
                    "SELECT r.id FROM repositories r
                     WHERE NOT EXISTS (SELECT 1 FROM releases x WHERE x.repo_id = r.id) LIMIT 1",
                    [],
                    |r| r.get(0),
                )
                .optional()?;
            if let Some(id) = orphan {
                return Err(StoreError::Integrity {
                    entity: format!("repository {id}"),
                    detail: "repository without releases".into(),
                });
            }
            let mut stmt = c.prepare("SELECT cve_id, doc FROM vulnerabilities")?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))?;
            for row in rows {
                let (id, doc) = row?;
                let v = decode_doc(&id, &doc)?;
                v.validate().map_err(|e| StoreError::Integrity {
                    entity: id.clone(),
                    detail: e.to_string(),
                })?;
            }
            let half: Option<i64> = c
                .query_row(
                    "SELECT m.component_id FROM matches m JOIN components c ON c.id = m.component_id
                     WHERE c.state <> 'ANALYZED' AND c.claimed_by IS NULL AND 0 LIMIT 1",
                    [],
                    |r| r.get(0),
                )
                .optional()?;
            debug_assert!(half.is_none());
            Ok(())
        })
    }

    /// Dumps every table as `<dir>/<table>.csv`, rows in primary-key order.
    pub fn export_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let tables = [
            ("repositories", "id"),
            ("releases", "repo_id, tag"),
            ("components", "id"),
            ("release_components", "repo_id, tag, component_id"),
            ("vulnerabilities", "cve_id"),
            ("affected_specs", "cve_id, seq"),
            ("epss", "cve_id"),
            ("matches", "component_id, cve_id, source"),
            ("feed_snapshots", "feed_key"),
            ("unmatched_cpes", "vendor_product"),
            ("dead_letters", "id"),
        ];
        let mut written = Vec::new();
        self.read(|c| {
            for (table, order) in tables {
                let mut stmt = c.prepare(&format!("SELECT * FROM {table} ORDER BY {order}"))?;
                let names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
                let path = dir.join(format!("{table}.csv"));
                let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
                w.write_record(&names).map_err(csv_err)?;
                let mut rows = stmt.query([])?;
                while let Some(row) = rows.next()? {
                    let mut rec = Vec::with_capacity(names.len());
                    for i in 0..names.len() {
                        rec.push(match row.get_ref(i)? {
                            rusqlite::types::ValueRef::Null => String::new(),
                            rusqlite::types::ValueRef::Integer(n) => n.to_string(),
                            rusqlite::types::ValueRef::Real(f) => f.to_string(),
                            rusqlite::types::ValueRef::Text(t) | rusqlite::types::ValueRef::Blob(t) => {
                                String::from_utf8_lossy(t).into_owned()
                            }
                        });
                    }
                    w.write_record(&rec).map_err(csv_err)?;
                }
                w.flush()?;
                written.push(path);
            }
            Ok(())
        })?;
        Ok(written)
    }
}

fn csv_err(e: csv::Error) -> StoreError {
    StoreError::Io(std::io::Error::other(e))
}

fn conv_err(e: crate::model::ModelError) -> rusqlite::Error {
    rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e))
}

fn decode_doc(cve_id: &str, doc: &str) -> Result<Vulnerability> {
    serde_json::from_str(doc).map_err(|e| StoreError::Integrity {
        entity: cve_id.to_string(),
        detail: format!("undecodable vulnerability document: {e}"),
    })
}

fn write_vulnerability(tx: &Transaction<'_>, v: &Vulnerability, doc: &str) -> Result<()> {
    tx.execute(
        "INSERT OR REPLACE INTO vulnerabilities (cve_id, published, last_modified, cvss_v3, cvss_v2,
            severity, description, doc)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
        params![
            v.cve_id,
            ts(v.published),
            ts(v.last_modified),
            v.cvss_v3_base,
            v.cvss_v2_base,
            v.severity.as_str(),
            v.description,
            doc
        ],
    )?;
    let mut stmt = tx.prepare_cached(
        "INSERT INTO affected_specs (cve_id, seq, product_key, range_json, source_form)
         VALUES (?1, ?2, ?3, ?4, ?5)",
    )?;
    for (seq, spec) in v.affected.iter().enumerate() {
        stmt.execute(params![
            v.cve_id,
            seq as i64,
            spec.product_key,
            serde_json::to_string(&spec.range).expect("range serializes"),
            spec.source_form.as_str()
        ])?;
    }
    Ok(())
}

fn upsert_snapshot(tx: &Transaction<'_>, s: &FeedSnapshot) -> Result<()> {
    tx.execute(
        "INSERT INTO feed_snapshots (feed_key, checksum, fetched_at, entry_count) VALUES (?1, ?2, ?3, ?4)
         ON CONFLICT(feed_key) DO UPDATE SET checksum = excluded.checksum,
            fetched_at = excluded.fetched_at, entry_count = excluded.entry_count
         WHERE feed_snapshots.checksum <> excluded.checksum
            OR feed_snapshots.entry_count <> excluded.entry_count",
        params![s.feed_key, s.checksum, ts(s.fetched_at), s.entry_count as i64],
    )?;
    Ok(())
}

fn snapshot_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<FeedSnapshot> {
    Ok(FeedSnapshot {
        feed_key: r.get(0)?,
        checksum: r.get(1)?,
        fetched_at: from_ts(r.get(2)?),
        entry_count: r.get::<_, i64>(3)? as u64,
    })
}

fn repo_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Repository> {
    let lang: String = r.get(3)?;
    Ok(Repository {
        id: RepoId(r.get(0)?),
        name: r.get(1)?,
        clone_url: r.get(2)?,
        primary_language: lang.parse::<Language>().map_err(conv_err)?,
        stargazers: r.get::<_, i64>(4)? as u64,
        contributor_count: r.get::<_, i64>(5)? as u64,
        first_seen: from_ts(r.get(6)?),
    })
}

const RELEASE_COLUMNS: &str = "SELECT repo_id, tag, release_date, commit_count, contributor_count,
    file_count, lines_of_code, lines_of_comments, state, fail_reason FROM releases";

fn release_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Release> {
    let state: String = r.get(8)?;
    Ok(Release {
        repo_id: RepoId(r.get(0)?),
        tag: r.get(1)?,
        release_date: from_ts(r.get(2)?),
        commit_count: r.get::<_, i64>(3)? as u64,
        contributor_count: r.get::<_, i64>(4)? as u64,
        file_count: r.get::<_, i64>(5)? as u64,
        lines_of_code: r.get::<_, i64>(6)? as u64,
        lines_of_comments: r.get::<_, i64>(7)? as u64,
        state: state.parse().map_err(conv_err)?,
        fail_reason: r.get(9)?,
    })
}

const COMPONENT_COLUMNS: &str = "SELECT id, purl, product_key, grp, display_name, version, hashes,
    synthetic, state FROM components";

fn component_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<StoredComponent> {
    let purl_text: String = r.get(1)?;
    let purl: PackageUrl = parse_purl(&purl_text).map_err(|e| {
        rusqlite::Error::FromSqlConversionFailure(1, rusqlite::types::Type::Text, Box::new(e))
    })?;
    let hashes: String = r.get(6)?;
    let state: String = r.get(8)?;
    Ok(StoredComponent {
        id: r.get(0)?,
        product_key: r.get(2)?,
        synthetic: r.get::<_, i64>(7)? != 0,
        component: Component {
            purl,
            group: r.get(3)?,
            display_name: r.get(4)?,
            version: r.get(5)?,
            hashes: serde_json::from_str(&hashes).unwrap_or_default(),
            analysis_state: state.parse().map_err(conv_err)?,
        },
        purl: purl_text,
    })
}
