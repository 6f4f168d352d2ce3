//! Repository mining in two stages. Stage 1 records the repository and one
//! release per tag; stage 2 checks each tag out into its own worktree and
//! measures it.
//!
//! Repositories are mirrored as bare clones under a clones directory, so the
//! source repository is never modified and re-runs only fetch.

pub mod lines;
pub mod remote;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::genmachine::sanitize_tag;
use crate::model::{Language, Release, ReleaseState, RepoId, Repository};
use crate::store::{Store, StoreError};
pub use lines::{classify, LineCounts};
pub use remote::{RemoteClient, RemoteRepo};

#[derive(Debug, Error)]
pub enum MineError {
    #[error("REJECTED_NO_RELEASES: {locator} has no tags")]
    NoReleases { locator: String },
    #[error("rate limit exhausted; retry after {reset}")]
    RateLimited { reset: DateTime<Utc> },
    #[error("git {args}: {message}")]
    Git { args: String, message: String },
    #[error("remote {url}: {message}")]
    Remote { url: String, message: String },
    #[error("CHECKOUT: {tag}: {message}")]
    Checkout { tag: String, message: String },
    #[error("NOT_ENOUGH_RELEASES: need at least 2, have {found}")]
    NotEnoughReleases { found: usize },
    #[error("bad locator {0:?}")]
    BadLocator(String),
    #[error("no remote client configured for {0}")]
    NoRemoteClient(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MineError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, MineError::RateLimited { .. } | MineError::Remote { .. })
    }
}

pub(crate) fn git(dir: &Path, args: &[&str]) -> Result<String, MineError> {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()
        .map_err(|e| MineError::Git {
            args: args.join(" "),
            message: e.to_string(),
        })?;
    if !out.status.success() {
        return Err(MineError::Git {
            args: args.join(" "),
            message: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// A tag as found in the mirror.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagInfo {
    pub name: String,
    pub commit_date: DateTime<Utc>,
}

pub fn list_tags(mirror: &Path) -> Result<Vec<TagInfo>, MineError> {
    let fmt = "--format=%(refname:strip=2)%09%(objecttype)%09%(committerdate:iso-strict)%09%(*objecttype)%09%(*committerdate:iso-strict)";
    let out = git(mirror, &["for-each-ref", "refs/tags", fmt])?;
    let mut tags = Vec::new();
    for line in out.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        let [name, kind, date, peeled_kind, peeled_date] = f[..] else {
            continue;
        };
        let date = match (kind, peeled_kind) {
            ("commit", _) => date,
            ("tag", "commit") => peeled_date,
            _ => continue,
        };
        let Ok(d) = DateTime::parse_from_rfc3339(date) else {
            continue;
        };
        tags.push(TagInfo {
            name: name.to_string(),
            commit_date: d.with_timezone(&Utc),
        });
    }
    Ok(tags)
}

fn language_of(path: &str) -> Option<Language> {
    let ext = path.rsplit_once('.')?.1.to_ascii_lowercase();
    Some(match ext.as_str() {
        "java" => Language::Java,
        "go" => Language::Go,
        "rs" => Language::Rust,
        "rb" => Language::Ruby,
        "py" => Language::Python,
        "php" => Language::Php,
        "js" | "mjs" | "cjs" | "jsx" | "ts" => Language::JavaScript,
        _ => return None,
    })
}

/// Tracked blobs at `rev`: (mode, path).
fn tracked_files(mirror: &Path, rev: &str) -> Result<Vec<(String, String)>, MineError> {
    let out = git(mirror, &["ls-tree", "-r", "-z", rev])?;
    Ok(out
        .split('\0')
        .filter_map(|entry| {
            let (meta, path) = entry.split_once('\t')?;
            let mut m = meta.split(' ');
            let mode = m.next()?;
            (m.next()? == "blob").then(|| (mode.to_string(), path.to_string()))
        })
        .collect())
}

/// Most common of the recognized languages among tracked files.
pub fn detect_language(mirror: &Path, rev: &str) -> Result<Language, MineError> {
    let mut counts = [0usize; 8];
    for (_, path) in tracked_files(mirror, rev)? {
        if let Some(l) = language_of(&path) {
            counts[Language::ALL.iter().position(|x| *x == l).expect("listed")] += 1;
        }
    }
    let best = counts
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
    Ok(best.map(|(i, _)| Language::ALL[i]).unwrap_or(Language::Other))
}

fn authors(mirror: &Path, revs: &[&str]) -> Result<BTreeSet<String>, MineError> {
    let mut args = vec!["log", "--format=%ae"];
    args.extend_from_slice(revs);
    args.push("--");
    Ok(git(mirror, &args)?
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    pub repository: Repository,
    pub new_repository: bool,
    pub tags_found: usize,
    /// Tags that became new releases on this run.
    pub inserted: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReleaseMetrics {
    pub commit_count: u64,
    pub contributor_count: u64,
    pub file_count: u64,
    pub lines: LineCounts,
}

pub struct Miner {
    pub clones_dir: PathBuf,
    pub worktrees_dir: PathBuf,
    pub remote: Option<RemoteClient>,
}

// `git worktree add/remove` on one mirror must not interleave.
static WORKTREE_LOCK: Mutex<()> = Mutex::new(());

/// A detached checkout of one tag; removed on drop.
pub struct Worktree {
    mirror: PathBuf,
    pub path: PathBuf,
}

impl Drop for Worktree {
    fn drop(&mut self) {
        let _g = WORKTREE_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path.to_string_lossy().into_owned();
        if git(&self.mirror, &["worktree", "remove", "--force", &path]).is_err() {
            let _ = fs::remove_dir_all(&self.path);
            let _ = git(&self.mirror, &["worktree", "prune"]);
        }
    }
}

fn hash8(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))[..8].to_string()
}

impl Miner {
    pub fn new(clones_dir: impl Into<PathBuf>, worktrees_dir: impl Into<PathBuf>) -> Self {
        Miner {
            clones_dir: clones_dir.into(),
            worktrees_dir: worktrees_dir.into(),
            remote: None,
        }
    }

    pub fn mirror_path(&self, repo: &RepoId) -> PathBuf {
        self.clones_dir.join(format!("{}.git", sanitize_tag(&repo.0)))
    }

    /// Locators are `github:owner/name`, a git URL, or a local path.
    fn resolve(&self, locator: &str, now: DateTime<Utc>) -> Result<(RepoId, String, String, Option<RemoteRepo>), MineError> {
        if let Some(rest) = locator.strip_prefix("github:") {
            let (owner, name) = rest.split_once('/').ok_or_else(|| MineError::BadLocator(locator.into()))?;
            let client = self.remote.as_ref().ok_or_else(|| MineError::NoRemoteClient(locator.into()))?;
            let info = client.repository(owner, name, now)?;
            return Ok((RepoId(format!("github-{}", info.id)), info.name.clone(), info.clone_url.clone(), Some(info)));
        }
        let url = match fs::canonicalize(locator) {
            Ok(p) => p.to_string_lossy().into_owned(),
            Err(_) if locator.contains("://") || locator.contains('@') => locator.to_string(),
            Err(e) => {
                return Err(MineError::Io {
                    path: locator.into(),
                    source: e,
                })
            }
        };
        let name = url
            .trim_end_matches('/')
            .rsplit(['/', ':'])
            .next()
            .unwrap_or("repo")
            .trim_end_matches(".git")
            .to_string();
        if name.is_empty() {
            return Err(MineError::BadLocator(locator.into()));
        }
        let id = RepoId(format!("{}-{}", sanitize_tag(&name), hash8(&url)));
        Ok((id, name, url, None))
    }

    fn sync_mirror(&self, mirror: &Path, url: &str) -> Result<(), MineError> {
        if mirror.join("HEAD").is_file() {
            git(
                mirror,
                &["fetch", "-q", "--prune", "--force", url, "+refs/heads/*:refs/heads/*", "+refs/tags/*:refs/tags/*"],
            )?;
        } else {
            fs::create_dir_all(&self.clones_dir).map_err(|e| MineError::Io {
                path: self.clones_dir.clone(),
                source: e,
            })?;
            let target = mirror.to_string_lossy().into_owned();
            git(&self.clones_dir, &["clone", "-q", "--bare", url, &target])?;
        }
        Ok(())
    }

    /// Stage 1: mirror, list tags, upsert the repository and insert releases
    /// for tags not seen before. Tagless repositories are rejected.
    pub fn stage1_collect(&self, store: &Store, locator: &str, clock: &dyn Clock) -> Result<Stage1Report, MineError> {
        let now = clock.now();
        let (id, name, url, remote) = self.resolve(locator, now)?;
        let existing = store.get_repository(&id)?;
        let mirror = self.mirror_path(&id);
        let fresh_mirror = !mirror.exists();
        self.sync_mirror(&mirror, &url)?;
        let mut tags = list_tags(&mirror)?;
        if tags.is_empty() {
            if fresh_mirror {
                let _ = fs::remove_dir_all(&mirror);
            }
            return Err(MineError::NoReleases { locator: locator.into() });
        }
        tags.sort_by(|a, b| a.commit_date.cmp(&b.commit_date).then(a.name.cmp(&b.name)));
        let newest = format!("{}^{{commit}}", tags.last().expect("non-empty").name);
        let primary_language = match remote.as_ref().and_then(|r| r.language.as_deref()) {
            Some(l) => l.parse().unwrap_or(Language::Other),
            None => detect_language(&mirror, &newest)?,
        };
        let tag_revs: Vec<String> = tags.iter().map(|t| format!("refs/tags/{}", t.name)).collect();
        let revs: Vec<&str> = tag_revs.iter().map(String::as_str).collect();
        let repo = Repository {
            id: id.clone(),
            name: remote.as_ref().map(|r| r.full_name.clone()).filter(|s| !s.is_empty()).unwrap_or(name),
            clone_url: url,
            primary_language,
            stargazers: remote.as_ref().map(|r| r.stargazers_count).unwrap_or(0),
            contributor_count: authors(&mirror, &revs)?.len() as u64,
            first_seen: existing.as_ref().map(|r| r.first_seen).unwrap_or(now),
        };
        let new_repository = store.upsert_repository(&repo, locator)?;
        let mut inserted = Vec::new();
        for t in &tags {
            if store.insert_release_if_absent(&Release::new(id.clone(), &t.name, t.commit_date))? {
                inserted.push(t.name.clone());
            }
        }
        tracing::info!(repo = %id, tags = tags.len(), inserted = inserted.len(), "stage 1");
        Ok(Stage1Report {
            repository: repo,
            new_repository,
            tags_found: tags.len(),
            inserted,
        })
    }

    /// Checks `tag` out into a fresh worktree of its own.
    pub fn checkout(&self, repo: &RepoId, tag: &str) -> Result<Worktree, MineError> {
        let mirror = self.mirror_path(repo);
        let path = self.worktrees_dir.join(sanitize_tag(&repo.0)).join(sanitize_tag(tag));
        let fail = |message: String| MineError::Checkout {
            tag: tag.to_string(),
            message,
        };
        let _g = WORKTREE_LOCK.lock().unwrap_or_else(|p| p.into_inner());
        if path.exists() {
            fs::remove_dir_all(&path).map_err(|e| fail(e.to_string()))?;
        }
        let _ = git(&mirror, &["worktree", "prune"]);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| fail(e.to_string()))?;
        }
        let rev = format!("refs/tags/{tag}^{{commit}}");
        git(&mirror, &["worktree", "add", "-q", "--detach", "--force", &path.to_string_lossy(), &rev])
            .map_err(|e| fail(e.to_string()))?;
        Ok(Worktree { mirror, path })
    }

    /// Metrics of the tagged tree. Line counts read the checked-out files.
    pub fn measure(&self, repo: &RepoId, tag: &str, worktree: &Path) -> Result<ReleaseMetrics, MineError> {
        let mirror = self.mirror_path(repo);
        let rev = format!("refs/tags/{tag}^{{commit}}");
        let commit_count = git(&mirror, &["rev-list", "--count", &rev])?.trim().parse().unwrap_or(0);
        let contributor_count = authors(&mirror, &[&rev])?.len() as u64;
        let files = tracked_files(&mirror, &rev)?;
        let mut lines = LineCounts::default();
        for (mode, rel) in &files {
            if mode == "120000" {
                continue;
            }
            let p = worktree.join(rel);
            let bytes = fs::read(&p).map_err(|e| MineError::Io { path: p, source: e })?;
            if lines::is_binary(&bytes) {
                continue;
            }
            lines += classify(rel, &String::from_utf8_lossy(&bytes));
        }
        Ok(ReleaseMetrics {
            commit_count,
            contributor_count,
            file_count: files.len() as u64,
            lines,
        })
    }

    /// Stage 2 for one release: checkout, measure, persist. The worktree is
    /// handed back so SBOM generation can run on the same checkout. A failed
    /// checkout moves the release to FAIL.
    pub fn stage2_enrich(&self, store: &Store, repo: &RepoId, tag: &str) -> Result<(Release, Worktree), MineError> {
        let mut release = store.get_release(repo, tag)?.ok_or_else(|| StoreError::NotFound {
            kind: "release",
            id: format!("{repo}@{tag}"),
        })?;
        let wt = match self.checkout(repo, tag) {
            Ok(wt) => wt,
            Err(e) => {
                if release.state == ReleaseState::New {
                    store.transition_release(repo, tag, ReleaseState::New, ReleaseState::Fail, Some(&e.to_string()))?;
                }
                return Err(e);
            }
        };
        let m = self.measure(repo, tag, &wt.path)?;
        release.commit_count = m.commit_count;
        release.contributor_count = m.contributor_count;
        release.file_count = m.file_count;
        release.lines_of_code = m.lines.code;
        release.lines_of_comments = m.lines.comments;
        store.update_release_metrics(&release)?;
        Ok((release, wt))
    }

    /// Consecutive releases (by date) whose tagged commits are in the opposite
    /// ancestry order. Reported, not fatal.
    pub fn ordering_disagreements(&self, repo: &RepoId, releases: &[Release]) -> Result<Vec<(String, String)>, MineError> {
        let mirror = self.mirror_path(repo);
        let mut sorted: Vec<&Release> = releases.iter().collect();
        sorted.sort_by(|a, b| a.release_date.cmp(&b.release_date).then(a.tag.cmp(&b.tag)));
        let commit = |t: &str| git(&mirror, &["rev-parse", &format!("refs/tags/{t}^{{commit}}")]).map(|s| s.trim().to_string());
        let mut out = Vec::new();
        for w in sorted.windows(2) {
            let (a, b) = (commit(&w[0].tag)?, commit(&w[1].tag)?);
            if a == b {
                continue;
            }
            let later_is_ancestor = Command::new("git")
                .arg("-C")
                .arg(&mirror)
                .args(["merge-base", "--is-ancestor", &b, &a])
                .status()
                .map(|s| s.success())
                .unwrap_or(false);
            if later_is_ancestor {
                out.push((w[0].tag.clone(), w[1].tag.clone()));
            }
        }
        Ok(out)
    }

    /// Stage 1 then stage 2 on every release still NEW.
    pub fn mine(&self, store: &Store, locator: &str, clock: &dyn Clock) -> Result<MiningReport, MineError> {
        let s1 = self.stage1_collect(store, locator, clock)?;
        let id = s1.repository.id.clone();
        let mut report = MiningReport {
            repo_id: id.clone(),
            found: s1.tags_found,
            enriched: 0,
            failed: Vec::new(),
        };
        for r in store.list_releases(&id)? {
            if r.state != ReleaseState::New {
                continue;
            }
            match self.stage2_enrich(store, &id, &r.tag) {
                Ok(_) => report.enriched += 1,
                Err(e) => report.failed.push((r.tag.clone(), e.to_string())),
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningReport {
    pub repo_id: RepoId,
    pub found: usize,
    pub enriched: usize,
    pub failed: Vec<(String, String)>,
}

impl fmt::Display for MiningReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "repo={} releases_found={} enriched={} failed={}",
            self.repo_id,
            self.found,
            self.enriched,
            self.failed.len()
        )
    }
}

/// Mean days between consecutive releases and mean commit delta per
/// release, ordering by release date.
pub fn release_cycle_stats(releases: &[Release]) -> Result<(f64, f64), MineError> {
    if releases.len() < 2 {
        return Err(MineError::NotEnoughReleases { found: releases.len() });
    }
    let mut sorted: Vec<&Release> = releases.iter().collect();
    sorted.sort_by(|a, b| a.release_date.cmp(&b.release_date).then(a.tag.cmp(&b.tag)));
    let gaps = (sorted.len() - 1) as f64;
    let days: f64 = sorted
        .windows(2)
        .map(|w| (w[1].release_date - w[0].release_date).num_seconds() as f64 / 86_400.0)
        .sum();
    let commits: f64 = sorted
        .windows(2)
        .map(|w| w[1].commit_count as f64 - w[0].commit_count as f64)
        .sum();
    Ok((days / gaps, commits / gaps))
}
