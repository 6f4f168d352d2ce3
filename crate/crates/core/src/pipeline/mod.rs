//! Orchestration: wires mining, SBOM generation, registration and analysis
//! to the broker's routing keys, and drives scans and daemon ticks.

pub mod broker;
pub mod config;
pub mod daemon;
pub mod reports;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Datelike;
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::Clock;
use crate::feeds::{sync_epss, sync_nvd, AliasTable, EpssReport, FeedError, FeedSource, FeedStatus, SyncReport};
use crate::genmachine::{build_machine, run_release, Ecosystem, GenConfig, GenContext, Outcome};
use crate::matcher::{analyze_batch, register_components, RemoteIndex, RemoteIndexConfig, Source, TtlCache};
use crate::model::{AnalysisState, Language, ReleaseState, RepoId};
use crate::ratelimit::{RealTicker, TokenBucket};
use crate::repominer::{MineError, Miner, RemoteClient, Stage1Report};
use crate::sbom::parse_sbom;
use crate::store::{DeadLetter, Store, StoreError};

pub use broker::{Broker, DispatchError, Handler, TaskEnvelope, TaskFailure, TaskStatus, Ticket};
pub use config::{Config, ConfigError, MatchMode};
pub use daemon::{LastTick, LivenessServer, TickOutcome, TickState};
pub use reports::{write_report, ReportError, ReportFiles, ReportKind, Scope};

pub const MINE: &str = "repo.mine";
pub const GENERATE: &str = "sbom.generate";
pub const ANALYZE: &str = "components.analyze";
pub const FEEDS: &str = "feeds.sync";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mine(#[from] MineError),
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no feed source configured (set feeds.nvd or feeds.epss)")]
    NoFeedSource,
    #[error("{key} task failed: {error}")]
    TaskFailed { key: &'static str, error: String },
    #[error("repository for {0:?} not found after mining")]
    MissingRepository(String),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Which generator a repository's releases go through.
pub fn ecosystem_for(language: Language) -> Ecosystem {
    match language {
        Language::Go => Ecosystem::Go,
        Language::Rust => Ecosystem::Cargo,
        other => Ecosystem::External(other.as_str().to_ascii_lowercase()),
    }
}

#[derive(Debug, Clone, Default)]
pub struct FeedsSummary {
    pub nvd: Option<SyncReport>,
    pub epss: Option<EpssReport>,
    /// Components moved back to `NEW` because the vulnerability data changed.
    pub reset: usize,
}

impl fmt::Display for FeedsSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(n) = &self.nvd {
            for r in &n.feeds {
                writeln!(f, "{r}")?;
            }
            writeln!(f, "unmatched_cpes={}", n.unmatched_cpes)?;
        }
        if let Some(e) = &self.epss {
            writeln!(f, "{e}")?;
        }
        write!(f, "components_reset={}", self.reset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerateResult {
    /// Release was not `NEW`.
    Skipped,
    Done { components: usize },
    Failed { reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanSummary {
    pub repo_id: String,
    pub tags_found: usize,
    pub done: usize,
    pub failed: Vec<(String, String)>,
    /// Releases still `NEW` (their generation task was dead-lettered).
    pub pending: Vec<String>,
    pub dead_letters: usize,
    pub components_new: usize,
    pub components_analyzed: usize,
    pub matches: usize,
    pub reports: Vec<PathBuf>,
}

impl ScanSummary {
    /// 0 when every release reached `DONE` and no task was dead-lettered,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() && self.pending.is_empty() && self.dead_letters == 0 {
            0
        } else {
            1
        }
    }
}

impl fmt::Display for ScanSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "repo={} releases={} done={} failed={} pending={} dead_letters={}",
            self.repo_id,
            self.tags_found,
            self.done,
            self.failed.len(),
            self.pending.len(),
            self.dead_letters
        )?;
        for (tag, reason) in &self.failed {
            writeln!(f, "  FAIL {tag}: {reason}")?;
        }
        write!(
            f,
            "components analyzed={} new={} matches={}",
            self.components_analyzed, self.components_new, self.matches
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScanOptions {
    /// Move `FAIL` releases back to `NEW` before generating.
    pub retry_failed: bool,
}

pub struct Pipeline {
    pub config: Config,
    pub store: Arc<Store>,
    pub clock: Arc<dyn Clock>,
    miner: Miner,
    gen: GenConfig,
    source: Source,
    aliases: AliasTable,
}

fn mkdir(p: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| PipelineError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

impl Pipeline {
    pub fn open(config: Config, clock: Arc<dyn Clock>) -> Result<Arc<Pipeline>> {
        let store_path = config.store_path();
        if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        let store = Arc::new(Store::open(&store_path)?);

        let mut miner = Miner::new(config.clones_dir(), config.worktrees_dir());
        let gh_bucket = Arc::new(TokenBucket::per_minute(config.github.rate_per_minute, 1));
        miner.remote = Some(RemoteClient::new(&config.github.api, config.github.token.clone(), gh_bucket));

        let mut gen = GenConfig::new(config.shared_sbom_dir());
        gen.timeout = config.sbom_timeout();
        gen.use_go_tool = config.sbom.use_go_tool;
        gen.adapters = config.sbom.adapters.clone();

        let source = match config.matcher.mode {
            MatchMode::Offline => Source::Offline,
            MatchMode::Remote => {
                let m = &config.matcher;
                let mut rc = RemoteIndexConfig::new(m.remote_url.clone().unwrap_or_default());
                rc.credentials = m.credentials.clone();
                rc.max_retries = m.max_retries;
                rc.timeout = Duration::from_secs(m.timeout_secs);
                let ttl = (m.cache_ttl_hours > 0).then(|| chrono::Duration::hours(m.cache_ttl_hours as i64));
                let bucket = Arc::new(TokenBucket::per_minute(m.rate_per_minute, m.burst.max(1)));
                let cache = TtlCache::new(ttl, Arc::clone(&clock));
                Source::Remote(Arc::new(RemoteIndex::new(rc, bucket, Arc::new(RealTicker::new()), cache)))
            }
        };

        let mut aliases = AliasTable::builtin();
        if let Some(p) = &config.feeds.aliases {
            aliases.extend_from_file(p)?;
        }
        Ok(Arc::new(Pipeline {
            config,
            store,
            clock,
            miner,
            gen,
            source,
            aliases,
        }))
    }

    /// Mirrors the configured NVD and EPSS feeds. In offline mode, a change
    /// in the NVD data sends every analyzed component back for re-analysis.
    pub fn sync_feeds(&self) -> Result<FeedsSummary> {
        let f = &self.config.feeds;
        if f.nvd.is_none() && f.epss.is_none() {
            return Err(PipelineError::NoFeedSource);
        }
        let mut summary = FeedsSummary::default();
        if let Some(nvd) = &f.nvd {
            let last = f.last_year.unwrap_or_else(|| self.clock.now().year());
            let report = sync_nvd(
                &self.store,
                &FeedSource::from_locator(nvd),
                f.first_year..=last,
                &self.aliases,
                self.clock.as_ref(),
            )?;
            let changed = report
                .feeds
                .iter()
                .any(|r| r.status == FeedStatus::Ingested && r.ingested + r.replaced > 0);
            if changed && self.config.matcher.mode == MatchMode::Offline {
                summary.reset = self.store.reset_analyzed()?;
            }
            summary.nvd = Some(report);
        }
        if let Some(epss) = &f.epss {
            summary.epss = Some(sync_epss(&self.store, epss, self.clock.as_ref())?);
        }
        Ok(summary)
    }

    /// Stage 1 only: mirror the repository and record its releases.
    pub fn add_repo(&self, locator: &str) -> Result<Stage1Report> {
        Ok(self.miner.stage1_collect(&self.store, locator, self.clock.as_ref())?)
    }

    /// Checkout, measure, generate, register: one release end to end. SBOM
    /// failures are recorded on the release, not returned as errors.
    pub fn generate_release(&self, repo: &RepoId, tag: &str) -> Result<GenerateResult> {
        let Some(release) = self.store.get_release(repo, tag)? else {
            return Err(StoreError::NotFound {
                kind: "release",
                id: format!("{repo}@{tag}"),
            }
            .into());
        };
        if release.state != ReleaseState::New {
            return Ok(GenerateResult::Skipped);
        }
        let repository = self.store.get_repository(repo)?.ok_or_else(|| StoreError::NotFound {
            kind: "repository",
            id: repo.0.clone(),
        })?;
        let (_, worktree) = match self.miner.stage2_enrich(&self.store, repo, tag) {
            Ok(x) => x,
            Err(e @ MineError::Checkout { .. }) => return Ok(GenerateResult::Failed { reason: e.to_string() }),
            Err(e) => return Err(e.into()),
        };
        let mut ctx = GenContext::new(
            repo.clone(),
            &worktree.path,
            tag,
            ecosystem_for(repository.primary_language),
        );
        let mut machine = build_machine(&ctx, &self.gen);
        let outcome = run_release(&mut machine, &mut ctx, &self.gen);
        drop(worktree);
        match outcome {
            Outcome::Done => {
                let path = ctx.sbom_output.clone().expect("DONE implies an output path");
                let bytes = std::fs::read(&path).map_err(|e| PipelineError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                let sbom = match parse_sbom(&bytes) {
                    Ok(s) => s,
                    Err(e) => {
                        let reason = format!("INVALID_BOM: {e}");
                        self.store
                            .transition_release(repo, tag, ReleaseState::New, ReleaseState::Fail, Some(&reason))?;
                        return Ok(GenerateResult::Failed { reason });
                    }
                };
                register_components(&self.store, repo, tag, &sbom)?;
                self.store.set_release_sbom_path(repo, tag, Some(&path))?;
                self.store
                    .transition_release(repo, tag, ReleaseState::New, ReleaseState::Done, None)?;
                Ok(GenerateResult::Done {
                    components: sbom.components.len(),
                })
            }
            other => {
                let reason = other.reason_text().unwrap_or_else(|| "GENERATOR_ERROR".into());
                tracing::warn!(repo = %repo, tag, %reason, "release failed");
                self.store
                    .transition_release(repo, tag, ReleaseState::New, ReleaseState::Fail, Some(&reason))?;
                Ok(GenerateResult::Failed { reason })
            }
        }
    }

    /// Claims and analyzes batches until no `NEW` component is left. Safe to
    /// run from several workers at once: claims are exclusive.
    pub fn analyze_until_empty(&self) -> Result<usize, String> {
        let m = &self.config.matcher;
        let mut analyzed = 0;
        loop {
            let r = analyze_batch(&self.store, &self.source, m.batch, m.chunk, self.clock.as_ref())
                .map_err(|e| e.to_string())?;
            analyzed += r.analyzed;
            if !r.errors.is_empty() {
                return Err(r.errors.join("; "));
            }
            if r.claimed == 0 {
                return Ok(analyzed);
            }
        }
    }

    /// A broker with one worker pool per routing key, sized from config.
    pub fn start_broker(self: &Arc<Self>) -> Broker {
        let b = Broker::new(self.config.max_retries, Some(Arc::clone(&self.store)), Arc::clone(&self.clock));
        let w = &self.config.workers;

        let p = Arc::clone(self);
        b.subscribe_pool(
            MINE,
            w.repo_mine,
            Arc::new(move |t| {
                let locator = str_field(&t.payload, "locator")?;
                match p.add_repo(&locator) {
                    Ok(_) => Ok(()),
                    Err(PipelineError::Mine(e)) if !e.is_retryable() => Err(TaskFailure::permanent(e.to_string())),
                    Err(e) => Err(e.to_string().into()),
                }
            }),
        );

        let p = Arc::clone(self);
        b.subscribe_pool(
            GENERATE,
            w.sbom_generate,
            Arc::new(move |t| {
                let repo = RepoId(str_field(&t.payload, "repo")?);
                let tag = str_field(&t.payload, "tag")?;
                p.generate_release(&repo, &tag).map(|_| ()).map_err(|e| e.to_string().into())
            }),
        );

        let p = Arc::clone(self);
        b.subscribe_pool(
            ANALYZE,
            w.components_analyze,
            Arc::new(move |_| p.analyze_until_empty().map(|_| ()).map_err(TaskFailure::from)),
        );

        let p = Arc::clone(self);
        b.subscribe_pool(
            FEEDS,
            w.feeds_sync,
            Arc::new(move |_| {
                let summary = p.sync_feeds().map_err(|e| match e {
                    PipelineError::NoFeedSource => TaskFailure::permanent(e.to_string()),
                    PipelineError::Feed(f) if !f.is_retryable() => TaskFailure::permanent(f.to_string()),
                    other => TaskFailure::from(other.to_string()),
                })?;
                tracing::info!("{summary}");
                if p.config.matcher.mode == MatchMode::Remote {
                    // the remote index changes on its own schedule
                    p.store.reset_analyzed().map_err(|e| e.to_string())?;
                }
                Ok(())
            }),
        );
        b
    }

    /// mine → generate every `NEW` release → register → analyze.
    pub fn scan(self: &Arc<Self>, broker: &Broker, locator: &str, opts: ScanOptions) -> Result<ScanSummary> {
        let started = Instant::now();
        let mut dead = 0;
        if let Some(TaskStatus::DeadLettered { error, .. }) =
            broker.dispatch(MINE, json!({ "locator": locator }))?.wait().into_iter().next()
        {
            return Err(PipelineError::TaskFailed { key: MINE, error });
        }
        let repo = self
            .store
            .find_repository_by_locator(locator)?
            .ok_or_else(|| PipelineError::MissingRepository(locator.into()))?;
        let id = repo.id.clone();
        if opts.retry_failed {
            for r in self.store.list_releases(&id)? {
                if r.state == ReleaseState::Fail {
                    self.store
                        .transition_release(&id, &r.tag, ReleaseState::Fail, ReleaseState::New, None)?;
                }
            }
        }
        let tickets: Vec<Ticket> = self
            .store
            .list_releases(&id)?
            .into_iter()
            .filter(|r| r.state == ReleaseState::New)
            .map(|r| broker.dispatch(GENERATE, json!({ "repo": id.0, "tag": r.tag })))
            .collect::<Result<_, _>>()?;
        for t in &tickets {
            dead += count_dead(&t.wait());
        }
        dead += count_dead(&broker.broadcast(ANALYZE, json!({}))?.wait());

        let releases = self.store.list_releases(&id)?;
        let summary = ScanSummary {
            repo_id: id.0.clone(),
            tags_found: releases.len(),
            done: releases.iter().filter(|r| r.state == ReleaseState::Done).count(),
            failed: releases
                .iter()
                .filter(|r| r.state == ReleaseState::Fail)
                .map(|r| (r.tag.clone(), r.fail_reason.clone().unwrap_or_default()))
                .collect(),
            pending: releases
                .iter()
                .filter(|r| r.state == ReleaseState::New)
                .map(|r| r.tag.clone())
                .collect(),
            dead_letters: dead,
            components_new: self.store.count_components(Some(AnalysisState::New))?,
            components_analyzed: self.store.count_components(Some(AnalysisState::Analyzed))?,
            matches: self.store.release_matches(&id)?.len(),
            reports: Vec::new(),
        };
        tracing::info!(repo = %id, elapsed_ms = started.elapsed().as_millis() as u64, "scan finished");
        Ok(summary)
    }

    /// Writes the aggregate reports (and one release report per `DONE`
    /// release when `releases` is set) for `scope`.
    pub fn write_reports(&self, scope: &Scope, releases: bool) -> Result<Vec<ReportFiles>> {
        let out = self.config.output_path();
        let now = self.clock.now();
        let mut files = Vec::new();
        for kind in ReportKind::AGGREGATES {
            files.push(write_report(&self.store, &out, scope, &kind, now)?);
        }
        if let (true, Scope::Repo(id)) = (releases, scope) {
            for r in self.store.list_releases(id)? {
                if r.state == ReleaseState::Done {
                    files.push(write_report(&self.store, &out, scope, &ReportKind::Release(r.tag), now)?);
                }
            }
        }
        Ok(files)
    }

    /// One daemon tick: feed sync, then analysis of whatever is `NEW`.
    pub fn tick(&self, broker: &Broker) -> Result<(), String> {
        let mut errors = Vec::new();
        match broker.dispatch(FEEDS, json!({})) {
            Ok(t) => errors.extend(dead_errors(&t.wait())),
            Err(e) => errors.push(e.to_string()),
        }
        match broker.broadcast(ANALYZE, json!({})) {
            Ok(t) => errors.extend(dead_errors(&t.wait())),
            Err(e) => errors.push(e.to_string()),
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors.join("; "))
        }
    }

    /// Re-dispatches dead letters (all, or the listed ids). Each is removed
    /// from the store first; a task that fails again is parked anew.
    pub fn retry_dead_letters(&self, broker: &Broker, ids: Option<&[i64]>) -> Result<Vec<(DeadLetter, TaskStatus)>> {
        let mut out = Vec::new();
        for d in self.store.take_dead_letters(ids)? {
            let payload: Value = serde_json::from_str(&d.payload).unwrap_or(Value::Null);
            let status = match broker.dispatch(&d.routing_key, payload) {
                Ok(t) => t.wait().into_iter().next().unwrap_or(TaskStatus::Done),
                Err(e) => {
                    // unknown key: put it back untouched
                    self.store.park_dead_letter(
                        &d.routing_key,
                        &d.payload,
                        d.attempts,
                        &e.to_string(),
                        d.enqueued_at,
                        self.clock.now(),
                    )?;
                    TaskStatus::DeadLettered {
                        error: e.to_string(),
                        dead_letter_id: None,
                    }
                }
            };
            out.push((d, status));
        }
        Ok(out)
    }
}

fn str_field(payload: &Value, key: &str) -> Result<String, TaskFailure> {
    payload
        .get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| TaskFailure::permanent(format!("payload lacks string field {key:?}")))
}

fn count_dead(results: &[TaskStatus]) -> usize {
    results.iter().filter(|s| matches!(s, TaskStatus::DeadLettered { .. })).count()
}

fn dead_errors(results: &[TaskStatus]) -> Vec<String> {
    results
        .iter()
        .filter_map(|s| match s {
            TaskStatus::DeadLettered { error, .. } => Some(error.clone()),
            TaskStatus::Done => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DaemonReport {
    pub ticks_run: u64,
    pub ticks_skipped: u64,
}

/// Fires a tick every `interval` until `stop` is set or `max_ticks` ticks
/// have fired (run or skipped). Ticks run on their own thread so that a slow
/// one makes the next firing skip instead of delaying the schedule.
pub fn run_daemon(
    pipeline: &Arc<Pipeline>,
    broker: &Broker,
    state: &TickState,
    interval: Duration,
    max_ticks: Option<u64>,
    stop: &AtomicBool,
) -> DaemonReport {
    let mut report = DaemonReport::default();
    let ran = std::sync::atomic::AtomicU64::new(0);
    std::thread::scope(|s| {
        let mut fired = 0u64;
        let mut next = Instant::now();
        while !stop.load(Ordering::Acquire) && max_ticks.is_none_or(|m| fired < m) {
            let now = Instant::now();
            if now < next {
                std::thread::sleep((next - now).min(Duration::from_millis(50)));
                continue;
            }
            next += interval;
            fired += 1;
            match state.try_begin() {
                None => {
                    tracing::warn!("previous tick still running, skipping this one");
                    report.ticks_skipped += 1;
                }
                Some(guard) => {
                    let ran = &ran;
                    s.spawn(move || {
                        let result = pipeline.tick(broker);
                        if let Err(e) = &result {
                            tracing::warn!("tick failed: {e}");
                        }
                        guard.finish(pipeline.clock.now(), result);
                        ran.fetch_add(1, Ordering::AcqRel);
                    });
                }
            }
        }
    });
    report.ticks_run = ran.load(Ordering::Acquire);
    report
}

#[cfg(test)]
mod tests;
