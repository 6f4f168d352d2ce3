use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use depwatch_core::clock::SystemClock;
use depwatch_core::model::RepoId;
use depwatch_core::pipeline::{
    run_daemon, Config, LivenessServer, Pipeline, PipelineError, ReportKind, ScanOptions, Scope, TaskStatus,
    TickState,
};

/// Mirror vulnerability feeds, mine repository releases, build SBOMs and
/// report which releases shipped known-vulnerable dependencies.
#[derive(Parser)]
#[command(name = "depwatch", version)]
struct Cli {
    /// Config file (default: ./depwatch.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `depwatch_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// NVD and EPSS feeds.
    Feeds {
        #[command(subcommand)]
        action: FeedsAction,
    },
    /// Tracked repositories.
    Repo {
        #[command(subcommand)]
        action: RepoAction,
    },
    /// Mine, generate, register and analyze every release of a repository,
    /// then write its reports.
    Scan {
        /// Local path, git URL, or `github:<owner>/<name>`.
        locator: String,
        /// Put FAIL releases back through generation.
        #[arg(long)]
        retry_failed: bool,
    },
    /// Write one report as JSON and CSV under the output directory.
    Report {
        #[command(subcommand)]
        kind: ReportCmd,
        /// Repository id or locator; all repositories when omitted.
        #[arg(long, global = true)]
        repo: Option<String>,
    },
    /// Periodic feed sync and re-analysis.
    Daemon {
        #[command(subcommand)]
        action: DaemonAction,
    },
    /// Tasks that exhausted their retries.
    Deadletter {
        #[command(subcommand)]
        action: DeadletterAction,
    },
    /// Dump every store table as CSV into a directory.
    Export { dir: PathBuf },
}

#[derive(Subcommand)]
enum FeedsAction {
    Sync,
}

#[derive(Subcommand)]
enum RepoAction {
    /// Register a repository and collect its release tags.
    Add { locator: String },
    List,
}

#[derive(Subcommand)]
enum ReportCmd {
    Timeline,
    Depth,
    Correlation,
    Persistence,
    /// Matches for one release (needs --repo).
    Release { tag: String },
}

#[derive(Subcommand)]
enum DaemonAction {
    Run {
        /// Seconds between ticks (default from config).
        #[arg(long)]
        interval: Option<u64>,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
        /// Liveness socket address (default from config).
        #[arg(long)]
        liveness: Option<String>,
    },
}

#[derive(Subcommand)]
enum DeadletterAction {
    List,
    /// Re-dispatch the given dead letters, or all of them.
    Retry { ids: Vec<i64> },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8, PipelineError> {
    let config = Config::load(cli.config.as_deref())?;
    let pipeline = Pipeline::open(config, Arc::new(SystemClock))?;
    match cli.command {
        Command::Feeds { action: FeedsAction::Sync } => {
            println!("{}", pipeline.sync_feeds()?);
            Ok(0)
        }
        Command::Repo { action: RepoAction::Add { locator } } => {
            let r = pipeline.add_repo(&locator)?;
            println!(
                "repo={} language={} tags={} new_releases={}",
                r.repository.id,
                r.repository.primary_language,
                r.tags_found,
                r.inserted.len()
            );
            Ok(0)
        }
        Command::Repo { action: RepoAction::List } => {
            for r in pipeline.store.list_repositories()? {
                let releases = pipeline.store.list_releases(&r.id)?;
                println!("{}\t{}\t{}\treleases={}", r.id, r.primary_language, r.name, releases.len());
            }
            Ok(0)
        }
        Command::Scan { locator, retry_failed } => {
            let broker = pipeline.start_broker();
            let summary = pipeline.scan(&broker, &locator, ScanOptions { retry_failed })?;
            broker.shutdown();
            let scope = Scope::Repo(RepoId(summary.repo_id.clone()));
            let mut written = pipeline.write_reports(&scope, true)?;
            written.extend(pipeline.write_reports(&Scope::All, false)?);
            println!("{summary}");
            for f in written {
                println!("report {}", f.json.display());
            }
            Ok(summary.exit_code() as u8)
        }
        Command::Report { kind, repo } => {
            let scope = match repo {
                None => Scope::All,
                Some(r) => Scope::Repo(resolve_repo(&pipeline, &r)?),
            };
            let kind = match kind {
                ReportCmd::Timeline => ReportKind::Timeline,
                ReportCmd::Depth => ReportKind::Depth,
                ReportCmd::Correlation => ReportKind::Correlation,
                ReportCmd::Persistence => ReportKind::Persistence,
                ReportCmd::Release { tag } => ReportKind::Release(tag),
            };
            let out = pipeline.config.output_path();
            let files = depwatch_core::pipeline::write_report(&pipeline.store, &out, &scope, &kind, pipeline.clock.now())?;
            println!("{}\n{}", files.json.display(), files.csv.display());
            Ok(0)
        }
        Command::Daemon {
            action: DaemonAction::Run { interval, ticks, liveness },
        } => {
            let interval = Duration::from_secs(interval.unwrap_or(pipeline.config.daemon.interval_secs).max(1));
            let addr = liveness.unwrap_or_else(|| pipeline.config.daemon.liveness_addr.clone());
            let state = Arc::new(TickState::default());
            let server = LivenessServer::start(&addr, Arc::clone(&state)).map_err(|e| PipelineError::Io {
                path: PathBuf::from(&addr),
                source: e,
            })?;
            println!("liveness {}", server.addr);
            let broker = pipeline.start_broker();
            let stop = AtomicBool::new(false);
            let report = run_daemon(&pipeline, &broker, &state, interval, ticks, &stop);
            broker.shutdown();
            println!("ticks run={} skipped={} last={}", report.ticks_run, report.ticks_skipped, state.liveness_line());
            Ok(0)
        }
        Command::Deadletter { action: DeadletterAction::List } => {
            for d in pipeline.store.list_dead_letters()? {
                println!(
                    "{}\t{}\tattempts={}\t{}\t{}",
                    d.id, d.routing_key, d.attempts, d.payload, d.last_error
                );
            }
            Ok(0)
        }
        Command::Deadletter { action: DeadletterAction::Retry { ids } } => {
            let broker = pipeline.start_broker();
            let ids = (!ids.is_empty()).then_some(ids);
            let results = pipeline.retry_dead_letters(&broker, ids.as_deref())?;
            broker.shutdown();
            let mut code = 0;
            for (d, status) in results {
                match status {
                    TaskStatus::Done => println!("{}\t{}\tdone", d.id, d.routing_key),
                    TaskStatus::DeadLettered { error, .. } => {
                        code = 1;
                        println!("{}\t{}\tfailed again: {error}", d.id, d.routing_key);
                    }
                }
            }
            Ok(code)
        }
        Command::Export { dir } => {
            for f in pipeline.store.export_csv(&dir)? {
                println!("{}", f.display());
            }
            Ok(0)
        }
    }
}

fn resolve_repo(pipeline: &Pipeline, needle: &str) -> Result<RepoId, PipelineError> {
    if let Some(r) = pipeline.store.get_repository(&RepoId(needle.to_string()))? {
        return Ok(r.id);
    }
    pipeline
        .store
        .find_repository_by_locator(needle)?
        .map(|r| r.id)
        .ok_or_else(|| PipelineError::MissingRepository(needle.to_string()))
}
