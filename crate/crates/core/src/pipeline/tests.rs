use super::*;
use crate::clock::ManualClock;
use crate::fixtures::{
    cargo_fixture_repo, date, fixture_feed_items, go_fixture_repo, java_fixture_repo, nvd_item, write_fixture_feeds,
    FEED_FIRST_YEAR, FEED_LAST_YEAR, JAVA_ADAPTER,
};
use crate::genmachine::AdapterConfig;
use crate::matcher::match_report;
use crate::model::Severity;
use std::path::Path;

fn config(root: &Path) -> Config {
    let feeds = root.join("feeds");
    let epss = write_fixture_feeds(&feeds, &fixture_feed_items());
    let mut c = Config::default();
    c.data_dir = root.join("data");
    c.feeds.nvd = Some(feeds.to_string_lossy().into_owned());
    c.feeds.epss = Some(epss.to_string_lossy().into_owned());
    c.feeds.first_year = FEED_FIRST_YEAR;
    c.feeds.last_year = Some(FEED_LAST_YEAR);
    c.sbom.use_go_tool = false;
    c
}

fn open(c: Config) -> Arc<Pipeline> {
    Pipeline::open(c, Arc::new(ManualClock::new(date(2023, 1, 1)))).unwrap()
}

#[test]
fn go_scan_reports_known_at_matches() {
    let root = tempfile::tempdir().unwrap();
    let repo = go_fixture_repo(&root.path().join("promsvc"));
    let p = open(config(root.path()));
    p.sync_feeds().unwrap();
    let broker = p.start_broker();
    let locator = repo.path().to_string_lossy().into_owned();
    let s = p.scan(&broker, &locator, ScanOptions::default()).unwrap();
    assert_eq!(s.exit_code(), 0, "{s}");
    assert_eq!((s.tags_found, s.done), (4, 4));
    assert_eq!(s.components_new, 0);

    let id = RepoId(s.repo_id.clone());
    let rows = |tag: &str| match_report(&p.store, &id, tag).unwrap();
    // v1.0.0 and v1.1.0 shipped before the disclosure
    for tag in ["v1.0.0", "v1.1.0"] {
        let r = rows(tag);
        assert_eq!(r.len(), 1, "{tag}");
        assert!(!r[0].known_at_release);
    }
    let r = rows("v1.2.0");
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].cve_id, "CVE-2022-21698");
    assert!(r[0].known_at_release);
    assert_eq!(r[0].severity, Severity::High);
    assert_eq!(r[0].epss_score, Some(0.02686));
    assert!(rows("v1.3.0").is_empty());

    let files = p.write_reports(&Scope::Repo(id.clone()), true).unwrap();
    assert_eq!(files.len(), 4 + 4);
    let persistence: Value =
        serde_json::from_slice(&std::fs::read(p.config.output_path().join(&id.0).join("persistence.json")).unwrap())
            .unwrap();
    let recs = persistence["data"]["records"].as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["first_vulnerable_release"], "v1.2.0");
    assert_eq!(recs[0]["first_clean_release"], "v1.3.0");
    assert_eq!(recs[0]["days"], 61);
}

#[test]
fn timed_out_release_is_a_partial_failure() {
    let root = tempfile::tempdir().unwrap();
    let repo = java_fixture_repo(&root.path().join("javasvc"));
    let mut c = config(root.path());
    c.sbom.timeout_secs = 2;
    c.sbom.adapters.insert(
        "java".into(),
        AdapterConfig {
            command: JAVA_ADAPTER.into(),
            manifest: None,
        },
    );
    let p = open(c);
    p.sync_feeds().unwrap();
    let broker = p.start_broker();
    let s = p.scan(&broker, &repo.path().to_string_lossy(), ScanOptions::default()).unwrap();
    assert_eq!(s.exit_code(), 1);
    assert_eq!(s.done, 1);
    assert_eq!(s.failed.len(), 1);
    assert_eq!(s.failed[0].0, "v1.1");
    assert!(s.failed[0].1.starts_with("TIMEOUT"), "{}", s.failed[0].1);
    let id = RepoId(s.repo_id.clone());
    let r = match_report(&p.store, &id, "v1.0").unwrap();
    // released 2021-06-01, Log4Shell published 2021-12-10
    assert_eq!((r.len(), r[0].known_at_release), (1, false));
}

#[test]
fn rescans_are_idempotent_and_reports_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let go = go_fixture_repo(&root.path().join("promsvc"));
    let rust = cargo_fixture_repo(&root.path().join("tool"));
    let mut outputs = Vec::new();
    for run in 0..2 {
        let mut c = config(root.path());
        c.data_dir = root.path().join(format!("data{run}"));
        c.output_dir = Some(root.path().join(format!("out{run}")));
        c.workers.sbom_generate = 3;
        c.workers.components_analyze = 3;
        let p = open(c);
        p.sync_feeds().unwrap();
        let broker = p.start_broker();
        for repo in [&go, &rust] {
            let s = p.scan(&broker, &repo.path().to_string_lossy(), ScanOptions::default()).unwrap();
            assert_eq!(s.exit_code(), 0, "{s}");
            // a second scan of the same repository finds nothing to do
            let again = p.scan(&broker, &repo.path().to_string_lossy(), ScanOptions::default()).unwrap();
            assert_eq!(again.done, s.done);
            let id = RepoId(s.repo_id);
            p.write_reports(&Scope::Repo(id), true).unwrap();
        }
        p.write_reports(&Scope::All, false).unwrap();
        outputs.push(p.config.output_path());
    }
    let files = |dir: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = Vec::new();
        for scope in std::fs::read_dir(dir).unwrap().flatten() {
            for f in std::fs::read_dir(scope.path()).unwrap().flatten() {
                let name = f.file_name().to_string_lossy().into_owned();
                if name != "metadata.json" {
                    v.push((format!("{}/{name}", scope.file_name().to_string_lossy()), std::fs::read(f.path()).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    let (a, b) = (files(&outputs[0]), files(&outputs[1]));
    assert!(a.len() >= 3 * 4 + 8);
    assert_eq!(a, b);
}

#[test]
fn tick_reanalyzes_after_feed_change() {
    let root = tempfile::tempdir().unwrap();
    let repo = cargo_fixture_repo(&root.path().join("tool"));
    let p = open(config(root.path()));
    let broker = p.start_broker();
    p.tick(&broker).unwrap();
    let s = p.scan(&broker, &repo.path().to_string_lossy(), ScanOptions::default()).unwrap();
    let before = s.matches;
    // a tick with nothing new is a no-op for analysis
    p.tick(&broker).unwrap();
    assert_eq!(p.store.release_matches(&RepoId(s.repo_id.clone())).unwrap().len(), before);

    let mut items = fixture_feed_items();
    items.push(nvd_item(
        "CVE-2022-99999",
        "cpe:2.3:a:regex_project:regex:*:*:*:*:*:rust:*:*",
        None,
        Some("2.0.0"),
        5.3,
        "2022-12-01T00:00Z",
    ));
    write_fixture_feeds(&root.path().join("feeds"), &items);
    p.tick(&broker).unwrap();
    let after = p.store.release_matches(&RepoId(s.repo_id)).unwrap();
    assert_eq!(after.iter().filter(|m| m.cve_id == "CVE-2022-99999").count(), 4);
    assert_eq!(p.store.count_components(Some(AnalysisState::New)).unwrap(), 0);
}

#[test]
fn failed_mining_is_dead_lettered_and_retryable() {
    let root = tempfile::tempdir().unwrap();
    let p = open(config(root.path()));
    let broker = p.start_broker();
    let missing = root.path().join("not-yet");
    let err = p.scan(&broker, &missing.to_string_lossy(), ScanOptions::default()).unwrap_err();
    assert!(matches!(err, PipelineError::TaskFailed { key: MINE, .. }), "{err}");
    assert_eq!(p.store.list_dead_letters().unwrap().len(), 1);

    go_fixture_repo(&missing);
    let retried = p.retry_dead_letters(&broker, None).unwrap();
    assert_eq!(retried.len(), 1);
    assert_eq!(retried[0].1, TaskStatus::Done);
    assert!(p.store.list_dead_letters().unwrap().is_empty());
    assert!(p.store.find_repository_by_locator(&missing.to_string_lossy()).unwrap().is_some());
}

#[test]
fn feeds_sync_requires_a_source() {
    let root = tempfile::tempdir().unwrap();
    let mut c = config(root.path());
    c.feeds.nvd = None;
    c.feeds.epss = None;
    let p = open(c);
    assert!(matches!(p.sync_feeds(), Err(PipelineError::NoFeedSource)));
    let broker = p.start_broker();
    let e = p.tick(&broker).unwrap_err();
    assert!(e.contains("no feed source"), "{e}");
}

#[test]
fn daemon_runs_bounded_ticks() {
    let root = tempfile::tempdir().unwrap();
    let p = open(config(root.path()));
    let broker = p.start_broker();
    let state = TickState::default();
    let stop = AtomicBool::new(false);
    let r = run_daemon(&p, &broker, &state, Duration::from_millis(10), Some(3), &stop);
    assert_eq!(r.ticks_run + r.ticks_skipped, 3);
    assert!(r.ticks_run >= 1);
    assert!(matches!(state.last(), LastTick::Ok(_)));
}
