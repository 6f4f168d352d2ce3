use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depwatch_core::fixtures::{
    fixture_feed_items, go_fixture_repo, java_fixture_repo, write_fixture_feeds, FEED_FIRST_YEAR, FEED_LAST_YEAR,
    JAVA_ADAPTER,
};
use serde_json::Value;

struct Env {
    root: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new(extra: &str) -> Env {
        let root = tempfile::tempdir().unwrap();
        let feeds = root.path().join("feeds");
        let epss = write_fixture_feeds(&feeds, &fixture_feed_items());
        let config = root.path().join("depwatch.toml");
        std::fs::write(
            &config,
            format!(
                "data_dir = {data:?}\n\n[feeds]\nnvd = {nvd:?}\nepss = {epss:?}\nfirst_year = {FEED_FIRST_YEAR}\nlast_year = {FEED_LAST_YEAR}\n\n[sbom]\nuse_go_tool = false\n{extra}",
                data = root.path().join("data"),
                nvd = feeds,
            ),
        )
        .unwrap();
        Env { root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_depwatch"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .current_dir(self.root.path())
            .output()
            .unwrap()
    }

    fn out(&self) -> PathBuf {
        self.root.path().join("data").join("reports")
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let env = Env::new("");
    assert_eq!(env.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(env.run(&["scan"]).status.code(), Some(2));
    assert_eq!(env.run(&["report", "release"]).status.code(), Some(2));
    assert_eq!(env.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn fatal_errors_exit_2() {
    let env = Env::new("");
    let o = env.run(&["scan", "/definitely/not/here"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    let o = env.run(&["report", "release", "v1", "--repo", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn feeds_sync_prints_ingestion_lines() {
    let env = Env::new("");
    let o = env.run(&["feeds", "sync"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("feed=nvd-2021 status=ingested entries=2 ingested=2"), "{text}");
    assert!(text.contains("feed=nvd-modified "), "{text}");
}

#[test]
fn scan_writes_reports_and_exits_0() {
    let env = Env::new("");
    let repo = go_fixture_repo(&env.root.path().join("promsvc"));
    assert_eq!(env.run(&["feeds", "sync"]).status.code(), Some(0));
    let o = env.run(&["scan", repo.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let repo_id = text
        .split_whitespace()
        .find_map(|w| w.strip_prefix("repo="))
        .unwrap()
        .to_string();
    assert!(repo_id.starts_with("promsvc-"));

    let dir = env.out().join(&repo_id);
    for kind in ["timeline", "depth", "correlation", "persistence", "release-v1.2.0"] {
        assert!(dir.join(format!("{kind}.json")).is_file(), "{kind}");
        assert!(dir.join(format!("{kind}.csv")).is_file(), "{kind}");
    }
    let release = read_json(&dir.join("release-v1.2.0.json"));
    assert_eq!(release["schema_version"], 1);
    let csv = std::fs::read_to_string(dir.join("release-v1.2.0.csv")).unwrap();
    assert!(csv.contains("CVE-2022-21698"));
    assert!(csv.contains("HIGH"));

    // report by locator regenerates the same body
    let before = std::fs::read(dir.join("depth.json")).unwrap();
    let o = env.run(&["report", "depth", "--repo", repo.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.join("depth.json")).unwrap(), before);

    let o = env.run(&["repo", "list"]);
    assert!(stdout(&o).contains(&repo_id));
    let export = env.root.path().join("export");
    assert_eq!(env.run(&["export", export.to_str().unwrap()]).status.code(), Some(0));
    assert!(std::fs::read_dir(&export).unwrap().count() > 3);
}

#[test]
fn failed_release_exits_1() {
    let env = Env::new(&format!("timeout_secs = 2\n\n[sbom.adapters.java]\ncommand = {JAVA_ADAPTER:?}\n"));
    let repo = java_fixture_repo(&env.root.path().join("javasvc"));
    env.run(&["feeds", "sync"]);
    let o = env.run(&["scan", repo.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL v1.1: TIMEOUT"), "{}", stdout(&o));

    // the failure is retried on request
    let o = env.run(&["scan", "--retry-failed", repo.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn dead_letters_are_listed_and_retried() {
    let env = Env::new("");
    // no feed source: the feed task is dead-lettered on every tick
    std::fs::write(
        &env.config,
        format!("data_dir = {:?}\n[daemon]\nliveness_addr = \"127.0.0.1:0\"\n", env.root.path().join("data")),
    )
    .unwrap();
    let o = env.run(&["daemon", "run", "--interval", "1", "--ticks", "1"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).contains("last=fail"), "{}", stdout(&o));

    let list = stdout(&env.run(&["deadletter", "list"]));
    assert!(list.contains("feeds.sync"), "{list}");
    let id = list.split('\t').next().unwrap().to_string();
    let o = env.run(&["deadletter", "retry", &id]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("failed again"));
    assert_eq!(stdout(&env.run(&["deadletter", "list"])).lines().count(), 1);
}

#[test]
fn daemon_ticks_and_reports_ok() {
    let env = Env::new("\n[daemon]\nliveness_addr = \"127.0.0.1:0\"\n");
    let o = env.run(&["daemon", "run", "--interval", "1", "--ticks", "2"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let text = stdout(&o);
    assert!(text.contains("ticks run=2 skipped=0"), "{text}");
    assert!(text.contains("last=ok "), "{text}");
}
