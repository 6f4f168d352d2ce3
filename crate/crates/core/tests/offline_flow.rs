//! Feed files on disk through to a per-release match report, with no network.

use depwatch_core::clock::ManualClock;
use depwatch_core::feeds::{sync_epss, sync_nvd, AliasTable, FeedSource};
use depwatch_core::fixtures::{date, fixture_feed_items, seed_release, write_fixture_feeds, FEED_FIRST_YEAR, FEED_LAST_YEAR};
use depwatch_core::matcher::{analyze_batch, match_report, register_components, Source};
use depwatch_core::model::{RepoId, Severity};
use depwatch_core::sbom::parse_sbom;
use depwatch_core::store::Store;
use serde_json::json;

fn sbom(client_golang: &str) -> depwatch_core::sbom::Sbom {
    let purl = format!("pkg:golang/github.com/prometheus/client_golang@{client_golang}");
    let doc = json!({
        "bomFormat": "CycloneDX", "specVersion": "1.5",
        "metadata": {"component": {"bom-ref": "app", "name": "app"}},
        "components": [{"bom-ref": purl, "name": "client_golang", "purl": purl}],
        "dependencies": [{"ref": "app", "dependsOn": [purl]}]
    });
    parse_sbom(doc.to_string().as_bytes()).unwrap()
}

#[test]
fn feed_files_to_release_report() {
    let tmp = tempfile::tempdir().unwrap();
    let epss = write_fixture_feeds(&tmp.path().join("feeds"), &fixture_feed_items());
    let store = Store::open(tmp.path().join("store.db")).unwrap();
    let clock = ManualClock::new(date(2023, 6, 1));
    let source = FeedSource::Dir(tmp.path().join("feeds"));
    sync_nvd(&store, &source, FEED_FIRST_YEAR..=FEED_LAST_YEAR, &AliasTable::builtin(), &clock).unwrap();
    assert_eq!(sync_epss(&store, &epss.to_string_lossy(), &clock).unwrap().ingested, 4);

    let repo = RepoId("svc".into());
    for (tag, released, version) in [
        ("v1", date(2022, 1, 10), "v1.11.0"),
        ("v2", date(2022, 3, 1), "v1.11.0"),
        ("v3", date(2022, 5, 1), "v1.12.1"),
    ] {
        seed_release(&store, &repo, tag, released);
        register_components(&store, &repo, tag, &sbom(version)).unwrap();
    }
    let report = analyze_batch(&store, &Source::Offline, 500, 25, &clock).unwrap();
    assert_eq!((report.analyzed, report.matches.len()), (2, 1));

    let v1 = match_report(&store, &repo, "v1").unwrap();
    let v2 = match_report(&store, &repo, "v2").unwrap();
    assert_eq!(v1.len(), 1);
    // shared component, different release dates either side of 2022-02-15
    assert!(!v1[0].known_at_release);
    assert!(v2[0].known_at_release);
    assert_eq!(v2[0].cve_id, "CVE-2022-21698");
    assert_eq!(v2[0].severity, Severity::High);
    assert_eq!(v2[0].epss_score, Some(0.02686));
    assert!(match_report(&store, &repo, "v3").unwrap().is_empty());

    // a second sync changes nothing and leaves the analysis alone
    let again = sync_nvd(&store, &source, FEED_FIRST_YEAR..=FEED_LAST_YEAR, &AliasTable::builtin(), &clock).unwrap();
    assert!(again.feeds.iter().all(|f| f.ingested + f.replaced == 0), "{again:?}");
    assert_eq!(analyze_batch(&store, &Source::Offline, 500, 25, &clock).unwrap().claimed, 0);
}
