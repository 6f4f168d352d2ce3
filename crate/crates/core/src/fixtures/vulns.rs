use chrono::{DateTime, NaiveDate, TimeZone, Utc};

use crate::feeds::sha256_hex;
use crate::model::{
    derive_severity, AffectedSpec, EpssEntry, Language, Release, RepoId, Repository, SpecSource, VersionBound,
    VersionRange, Vulnerability,
};
use crate::store::{FeedSnapshot, Store};

pub fn date(y: i32, m: u32, d: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, 0, 0, 0).single().expect("valid date")
}

pub fn spec(product_key: &str, start: Option<VersionBound>, end: Option<VersionBound>) -> AffectedSpec {
    AffectedSpec {
        product_key: product_key.into(),
        range: VersionRange::bounded(start, end),
        source_form: SpecSource::Cpe,
    }
}

pub fn vulnerability(cve: &str, published: DateTime<Utc>, cvss_v3: f64, affected: Vec<AffectedSpec>) -> Vulnerability {
    let (severity, _) = derive_severity(Some(cvss_v3), None).expect("score in range");
    Vulnerability {
        cve_id: cve.into(),
        published,
        last_modified: published,
        cvss_v3_base: Some(cvss_v3),
        cvss_v2_base: None,
        severity,
        affected,
        description: format!("{cve} fixture"),
    }
}

/// Stores `vulns` as one feed payload under `key`.
pub fn ingest(store: &Store, key: &str, vulns: &[Vulnerability], at: DateTime<Utc>) {
    let body = serde_json::to_vec(vulns).expect("serializable");
    let snap = FeedSnapshot {
        feed_key: key.into(),
        checksum: sha256_hex(&body),
        fetched_at: at,
        entry_count: vulns.len() as u64,
    };
    store
        .ingest_feed(&snap, vulns, &Default::default())
        .expect("fixture ingest");
}

pub const LOG4J_KEY: &str = "maven:org.apache.logging.log4j/log4j-core";

/// CVE-2021-44228: published 2021-12-10, CVSS 10.0, affects [2.0-beta9, 2.15.0).
pub fn log4shell() -> Vulnerability {
    vulnerability(
        "CVE-2021-44228",
        Utc.with_ymd_and_hms(2021, 12, 10, 10, 15, 0).single().expect("valid"),
        10.0,
        vec![spec(
            LOG4J_KEY,
            Some(VersionBound::inclusive("2.0-beta9")),
            Some(VersionBound::exclusive("2.15.0")),
        )],
    )
}

pub fn log4shell_epss() -> EpssEntry {
    EpssEntry::new("CVE-2021-44228", 0.97095, 0.99997, NaiveDate::from_ymd_opt(2023, 3, 1).expect("valid"))
        .expect("valid score")
}

pub const CLIENT_GOLANG_KEY: &str = "golang:github.com/prometheus/client_golang";

/// CVE-2022-21698: CVSS 7.5, affects versions before v1.11.1.
pub fn client_golang_cve() -> Vulnerability {
    vulnerability(
        "CVE-2022-21698",
        Utc.with_ymd_and_hms(2022, 2, 15, 15, 15, 0).single().expect("valid"),
        7.5,
        vec![spec(CLIENT_GOLANG_KEY, None, Some(VersionBound::exclusive("v1.11.1")))],
    )
}

pub fn client_golang_epss() -> EpssEntry {
    EpssEntry::new("CVE-2022-21698", 0.02686, 0.90123, NaiveDate::from_ymd_opt(2023, 3, 1).expect("valid"))
        .expect("valid score")
}

/// 48 release versions of the client_golang-shaped fixture, oldest first.
pub const CLIENT_GOLANG_VERSIONS: [&str; 48] = [
    "v0.8.0", "v0.9.0", "v0.9.1", "v0.9.2", "v0.9.3", "v0.9.4", "v1.0.0", "v1.1.0", "v1.2.0", "v1.2.1",
    "v1.3.0", "v1.4.0", "v1.4.1", "v1.5.0", "v1.5.1", "v1.6.0", "v1.7.0", "v1.7.1", "v1.8.0", "v1.9.0",
    "v1.10.0", "v1.11.0", "v1.11.1", "v1.12.0", "v1.12.1", "v1.12.2", "v1.13.0", "v1.13.1", "v1.14.0",
    "v1.15.0", "v1.15.1", "v1.16.0", "v1.17.0", "v1.18.0", "v1.19.0", "v1.19.1", "v1.20.0", "v1.20.1",
    "v1.20.2", "v1.20.3", "v1.20.4", "v1.20.5", "v1.21.0", "v1.21.1", "v1.22.0", "v1.23.0", "v1.23.1",
    "v1.23.2",
];

/// Ensures a repository row exists and inserts a release under it.
pub fn seed_release(store: &Store, repo: &RepoId, tag: &str, released: DateTime<Utc>) {
    if store.get_repository(repo).expect("read").is_none() {
        let r = Repository {
            id: repo.clone(),
            name: repo.0.clone(),
            clone_url: format!("file:///fixtures/{}", repo.0),
            primary_language: Language::Other,
            stargazers: 0,
            contributor_count: 0,
            first_seen: released,
        };
        store.upsert_repository(&r, &r.clone_url).expect("fixture repo");
    }
    store
        .insert_release_if_absent(&Release::new(repo.clone(), tag, released))
        .expect("fixture release");
}
