//! Component registration and vulnerability matching.
//!
//! Registration deduplicates components by canonical purl across the whole
//! store and records each release's depth assignment. Analysis claims `NEW`
//! components in batches and resolves them either against the local feed
//! index or a remote batch index.

pub mod remote;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::clock::Clock;
use crate::model::{is_cve_id, AffectedSpec, MatchSource, RepoId, Severity, VulnMatch};
use crate::purl::{family_of, product_key, version_in_range, VersionFamily};
use crate::sbom::{compute_depths, Sbom};
use crate::store::{ComponentLink, RegisterOutcome, ReleaseMatchRow, Store, StoreError, StoredComponent};
pub use remote::{RemoteError, RemoteIndex, RemoteIndexConfig, RemoteVuln, TtlCache};

pub const DEFAULT_BATCH: usize = 500;
pub const DEFAULT_CHUNK: usize = 25;

/// Links every component of `sbom` to the release, inserting unknown purls as
/// `NEW`. Returns how many were newly inserted and how many were linked.
pub fn register_components(store: &Store, repo: &RepoId, tag: &str, sbom: &Sbom) -> Result<RegisterOutcome, StoreError> {
    let depths = compute_depths(&sbom.graph());
    let links: Vec<ComponentLink> = sbom
        .components
        .iter()
        .map(|c| ComponentLink {
            component: c.component.clone(),
            bom_ref: c.key.clone(),
            synthetic: c.synthetic,
            depth: depths.depth(&c.key),
        })
        .collect();
    store.register_release_components(repo, tag, &links)
}

/// In-memory view of every stored `AffectedSpec`, keyed by product key.
#[derive(Debug, Default, Clone)]
pub struct OfflineIndex {
    by_key: BTreeMap<String, Vec<(String, AffectedSpec)>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OfflineMatch {
    Matched(Vec<String>),
    /// The ecosystem has no version ordering, or the component has no version.
    Unmapped,
}

impl OfflineIndex {
    pub fn from_specs(specs: impl IntoIterator<Item = (String, AffectedSpec)>) -> Self {
        let mut by_key: BTreeMap<String, Vec<(String, AffectedSpec)>> = BTreeMap::new();
        for (cve, spec) in specs {
            by_key.entry(spec.product_key.clone()).or_default().push((cve, spec));
        }
        OfflineIndex { by_key }
    }

    pub fn load(store: &Store) -> Result<Self, StoreError> {
        Ok(Self::from_specs(store.affected_specs()?))
    }

    pub fn spec_count(&self) -> usize {
        self.by_key.values().map(Vec::len).sum()
    }

    /// CVEs whose spec names this component's product key and whose range
    /// holds its version. Sorted, deduplicated.
    pub fn match_offline(&self, c: &StoredComponent) -> OfflineMatch {
        let purl = &c.component.purl;
        let Some(version) = purl.version.as_deref() else {
            return OfflineMatch::Unmapped;
        };
        if c.synthetic || family_of(&purl.ecosystem) == VersionFamily::Generic {
            return OfflineMatch::Unmapped;
        }
        let key = product_key(purl);
        let hits: BTreeSet<String> = self
            .by_key
            .get(&key)
            .into_iter()
            .flatten()
            .filter(|(_, spec)| version_in_range(&purl.ecosystem, version, &spec.range))
            .map(|(cve, _)| cve.clone())
            .collect();
        OfflineMatch::Matched(hits.into_iter().collect())
    }
}

pub enum Source {
    Offline,
    Remote(Arc<RemoteIndex>),
}

impl Source {
    pub fn kind(&self) -> MatchSource {
        match self {
            Source::Offline => MatchSource::OfflineFeed,
            Source::Remote(_) => MatchSource::RemoteIndex,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub claimed: usize,
    pub analyzed: usize,
    /// Components left `NEW` because their chunk could not be resolved.
    pub left_new: usize,
    pub matches: Vec<VulnMatch>,
    /// Purls the offline matcher could not map to a version ordering.
    pub unmapped: Vec<String>,
    /// Remote ids that are not CVEs in the local store.
    pub unresolved: Vec<(String, String)>,
    pub errors: Vec<String>,
}

impl fmt::Display for BatchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "claimed={} analyzed={} left_new={} matches={} unmapped={} unresolved={}",
            self.claimed,
            self.analyzed,
            self.left_new,
            self.matches.len(),
            self.unmapped.len(),
            self.unresolved.len()
        )
    }
}

/// Claims up to `limit` `NEW` components and resolves them in chunks of
/// `chunk`. Each chunk commits atomically: its components become `ANALYZED`
/// together with their matches, or (remote failure) go back to `NEW`.
pub fn analyze_batch(
    store: &Store,
    source: &Source,
    limit: usize,
    chunk: usize,
    clock: &dyn Clock,
) -> Result<BatchReport, StoreError> {
    let chunk = chunk.max(1);
    let (_, claimed) = store.claim_new_components(limit)?;
    let mut report = BatchReport {
        claimed: claimed.len(),
        ..BatchReport::default()
    };
    if claimed.is_empty() {
        return Ok(report);
    }
    let offline = match source {
        Source::Offline => Some(OfflineIndex::load(store)?),
        Source::Remote(_) => None,
    };
    let kind = source.kind();
    let by_id: BTreeMap<i64, &StoredComponent> = claimed.iter().map(|c| (c.id, c)).collect();
    for part in claimed.chunks(chunk) {
        let ids: Vec<i64> = part.iter().map(|c| c.id).collect();
        let mut pairs: Vec<(i64, String)> = Vec::new();
        match (source, &offline) {
            (Source::Offline, Some(index)) => {
                for c in part {
                    match index.match_offline(c) {
                        OfflineMatch::Matched(cves) => pairs.extend(cves.into_iter().map(|cve| (c.id, cve))),
                        OfflineMatch::Unmapped => report.unmapped.push(c.purl.clone()),
                    }
                }
            }
            (Source::Remote(index), _) => {
                let queried: Vec<&StoredComponent> = part.iter().filter(|c| !c.synthetic).collect();
                let purls: Vec<String> = queried.iter().map(|c| c.purl.clone()).collect();
                let found = if purls.is_empty() {
                    Ok(BTreeMap::new())
                } else {
                    index.lookup(&purls)
                };
                match found {
                    Ok(found) => {
                        for c in queried {
                            let ids: BTreeSet<&str> = found
                                .get(&c.purl)
                                .into_iter()
                                .flatten()
                                .map(|v| v.id.as_str())
                                .collect();
                            for id in ids {
                                if is_cve_id(id) {
                                    pairs.push((c.id, id.to_string()));
                                } else {
                                    report.unresolved.push((c.purl.clone(), id.to_string()));
                                }
                            }
                        }
                    }
                    Err(e) => {
                        store.release_claims(&ids)?;
                        report.left_new += ids.len();
                        report.errors.push(e.to_string());
                        continue;
                    }
                }
            }
            (Source::Offline, None) => unreachable!("offline index is loaded for offline sources"),
        }
        let now = clock.now();
        let unresolved = store.complete_analysis(&ids, kind, &pairs, now)?;
        let missing: BTreeSet<&(i64, String)> = unresolved.iter().collect();
        for (id, cve) in &pairs {
            if missing.contains(&(*id, cve.clone())) {
                report.unresolved.push((by_id[id].purl.clone(), cve.clone()));
            } else {
                report.matches.push(VulnMatch {
                    component: by_id[id].purl.clone(),
                    cve_id: cve.clone(),
                    source: kind,
                    matched_at: now,
                });
            }
        }
        report.analyzed += ids.len();
    }
    Ok(report)
}

/// Matches known when the release shipped: published on or before its date.
pub fn known_at(release_date: DateTime<Utc>, rows: &[ReleaseMatchRow]) -> Vec<ReleaseMatchRow> {
    rows.iter().filter(|r| r.published <= release_date).cloned().collect()
}

/// One line of a per-release match report. Matches from both sources are
/// merged per (purl, cve).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MatchReportRow {
    pub purl: String,
    pub cve_id: String,
    pub severity: Severity,
    pub cvss: Option<f64>,
    pub epss_score: Option<f64>,
    pub source: String,
    pub known_at_release: bool,
}

pub fn match_report(store: &Store, repo: &RepoId, tag: &str) -> Result<Vec<MatchReportRow>, StoreError> {
    let release = store.get_release(repo, tag)?.ok_or_else(|| StoreError::NotFound {
        kind: "release",
        id: format!("{repo}@{tag}"),
    })?;
    let rows: Vec<ReleaseMatchRow> = store.release_matches(repo)?.into_iter().filter(|r| r.tag == tag).collect();
    let mut merged: BTreeMap<(String, String), (ReleaseMatchRow, BTreeSet<&'static str>)> = BTreeMap::new();
    for r in rows {
        let src = r.source.as_str();
        merged
            .entry((r.purl.clone(), r.cve_id.clone()))
            .or_insert_with(|| (r, BTreeSet::new()))
            .1
            .insert(src);
    }
    Ok(merged
        .into_values()
        .map(|(r, sources)| MatchReportRow {
            known_at_release: r.published <= release.release_date,
            purl: r.purl,
            cve_id: r.cve_id,
            severity: r.severity,
            cvss: r.cvss_v3.or(r.cvss_v2),
            epss_score: r.epss_score,
            source: sources.into_iter().collect::<Vec<_>>().join("+"),
        })
        .collect())
}
