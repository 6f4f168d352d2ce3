//! Local mirror of the NVD annual/modified JSON feeds and the EPSS scores.
//!
//! Annual feeds are ingested once per payload checksum; the modified feed is
//! merged on every sync. Each payload is applied in a single store
//! transaction, so readers see either the previous or the new snapshot.

pub mod cpe;
pub mod epss;
pub mod nvd;

use std::fmt;
use std::io::Read;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::Datelike;
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::store::{FeedSnapshot, Store, StoreError};

pub use cpe::{AliasTable, Cpe};
pub use epss::{parse_epss_csv, ParsedEpss};
pub use nvd::{parse_feed, parse_nvd_entry, ParsedEntry, ParsedFeed};

pub const FIRST_FEED_YEAR: i32 = 2002;
pub const MODIFIED_KEY: &str = "nvd-modified";
pub const EPSS_KEY: &str = "epss";

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("cannot read {what}: {source}")]
    Io {
        what: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot fetch {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("{what}: {message}")]
    Decode { what: String, message: String },
    #[error("schema violation in entry {entry} at {path}: {message}")]
    Schema {
        entry: String,
        path: String,
        message: String,
    },
    #[error("alias table: {0}")]
    Alias(String),
    #[error("feed years {start}..={end} outside {FIRST_FEED_YEAR}..={max}")]
    InvalidYears { start: i32, end: i32, max: i32 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl FeedError {
    /// I/O failures are worth retrying; bad content is not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, FeedError::Io { .. } | FeedError::Unreachable { .. })
    }
}

/// Where feed payloads come from.
#[derive(Debug, Clone)]
pub enum FeedSource {
    Dir(PathBuf),
    Remote { base: String, agent: ureq::Agent },
}

impl FeedSource {
    /// `http(s)://` locators are remote; anything else is a directory.
    pub fn from_locator(locator: &str) -> FeedSource {
        if locator.starts_with("http://") || locator.starts_with("https://") {
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(600)))
                .build()
                .new_agent();
            FeedSource::Remote {
                base: locator.trim_end_matches('/').to_string(),
                agent,
            }
        } else {
            FeedSource::Dir(PathBuf::from(locator))
        }
    }

    fn fetch(&self, stem: &str) -> Result<Vec<u8>, FeedError> {
        match self {
            FeedSource::Dir(dir) => {
                for name in [format!("{stem}.json.gz"), format!("{stem}.json")] {
                    let p = dir.join(&name);
                    if p.exists() {
                        return read_file(&p);
                    }
                }
                Err(FeedError::Io {
                    what: dir.join(format!("{stem}.json.gz")).display().to_string(),
                    source: std::io::Error::from(std::io::ErrorKind::NotFound),
                })
            }
            FeedSource::Remote { base, agent } => http_get(agent, &format!("{base}/{stem}.json.gz")),
        }
    }

    /// Checksum advertised by a remote `.meta` sidecar, if any.
    fn advertised_checksum(&self, stem: &str) -> Option<String> {
        let FeedSource::Remote { base, agent } = self else {
            return None;
        };
        let body = http_get(agent, &format!("{base}/{stem}.meta")).ok()?;
        String::from_utf8_lossy(&body)
            .lines()
            .find_map(|l| l.trim().strip_prefix("sha256:").map(|h| h.trim().to_ascii_lowercase()))
    }
}

fn read_file(p: &Path) -> Result<Vec<u8>, FeedError> {
    std::fs::read(p).map_err(|e| FeedError::Io {
        what: p.display().to_string(),
        source: e,
    })
}

fn http_get(agent: &ureq::Agent, url: &str) -> Result<Vec<u8>, FeedError> {
    let unreachable = |e: ureq::Error| FeedError::Unreachable {
        url: url.to_string(),
        message: e.to_string(),
    };
    let mut resp = agent.get(url).call().map_err(unreachable)?;
    resp.body_mut()
        .with_config()
        .limit(1 << 30)
        .read_to_vec()
        .map_err(unreachable)
}

/// Decompresses gzip payloads; plain payloads pass through.
pub fn decompress(bytes: Vec<u8>, what: &str) -> Result<Vec<u8>, FeedError> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| FeedError::Decode {
                what: what.to_string(),
                message: format!("bad gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn annual_key(year: i32) -> String {
    format!("nvd-{year}")
}

fn feed_stem(feed_key: &str) -> String {
    format!("nvdcve-1.1-{}", feed_key.trim_start_matches("nvd-"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedStatus {
    Ingested,
    /// Annual payload with a known checksum; not re-ingested.
    Unchanged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedReport {
    pub feed_key: String,
    pub status: FeedStatus,
    pub entries: usize,
    pub ingested: usize,
    pub replaced: usize,
    pub unchanged: usize,
    /// Skipped entries plus dropped affected specs.
    pub rejected: usize,
    pub notes: Vec<String>,
}

impl fmt::Display for FeedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            FeedStatus::Ingested => "ingested",
            FeedStatus::Unchanged => "unchanged",
        };
        write!(
            f,
            "feed={} status={status} entries={} ingested={} replaced={} unchanged={} rejected={}",
            self.feed_key, self.entries, self.ingested, self.replaced, self.unchanged, self.rejected
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct SyncReport {
    pub feeds: Vec<FeedReport>,
    pub snapshots: Vec<FeedSnapshot>,
    pub unmatched_cpes: usize,
}

/// Mirrors the annual feeds for `years` plus the modified feed.
pub fn sync_nvd(
    store: &Store,
    source: &FeedSource,
    years: RangeInclusive<i32>,
    aliases: &AliasTable,
    clock: &dyn Clock,
) -> Result<SyncReport, FeedError> {
    let max = clock.now().year();
    let (start, end) = (*years.start(), *years.end());
    if start < FIRST_FEED_YEAR || end > max || start > end {
        return Err(FeedError::InvalidYears { start, end, max });
    }
    let mut report = SyncReport::default();
    let keys = years.map(annual_key).chain(std::iter::once(MODIFIED_KEY.to_string()));
    for key in keys {
        let annual = key != MODIFIED_KEY;
        let stem = feed_stem(&key);
        let previous = store.get_snapshot(&key)?;

        if annual {
            if let (Some(prev), Some(adv)) = (&previous, source.advertised_checksum(&stem)) {
                if prev.checksum == adv {
                    report.feeds.push(unchanged_report(prev));
                    report.snapshots.push(prev.clone());
                    continue;
                }
            }
        }
        let payload = decompress(source.fetch(&stem)?, &stem)?;
        let checksum = sha256_hex(&payload);
        if annual {
            if let Some(prev) = previous.as_ref().filter(|p| p.checksum == checksum) {
                tracing::debug!(feed = %key, "annual feed unchanged");
                report.feeds.push(unchanged_report(prev));
                report.snapshots.push(prev.clone());
                continue;
            }
        }

        let parsed = parse_feed(&payload, aliases)?;
        let snapshot = FeedSnapshot {
            feed_key: key.clone(),
            checksum,
            fetched_at: clock.now(),
            entry_count: parsed.entries.len() as u64,
        };
        let counts = store.ingest_feed(&snapshot, &parsed.entries, &parsed.unmatched)?;
        let mut notes = parsed.skipped.clone();
        for id in &parsed.duplicates {
            notes.push(format!("{id}: repeated in payload, newest last_modified kept"));
        }
        let r = FeedReport {
            feed_key: key.clone(),
            status: FeedStatus::Ingested,
            entries: parsed.entries.len(),
            ingested: counts.ingested,
            replaced: counts.replaced,
            unchanged: counts.unchanged,
            rejected: parsed.skipped.len() + parsed.dropped_specs,
            notes,
        };
        tracing::info!("{r}");
        report.feeds.push(r);
        // the stored row keeps its original fetch time when the checksum is unchanged
        report.snapshots.push(store.get_snapshot(&key)?.unwrap_or(snapshot));
    }
    report.unmatched_cpes = store.unmatched_cpes()?.len();
    Ok(report)
}

fn unchanged_report(prev: &FeedSnapshot) -> FeedReport {
    FeedReport {
        feed_key: prev.feed_key.clone(),
        status: FeedStatus::Unchanged,
        entries: prev.entry_count as usize,
        ingested: 0,
        replaced: 0,
        unchanged: 0,
        rejected: 0,
        notes: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpssReport {
    pub status: FeedStatus,
    pub ingested: usize,
    pub replaced: usize,
    pub unchanged: usize,
    pub rejected: usize,
    pub rejected_lines: Vec<(usize, String)>,
}

impl EpssReport {
    /// Rows written (new plus replaced).
    pub fn written(&self) -> usize {
        self.ingested + self.replaced
    }
}

impl fmt::Display for EpssReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            FeedStatus::Ingested => "ingested",
            FeedStatus::Unchanged => "unchanged",
        };
        write!(
            f,
            "feed={EPSS_KEY} status={status} ingested={} replaced={} unchanged={} rejected={}",
            self.ingested, self.replaced, self.unchanged, self.rejected
        )
    }
}

/// Loads an EPSS CSV (plain or gzip) from a file path or URL.
pub fn sync_epss(store: &Store, locator: &str, clock: &dyn Clock) -> Result<EpssReport, FeedError> {
    let raw = if locator.starts_with("http://") || locator.starts_with("https://") {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .new_agent();
        http_get(&agent, locator)?
    } else {
        read_file(Path::new(locator))?
    };
    let payload = decompress(raw, locator)?;
    let checksum = sha256_hex(&payload);
    if let Some(prev) = store.get_snapshot(EPSS_KEY)? {
        if prev.checksum == checksum {
            return Ok(EpssReport {
                status: FeedStatus::Unchanged,
                ingested: 0,
                replaced: 0,
                unchanged: prev.entry_count as usize,
                rejected: 0,
                rejected_lines: Vec::new(),
            });
        }
    }
    let text = String::from_utf8(payload).map_err(|e| FeedError::Decode {
        what: locator.to_string(),
        message: e.to_string(),
    })?;
    let parsed = parse_epss_csv(&text, clock.now().date_naive());
    let snapshot = FeedSnapshot {
        feed_key: EPSS_KEY.into(),
        checksum,
        fetched_at: clock.now(),
        entry_count: parsed.entries.len() as u64,
    };
    let counts = store.upsert_epss(&parsed.entries, &snapshot)?;
    let r = EpssReport {
        status: FeedStatus::Ingested,
        ingested: counts.ingested,
        replaced: counts.replaced,
        unchanged: counts.unchanged,
        rejected: parsed.rejected.len(),
        rejected_lines: parsed.rejected,
    };
    tracing::info!("{r}");
    Ok(r)
}
