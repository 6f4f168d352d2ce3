//! Batch purl lookup against a remote vulnerability index.
//!
//! Wire contract: `POST <url>` with `{"coordinates": [purl, ...]}` (at most
//! one chunk); the response is a JSON array of
//! `{"coordinates": purl, "vulnerabilities": [{"id": "CVE-…", "cvssScore": 7.5}]}`.
//! 429 and 5xx are retried with exponential backoff, honoring `Retry-After`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::purl::{format_purl, parse_purl};
use crate::ratelimit::{Ticker, TokenBucket};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteVuln {
    pub id: String,
    #[serde(default, rename = "cvssScore", skip_serializing_if = "Option::is_none")]
    pub cvss_score: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct ReportEntry {
    coordinates: String,
    #[serde(default)]
    vulnerabilities: Vec<RemoteVuln>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("remote index gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("remote index rejected the request: {0}")]
    Rejected(String),
}

type CacheEntry = (DateTime<Utc>, Vec<RemoteVuln>);

/// Remote results by canonical purl, valid for a fixed TTL.
pub struct TtlCache {
    ttl: Option<chrono::Duration>,
    clock: Arc<dyn Clock>,
    entries: Mutex<HashMap<String, CacheEntry>>,
}

impl TtlCache {
    pub const DEFAULT_TTL: chrono::Duration = chrono::Duration::hours(24);

    /// `ttl = None` disables caching.
    pub fn new(ttl: Option<chrono::Duration>, clock: Arc<dyn Clock>) -> Self {
        TtlCache {
            ttl,
            clock,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, purl: &str) -> Option<Vec<RemoteVuln>> {
        let ttl = self.ttl?;
        let now = self.clock.now();
        let mut map = self.entries.lock().unwrap();
        match map.get(purl) {
            Some((at, v)) if now - *at < ttl => Some(v.clone()),
            Some(_) => {
                map.remove(purl);
                None
            }
            None => None,
        }
    }

    pub fn put(&self, purl: &str, vulns: Vec<RemoteVuln>) {
        if self.ttl.is_some() {
            self.entries
                .lock()
                .unwrap()
                .insert(purl.to_string(), (self.clock.now(), vulns));
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteIndexConfig {
    pub url: String,
    /// Basic-auth `user:token`, if the index wants one.
    pub credentials: Option<String>,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl RemoteIndexConfig {
    pub fn new(url: impl Into<String>) -> Self {
        RemoteIndexConfig {
            url: url.into(),
            credentials: None,
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            timeout: Duration::from_secs(30),
        }
    }
}

pub struct RemoteIndex {
    cfg: RemoteIndexConfig,
    agent: ureq::Agent,
    bucket: Arc<TokenBucket>,
    ticker: Arc<dyn Ticker>,
    pub cache: TtlCache,
    requests: AtomicU64,
}

enum Attempt {
    Done(Vec<ReportEntry>),
    Retry { wait: Option<Duration>, why: String },
    Fatal(String),
}

impl RemoteIndex {
    pub fn new(cfg: RemoteIndexConfig, bucket: Arc<TokenBucket>, ticker: Arc<dyn Ticker>, cache: TtlCache) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        RemoteIndex {
            cfg,
            agent,
            bucket,
            ticker,
            cache,
            requests: AtomicU64::new(0),
        }
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &[u8]) -> Attempt {
        self.bucket.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self
            .agent
            .post(&self.cfg.url)
            .header("Content-Type", "application/json")
            .header("Accept", "application/json");
        if let Some(c) = &self.cfg.credentials {
            req = req.header("Authorization", &format!("Basic {}", BASE64.encode(c)));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    wait: None,
                    why: e.to_string(),
                }
            }
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            let wait = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|s| s.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Attempt::Retry {
                wait,
                why: format!("HTTP {status}"),
            };
        }
        if status != 200 {
            return Attempt::Fatal(format!("HTTP {status}"));
        }
        match resp.body_mut().with_config().limit(16 << 20).read_to_vec() {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(entries) => Attempt::Done(entries),
                Err(e) => Attempt::Fatal(format!("bad response: {e}")),
            },
            Err(e) => Attempt::Retry {
                wait: None,
                why: e.to_string(),
            },
        }
    }

    /// Looks up one chunk of canonical purls. Cached purls are answered
    /// locally; a request is made only for the rest.
    pub fn lookup(&self, purls: &[String]) -> Result<BTreeMap<String, Vec<RemoteVuln>>, RemoteError> {
        let mut out = BTreeMap::new();
        let mut missing = Vec::new();
        for p in purls {
            match self.cache.get(p) {
                Some(v) => {
                    out.insert(p.clone(), v);
                }
                None => missing.push(p.clone()),
            }
        }
        if missing.is_empty() {
            return Ok(out);
        }
        let body = serde_json::to_vec(&serde_json::json!({ "coordinates": missing })).expect("serializable");
        let mut attempts = 0;
        let entries = loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(e) => break e,
                Attempt::Fatal(msg) => return Err(RemoteError::Rejected(msg)),
                Attempt::Retry { wait, why } => {
                    if attempts > self.cfg.max_retries {
                        return Err(RemoteError::Exhausted { attempts, last: why });
                    }
                    let backoff = self.cfg.backoff_base * 2u32.pow(attempts - 1);
                    tracing::warn!(attempt = attempts, %why, "remote index retry");
                    self.ticker.sleep(wait.map_or(backoff, |w| w.max(backoff)));
                }
            }
        };
        let mut found: BTreeMap<String, Vec<RemoteVuln>> = BTreeMap::new();
        for e in entries {
            let key = parse_purl(&e.coordinates)
                .map(|p| format_purl(&p))
                .unwrap_or(e.coordinates);
            found.entry(key).or_default().extend(e.vulnerabilities);
        }
        for p in missing {
            let v = found.remove(&p).unwrap_or_default();
            self.cache.put(&p, v.clone());
            out.insert(p, v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::ratelimit::VirtualTicker;

    #[test]
    fn cache_ttl_and_disable() {
        let clock = Arc::new(ManualClock::new(Utc::now()));
        let c = TtlCache::new(Some(chrono::Duration::hours(24)), clock.clone());
        c.put("pkg:npm/a@1", vec![]);
        assert!(c.get("pkg:npm/a@1").is_some());
        clock.advance(chrono::Duration::hours(24));
        assert!(c.get("pkg:npm/a@1").is_none());
        let off = TtlCache::new(None, clock);
        off.put("pkg:npm/a@1", vec![]);
        assert!(off.get("pkg:npm/a@1").is_none());
    }

    fn serve(codes: Vec<u16>) -> (String, std::thread::JoinHandle<usize>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/api/v3/component-report", server.server_addr().to_ip().unwrap());
        let h = std::thread::spawn(move || {
            let n = codes.len();
            for code in codes {
                let mut req = server.recv().unwrap();
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let v: serde_json::Value = serde_json::from_str(&body).unwrap();
                let coords: Vec<serde_json::Value> = v["coordinates"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| serde_json::json!({"coordinates": c, "vulnerabilities": [{"id": "CVE-2021-44228", "cvssScore": 10.0}]}))
                    .collect();
                let resp = tiny_http::Response::from_string(serde_json::to_string(&coords).unwrap())
                    .with_status_code(code)
                    .with_header(tiny_http::Header::from_bytes("Retry-After", "2").unwrap());
                req.respond(resp).unwrap();
            }
            n
        });
        (addr, h)
    }

    fn index(url: &str, ticker: Arc<VirtualTicker>) -> RemoteIndex {
        let bucket = Arc::new(TokenBucket::with_ticker(1000, 100, ticker.clone()));
        let cache = TtlCache::new(Some(TtlCache::DEFAULT_TTL), Arc::new(ManualClock::new(Utc::now())));
        RemoteIndex::new(RemoteIndexConfig::new(url), bucket, ticker, cache)
    }

    #[test]
    fn retries_then_caches() {
        let (url, h) = serve(vec![503, 429, 200]);
        let ticker = Arc::new(VirtualTicker::default());
        let idx = index(&url, ticker.clone());
        let purls = vec!["pkg:maven/org.apache.logging.log4j/log4j-core@2.14.1".to_string()];
        let r = idx.lookup(&purls).unwrap();
        assert_eq!(r[&purls[0]][0].id, "CVE-2021-44228");
        assert_eq!(idx.request_count(), 3);
        // each wait is max(backoff, Retry-After: 2): 2s + 2s
        assert_eq!(ticker.now(), Duration::from_secs(2 + 2));
        idx.lookup(&purls).unwrap();
        assert_eq!(idx.request_count(), 3);
        assert_eq!(h.join().unwrap(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (url, h) = serve(vec![500, 500, 500, 500]);
        let idx = index(&url, Arc::new(VirtualTicker::default()));
        let e = idx.lookup(&["pkg:npm/a@1".to_string()]).unwrap_err();
        assert_eq!(e, RemoteError::Exhausted { attempts: 4, last: "HTTP 500".into() });
        h.join().unwrap();
    }
}
