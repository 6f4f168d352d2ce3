//! Read-only client for a GitHub-style repository metadata API.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::Deserialize;

use super::MineError;
use crate::ratelimit::TokenBucket;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RemoteRepo {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub full_name: String,
    pub clone_url: String,
    #[serde(default)]
    pub language: Option<String>,
    #[serde(default)]
    pub stargazers_count: u64,
}

pub struct RemoteClient {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
    bucket: Arc<TokenBucket>,
}

impl RemoteClient {
    pub fn new(base: &str, token: Option<String>, bucket: Arc<TokenBucket>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        RemoteClient {
            base: base.trim_end_matches('/').to_string(),
            token,
            agent,
            bucket,
        }
    }

    pub fn repository(&self, owner: &str, name: &str, now: DateTime<Utc>) -> Result<RemoteRepo, MineError> {
        let url = format!("{}/repos/{owner}/{name}", self.base);
        self.bucket.acquire();
        let mut req = self
            .agent
            .get(&url)
            .header("Accept", "application/vnd.github+json")
            .header("User-Agent", concat!("depwatch/", env!("CARGO_PKG_VERSION")));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.call().map_err(|e| MineError::Remote {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let header = |k: &str| {
            resp.headers()
                .get(k)
                .and_then(|v| v.to_str().ok())
                .map(str::trim)
                .map(String::from)
        };
        let exhausted = header("x-ratelimit-remaining").as_deref() == Some("0");
        if status == 429 || (status == 403 && exhausted) {
            let reset = header("retry-after")
                .and_then(|s| s.parse::<i64>().ok())
                .map(|secs| now + chrono::Duration::seconds(secs))
                .or_else(|| {
                    header("x-ratelimit-reset")
                        .and_then(|s| s.parse::<i64>().ok())
                        .and_then(|epoch| Utc.timestamp_opt(epoch, 0).single())
                })
                .unwrap_or(now + chrono::Duration::seconds(60));
            return Err(MineError::RateLimited { reset });
        }
        if status != 200 {
            return Err(MineError::Remote {
                url,
                message: format!("HTTP {status}"),
            });
        }
        let body = resp
            .body_mut()
            .with_config()
            .limit(4 << 20)
            .read_to_vec()
            .map_err(|e| MineError::Remote {
                url: url.clone(),
                message: e.to_string(),
            })?;
        serde_json::from_slice(&body).map_err(|e| MineError::Remote {
            url,
            message: format!("bad JSON: {e}"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratelimit::{TokenBucket, VirtualTicker};

    fn serve(responses: Vec<(u16, Vec<(&'static str, String)>, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
        let h = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (code, headers, body) in responses {
                let req = server.recv().unwrap();
                seen.push(req.url().to_string());
                let mut r = tiny_http::Response::from_string(body).with_status_code(code);
                for (k, v) in headers {
                    r.add_header(tiny_http::Header::from_bytes(k, v.as_bytes()).unwrap());
                }
                req.respond(r).unwrap();
            }
            seen
        });
        (addr, h)
    }

    #[test]
    fn fetches_and_reports_rate_limits() {
        let body = r#"{"id": 42, "name": "client_golang", "full_name": "prometheus/client_golang",
            "clone_url": "https://example.invalid/prometheus/client_golang.git", "language": "Go", "stargazers_count": 5000}"#;
        let (addr, h) = serve(vec![
            (200, vec![], body.to_string()),
            (403, vec![("x-ratelimit-remaining", "0".into()), ("x-ratelimit-reset", "1700000000".into())], "{}".into()),
        ]);
        let bucket = Arc::new(TokenBucket::with_ticker(60, 5, Arc::new(VirtualTicker::default())));
        let c = RemoteClient::new(&addr, Some("t".into()), bucket);
        let now = Utc::now();
        let r = c.repository("prometheus", "client_golang", now).unwrap();
        assert_eq!(r.id, 42);
        assert_eq!(r.language.as_deref(), Some("Go"));
        match c.repository("prometheus", "client_golang", now).unwrap_err() {
            MineError::RateLimited { reset } => assert_eq!(reset.timestamp(), 1_700_000_000),
            other => panic!("{other}"),
        }
        assert_eq!(h.join().unwrap(), vec!["/repos/prometheus/client_golang"; 2]);
    }
}
