use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

/// One request the mock index received.
#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub at: Instant,
    pub purls: Vec<String>,
}

/// An in-process stand-in for the remote batch index.
pub struct MockIndex {
    pub url: String,
    seen: Arc<Mutex<Vec<SeenRequest>>>,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl MockIndex {
    /// `known` maps canonical purl to vulnerability ids. `failures` is a
    /// queue of status codes answered (in order) before normal service.
    pub fn start(known: BTreeMap<String, Vec<String>>, failures: Vec<u16>) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind mock index"));
        let url = format!(
            "http://{}/api/v3/component-report",
            server.server_addr().to_ip().expect("ip listener")
        );
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), seen.clone());
        let mut failures: VecDeque<u16> = failures.into();
        let handle = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let purls: Vec<String> = serde_json::from_str::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v["coordinates"].as_array().cloned())
                    .unwrap_or_default()
                    .into_iter()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect();
                log.lock().unwrap().push(SeenRequest {
                    at: Instant::now(),
                    purls: purls.clone(),
                });
                let resp = if let Some(code) = failures.pop_front() {
                    tiny_http::Response::from_string("{}").with_status_code(code)
                } else {
                    let entries: Vec<serde_json::Value> = purls
                        .iter()
                        .map(|p| {
                            let vulns: Vec<serde_json::Value> = known
                                .get(p)
                                .into_iter()
                                .flatten()
                                .map(|id| serde_json::json!({"id": id, "cvssScore": 5.0}))
                                .collect();
                            serde_json::json!({"coordinates": p, "vulnerabilities": vulns})
                        })
                        .collect();
                    tiny_http::Response::from_string(serde_json::to_string(&entries).expect("json"))
                        .with_status_code(200)
                };
                let _ = req.respond(resp);
            }
        });
        MockIndex {
            url,
            seen,
            server,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for MockIndex {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
