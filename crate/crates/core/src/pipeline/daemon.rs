//! Periodic ticks and the liveness endpoint.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LastTick {
    Never,
    Ok(DateTime<Utc>),
    Failed(DateTime<Utc>, String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    /// Another tick was still running.
    Skipped,
    Ran(LastTick),
}

/// Tick bookkeeping shared between the scheduler, tick threads and the
/// liveness server.
#[derive(Debug)]
pub struct TickState {
    busy: AtomicBool,
    last: Mutex<LastTick>,
}

impl Default for TickState {
    fn default() -> Self {
        TickState {
            busy: AtomicBool::new(false),
            last: Mutex::new(LastTick::Never),
        }
    }
}

impl TickState {
    /// Claims the tick slot. `None` when a tick is already running.
    pub fn try_begin(&self) -> Option<TickGuard<'_>> {
        self.busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| TickGuard { state: self })
    }

    /// Runs `body` as one tick unless another tick holds the slot.
    pub fn run(&self, now: DateTime<Utc>, body: impl FnOnce() -> Result<(), String>) -> TickOutcome {
        match self.try_begin() {
            None => {
                tracing::warn!("previous tick still running, skipping this one");
                TickOutcome::Skipped
            }
            Some(guard) => TickOutcome::Ran(guard.finish(now, body())),
        }
    }

    pub fn last(&self) -> LastTick {
        self.last.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// The liveness line: `ok <last tick>`, `fail <last tick> <error>`, or
    /// `starting` before the first tick has finished.
    pub fn liveness_line(&self) -> String {
        let iso = |t: &DateTime<Utc>| t.to_rfc3339_opts(SecondsFormat::Secs, true);
        match self.last() {
            LastTick::Never => "starting".into(),
            LastTick::Ok(t) => format!("ok {}", iso(&t)),
            LastTick::Failed(t, e) => format!("fail {} {}", iso(&t), e.replace('\n', " ")),
        }
    }
}

pub struct TickGuard<'a> {
    state: &'a TickState,
}

impl TickGuard<'_> {
    pub fn finish(self, at: DateTime<Utc>, result: Result<(), String>) -> LastTick {
        let last = match result {
            Ok(()) => LastTick::Ok(at),
            Err(e) => LastTick::Failed(at, e),
        };
        *self.state.last.lock().unwrap_or_else(|p| p.into_inner()) = last.clone();
        last
    }
}

impl Drop for TickGuard<'_> {
    fn drop(&mut self) {
        self.state.busy.store(false, Ordering::Release);
    }
}

/// Serves the liveness line on a TCP socket. Plain connections get the bare
/// line; a request starting with `GET ` gets a minimal HTTP response.
pub struct LivenessServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LivenessServer {
    pub fn start(addr: &str, state: Arc<TickState>) -> std::io::Result<LivenessServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("liveness".into())
            .spawn(move || {
                while !stop2.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((conn, _)) => {
                            if let Err(e) = answer(conn, &state.liveness_line()) {
                                tracing::debug!("liveness client: {e}");
                            }
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(20));
                        }
                        Err(e) => tracing::warn!("liveness accept: {e}"),
                    }
                }
            })?;
        Ok(LivenessServer {
            addr,
            stop,
            handle: Some(handle),
        })
    }
}

impl Drop for LivenessServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn answer(mut conn: TcpStream, line: &str) -> std::io::Result<()> {
    conn.set_nonblocking(false)?;
    conn.set_read_timeout(Some(Duration::from_millis(200)))?;
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < head.len() {
        match conn.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(_) => break,
        }
    }
    if &head[..got] == b"GET " {
        // drain the rest of the request head before replying
        let mut buf = [0u8; 1024];
        let _ = conn.read(&mut buf);
        let body = format!("{line}\n");
        write!(
            conn,
            "HTTP/1.0 200 OK\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
    } else {
        writeln!(conn, "{line}")?;
    }
    conn.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::date;
    use std::sync::mpsc;

    #[test]
    fn overlapping_tick_is_skipped() {
        let state = Arc::new(TickState::default());
        let (started_tx, started_rx) = mpsc::channel();
        let (release_tx, release_rx) = mpsc::channel::<()>();
        let s2 = Arc::clone(&state);
        let first = std::thread::spawn(move || {
            s2.run(date(2024, 1, 1), || {
                started_tx.send(()).unwrap();
                release_rx.recv().unwrap();
                Ok(())
            })
        });
        started_rx.recv().unwrap();
        assert_eq!(state.run(date(2024, 1, 1), || Ok(())), TickOutcome::Skipped);
        release_tx.send(()).unwrap();
        assert_eq!(first.join().unwrap(), TickOutcome::Ran(LastTick::Ok(date(2024, 1, 1))));
        // slot is free again
        assert!(matches!(state.run(date(2024, 1, 2), || Err("x".into())), TickOutcome::Ran(LastTick::Failed(..))));
    }

    #[test]
    fn liveness_reports_last_tick() {
        let state = Arc::new(TickState::default());
        let server = LivenessServer::start("127.0.0.1:0", Arc::clone(&state)).unwrap();
        let read = |req: &[u8]| {
            let mut c = TcpStream::connect(server.addr).unwrap();
            c.write_all(req).unwrap();
            let mut s = String::new();
            c.read_to_string(&mut s).unwrap();
            s
        };
        assert_eq!(read(b""), "starting\n");
        state.run(date(2024, 3, 5) + chrono::Duration::seconds(7), || Ok(()));
        assert_eq!(read(b"ping"), "ok 2024-03-05T00:00:07Z\n");
        let http = read(b"GET / HTTP/1.0\r\n\r\n");
        assert!(http.starts_with("HTTP/1.0 200 OK\r\n"));
        assert!(http.ends_with("\r\n\r\nok 2024-03-05T00:00:07Z\n"));
    }
}
