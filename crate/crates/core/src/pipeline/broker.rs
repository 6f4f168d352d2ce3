//! In-process task broker with routing keys.
//!
//! Each `subscribe` call adds one subscriber (a worker thread with its own
//! queue) to a routing key. Plain dispatch goes to one subscriber of the key,
//! round-robin; broadcast dispatch goes to every subscriber. A failing task is
//! retried on the same subscriber until `max_retries` attempts have run, then
//! parked as a dead letter. Permanent failures are parked right away.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use crossbeam_channel::{unbounded, Sender};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;
use crate::store::Store;

pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub routing_key: String,
    pub payload: Value,
    /// 1-based; never exceeds the broker's `max_retries`.
    pub attempt: u32,
    pub enqueued_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFailure {
    pub message: String,
    pub retryable: bool,
}

impl TaskFailure {
    pub fn permanent(message: impl Into<String>) -> Self {
        TaskFailure {
            message: message.into(),
            retryable: false,
        }
    }
}

impl From<String> for TaskFailure {
    fn from(message: String) -> Self {
        TaskFailure {
            message,
            retryable: true,
        }
    }
}

pub type Handler = Arc<dyn Fn(&TaskEnvelope) -> Result<(), TaskFailure> + Send + Sync>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DispatchError {
    #[error("unknown routing key {0:?}")]
    UnknownRoutingKey(String),
    #[error("broker is shut down")]
    ShutDown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskStatus {
    Done,
    DeadLettered {
        error: String,
        /// Row id in the store, when the broker has one.
        dead_letter_id: Option<i64>,
    },
}

#[derive(Default)]
struct TicketState {
    pending: usize,
    results: Vec<TaskStatus>,
}

/// Completion handle for one dispatch (one delivery, or one per subscriber
/// for broadcasts).
#[derive(Clone)]
pub struct Ticket(Arc<(Mutex<TicketState>, Condvar)>);

impl Ticket {
    fn new(pending: usize) -> Ticket {
        Ticket(Arc::new((
            Mutex::new(TicketState {
                pending,
                results: Vec::new(),
            }),
            Condvar::new(),
        )))
    }

    fn finish(&self, status: TaskStatus) {
        let (m, cv) = &*self.0;
        let mut s = m.lock().unwrap_or_else(|p| p.into_inner());
        s.results.push(status);
        s.pending -= 1;
        cv.notify_all();
    }

    /// Blocks until every delivery has finished.
    pub fn wait(&self) -> Vec<TaskStatus> {
        let (m, cv) = &*self.0;
        let mut s = m.lock().unwrap_or_else(|p| p.into_inner());
        while s.pending > 0 {
            s = cv.wait(s).unwrap_or_else(|p| p.into_inner());
        }
        s.results.clone()
    }
}

struct Delivery {
    task: TaskEnvelope,
    ticket: Ticket,
}

struct Subscriber {
    tx: Sender<Delivery>,
    handle: JoinHandle<()>,
}

#[derive(Default)]
struct Route {
    subscribers: Vec<Subscriber>,
    next: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadLetterRecord {
    pub task: TaskEnvelope,
    pub error: String,
}

struct Shared {
    max_retries: u32,
    store: Option<Arc<Store>>,
    clock: Arc<dyn Clock>,
    dead: Mutex<Vec<DeadLetterRecord>>,
}

pub struct Broker {
    routes: Mutex<BTreeMap<String, Route>>,
    shared: Arc<Shared>,
}

impl Broker {
    /// Dead letters are parked in `store` when one is given, and always kept
    /// in memory for [`Broker::dead_letters`].
    pub fn new(max_retries: u32, store: Option<Arc<Store>>, clock: Arc<dyn Clock>) -> Broker {
        Broker {
            routes: Mutex::new(BTreeMap::new()),
            shared: Arc::new(Shared {
                max_retries: max_retries.max(1),
                store,
                clock,
                dead: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn subscribe(&self, routing_key: &str, handler: Handler) {
        let (tx, rx) = unbounded::<Delivery>();
        let shared = Arc::clone(&self.shared);
        let name = format!("{routing_key}#{}", self.subscriber_count(routing_key));
        let handle = std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                for d in rx {
                    let status = run_with_retries(&shared, &handler, d.task);
                    d.ticket.finish(status);
                }
            })
            .expect("spawn worker thread");
        let mut routes = self.routes.lock().unwrap_or_else(|p| p.into_inner());
        routes
            .entry(routing_key.to_string())
            .or_default()
            .subscribers
            .push(Subscriber { tx, handle });
    }

    /// `workers` subscribers sharing one handler.
    pub fn subscribe_pool(&self, routing_key: &str, workers: usize, handler: Handler) {
        for _ in 0..workers.max(1) {
            self.subscribe(routing_key, Arc::clone(&handler));
        }
    }

    pub fn subscriber_count(&self, routing_key: &str) -> usize {
        let routes = self.routes.lock().unwrap_or_else(|p| p.into_inner());
        routes.get(routing_key).map_or(0, |r| r.subscribers.len())
    }

    pub fn dispatch(&self, routing_key: &str, payload: Value) -> Result<Ticket, DispatchError> {
        self.send(routing_key, payload, false)
    }

    pub fn broadcast(&self, routing_key: &str, payload: Value) -> Result<Ticket, DispatchError> {
        self.send(routing_key, payload, true)
    }

    fn send(&self, routing_key: &str, payload: Value, all: bool) -> Result<Ticket, DispatchError> {
        let mut routes = self.routes.lock().unwrap_or_else(|p| p.into_inner());
        let route = routes
            .get_mut(routing_key)
            .filter(|r| !r.subscribers.is_empty())
            .ok_or_else(|| DispatchError::UnknownRoutingKey(routing_key.to_string()))?;
        let task = TaskEnvelope {
            routing_key: routing_key.to_string(),
            payload,
            attempt: 1,
            enqueued_at: self.shared.clock.now(),
        };
        let targets: Vec<usize> = if all {
            (0..route.subscribers.len()).collect()
        } else {
            let i = route.next % route.subscribers.len();
            route.next = route.next.wrapping_add(1);
            vec![i]
        };
        let ticket = Ticket::new(targets.len());
        for i in targets {
            let d = Delivery {
                task: task.clone(),
                ticket: ticket.clone(),
            };
            route.subscribers[i].tx.send(d).map_err(|_| DispatchError::ShutDown)?;
        }
        Ok(ticket)
    }

    pub fn dead_letters(&self) -> Vec<DeadLetterRecord> {
        self.shared.dead.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Stops accepting work, lets queued deliveries drain and joins workers.
    pub fn shutdown(&self) {
        let routes = std::mem::take(&mut *self.routes.lock().unwrap_or_else(|p| p.into_inner()));
        let handles: Vec<JoinHandle<()>> = routes
            .into_values()
            .flat_map(|r| r.subscribers)
            .map(|s| {
                drop(s.tx);
                s.handle
            })
            .collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run_with_retries(shared: &Shared, handler: &Handler, mut task: TaskEnvelope) -> TaskStatus {
    loop {
        let result = catch_unwind(AssertUnwindSafe(|| handler(&task)))
            .unwrap_or_else(|p| Err(format!("worker panicked: {}", panic_text(&p)).into()));
        let (error, retryable) = match result {
            Ok(()) => return TaskStatus::Done,
            Err(f) => (f.message, f.retryable),
        };
        if retryable && task.attempt < shared.max_retries {
            tracing::warn!(key = %task.routing_key, attempt = task.attempt, %error, "task failed, retrying");
            task.attempt += 1;
            continue;
        }
        tracing::error!(key = %task.routing_key, attempts = task.attempt, %error, "task dead-lettered");
        let dead_letter_id = shared.store.as_ref().and_then(|s| {
            s.park_dead_letter(
                &task.routing_key,
                &task.payload.to_string(),
                task.attempt,
                &error,
                task.enqueued_at,
                shared.clock.now(),
            )
            .map_err(|e| tracing::error!("cannot park dead letter: {e}"))
            .ok()
        });
        shared.dead.lock().unwrap_or_else(|p| p.into_inner()).push(DeadLetterRecord {
            task,
            error: error.clone(),
        });
        return TaskStatus::DeadLettered { error, dead_letter_id };
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string payload".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn broker() -> Broker {
        Broker::new(DEFAULT_MAX_RETRIES, None, Arc::new(SystemClock))
    }

    fn counting(n: &Arc<AtomicUsize>) -> Handler {
        let n = Arc::clone(n);
        Arc::new(move |_| {
            n.fetch_add(1, Ordering::SeqCst);
            Ok(())
        })
    }

    #[test]
    fn round_robin_splits_evenly() {
        let b = broker();
        let (a, c) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
        b.subscribe("k", counting(&a));
        b.subscribe("k", counting(&c));
        let tickets: Vec<Ticket> = (0..4).map(|i| b.dispatch("k", json!(i)).unwrap()).collect();
        for t in tickets {
            assert_eq!(t.wait(), vec![TaskStatus::Done]);
        }
        assert_eq!((a.load(Ordering::SeqCst), c.load(Ordering::SeqCst)), (2, 2));
    }

    #[test]
    fn broadcast_reaches_every_subscriber() {
        let b = broker();
        let n = Arc::new(AtomicUsize::new(0));
        b.subscribe_pool("k", 3, counting(&n));
        let results = b.broadcast("k", json!({})).unwrap().wait();
        assert_eq!(results.len(), 3);
        assert_eq!(n.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let b = broker();
        assert_eq!(
            b.dispatch("nope", json!(null)).err(),
            Some(DispatchError::UnknownRoutingKey("nope".into()))
        );
    }

    #[test]
    fn three_failures_park_a_dead_letter() {
        let store = Arc::new(Store::open_in_memory().unwrap());
        let b = Broker::new(3, Some(Arc::clone(&store)), Arc::new(SystemClock));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = Arc::clone(&seen);
        b.subscribe(
            "k",
            Arc::new(move |t| {
                s2.lock().unwrap().push(t.attempt);
                Err(format!("boom {}", t.attempt).into())
            }),
        );
        let r = b.dispatch("k", json!({"id": 7})).unwrap().wait();
        assert!(matches!(&r[0], TaskStatus::DeadLettered { error, dead_letter_id: Some(_) } if error == "boom 3"));
        assert_eq!(*seen.lock().unwrap(), vec![1, 2, 3]);
        let dl = store.list_dead_letters().unwrap();
        assert_eq!(dl.len(), 1);
        assert_eq!((dl[0].routing_key.as_str(), dl[0].attempts), ("k", 3));
        assert_eq!(serde_json::from_str::<Value>(&dl[0].payload).unwrap(), json!({"id": 7}));
    }

    #[test]
    fn transient_failure_recovers_and_panics_count_as_failures() {
        let b = broker();
        b.subscribe(
            "k",
            Arc::new(|t| match t.attempt {
                1 => panic!("first attempt"),
                _ => Ok(()),
            }),
        );
        assert_eq!(b.dispatch("k", json!(null)).unwrap().wait(), vec![TaskStatus::Done]);
        assert!(b.dead_letters().is_empty());
    }

    #[test]
    fn permanent_failures_skip_retries() {
        let b = broker();
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = Arc::clone(&calls);
        b.subscribe(
            "k",
            Arc::new(move |_| {
                c2.fetch_add(1, Ordering::SeqCst);
                Err(TaskFailure::permanent("no"))
            }),
        );
        let r = b.dispatch("k", json!(null)).unwrap().wait();
        assert!(matches!(&r[0], TaskStatus::DeadLettered { dead_letter_id: None, .. }));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(b.dead_letters().len(), 1);
    }

    proptest::proptest! {
        // Every dispatched task ends done or dead-lettered, whatever the
        // failure pattern and pool size.
        #[test]
        fn no_task_is_lost(fails in proptest::collection::vec(0u32..5, 1..40), workers in 1usize..5) {
            let b = broker();
            let done = Arc::new(AtomicUsize::new(0));
            let d2 = Arc::clone(&done);
            b.subscribe_pool(
                "k",
                workers,
                Arc::new(move |t| {
                    let need = t.payload.as_u64().unwrap() as u32;
                    if t.attempt > need {
                        d2.fetch_add(1, Ordering::SeqCst);
                        Ok(())
                    } else {
                        Err(format!("attempt {}", t.attempt).into())
                    }
                }),
            );
            let tickets: Vec<Ticket> = fails.iter().map(|f| b.dispatch("k", json!(f)).unwrap()).collect();
            let results: Vec<TaskStatus> = tickets.iter().flat_map(|t| t.wait()).collect();
            proptest::prop_assert_eq!(results.len(), fails.len());
            let expected_dead = fails.iter().filter(|f| **f >= DEFAULT_MAX_RETRIES).count();
            proptest::prop_assert_eq!(b.dead_letters().len(), expected_dead);
            proptest::prop_assert_eq!(done.load(Ordering::SeqCst), fails.len() - expected_dead);
        }
    }

    #[test]
    fn shutdown_drains_queued_work() {
        let b = broker();
        let n = Arc::new(AtomicUsize::new(0));
        b.subscribe_pool("k", 2, counting(&n));
        for i in 0..50 {
            b.dispatch("k", json!(i)).unwrap();
        }
        b.shutdown();
        assert_eq!(n.load(Ordering::SeqCst), 50);
        assert_eq!(b.dispatch("k", json!(0)).err(), Some(DispatchError::UnknownRoutingKey("k".into())));
    }
}
