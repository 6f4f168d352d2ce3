//! Token-bucket rate limiting shared by the remote clients.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Monotonic time source; swapped for a virtual one in tests.
pub trait Ticker: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct RealTicker(Instant);

impl RealTicker {
    pub fn new() -> Self {
        RealTicker(Instant::now())
    }
}

impl Default for RealTicker {
    fn default() -> Self {
        Self::new()
    }
}

impl Ticker for RealTicker {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Time that only moves when somebody sleeps.
#[derive(Default)]
pub struct VirtualTicker(Mutex<Duration>);

impl Ticker for VirtualTicker {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap()
    }
    fn sleep(&self, d: Duration) {
        *self.0.lock().unwrap() += d;
    }
}

struct BucketState {
    tokens: f64,
    at: Duration,
}

/// Callers reserve a token up front and sleep off any deficit outside the
/// lock, so concurrent callers are served in arrival order.
pub struct TokenBucket {
    capacity: f64,
    per_sec: f64,
    ticker: Arc<dyn Ticker>,
    state: Mutex<BucketState>,
}

impl TokenBucket {
    pub fn per_minute(rate: u32, capacity: u32) -> Self {
        Self::with_ticker(rate, capacity, Arc::new(RealTicker::new()))
    }

    pub fn with_ticker(rate_per_minute: u32, capacity: u32, ticker: Arc<dyn Ticker>) -> Self {
        assert!(rate_per_minute > 0, "rate must be positive");
        let capacity = f64::from(capacity.max(1));
        let at = ticker.now();
        TokenBucket {
            capacity,
            per_sec: f64::from(rate_per_minute) / 60.0,
            ticker,
            state: Mutex::new(BucketState { tokens: capacity, at }),
        }
    }

    /// Blocks until a token is available and takes it. Returns the time waited.
    pub fn acquire(&self) -> Duration {
        let wait = {
            let mut s = self.state.lock().unwrap();
            let now = self.ticker.now();
            let elapsed = now.saturating_sub(s.at).as_secs_f64();
            s.tokens = (s.tokens + elapsed * self.per_sec).min(self.capacity);
            s.at = now;
            s.tokens -= 1.0;
            if s.tokens >= 0.0 {
                Duration::ZERO
            } else {
                Duration::from_secs_f64(-s.tokens / self.per_sec)
            }
        };
        if !wait.is_zero() {
            self.ticker.sleep(wait);
        }
        wait
    }
}
