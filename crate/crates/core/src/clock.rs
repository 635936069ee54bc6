//! Injectable wall clocks.
//!
//! Everything that compares against credential expiry or scripted fault
//! deadlines reads time through [`Clock`], so tests can run a multi-day
//! staging campaign in milliseconds. Bandwidth throttling and backoff sleeps
//! use the tokio timer and are not affected.

use std::fmt::Debug;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};

pub trait Clock: Send + Sync + Debug {
    fn now(&self) -> DateTime<Utc>;

    /// Moves simulated time forward. Returns false for clocks that track
    /// real time and cannot be advanced.
    fn advance(&self, _by: Duration) -> bool {
        false
    }
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Mutex::new(start),
        }
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn advance(&self, by: Duration) -> bool {
        let mut now = self.now.lock().unwrap();
        *now += by;
        true
    }
}

/// Real time plus an adjustable offset. Used by the standalone fleet so the
/// admin interface can fast-forward expiry without freezing time.
#[derive(Debug, Default)]
pub struct OffsetClock {
    offset_ms: AtomicI64,
}

impl OffsetClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for OffsetClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now() + Duration::milliseconds(self.offset_ms.load(Ordering::SeqCst))
    }

    fn advance(&self, by: Duration) -> bool {
        self.offset_ms.fetch_add(by.num_milliseconds(), Ordering::SeqCst);
        true
    }
}
