//! Token bucket throttle.
//!
//! Capacity is one second of bandwidth and the bucket starts empty. A
//! reservation may drive the balance negative; the caller then sleeps until
//! the debt is repaid. Because refill follows real elapsed time, sleeping
//! longer than asked is paid back on the next reservation and the long-run
//! rate stays at the configured bandwidth.

use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(bytes_per_sec: u64) -> Self {
        assert!(bytes_per_sec > 0, "bandwidth must be positive");
        let rate = bytes_per_sec as f64;
        Self {
            rate,
            capacity: rate,
            state: Mutex::new((0.0, Instant::now())),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Takes `n` tokens and returns how long to wait before sending them.
    pub fn reserve_at(&self, n: u64, now: Instant) -> Duration {
        let mut st = self.state.lock().unwrap();
        let elapsed = now.saturating_duration_since(st.1).as_secs_f64();
        st.0 = (st.0 + elapsed * self.rate).min(self.capacity);
        st.1 = st.1.max(now);
        st.0 -= n as f64;
        if st.0 >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-st.0 / self.rate)
        }
    }

    pub async fn take(&self, n: u64) {
        let wait = self.reserve_at(n, Instant::now());
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

/// Send granularity for a throttled stream: about 10 ms of data.
pub fn chunk_size(bandwidth: Option<u64>) -> usize {
    match bandwidth {
        Some(bw) => (bw / 100).clamp(1024, 65_536) as usize,
        None => 65_536,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_start_and_debt() {
        let b = TokenBucket::new(1000);
        let t0 = b.state.lock().unwrap().1;
        assert_eq!(b.reserve_at(500, t0), Duration::from_millis(500));
        // Debt accumulates across reservations made at the same instant.
        assert_eq!(b.reserve_at(500, t0), Duration::from_millis(1000));
        // After 2 s the debt is repaid and the bucket is empty again.
        assert_eq!(b.reserve_at(0, t0 + Duration::from_secs(2)), Duration::ZERO);
    }

    #[test]
    fn capacity_is_one_second() {
        let b = TokenBucket::new(1000);
        let t0 = b.state.lock().unwrap().1;
        let later = t0 + Duration::from_secs(60);
        assert_eq!(b.reserve_at(1000, later), Duration::ZERO);
        assert_eq!(b.reserve_at(1000, later), Duration::from_secs(1));
    }

    #[test]
    fn chunk_sizes() {
        assert_eq!(chunk_size(Some(10_000)), 1024);
        assert_eq!(chunk_size(Some(1_000_000)), 10_000);
        assert_eq!(chunk_size(Some(100_000_000)), 65_536);
        assert_eq!(chunk_size(None), 65_536);
    }
}
