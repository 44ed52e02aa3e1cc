use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Shared token bucket. Tokens refill continuously at `rate` per second up
/// to `capacity`; the bucket starts full.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<BucketState>,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, capacity: f64) -> Self {
        assert!(rate > 0.0 && capacity >= 1.0, "rate must be positive and capacity at least one token");
        TokenBucket { rate, capacity, state: Mutex::new(BucketState { tokens: capacity, last: Instant::now() }) }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    /// Takes one token, or returns how long to wait before one is available.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut s = self.state.lock().expect("bucket lock poisoned");
        let now = Instant::now();
        let elapsed = now.duration_since(s.last).as_secs_f64();
        s.tokens = (s.tokens + elapsed * self.rate).min(self.capacity);
        s.last = now;
        if s.tokens >= 1.0 {
            s.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - s.tokens) / self.rate))
        }
    }

    /// Waits for a token. Returns whether the bucket was empty on arrival.
    pub async fn acquire(&self) -> bool {
        let mut waited = false;
        while let Err(wait) = self.try_acquire() {
            waited = true;
            tokio::time::sleep(wait).await;
        }
        waited
    }
}
