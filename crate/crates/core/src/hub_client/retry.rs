use std::time::Duration;

use rand::Rng;

/// Delay before retry number `attempt` (0-based): `base * 2^attempt` plus
/// uniform jitter in `[0, base)`.
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let jitter = if base_ms > 0 { rand::rng().random_range(0..base_ms) } else { 0 };
    Duration::from_millis(base_bound(base_ms, attempt) + jitter)
}

fn base_bound(base_ms: u64, attempt: u32) -> u64 {
    base_ms.saturating_mul(1u64.checked_shl(attempt).unwrap_or(u64::MAX))
}

/// Statuses worth retrying: throttling and server errors.
pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}
