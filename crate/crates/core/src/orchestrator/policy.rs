use std::sync::Mutex;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

/// Lease and liveness timing for a deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub lease_duration_s: u64,
    pub heartbeat_interval_s: u64,
    pub offline_threshold_s: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 2,
            lease_duration_s: 600,
            heartbeat_interval_s: 10,
            offline_threshold_s: 30,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        if self.lease_duration_s == 0 {
            return Err("lease_duration_s must be positive".into());
        }
        if self.heartbeat_interval_s == 0 {
            return Err("heartbeat_interval_s must be positive".into());
        }
        if self.offline_threshold_s < 2 * self.heartbeat_interval_s {
            return Err(format!(
                "offline_threshold_s ({}) must be at least twice heartbeat_interval_s ({})",
                self.offline_threshold_s, self.heartbeat_interval_s
            ));
        }
        Ok(())
    }

    pub fn lease_duration(&self) -> Duration {
        Duration::seconds(self.lease_duration_s as i64)
    }

    pub fn offline_threshold(&self) -> Duration {
        Duration::seconds(self.offline_threshold_s as i64)
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

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

    pub fn advance(&self, by: Duration) -> DateTime<Utc> {
        let mut now = self.now.lock().unwrap();
        *now += by;
        *now
    }

    pub fn set(&self, to: DateTime<Utc>) {
        *self.now.lock().unwrap() = to;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let p = RetryPolicy::default();
        assert_eq!((p.max_attempts, p.lease_duration_s, p.heartbeat_interval_s, p.offline_threshold_s), (2, 600, 10, 30));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn offline_threshold_must_cover_two_heartbeats() {
        let p = RetryPolicy {
            offline_threshold_s: 19,
            ..RetryPolicy::default()
        };
        assert!(p.validate().is_err());
    }
}
