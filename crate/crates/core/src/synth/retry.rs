use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, SynthError};
use crate::seeding::rng_for;

/// Exponential backoff: attempt `n` (0-based) waits
/// `min(max_delay, base_delay · 2ⁿ) · (1 − jitter · u)` with `u ~ U[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 20_000,
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self.base_delay_ms.saturating_mul(1u64 << attempt.min(32));
        let capped = exp.min(self.max_delay_ms) as f64;
        let jitter = self.jitter.clamp(0.0, 1.0);
        Duration::from_secs_f64(capped * (1.0 - jitter * rng.gen::<f64>()) / 1000.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retried<T> {
    pub value: T,
    pub retries: u32,
}

pub fn no_sleep(_: Duration) {}

/// Calls `backend` until it succeeds, fails with a non-retryable error, or
/// `max_retries` retries are used up. Jitter is seeded from the request seed.
pub fn call_with_retry(
    backend: &dyn ChatBackend,
    request: &ChatRequest,
    policy: &RetryPolicy,
    sleep: &(dyn Fn(Duration) + Sync),
) -> Result<Retried<String>, SynthError> {
    let mut rng = rng_for(request.seed, "retry-jitter");
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(value) => {
                return Ok(Retried {
                    value,
                    retries: attempt,
                })
            }
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                sleep(policy.delay(attempt, &mut rng));
                attempt += 1;
            }
            Err(last) => {
                return Err(SynthError::Transport {
                    attempts: attempt + 1,
                    last,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BackendError;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: BackendError,
    }

    impl ChatBackend for Flaky {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
    }

    fn flaky(failures: u32, error: BackendError) -> Flaky {
        Flaky {
            failures,
            calls: AtomicU32::new(0),
            error,
        }
    }

    #[test]
    fn two_timeouts_then_success() {
        let b = flaky(2, BackendError::Timeout("slow".into()));
        let slept = Mutex::new(Vec::new());
        let sleep = |d: Duration| slept.lock().unwrap().push(d);
        let r = call_with_retry(&b, &ChatRequest::user("x", 1.0, 1), &RetryPolicy::default(), &sleep).unwrap();
        assert_eq!(r.retries, 2);
        assert_eq!(r.value, "ok");
        let slept = slept.into_inner().unwrap();
        assert_eq!(slept.len(), 2);
        assert!(slept[0] <= Duration::from_millis(500) && slept[0] >= Duration::from_millis(250));
        assert!(slept[1] <= Duration::from_millis(1000) && slept[1] >= Duration::from_millis(500));
    }

    #[test]
    fn permanent_failure_exhausts_retries() {
        let b = flaky(u32::MAX, BackendError::Connection("refused".into()));
        let policy = RetryPolicy {
            max_retries: 4,
            ..RetryPolicy::default()
        };
        match call_with_retry(&b, &ChatRequest::user("x", 1.0, 1), &policy, &no_sleep) {
            Err(SynthError::Transport { attempts, .. }) => assert_eq!(attempts, 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(b.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let b = flaky(
            u32::MAX,
            BackendError::Status {
                code: 401,
                body: "no".into(),
            },
        );
        assert!(call_with_retry(&b, &ChatRequest::user("x", 1.0, 1), &RetryPolicy::default(), &no_sleep).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
            jitter: 0.0,
        };
        let mut rng = rng_for(0, "t");
        assert_eq!(p.delay(0, &mut rng), Duration::from_millis(100));
        assert_eq!(p.delay(3, &mut rng), Duration::from_millis(800));
        assert_eq!(p.delay(9, &mut rng), Duration::from_millis(1000));
    }
}
