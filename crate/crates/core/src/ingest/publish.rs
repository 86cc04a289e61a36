use std::time::Duration;

use super::serialize_envelope;
use crate::domain::AdmissionEnvelope;
use crate::streambus::{BusError, BusProducer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 8, base_delay: Duration::from_millis(50), max_delay: Duration::from_secs(2) }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Sum of every backoff sleep before giving up.
    pub fn budget(&self) -> Duration {
        (0..self.max_attempts.saturating_sub(1)).map(|a| self.delay_for(a)).sum()
    }
}

#[derive(Debug, thiserror::Error)]
#[error("delivery failed after {delivered} of {total} envelopes: {source}")]
pub struct DeliveryFailure {
    pub delivered: usize,
    pub total: usize,
    pub assignments: Vec<(u32, u64)>,
    pub source: BusError,
}

/// Appends one bus record per envelope, keyed by admission key. Returns
/// `(partition, offset)` in input order.
pub fn publish_batch(
    envelopes: &[AdmissionEnvelope],
    producer: &dyn BusProducer,
    topic: &str,
    policy: RetryPolicy,
) -> Result<Vec<(u32, u64)>, DeliveryFailure> {
    let mut assignments = Vec::with_capacity(envelopes.len());
    for env in envelopes {
        let key = env.key.key_bytes();
        let payload = serialize_envelope(env);
        let mut attempt = 0;
        loop {
            match producer.append(topic, &key, &payload) {
                Ok(at) => {
                    assignments.push(at);
                    break;
                }
                Err(e) if e.is_transient() && attempt + 1 < policy.max_attempts => {
                    log::warn!("append to {topic} failed (attempt {}): {e}", attempt + 1);
                    std::thread::sleep(policy.delay_for(attempt));
                    attempt += 1;
                }
                Err(source) => {
                    return Err(DeliveryFailure {
                        delivered: assignments.len(),
                        total: envelopes.len(),
                        assignments,
                        source,
                    })
                }
            }
        }
    }
    Ok(assignments)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;
    use crate::domain::{AdmissionKey, Payload, Timestamp};
    use crate::streambus::Broker;

    fn env(pid: &str) -> AdmissionEnvelope {
        AdmissionEnvelope {
            key: AdmissionKey::new(pid, "A", Timestamp(0)),
            admission: Payload::new(),
            providers: vec![Payload::new()],
            labs: vec![],
            medications: vec![],
            produced_at: Timestamp(0),
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(1), max_delay: Duration::from_millis(4) }
    }

    /// Fails the first `outage` appends with `Unavailable`.
    struct Flaky {
        inner: Broker,
        outage: AtomicU32,
    }

    impl BusProducer for Flaky {
        fn append(&self, topic: &str, key: &[u8], payload: &[u8]) -> crate::streambus::Result<(u32, u64)> {
            if self.outage.load(Ordering::SeqCst) > 0 {
                self.outage.fetch_sub(1, Ordering::SeqCst);
                return Err(BusError::Unavailable("scripted outage".into()));
            }
            self.inner.append(topic, key, payload)
        }
    }

    #[test]
    fn single_partition_offsets() {
        let broker = Broker::in_memory();
        broker.create_topic("admissions", 1, 100).unwrap();
        let out = publish_batch(&[env("a"), env("b"), env("c")], &broker, "admissions", fast()).unwrap();
        assert_eq!(out, vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn same_key_same_partition() {
        let broker = Broker::in_memory();
        broker.create_topic("admissions", 8, 100).unwrap();
        let out = publish_batch(&[env("x"), env("y"), env("x")], &broker, "admissions", fast()).unwrap();
        assert_eq!(out[0].0, out[2].0);
    }

    #[test]
    fn recovers_from_short_outage() {
        let flaky = Flaky { inner: Broker::in_memory(), outage: AtomicU32::new(3) };
        flaky.inner.create_topic("t", 2, 100).unwrap();
        let envs: Vec<_> = (0..10).map(|i| env(&format!("p{i}"))).collect();
        let out = publish_batch(&envs, &flaky, "t", fast()).unwrap();
        assert_eq!(out.len(), 10);
        let total: u64 = (0..2).map(|p| flaky.inner.watermarks("t", p).unwrap().1).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn long_outage_surfaces_failure() {
        let flaky = Flaky { inner: Broker::in_memory(), outage: AtomicU32::new(0) };
        flaky.inner.create_topic("t", 1, 100).unwrap();
        publish_batch(&[env("a")], &flaky, "t", fast()).unwrap();
        flaky.outage.store(100, Ordering::SeqCst);
        let err = publish_batch(&[env("b"), env("c")], &flaky, "t", fast()).unwrap_err();
        assert_eq!((err.delivered, err.total), (0, 2));
        assert!(matches!(err.source, BusError::Unavailable(_)));
    }

    #[test]
    fn unknown_topic_is_not_retried() {
        let broker = Broker::in_memory();
        let err = publish_batch(&[env("a")], &broker, "nope", fast()).unwrap_err();
        assert!(matches!(err.source, BusError::UnknownTopic(_)));
    }

    #[test]
    fn backoff_is_bounded() {
        let p = RetryPolicy { max_attempts: 10, base_delay: Duration::from_millis(10), max_delay: Duration::from_millis(50) };
        assert_eq!(p.delay_for(0), Duration::from_millis(10));
        assert_eq!(p.delay_for(2), Duration::from_millis(40));
        assert_eq!(p.delay_for(30), Duration::from_millis(50));
        assert_eq!(p.budget(), Duration::from_millis(10 + 20 + 40 + 50 * 6));
    }
}
