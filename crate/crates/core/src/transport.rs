//! Simulated asynchronous messaging: tagged envelopes, bounded channels with
//! delay, reordering and loss, stale discard, and heartbeat liveness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::config::DelayModel;
use crate::draft::{DraftQuery, DraftReply};
use crate::types::{RequestId, RoundId, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Endpoint {
    Target,
    Draft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnvelopeKind {
    DraftQuery,
    DraftReply,
    SyncPrefix,
    Heartbeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Query(DraftQuery),
    Reply(DraftReply),
    /// The target is done with the request; the draft may free its session.
    Release,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub id: u64,
    pub from: Endpoint,
    pub request: RequestId,
    pub round: RoundId,
    pub kind: EnvelopeKind,
    pub payload: Payload,
    pub sent_at: f64,
    pub deliver_at: f64,
}

impl Envelope {
    pub fn new(
        from: Endpoint,
        request: RequestId,
        round: RoundId,
        kind: EnvelopeKind,
        payload: Payload,
        now: f64,
    ) -> Self {
        Self {
            id: 0,
            from,
            request,
            round,
            kind,
            payload,
            sent_at: now,
            deliver_at: now,
        }
    }

    /// Token content carried by the envelope, if any.
    pub fn tokens(&self) -> &[Token] {
        match &self.payload {
            Payload::Query(q) => &q.tokens,
            Payload::Reply(r) => &r.segment.tokens,
            _ => &[],
        }
    }
}

/// Fault and delay knobs of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub capacity: usize,
    pub delay: DelayModel,
    pub reorder_prob: f64,
    pub reorder_window: f64,
    pub drop_prob: f64,
    pub stale_timeout: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub stale: u64,
    pub backpressure: u64,
    pub reordered: u64,
}

impl ChannelCounters {
    pub fn add(&mut self, o: &ChannelCounters) {
        self.sent += o.sent;
        self.delivered += o.delivered;
        self.dropped += o.dropped;
        self.stale += o.stale;
        self.backpressure += o.backpressure;
        self.reordered += o.reordered;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SendResult {
    Queued { deliver_at: f64 },
    Dropped,
    /// Queue full; the envelope is handed back for a later retry.
    Backpressure(Box<Envelope>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lifecycle {
    Sent,
    Delivered,
    Dropped,
    Stale,
    Backpressure,
}

/// One envelope lifecycle event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportRecord {
    pub at: f64,
    pub id: u64,
    pub from: Endpoint,
    pub kind: EnvelopeKind,
    pub request: RequestId,
    pub round: RoundId,
    pub event: Lifecycle,
}

/// One-directional channel with a bounded, time-ordered queue.
#[derive(Debug, Clone)]
pub struct BoundedChannel {
    pub cfg: ChannelConfig,
    /// Kept sorted by `(deliver_at, id)`.
    queue: Vec<Envelope>,
    next_id: u64,
    pub counters: ChannelCounters,
    pub log: Option<Vec<TransportRecord>>,
}

fn sample_delay<R: Rng>(model: DelayModel, rng: &mut R) -> f64 {
    match model {
        DelayModel::Constant { secs } => secs,
        DelayModel::Uniform { lo, hi } => {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        }
        DelayModel::Exponential { mean } => {
            if mean > 0.0 {
                Exp::new(1.0 / mean).expect("positive rate").sample(rng)
            } else {
                0.0
            }
        }
    }
}

impl BoundedChannel {
    pub fn new(cfg: ChannelConfig) -> Self {
        Self {
            cfg,
            queue: Vec::new(),
            next_id: 0,
            counters: ChannelCounters::default(),
            log: None,
        }
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Earliest pending delivery time.
    pub fn next_delivery(&self) -> Option<f64> {
        self.queue.first().map(|e| e.deliver_at)
    }

    fn record(&mut self, at: f64, env: &Envelope, event: Lifecycle) {
        if let Some(log) = self.log.as_mut() {
            log.push(TransportRecord {
                at,
                id: env.id,
                from: env.from,
                kind: env.kind,
                request: env.request,
                round: env.round,
                event,
            });
        }
    }

    pub fn send<R: Rng>(&mut self, mut env: Envelope, now: f64, rng: &mut R) -> SendResult {
        if self.queue.len() >= self.cfg.capacity {
            self.counters.backpressure += 1;
            self.record(now, &env, Lifecycle::Backpressure);
            return SendResult::Backpressure(Box::new(env));
        }
        env.id = self.next_id;
        self.next_id += 1;
        env.sent_at = now;
        self.counters.sent += 1;
        self.record(now, &env, Lifecycle::Sent);
        if self.cfg.drop_prob > 0.0 && rng.random::<f64>() < self.cfg.drop_prob {
            self.counters.dropped += 1;
            self.record(now, &env, Lifecycle::Dropped);
            return SendResult::Dropped;
        }
        let mut delay = sample_delay(self.cfg.delay, rng);
        if self.cfg.reorder_prob > 0.0 && rng.random::<f64>() < self.cfg.reorder_prob {
            delay += rng.random::<f64>() * self.cfg.reorder_window;
            self.counters.reordered += 1;
        }
        env.deliver_at = now + delay;
        let deliver_at = env.deliver_at;
        let key = (deliver_at, env.id);
        let at = self
            .queue
            .partition_point(|e| (e.deliver_at, e.id) <= key);
        self.queue.insert(at, env);
        SendResult::Queued { deliver_at }
    }

    /// Envelopes due by `now`, in delivery order. Over-age ones are discarded.
    pub fn poll(&mut self, now: f64) -> Vec<Envelope> {
        let due = self.queue.partition_point(|e| e.deliver_at <= now);
        let batch: Vec<Envelope> = self.queue.drain(..due).collect();
        let mut out = Vec::with_capacity(batch.len());
        for env in batch {
            if now - env.sent_at > self.cfg.stale_timeout {
                self.counters.stale += 1;
                self.record(now, &env, Lifecycle::Stale);
            } else {
                self.counters.delivered += 1;
                self.record(now, &env, Lifecycle::Delivered);
                out.push(env);
            }
        }
        out
    }

    /// `sent == delivered + dropped + stale + queued`.
    pub fn conserved(&self) -> bool {
        let c = &self.counters;
        c.sent == c.delivered + c.dropped + c.stale + self.queue.len() as u64
    }

    /// Lifecycle log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.log.iter().flatten() {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(rec).expect("records serialize")
            );
        }
        out
    }
}

/// Last heartbeat per endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LivenessRegistry {
    pub expiry: f64,
    last: BTreeMap<Endpoint, f64>,
}

impl LivenessRegistry {
    pub fn new(expiry: f64) -> Self {
        Self {
            expiry,
            last: BTreeMap::new(),
        }
    }

    pub fn heartbeat_tick(&mut self, endpoint: Endpoint, now: f64) {
        let e = self.last.entry(endpoint).or_insert(now);
        *e = e.max(now);
    }

    pub fn is_alive(&self, endpoint: Endpoint, now: f64) -> bool {
        self.last
            .get(&endpoint)
            .is_some_and(|&t| now - t <= self.expiry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ChannelConfig {
        ChannelConfig {
            capacity: 16,
            delay: DelayModel::Constant { secs: 0.001 },
            reorder_prob: 0.0,
            reorder_window: 0.0,
            drop_prob: 0.0,
            stale_timeout: 1.0,
        }
    }

    fn hb(now: f64) -> Envelope {
        Envelope::new(
            Endpoint::Draft,
            RequestId(0),
            RoundId(0),
            EnvelopeKind::Heartbeat,
            Payload::Empty,
            now,
        )
    }

    #[test]
    fn constant_delay() {
        let mut ch = BoundedChannel::new(cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..5 {
            let now = i as f64;
            match ch.send(hb(now), now, &mut rng) {
                SendResult::Queued { deliver_at } => assert!((deliver_at - now - 0.001).abs() < 1e-12),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn backpressure_at_capacity() {
        let mut ch = BoundedChannel::new(ChannelConfig {
            capacity: 1,
            ..cfg()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(ch.send(hb(0.0), 0.0, &mut rng), SendResult::Queued { .. }));
        assert!(matches!(ch.send(hb(0.0), 0.0, &mut rng), SendResult::Backpressure(_)));
        assert_eq!(ch.len(), 1);
        assert!(ch.conserved());
    }

    #[test]
    fn poll_cases() {
        let mut ch = BoundedChannel::new(cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ch.poll(0.0).is_empty());
        ch.send(hb(0.0), 0.0, &mut rng);
        assert!(ch.poll(0.0005).is_empty());
        assert_eq!(ch.len(), 1);
        assert_eq!(ch.poll(0.001).len(), 1);

        ch.send(hb(1.0), 1.0, &mut rng);
        assert!(ch.poll(2.5).is_empty());
        assert_eq!(ch.counters.stale, 1);
        assert!(ch.conserved());
    }

    #[test]
    fn drop_rate() {
        let mut ch = BoundedChannel::new(ChannelConfig {
            capacity: usize::MAX,
            drop_prob: 0.1,
            ..cfg()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        for _ in 0..n {
            ch.send(hb(0.0), 0.0, &mut rng);
        }
        let delivered = ch.poll(0.5).len();
        let frac = delivered as f64 / n as f64;
        assert!((frac - 0.9).abs() < 0.005, "{frac}");
        assert!(ch.conserved());
    }

    #[test]
    fn reorder_lets_later_sends_overtake() {
        let mut ch = BoundedChannel::new(ChannelConfig {
            reorder_prob: 0.5,
            reorder_window: 0.01,
            capacity: 1000,
            ..cfg()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let t = i as f64 * 0.0001;
            ch.send(hb(t), t, &mut rng);
        }
        let out = ch.poll(1.0);
        assert!(out.windows(2).all(|w| w[0].deliver_at <= w[1].deliver_at));
        assert!(out.windows(2).any(|w| w[0].sent_at > w[1].sent_at));
    }

    #[test]
    fn liveness() {
        let mut reg = LivenessRegistry::new(3.0);
        assert!(!reg.is_alive(Endpoint::Draft, 0.0));
        reg.heartbeat_tick(Endpoint::Draft, 0.0);
        assert!(reg.is_alive(Endpoint::Draft, 2.0));
        assert!(!reg.is_alive(Endpoint::Draft, 4.0));
    }

    #[test]
    fn log_lines() {
        let mut ch = BoundedChannel::new(cfg()).with_log();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ch.send(hb(0.0), 0.0, &mut rng);
        ch.poll(1.0);
        let log = ch.log_jsonl();
        assert_eq!(log.lines().count(), 2);
        assert!(log.contains("\"delivered\""));
    }
}
