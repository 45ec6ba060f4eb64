//! Deterministic discrete-event simulation of a target server and a remote
//! draft server talking over simulated channels.

pub mod sweep;
pub mod workload;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_distr::{Distribution, Exp1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, SimConfig};
use crate::draft::{
    DraftLatencyModel, DraftQuery, DraftServer, DraftServerConfig, DraftStepTrace, QueryPurpose,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::oracle::{mix64, KeyedAgreement, TokenStreamOracle};
use crate::target::{
    assemble_ordinary, assemble_parallel, commit_round, compute_rollback_set, fallback_candidate,
    observe_rollback_ratio, reuse_or_discard_suffix, CandidateKind,
    CircuitBreakerState, ModeController, RequestState, RollbackSample, RollbackTracker,
    RoundOutcome, RoundTrace, ThresholdRule, VerificationBatch,
};
use crate::transport::{
    BoundedChannel, ChannelConfig, ChannelCounters, Endpoint, Envelope, EnvelopeKind,
    LivenessRegistry, Payload, SendResult,
};
use crate::types::{Mode, RequestId, RoundId, SpeculativeSegment, Token};

pub use sweep::{run_sweep, SweepPoint};
pub use workload::{generate_arrivals, generate_background, TrafficClass, WorkItem, Workload};

/// Coordination policy under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolicyVariant {
    /// Target-only one-token decoding; never queries the draft.
    Ar,
    /// Serialized speculation: every round waits for a fresh draft segment.
    Ordinary,
    /// Overlapped speculation with padded rollback candidates.
    Parallel,
    /// Switches between the two per round.
    Hybrid,
}

impl PolicyVariant {
    pub const ALL: [PolicyVariant; 4] = [
        PolicyVariant::Ar,
        PolicyVariant::Ordinary,
        PolicyVariant::Parallel,
        PolicyVariant::Hybrid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyVariant::Ar => "AR",
            PolicyVariant::Ordinary => "ORDINARY",
            PolicyVariant::Parallel => "PARALLEL",
            PolicyVariant::Hybrid => "HYBRID",
        }
    }

    fn threshold_rule(self) -> ThresholdRule {
        match self {
            PolicyVariant::Hybrid => ThresholdRule::Adaptive,
            PolicyVariant::Ordinary => ThresholdRule::AlwaysOrdinary,
            PolicyVariant::Parallel | PolicyVariant::Ar => ThresholdRule::AlwaysParallel,
        }
    }

    /// Whether the draft prepares next-round continuations during verification.
    fn prepares(self) -> bool {
        matches!(self, PolicyVariant::Parallel | PolicyVariant::Hybrid)
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AR" => Ok(PolicyVariant::Ar),
            "ORDINARY" => Ok(PolicyVariant::Ordinary),
            "PARALLEL" => Ok(PolicyVariant::Parallel),
            "HYBRID" => Ok(PolicyVariant::Hybrid),
            other => Err(Error::Parse(format!("unknown variant `{other}`"))),
        }
    }
}

/// True iff the draft cannot produce γ tokens within one verification.
pub fn conservative_mode_check(gamma: usize, t_d_mix: f64, t_t: f64) -> bool {
    gamma as f64 * t_d_mix > t_t
}

/// Round latency once the draft side dominates.
pub fn effective_round_latency(gamma: usize, t_d_mix: f64, t_t: f64) -> f64 {
    if conservative_mode_check(gamma, t_d_mix, t_t) {
        gamma as f64 * t_d_mix
    } else {
        t_t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Arrival(usize),
    BackgroundArrival(usize),
    TargetVerifyDone(RoundId),
    DraftRoundDone,
    /// Channel delivery towards the given endpoint.
    Delivery(Endpoint),
    Heartbeat,
    RequestDone(RequestId),
    ReplyDeadline(RoundId),
    DraftKick,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    /// Reversed so that `BinaryHeap` pops the earliest `(at, seq)` first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Extra recording switches for [`run_detailed`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub transport_log: bool,
    pub draft_trace: bool,
}

/// A request that reached its output length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishedRequest {
    pub id: RequestId,
    pub arrival: f64,
    pub finished_at: f64,
    pub committed: Vec<Token>,
    /// Sum of per-round committed deltas.
    pub delta_sum: usize,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: MetricsReport,
    pub requests: Vec<FinishedRequest>,
    pub rounds: Vec<RoundTrace>,
    pub draft_trace: Vec<DraftStepTrace>,
    /// JSON lines, target-to-draft channel then draft-to-target channel.
    pub transport_log: String,
    pub max_concurrency: usize,
    pub events: u64,
    /// Every event time in execution order is non-decreasing.
    pub clock_monotone: bool,
    pub transport_conserved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plan {
    Fallback,
    Cached,
    Repair,
    Padded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Repairing(RoundId),
    Verifying(RoundId),
    AwaitPrepares(RoundId),
}

struct Active {
    state: RequestState,
    arrival: f64,
    prompt_len: usize,
    /// Committed length the draft is known to hold.
    base: usize,
    repair_slot: Option<RoundId>,
    prepare_slot: Option<RoundId>,
    /// Send times of the outstanding repair and prepare queries.
    repair_sent: f64,
    prepare_sent: f64,
    plan: Plan,
    delta_sum: usize,
}

const SEED_ARRIVALS: u64 = 0x01;
const SEED_BACKGROUND: u64 = 0x02;
const SEED_DOWNLINK: u64 = 0x03;
const SEED_UPLINK: u64 = 0x04;

fn sub_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}

/// Target workload described by the config: an arrival file if set,
/// otherwise `num_requests` Poisson arrivals at `qps`.
pub fn workload_for(config: &SimConfig) -> Result<Workload> {
    if let Some(path) = &config.arrivals_file {
        return Workload::from_arrival_file(std::path::Path::new(path), config.prompt_len, config.output_len);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, SEED_ARRIVALS));
    Ok(generate_arrivals(config.qps, config.num_requests, &mut rng)
        .with_lengths(config.prompt_len, config.output_len))
}

/// Runs one simulation and returns its report.
pub fn run(config: &SimConfig, variant: PolicyVariant, workload: &Workload) -> Result<MetricsReport> {
    run_detailed(config, variant, workload, SimOptions::default()).map(|o| o.report)
}

/// Runs one simulation on the workload described by the config itself.
pub fn run_config(config: &SimConfig, variant: PolicyVariant) -> Result<MetricsReport> {
    run(config, variant, &workload_for(config)?)
}

/// Runs one simulation and keeps per-request sequences and traces.
pub fn run_detailed(
    config: &SimConfig,
    variant: PolicyVariant,
    workload: &Workload,
    opts: SimOptions,
) -> Result<SimOutput> {
    let validated = validate_config(config.clone())?;
    let mut sim = Simulator::new(validated.config, variant, workload, opts);
    sim.execute()?;
    Ok(sim.finish())
}

struct Simulator {
    cfg: SimConfig,
    variant: PolicyVariant,
    oracle: TokenStreamOracle,
    draft: DraftServer<KeyedAgreement>,
    to_draft: BoundedChannel,
    to_target: BoundedChannel,
    rng_down: ChaCha8Rng,
    /// Draws sustained background inter-arrival gaps.
    bg_rng: ChaCha8Rng,
    rng_up: ChaCha8Rng,
    outbox_down: VecDeque<Envelope>,
    outbox_up: VecDeque<Envelope>,
    liveness: LivenessRegistry,

    events: BinaryHeap<SimEvent>,
    seq: u64,
    now: f64,
    event_count: u64,
    clock_monotone: bool,
    kick_pending: bool,

    targets: Vec<WorkItem>,
    background: Vec<WorkItem>,
    waiting: VecDeque<WorkItem>,
    active: BTreeMap<RequestId, Active>,
    max_concurrency: usize,

    round: RoundId,
    phase: Phase,
    round_mode: Mode,
    round_speculative: bool,
    round_queries: usize,
    round_timely: usize,
    round_tt: f64,
    round_late: usize,
    dispatch_td_mix: f64,
    dispatched_at: f64,
    conservative: bool,
    repaired: BTreeMap<RequestId, SpeculativeSegment>,
    prepared: BTreeMap<RequestId, SpeculativeSegment>,
    batch: Option<VerificationBatch>,
    outcomes: Vec<RoundOutcome>,

    controller: ModeController,
    tracker: RollbackTracker,
    breaker: CircuitBreakerState,
    observed_td_mix: f64,

    finished: Vec<FinishedRequest>,
    traces: Vec<RoundTrace>,
    delta_sum: u64,
    request_rounds: u64,
    spec_delta_sum: u64,
    spec_rounds: u64,
    replies_rejected: u64,
    repair_timeouts: u64,
    prepare_misses: u64,
    disabled_rounds: u64,
    conservative_rounds: u64,
    first_arrival: Option<f64>,
    end_time: f64,
    last_progress: f64,
    done: bool,
}

impl Simulator {
    fn new(cfg: SimConfig, variant: PolicyVariant, workload: &Workload, opts: SimOptions) -> Self {
        let oracle = TokenStreamOracle::new(cfg.seed);
        let draft_cfg = DraftServerConfig {
            alpha: cfg.effective_alpha(),
            latency: DraftLatencyModel {
                base: cfg.t_draft,
                slope: cfg.draft_slope,
                reference: cfg.draft_reference_batch(),
                context_cost: cfg.draft_context_cost,
            },
            capacity: cfg.draft_capacity,
            fairness_k: cfg.fairness_k,
            compress_p: cfg.compress_p,
        };
        let mut draft = DraftServer::new(draft_cfg, oracle, KeyedAgreement::new(cfg.seed));
        draft.keep_trace = opts.draft_trace;
        let channel = ChannelConfig {
            capacity: cfg.channel_capacity,
            delay: cfg.delay,
            reorder_prob: cfg.reorder_prob,
            reorder_window: cfg.reorder_window,
            drop_prob: cfg.drop_prob,
            stale_timeout: cfg.stale_timeout(),
        };
        let mut to_draft = BoundedChannel::new(channel);
        let mut to_target = BoundedChannel::new(channel);
        if opts.transport_log {
            to_draft = to_draft.with_log();
            to_target = to_target.with_log();
        }
        let mut bg_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_BACKGROUND));
        let background = if cfg.background_requests == 0 {
            Vec::new()
        } else {
            generate_background(
                cfg.background_qps,
                cfg.background_requests,
                cfg.background_output_len,
                cfg.prompt_len,
                &mut bg_rng,
            )
            .items
        };
        let mut liveness = LivenessRegistry::new(cfg.heartbeat_expiry());
        liveness.heartbeat_tick(Endpoint::Draft, 0.0);

        let mut targets = workload.items.clone();
        targets.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));

        Self {
            controller: ModeController::new(
                variant.threshold_rule(),
                cfg.gamma,
                cfg.accept_len,
                cfg.ema_decay,
            ),
            tracker: RollbackTracker::new(cfg.ema_decay),
            breaker: CircuitBreakerState::new(cfg.breaker_threshold, cfg.breaker_cooldown),
            observed_td_mix: cfg.t_draft,
            bg_rng,
            rng_down: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_DOWNLINK)),
            rng_up: ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_UPLINK)),
            cfg,
            variant,
            oracle,
            draft,
            to_draft,
            to_target,
            outbox_down: VecDeque::new(),
            outbox_up: VecDeque::new(),
            liveness,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            event_count: 0,
            clock_monotone: true,
            kick_pending: false,
            targets,
            background,
            waiting: VecDeque::new(),
            active: BTreeMap::new(),
            max_concurrency: 0,
            round: RoundId(0),
            phase: Phase::Idle,
            round_mode: Mode::Parallel,
            round_speculative: false,
            round_queries: 0,
            round_timely: 0,
            round_tt: 0.0,
            round_late: 0,
            dispatch_td_mix: 0.0,
            dispatched_at: 0.0,
            conservative: false,
            repaired: BTreeMap::new(),
            prepared: BTreeMap::new(),
            batch: None,
            outcomes: Vec::new(),
            finished: Vec::new(),
            traces: Vec::new(),
            delta_sum: 0,
            request_rounds: 0,
            spec_delta_sum: 0,
            spec_rounds: 0,
            replies_rejected: 0,
            repair_timeouts: 0,
            prepare_misses: 0,
            disabled_rounds: 0,
            conservative_rounds: 0,
            first_arrival: None,
            end_time: 0.0,
            last_progress: 0.0,
            done: false,
        }
    }

    /// Open-ended background traffic that lasts until the target finishes.
    fn sustained_background(&self) -> bool {
        self.cfg.background_requests == 0 && self.cfg.background_qps > 0.0
    }

    fn background_gap(&mut self) -> f64 {
        let e: f64 = Exp1.sample(&mut self.bg_rng);
        e / self.cfg.background_qps
    }

    fn schedule(&mut self, at: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(SimEvent {
            at,
            seq: self.seq,
            kind,
        });
    }

    fn execute(&mut self) -> Result<()> {
        if self.targets.is_empty() {
            self.done = true;
            return Ok(());
        }
        for i in 0..self.targets.len() {
            let at = self.targets[i].arrival;
            self.schedule(at, EventKind::Arrival(i));
        }
        for i in 0..self.background.len() {
            let at = self.background[i].arrival;
            self.schedule(at, EventKind::BackgroundArrival(i));
        }
        if self.sustained_background() {
            let at = self.background_gap();
            self.schedule(at, EventKind::BackgroundArrival(0));
        }
        if self.variant != PolicyVariant::Ar {
            self.schedule(0.0, EventKind::Heartbeat);
        }
        while let Some(ev) = self.events.pop() {
            if ev.at < self.now {
                self.clock_monotone = false;
            }
            self.now = ev.at;
            self.event_count += 1;
            if !self.active.is_empty() && self.now - self.last_progress > self.cfg.livelock_horizon {
                return Err(Error::Livelock {
                    now: self.now,
                    idle_secs: self.now - self.last_progress,
                    round: self.round,
                });
            }
            self.handle(ev.kind)?;
            if self.done {
                return Ok(());
            }
        }
        Err(Error::Livelock {
            now: self.now,
            idle_secs: self.now - self.last_progress,
            round: self.round,
        })
    }

    fn handle(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::Arrival(i) => {
                let item = self.targets[i].clone();
                self.first_arrival.get_or_insert(item.arrival);
                self.waiting.push_back(item);
                // let simultaneous arrivals join the same round
                let more = self
                    .events
                    .peek()
                    .is_some_and(|e| e.at == self.now && matches!(e.kind, EventKind::Arrival(_)));
                if !more {
                    self.try_start_round()?;
                }
            }
            EventKind::BackgroundArrival(i) => {
                if self.sustained_background() {
                    self.draft
                        .add_regular(self.cfg.background_output_len, self.cfg.prompt_len, self.now);
                    let at = self.now + self.background_gap();
                    self.schedule(at, EventKind::BackgroundArrival(i + 1));
                } else {
                    let item = &self.background[i];
                    self.draft
                        .add_regular(item.output_len, item.prompt_len, self.now);
                }
                self.kick();
            }
            EventKind::Heartbeat => {
                let env = Envelope::new(
                    Endpoint::Draft,
                    RequestId(u64::MAX),
                    RoundId(0),
                    EnvelopeKind::Heartbeat,
                    Payload::Empty,
                    self.now,
                );
                self.send(Endpoint::Target, env);
                let next = self.now + self.cfg.heartbeat_interval;
                self.schedule(next, EventKind::Heartbeat);
            }
            EventKind::Delivery(Endpoint::Draft) => {
                let envs = self.to_draft.poll(self.now);
                self.flush_outbox(Endpoint::Draft);
                for env in envs {
                    self.draft_receive(env);
                }
                self.kick();
            }
            EventKind::Delivery(Endpoint::Target) => {
                let envs = self.to_target.poll(self.now);
                self.flush_outbox(Endpoint::Target);
                for env in envs {
                    self.target_receive(env)?;
                }
            }
            EventKind::DraftKick => {
                self.kick_pending = false;
                if let Some(dt) = self.draft.start_step(self.now) {
                    let at = self.now + dt;
                    self.schedule(at, EventKind::DraftRoundDone);
                }
            }
            EventKind::DraftRoundDone => {
                for reply in self.draft.finish_step(self.now) {
                    let env = Envelope::new(
                        Endpoint::Draft,
                        reply.request,
                        reply.round,
                        EnvelopeKind::DraftReply,
                        Payload::Reply(reply),
                        self.now,
                    );
                    self.send(Endpoint::Target, env);
                }
                self.kick();
            }
            EventKind::TargetVerifyDone(round) => {
                if self.phase == Phase::Verifying(round) {
                    self.on_verify_done(round)?;
                }
            }
            EventKind::ReplyDeadline(round) => match self.phase {
                Phase::Repairing(r) if r == round => {
                    for a in self.active.values_mut() {
                        if a.repair_slot == Some(round) {
                            a.repair_slot = None;
                            a.plan = Plan::Fallback;
                            self.repair_timeouts += 1;
                        }
                    }
                    self.dispatch()?;
                }
                Phase::AwaitPrepares(r) if r == round => self.finish_round()?,
                _ => {}
            },
            EventKind::RequestDone(id) => {
                if self.variant != PolicyVariant::Ar {
                    let env = Envelope::new(
                        Endpoint::Target,
                        id,
                        self.round,
                        EnvelopeKind::SyncPrefix,
                        Payload::Release,
                        self.now,
                    );
                    self.send(Endpoint::Draft, env);
                }
                if self.finished.len() == self.targets.len() {
                    self.end_time = self.now;
                    self.done = true;
                }
            }
        }
        Ok(())
    }

    fn send(&mut self, to: Endpoint, env: Envelope) {
        let (ch, rng) = match to {
            Endpoint::Draft => (&mut self.to_draft, &mut self.rng_down),
            Endpoint::Target => (&mut self.to_target, &mut self.rng_up),
        };
        match ch.send(env, self.now, rng) {
            SendResult::Queued { deliver_at } => self.schedule(deliver_at, EventKind::Delivery(to)),
            SendResult::Dropped => {}
            SendResult::Backpressure(env) => match to {
                Endpoint::Draft => self.outbox_down.push_back(*env),
                Endpoint::Target => self.outbox_up.push_back(*env),
            },
        }
    }

    fn flush_outbox(&mut self, to: Endpoint) {
        loop {
            let queue = match to {
                Endpoint::Draft => &mut self.outbox_down,
                Endpoint::Target => &mut self.outbox_up,
            };
            let full = match to {
                Endpoint::Draft => self.to_draft.len() >= self.to_draft.cfg.capacity,
                Endpoint::Target => self.to_target.len() >= self.to_target.cfg.capacity,
            };
            if full {
                return;
            }
            let Some(env) = queue.pop_front() else {
                return;
            };
            self.send(to, env);
        }
    }

    fn kick(&mut self) {
        if !self.kick_pending && !self.draft.is_busy() && self.draft.has_work() {
            self.kick_pending = true;
            let now = self.now;
            self.schedule(now, EventKind::DraftKick);
        }
    }

    fn draft_stalled(&self) -> bool {
        match (self.cfg.draft_stall_start, self.cfg.draft_stall_end) {
            (Some(a), Some(b)) => self.now >= a && self.now < b,
            _ => false,
        }
    }

    fn draft_receive(&mut self, env: Envelope) {
        match env.payload {
            Payload::Query(q) => {
                if !self.draft_stalled() {
                    self.draft.receive_query(q, self.now);
                }
            }
            Payload::Release => self.draft.close_session(env.request),
            Payload::Reply(_) | Payload::Empty => {}
        }
    }

    fn target_receive(&mut self, env: Envelope) -> Result<()> {
        match env.payload {
            Payload::Reply(reply) => {
                let Some(a) = self.active.get_mut(&reply.request) else {
                    self.replies_rejected += 1;
                    return Ok(());
                };
                let key = (reply.request, reply.round);
                let valid = match reply.purpose {
                    QueryPurpose::Repair => {
                        self.phase == Phase::Repairing(reply.round)
                            && crate::target::handle_draft_reply(key, a.repair_slot.map(|r| (reply.request, r)))
                    }
                    QueryPurpose::Prepare => {
                        matches!(self.phase, Phase::Verifying(r) | Phase::AwaitPrepares(r) if r == reply.round)
                            && crate::target::handle_draft_reply(key, a.prepare_slot.map(|r| (reply.request, r)))
                    }
                };
                if !valid {
                    self.replies_rejected += 1;
                    return Ok(());
                }
                a.base = a.base.max(reply.committed_pos);
                // per-token draft latency as the target sees it, transport included
                let sent = match reply.purpose {
                    QueryPurpose::Repair => a.repair_sent,
                    QueryPurpose::Prepare => a.prepare_sent,
                };
                if !reply.segment.is_empty() {
                    self.observed_td_mix = (self.now - sent) / reply.segment.len() as f64;
                }
                self.round_timely += 1;
                match reply.purpose {
                    QueryPurpose::Repair => {
                        a.repair_slot = None;
                        self.repaired.insert(reply.request, reply.segment);
                        if self.active.values().all(|a| a.repair_slot.is_none()) {
                            self.dispatch()?;
                        }
                    }
                    QueryPurpose::Prepare => {
                        a.prepare_slot = None;
                        self.prepared.insert(reply.request, reply.segment);
                        if matches!(self.phase, Phase::AwaitPrepares(_))
                            && self.active.values().all(|a| a.prepare_slot.is_none())
                        {
                            self.finish_round()?;
                        }
                    }
                }
            }
            Payload::Empty if env.kind == EnvelopeKind::Heartbeat => {
                self.liveness.heartbeat_tick(Endpoint::Draft, self.now);
            }
            _ => {}
        }
        Ok(())
    }

    fn t_target_for(&self, batch: usize) -> f64 {
        self.cfg.t_target + self.cfg.target_slope * batch as f64
    }

    fn query_for(&self, a: &Active, purpose: QueryPurpose, start: usize, tail: &[Token]) -> DraftQuery {
        let st = &a.state;
        let base = a.base.min(st.committed_pos);
        let mut tokens = st.committed[base..].to_vec();
        tokens.extend_from_slice(tail);
        DraftQuery {
            request: st.id,
            round: self.round,
            purpose,
            start,
            count: match purpose {
                QueryPurpose::Repair => self.cfg.gamma - 1,
                QueryPurpose::Prepare => self.cfg.gamma,
            },
            base,
            tokens,
            committed_pos: st.committed_pos,
            prompt_len: a.prompt_len,
        }
    }

    fn send_query(&mut self, q: DraftQuery) {
        let env = Envelope::new(
            Endpoint::Target,
            q.request,
            q.round,
            EnvelopeKind::DraftQuery,
            Payload::Query(q),
            self.now,
        );
        self.send(Endpoint::Draft, env);
        self.round_queries += 1;
    }

    fn try_start_round(&mut self) -> Result<()> {
        if self.phase != Phase::Idle {
            return Ok(());
        }
        while self.active.len() < self.cfg.batch_size {
            let Some(item) = self.waiting.pop_front() else {
                break;
            };
            if self.active.is_empty() {
                self.last_progress = self.now;
            }
            let state = RequestState::new(item.id, item.output_len);
            if state.done {
                self.finished.push(FinishedRequest {
                    id: item.id,
                    arrival: item.arrival,
                    finished_at: self.now,
                    committed: Vec::new(),
                    delta_sum: 0,
                });
                let now = self.now;
                self.schedule(now, EventKind::RequestDone(item.id));
                continue;
            }
            self.active.insert(
                item.id,
                Active {
                    state,
                    arrival: item.arrival,
                    prompt_len: item.prompt_len,
                    base: 0,
                    repair_slot: None,
                    prepare_slot: None,
                    repair_sent: 0.0,
                    prepare_sent: 0.0,
                    plan: Plan::Fallback,
                    delta_sum: 0,
                },
            );
        }
        self.max_concurrency = self.max_concurrency.max(self.active.len());
        if self.active.is_empty() {
            return Ok(());
        }

        self.round = self.round.next();
        self.round_queries = 0;
        self.round_timely = 0;
        self.round_mode = self.controller.mode;
        let breaker_open = self.breaker.is_enabled(self.round);
        self.round_speculative = self.variant != PolicyVariant::Ar
            && breaker_open
            && self.liveness.is_alive(Endpoint::Draft, self.now);
        if self.variant != PolicyVariant::Ar && !breaker_open {
            self.disabled_rounds += 1;
        }

        let mut repairs = Vec::new();
        for a in self.active.values_mut() {
            let st = &mut a.state;
            a.plan = if st.pending_bonus.is_none() || !self.round_speculative {
                Plan::Fallback
            } else if self.variant == PolicyVariant::Ordinary {
                Plan::Repair
            } else if !st.in_rollback && st.cached_segment.is_some() {
                Plan::Cached
            } else if self.round_mode == Mode::Ordinary {
                Plan::Repair
            } else {
                Plan::Padded
            };
            if matches!(a.plan, Plan::Fallback | Plan::Repair) {
                st.cached_segment = None;
                st.in_rollback = true;
            }
            if a.plan == Plan::Repair {
                repairs.push(st.id);
            }
        }
        if repairs.is_empty() {
            return self.dispatch();
        }
        for id in repairs {
            let a = &self.active[&id];
            let q = self.query_for(a, QueryPurpose::Repair, a.state.committed_pos, &[]);
            let a = self.active.get_mut(&id).expect("active");
            a.repair_slot = Some(self.round);
            a.repair_sent = self.now;
            self.send_query(q);
        }
        self.phase = Phase::Repairing(self.round);
        let deadline = self.now + self.cfg.reply_timeout();
        self.schedule(deadline, EventKind::ReplyDeadline(self.round));
        Ok(())
    }

    fn dispatch(&mut self) -> Result<()> {
        let round = self.round;
        let gamma = self.cfg.gamma;
        let mut fallback = Vec::new();
        let mut spec: Vec<&RequestState> = Vec::new();
        let mut any_repair = false;
        for a in self.active.values() {
            match a.plan {
                Plan::Fallback => fallback.push(fallback_candidate(&a.state)),
                Plan::Repair => {
                    any_repair = true;
                    spec.push(&a.state);
                }
                Plan::Cached | Plan::Padded => spec.push(&a.state),
            }
        }
        let mut batch = if any_repair || self.round_mode == Mode::Ordinary {
            assemble_ordinary(round, &spec, &self.repaired, gamma)?
        } else {
            assemble_parallel(round, &spec, gamma)?
        };
        batch.mode = if self.variant == PolicyVariant::Ordinary {
            Mode::Ordinary
        } else {
            self.round_mode
        };
        batch.merge(fallback);

        let mut prepares = Vec::new();
        if self.round_speculative && self.variant.prepares() {
            for c in &batch.candidates {
                let a = &self.active[&c.request];
                let real = c.real_len();
                let from = a.state.committed_pos - c.start;
                let tail = &c.tokens[from.min(real)..real];
                prepares.push(self.query_for(a, QueryPurpose::Prepare, c.start + real, tail));
            }
        }
        let any_prepare = !prepares.is_empty();
        for q in prepares {
            let a = self.active.get_mut(&q.request).expect("active");
            a.prepare_slot = Some(round);
            a.prepare_sent = self.now;
            self.send_query(q);
        }

        let tt = self.t_target_for(batch.len());
        self.round_tt = tt;
        self.dispatch_td_mix = self.observed_td_mix;
        self.conservative = any_prepare && conservative_mode_check(gamma, self.observed_td_mix, tt);
        if self.conservative {
            self.conservative_rounds += 1;
        }
        self.dispatched_at = self.now;
        self.batch = Some(batch);
        self.phase = Phase::Verifying(round);
        let at = self.now + tt;
        self.schedule(at, EventKind::TargetVerifyDone(round));
        Ok(())
    }

    fn on_verify_done(&mut self, round: RoundId) -> Result<()> {
        let batch = self.batch.as_ref().expect("verifying round has a batch");
        self.outcomes = batch
            .candidates
            .iter()
            .map(|c| RoundOutcome {
                candidate: c.clone(),
                outcome: self.oracle.verify(c.request, c.start, &c.tokens),
            })
            .collect();
        self.round_late = self.active.values().filter(|a| a.prepare_slot.is_some()).count();
        if self.conservative && self.round_late > 0 {
            self.phase = Phase::AwaitPrepares(round);
            let deadline = self.dispatched_at + self.cfg.reply_timeout();
            if deadline <= self.now {
                return self.finish_round();
            }
            self.schedule(deadline, EventKind::ReplyDeadline(round));
            return Ok(());
        }
        self.finish_round()
    }

    fn finish_round(&mut self) -> Result<()> {
        let round = self.round;
        let batch = self.batch.take().expect("finishing round has a batch");
        let outcomes = std::mem::take(&mut self.outcomes);
        let rollback = compute_rollback_set(&outcomes, &self.prepared);

        let mut committed_delta = 0usize;
        let mut spec_sum = 0usize;
        let mut spec_n = 0usize;
        let mut kinds = [0usize; 4];
        let mut sample = RollbackSample::default();
        for o in &outcomes {
            sample.add(
                o,
                self.prepared.get(&o.candidate.request),
                rollback.contains(&o.candidate.request),
            );
            let id = o.candidate.request;
            let a = self.active.get_mut(&id).expect("batched request is active");
            if a.prepare_slot.take().is_some() {
                self.prepare_misses += 1;
            }
            let delta = commit_round(&mut a.state, &o.outcome)?;
            a.delta_sum += delta;
            let seg = self.prepared.remove(&id);
            let kept = reuse_or_discard_suffix(&mut a.state, &o.outcome, seg);
            debug_assert_eq!(kept, !rollback.contains(&id));
            committed_delta += delta;
            kinds[match o.candidate.kind {
                CandidateKind::Cached => 0,
                CandidateKind::Repaired => 1,
                CandidateKind::Padded => 2,
                CandidateKind::Fallback => 3,
            }] += 1;
            if o.candidate.kind.is_speculative() {
                spec_sum += delta;
                spec_n += 1;
            }
        }
        self.delta_sum += committed_delta as u64;
        self.request_rounds += outcomes.len() as u64;
        self.spec_delta_sum += spec_sum as u64;
        self.spec_rounds += spec_n as u64;
        if committed_delta > 0 {
            self.last_progress = self.now;
        }

        let r_hat = observe_rollback_ratio(rollback.len(), batch.len());
        if self.round_queries > 0 {
            self.breaker.step(self.round_timely > 0, round);
        }
        self.controller.observe(spec_sum as f64, spec_n);
        self.tracker.observe(&sample);
        let r_decision = self.tracker.estimate(self.cfg.rollback_estimator, r_hat);
        let (_, r_star) = self.controller.decide(
            r_decision,
            self.cfg.gamma,
            self.round_tt,
            self.observed_td_mix,
        );
        self.traces.push(RoundTrace {
            round,
            at: self.now,
            mode: batch.mode,
            batch: batch.len(),
            r_hat,
            r_decision,
            r_star,
            committed_delta,
            rollback_count: rollback.len(),
            speculation_enabled: self.round_speculative,
            conservative: self.conservative,
            t_draft_mix: self.dispatch_td_mix,
            queries: self.round_queries,
            timely_replies: self.round_timely,
            late_prepares: self.round_late,
            cached: kinds[0],
            repaired: kinds[1],
            padded: kinds[2],
            fallback: kinds[3],
        });

        let done: Vec<RequestId> = self
            .active
            .iter()
            .filter(|(_, a)| a.state.done)
            .map(|(&id, _)| id)
            .collect();
        for id in done {
            let a = self.active.remove(&id).expect("present");
            self.finished.push(FinishedRequest {
                id,
                arrival: a.arrival,
                finished_at: self.now,
                committed: a.state.committed,
                delta_sum: a.delta_sum,
            });
            let now = self.now;
            self.schedule(now, EventKind::RequestDone(id));
        }

        self.repaired.clear();
        self.prepared.clear();
        for a in self.active.values_mut() {
            a.repair_slot = None;
            a.prepare_slot = None;
        }
        self.phase = Phase::Idle;
        self.try_start_round()
    }

    fn finish(self) -> SimOutput {
        let start = self.first_arrival.unwrap_or(0.0);
        let duration = (self.end_time - start).max(0.0);
        let total_committed: u64 = self.finished.iter().map(|f| f.committed.len() as u64).sum();
        let per_second = |x: f64| if duration > 0.0 { x / duration } else { 0.0 };
        let series: Vec<f64> = self.traces.iter().map(|t| t.r_hat).collect();
        let modes: Vec<Mode> = self.traces.iter().map(|t| t.mode).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mut counters = ChannelCounters::default();
        counters.add(&self.to_draft.counters);
        counters.add(&self.to_target.counters);
        let report = MetricsReport {
            variant: self.variant.as_str().to_string(),
            seed: self.cfg.seed,
            target_throughput: per_second(total_committed as f64),
            draft_throughput: per_second(self.draft.stats.regular_tokens as f64),
            mean_accepted_length: if self.request_rounds > 0 {
                self.delta_sum as f64 / self.request_rounds as f64
            } else {
                0.0
            },
            mean_speculative_accepted_length: if self.spec_rounds > 0 {
                self.spec_delta_sum as f64 / self.spec_rounds as f64
            } else {
                0.0
            },
            mean_rollback_ratio: mean(&series),
            parallel_fraction: if modes.is_empty() {
                0.0
            } else {
                modes.iter().filter(|m| **m == Mode::Parallel).count() as f64 / modes.len() as f64
            },
            rounds: self.traces.len() as u64,
            request_rounds: self.request_rounds,
            sim_duration: duration,
            total_committed,
            requests_finished: self.finished.len() as u64,
            breaker_activations: u64::from(self.breaker.activations),
            disabled_rounds: self.disabled_rounds,
            conservative_rounds: self.conservative_rounds,
            envelopes_sent: counters.sent,
            envelopes_delivered: counters.delivered,
            envelopes_dropped: counters.dropped,
            envelopes_stale: counters.stale,
            backpressure_events: counters.backpressure,
            replies_rejected: self.replies_rejected,
            repair_timeouts: self.repair_timeouts,
            prepare_misses: self.prepare_misses,
            sync_gaps: self.draft.stats.sync_gaps,
            max_regular_wait: u64::from(self.draft.stats.max_regular_wait),
            rollback_ratio_series: series,
            mode_timeline: modes,
        };
        let mut log = self.to_draft.log_jsonl();
        log.push_str(&self.to_target.log_jsonl());
        SimOutput {
            report,
            requests: self.finished,
            rounds: self.traces,
            draft_trace: self.draft.trace,
            transport_log: log,
            max_concurrency: self.max_concurrency,
            events: self.event_count,
            clock_monotone: self.clock_monotone,
            transport_conserved: self.to_draft.conserved() && self.to_target.conserved(),
        }
    }
}

/// Checks every finished request against the reference stream.
pub fn lossless(oracle: &TokenStreamOracle, requests: &[FinishedRequest]) -> bool {
    requests
        .iter()
        .all(|r| r.committed == oracle.reference_slice(r.id, 0, r.committed.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(alpha: f64) -> SimConfig {
        SimConfig {
            batch_size: 4,
            num_requests: 8,
            output_len: 64,
            qps: 50.0,
            alpha,
            ..SimConfig::default()
        }
    }

    #[test]
    fn conservative_check_cases() {
        assert!(conservative_mode_check(4, 0.015, 0.050));
        assert!((effective_round_latency(4, 0.015, 0.050) - 0.060).abs() < 1e-12);
        assert!(!conservative_mode_check(4, 0.005, 0.050));
        assert!(!conservative_mode_check(4, 0.0125, 0.050));
    }

    #[test]
    fn variant_names() {
        for v in PolicyVariant::ALL {
            assert_eq!(v.as_str().parse::<PolicyVariant>().unwrap(), v);
        }
    }

    #[test]
    fn every_variant_finishes_losslessly() {
        for v in PolicyVariant::ALL {
            let cfg = small(0.7);
            let w = workload_for(&cfg).unwrap();
            let out = run_detailed(&cfg, v, &w, SimOptions::default()).unwrap();
            assert_eq!(out.requests.len(), 8, "{v}");
            assert!(lossless(&TokenStreamOracle::new(cfg.seed), &out.requests), "{v}");
            assert!(out.requests.iter().all(|r| r.committed.len() == 64));
            assert!(out.requests.iter().all(|r| r.delta_sum == 64));
            assert!(out.max_concurrency <= 4);
            assert!(out.clock_monotone);
            assert!(out.transport_conserved);
            let r = &out.report;
            assert!((r.committed_from_throughput() - r.total_committed as f64).abs() < 1e-6);
            assert_eq!(r.sync_gaps, 0, "{v}");
        }
    }

    #[test]
    fn ar_commits_one_token_per_round() {
        let cfg = small(0.7);
        let out = run_detailed(&cfg, PolicyVariant::Ar, &workload_for(&cfg).unwrap(), SimOptions::default()).unwrap();
        assert_eq!(out.report.mean_accepted_length, 1.0);
        assert_eq!(out.report.envelopes_sent, 0);
    }

    #[test]
    fn deterministic_reports() {
        let cfg = small(0.6);
        let a = run_config(&cfg, PolicyVariant::Hybrid).unwrap();
        let b = run_config(&cfg, PolicyVariant::Hybrid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SimConfig {
            gamma: 0,
            ..small(0.5)
        };
        assert!(matches!(run_config(&cfg, PolicyVariant::Hybrid), Err(Error::Config(_))));
    }

    #[test]
    fn perfect_draft_parallel_steady_state() {
        let cfg = SimConfig {
            qps: 0.0,
            ..small(1.0)
        };
        let out = run_detailed(&cfg, PolicyVariant::Parallel, &workload_for(&cfg).unwrap(), SimOptions::default()).unwrap();
        // each request falls back once for its prefill and is cached afterwards
        let sum = |f: fn(&RoundTrace) -> usize| out.rounds.iter().map(f).sum::<usize>();
        assert_eq!(sum(|t| t.fallback), 8);
        assert_eq!(sum(|t| t.padded + t.repaired), 0);
        assert!(out.rounds.iter().all(|t| t.rollback_count == 0));
        assert!((out.report.mean_speculative_accepted_length - 4.0).abs() < 0.2);
    }
}
