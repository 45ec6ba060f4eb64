//! Draft server: persistent per-request speculative sessions, divergence
//! recovery, speculative generation, prompt compression and the
//! speculative-priority scheduler shared with regular tenant traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::oracle::{draft_propose_with, DraftAgreement, TokenStreamOracle};
use crate::types::{RequestId, RoundId, SpeculativeSegment, Token};

/// Draft-side state of one target request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftSessionState {
    pub request: RequestId,
    /// Locally decoded output tokens.
    pub history: Vec<Token>,
    /// Latest speculative tokens, positioned right after `history`.
    pub segment: SpeculativeSegment,
    /// Tokens held in the (abstract) cache: `|history| + |segment|`.
    pub cache_cost: usize,
    pub paused: bool,
    /// Draft-side prompt, possibly compressed.
    pub prompt: Vec<Token>,
}

impl DraftSessionState {
    pub fn new(request: RequestId, prompt: Vec<Token>) -> Self {
        Self {
            request,
            history: Vec::new(),
            segment: SpeculativeSegment::new(Vec::new(), RoundId(0), 0),
            cache_cost: 0,
            paused: false,
            prompt,
        }
    }

    /// History followed by the speculative segment.
    pub fn local(&self) -> Vec<Token> {
        let mut v = self.history.clone();
        v.extend_from_slice(&self.segment.tokens);
        v
    }

    pub fn local_len(&self) -> usize {
        self.history.len() + self.segment.len()
    }

    /// Context length seen by a generation step.
    pub fn context_len(&self) -> usize {
        self.prompt.len() + self.local_len()
    }

    fn recount(&mut self) {
        self.cache_cost = self.history.len() + self.segment.len();
    }
}

/// First index where `prefix` and the session's local tokens disagree, or
/// the overlap length when they agree.
pub fn reconcile(state: &DraftSessionState, verified_prefix: &[Token]) -> usize {
    let local = state
        .history
        .iter()
        .chain(state.segment.tokens.iter())
        .copied();
    verified_prefix
        .iter()
        .zip(local)
        .take_while(|(a, b)| *a == b)
        .count()
}

/// Rolls the session back to `delta` and re-synchronizes it with the
/// verified prefix. Returns the number of cached tokens freed.
pub fn apply_recovery(state: &mut DraftSessionState, delta: usize, verified_prefix: &[Token]) -> usize {
    let local_len = state.local_len();
    if delta == verified_prefix.len() && delta == local_len {
        return 0;
    }
    let mut local = state.local();
    let keep = delta.min(local.len());
    local.truncate(keep);
    let freed = local_len - keep;
    local.extend_from_slice(&verified_prefix[keep.min(verified_prefix.len())..]);
    let end = local.len();
    state.history = local;
    state.segment = SpeculativeSegment::new(Vec::new(), state.segment.origin_round, end);
    state.paused = false;
    state.recount();
    freed
}

/// Folds the current segment into history, drafts `count` tokens at
/// `|history|`, records them as the new segment and pauses the session.
#[allow(clippy::too_many_arguments)]
pub fn generate_speculative<A: DraftAgreement + ?Sized>(
    state: &mut DraftSessionState,
    oracle: &TokenStreamOracle,
    count: usize,
    alpha: f64,
    agreement: &mut A,
    origin_round: RoundId,
) -> SpeculativeSegment {
    let seg = std::mem::replace(
        &mut state.segment,
        SpeculativeSegment::new(Vec::new(), origin_round, 0),
    );
    state.history.extend(seg.tokens);
    let start = state.history.len();
    let new = draft_propose_with(oracle, state.request, start, count, alpha, agreement, origin_round);
    state.segment = new.clone();
    state.paused = true;
    state.recount();
    new
}

/// Keeps the first and last `⌊p·S/2⌋` tokens. At p = 1 an odd-length
/// prompt loses its middle token.
pub fn compress_prompt(tokens: &[Token], p: f64) -> Vec<Token> {
    let s = tokens.len();
    let keep = ((p / 2.0) * s as f64).floor() as usize;
    if 2 * keep >= s {
        return tokens.to_vec();
    }
    let mut out = Vec::with_capacity(2 * keep);
    out.extend_from_slice(&tokens[..keep]);
    out.extend_from_slice(&tokens[s - keep..]);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueueClass {
    Speculative,
    Regular,
}

/// A unit of draft work waiting for a generation slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftQueueItem {
    pub class: QueueClass,
    pub id: u64,
    pub enqueued_at: f64,
}

/// Consecutive speculative rounds since regular traffic last ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessCounter {
    pub consecutive_speculative: u32,
    pub period: u32,
}

impl FairnessCounter {
    pub fn new(period: u32) -> Self {
        Self {
            consecutive_speculative: 0,
            period,
        }
    }
}

/// Outcome of one scheduling decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    /// Indices into the item slice.
    pub picked: Vec<usize>,
    /// True when the fairness period forced regular items to the front.
    pub forced_regular: bool,
}

/// Picks up to `capacity` items: speculative first, unless the fairness
/// counter has reached K and regular items are waiting. FIFO within a class.
pub fn schedule_round(
    items: &[DraftQueueItem],
    counter: &mut FairnessCounter,
    capacity: usize,
) -> Schedule {
    assert!(capacity >= 1, "scheduler capacity must be at least 1");
    let fifo = |class: QueueClass| {
        let mut idx: Vec<usize> = (0..items.len())
            .filter(|&i| items[i].class == class)
            .collect();
        idx.sort_by(|&a, &b| {
            items[a]
                .enqueued_at
                .total_cmp(&items[b].enqueued_at)
                .then(items[a].id.cmp(&items[b].id))
        });
        idx
    };
    let spec = fifo(QueueClass::Speculative);
    let regular = fifo(QueueClass::Regular);
    let forced = counter.consecutive_speculative >= counter.period && !regular.is_empty();
    let order: Vec<usize> = if forced {
        regular.iter().chain(spec.iter()).copied().collect()
    } else {
        spec.iter().chain(regular.iter()).copied().collect()
    };
    let picked: Vec<usize> = order.into_iter().take(capacity).collect();
    let any_spec = picked
        .iter()
        .any(|&i| items[i].class == QueueClass::Speculative);
    if forced || !any_spec {
        counter.consecutive_speculative = 0;
    } else {
        counter.consecutive_speculative = (counter.consecutive_speculative + 1).min(counter.period);
    }
    Schedule {
        picked,
        forced_regular: forced,
    }
}

/// Affine model of the per-step draft latency under mixed load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftLatencyModel {
    pub base: f64,
    /// Seconds per scheduled item above `reference`.
    pub slope: f64,
    pub reference: usize,
    /// Seconds per token of mean scheduled context.
    pub context_cost: f64,
}

/// T_D^mix for a step with `scheduled` items and the given mean context.
pub fn mixed_step_latency(scheduled: usize, mean_context: f64, model: &DraftLatencyModel) -> f64 {
    assert!(scheduled >= 1, "latency of an empty step is undefined");
    let extra = scheduled.saturating_sub(model.reference) as f64;
    model.base + model.slope * extra + model.context_cost * mean_context
}

/// Why the target asked for draft tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QueryPurpose {
    /// γ−1 tokens that the next verification waits for.
    Repair,
    /// γ tokens prepared in the background for the following round.
    Prepare,
}

/// Query sent by the target. The draft rebuilds the verified prefix as its
/// own first `base` tokens followed by `tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftQuery {
    pub request: RequestId,
    pub round: RoundId,
    pub purpose: QueryPurpose,
    /// Output position of the first requested token.
    pub start: usize,
    pub count: usize,
    pub base: usize,
    pub tokens: Vec<Token>,
    /// Target committed position when the query was built.
    pub committed_pos: usize,
    /// Prompt length, used to open the session on first contact.
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftReply {
    pub request: RequestId,
    pub round: RoundId,
    pub purpose: QueryPurpose,
    pub segment: SpeculativeSegment,
    /// Mean step latency observed while generating the segment.
    pub t_draft_mix: f64,
    /// Echo of the query's committed position.
    pub committed_pos: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Job {
    id: u64,
    class: QueueClass,
    query: Option<DraftQuery>,
    remaining: usize,
    enqueued_at: f64,
    context: usize,
    segment: Option<SpeculativeSegment>,
    latency_sum: f64,
    steps: usize,
}

/// Draft-server parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DraftServerConfig {
    pub alpha: f64,
    pub latency: DraftLatencyModel,
    pub capacity: usize,
    pub fairness_k: u32,
    pub compress_p: f64,
}

/// Counters kept by the draft server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftStats {
    pub steps: u64,
    pub speculative_jobs: u64,
    pub regular_completed: u64,
    pub regular_tokens: u64,
    pub ignored_queries: u64,
    pub replaced_queries: u64,
    pub sync_gaps: u64,
    pub rollbacks_applied: u64,
    pub cache_freed: u64,
    pub forced_regular_rounds: u64,
    /// Longest run of speculative steps a waiting regular item sat through.
    pub max_regular_wait: u32,
    pub busy_time: f64,
}

/// One generation step, for the draft trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftStepTrace {
    pub at: f64,
    pub speculative: usize,
    pub regular: usize,
    pub t_draft_mix: f64,
    pub forced_regular: bool,
}

/// Event-driven draft server. The simulator calls `start_step` when idle
/// and `finish_step` when the step's latency has elapsed.
pub struct DraftServer<A: DraftAgreement> {
    pub cfg: DraftServerConfig,
    oracle: TokenStreamOracle,
    agreement: A,
    sessions: BTreeMap<RequestId, DraftSessionState>,
    jobs: BTreeMap<u64, Job>,
    /// Speculative job per request, queued or running.
    job_of: BTreeMap<RequestId, u64>,
    /// Newer query waiting for the request's running job to finish.
    held: BTreeMap<RequestId, DraftQuery>,
    last_seen: BTreeMap<RequestId, (RoundId, QueryPurpose)>,
    closed: BTreeSet<RequestId>,
    regular_wait: BTreeMap<u64, u32>,
    next_job: u64,
    counter: FairnessCounter,
    running: Option<(Vec<u64>, f64)>,
    pub stats: DraftStats,
    pub trace: Vec<DraftStepTrace>,
    pub keep_trace: bool,
}

impl<A: DraftAgreement> DraftServer<A> {
    pub fn new(cfg: DraftServerConfig, oracle: TokenStreamOracle, agreement: A) -> Self {
        Self {
            cfg,
            oracle,
            agreement,
            sessions: BTreeMap::new(),
            jobs: BTreeMap::new(),
            job_of: BTreeMap::new(),
            held: BTreeMap::new(),
            last_seen: BTreeMap::new(),
            closed: BTreeSet::new(),
            regular_wait: BTreeMap::new(),
            next_job: 0,
            counter: FairnessCounter::new(cfg.fairness_k),
            running: None,
            stats: DraftStats::default(),
            trace: Vec::new(),
            keep_trace: false,
        }
    }

    /// Registers a request's prompt; compression applies here.
    pub fn open_session(&mut self, request: RequestId, prompt: &[Token]) {
        let prompt = if self.cfg.compress_p < 1.0 {
            compress_prompt(prompt, self.cfg.compress_p)
        } else {
            prompt.to_vec()
        };
        self.sessions
            .insert(request, DraftSessionState::new(request, prompt));
    }

    pub fn session(&self, request: RequestId) -> Option<&DraftSessionState> {
        self.sessions.get(&request)
    }

    pub fn total_cache(&self) -> usize {
        self.sessions.values().map(|s| s.cache_cost).sum()
    }

    pub fn is_busy(&self) -> bool {
        self.running.is_some()
    }

    pub fn has_work(&self) -> bool {
        !self.jobs.is_empty()
    }

    fn enqueue_query(&mut self, q: DraftQuery, now: f64) {
        let id = self.next_job;
        self.next_job += 1;
        let request = q.request;
        self.jobs.insert(
            id,
            Job {
                id,
                class: QueueClass::Speculative,
                remaining: q.count.max(1),
                query: Some(q),
                enqueued_at: now,
                context: 0,
                segment: None,
                latency_sum: 0.0,
                steps: 0,
            },
        );
        self.job_of.insert(request, id);
    }

    /// Accepts a query unless an equal or newer one was already seen.
    pub fn receive_query(&mut self, q: DraftQuery, now: f64) {
        let key = (q.round, q.purpose);
        if let Some(&seen) = self.last_seen.get(&q.request) {
            if key <= seen {
                self.stats.ignored_queries += 1;
                return;
            }
        }
        if self.closed.contains(&q.request) {
            self.stats.ignored_queries += 1;
            return;
        }
        if !self.sessions.contains_key(&q.request) {
            let prompt = self.oracle.prompt(q.request, q.prompt_len);
            self.open_session(q.request, &prompt);
        }
        self.last_seen.insert(q.request, key);
        if let Some(&jid) = self.job_of.get(&q.request) {
            let running = self
                .running
                .as_ref()
                .is_some_and(|(ids, _)| ids.contains(&jid));
            let started = self.jobs.get(&jid).is_some_and(|j| j.segment.is_some());
            if running || started {
                if self.held.insert(q.request, q).is_some() {
                    self.stats.replaced_queries += 1;
                }
                return;
            }
            self.jobs.remove(&jid);
            self.stats.replaced_queries += 1;
        }
        self.enqueue_query(q, now);
    }

    /// The target finished the request: free its session and drop its work.
    pub fn close_session(&mut self, request: RequestId) {
        self.closed.insert(request);
        if let Some(s) = self.sessions.remove(&request) {
            self.stats.cache_freed += s.cache_cost as u64;
        }
        self.held.remove(&request);
        if let Some(jid) = self.job_of.remove(&request) {
            let running = self
                .running
                .as_ref()
                .is_some_and(|(ids, _)| ids.contains(&jid));
            if !running {
                self.jobs.remove(&jid);
            }
        }
    }

    /// Adds one regular tenant request needing `len` decode steps.
    pub fn add_regular(&mut self, len: usize, context: usize, now: f64) {
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(
            id,
            Job {
                id,
                class: QueueClass::Regular,
                query: None,
                remaining: len.max(1),
                enqueued_at: now,
                context,
                segment: None,
                latency_sum: 0.0,
                steps: 0,
            },
        );
        self.regular_wait.insert(id, 0);
    }

    /// Reconciles and generates a speculative job's tokens when it is first
    /// scheduled. Returns false if the job cannot be served.
    fn begin_job(&mut self, jid: u64) -> bool {
        let Some(job) = self.jobs.get(&jid) else {
            return false;
        };
        if job.segment.is_some() || job.class == QueueClass::Regular {
            return true;
        }
        let q = job.query.clone().expect("speculative job carries a query");
        let Some(session) = self.sessions.get_mut(&q.request) else {
            return false;
        };
        if q.base > session.local_len() {
            self.stats.sync_gaps += 1;
            return false;
        }
        let mut prefix = session.local()[..q.base].to_vec();
        prefix.extend_from_slice(&q.tokens);
        let delta = reconcile(session, &prefix);
        let freed = apply_recovery(session, delta, &prefix);
        if freed > 0 || delta < prefix.len() {
            self.stats.rollbacks_applied += 1;
        }
        self.stats.cache_freed += freed as u64;
        let seg = generate_speculative(
            session,
            &self.oracle,
            q.count,
            self.cfg.alpha,
            &mut self.agreement,
            q.round,
        );
        debug_assert_eq!(seg.start_position, q.start);
        let context = session.context_len();
        let job = self.jobs.get_mut(&jid).expect("present");
        job.segment = Some(seg);
        job.context = context;
        self.stats.speculative_jobs += 1;
        true
    }

    /// Starts a generation step if work is queued. Returns its latency.
    pub fn start_step(&mut self, now: f64) -> Option<f64> {
        if self.running.is_some() || self.jobs.is_empty() {
            return None;
        }
        let items: Vec<DraftQueueItem> = self
            .jobs
            .values()
            .map(|j| DraftQueueItem {
                class: j.class,
                id: j.id,
                enqueued_at: j.enqueued_at,
            })
            .collect();
        let sched = schedule_round(&items, &mut self.counter, self.cfg.capacity);
        if sched.forced_regular {
            self.stats.forced_regular_rounds += 1;
        }
        let mut picked: Vec<u64> = sched.picked.iter().map(|&i| items[i].id).collect();
        let mut failed = Vec::new();
        for &jid in &picked {
            if !self.begin_job(jid) {
                failed.push(jid);
            }
        }
        for jid in &failed {
            if let Some(job) = self.jobs.remove(jid) {
                if let Some(q) = job.query {
                    self.job_of.remove(&q.request);
                    self.promote_held(q.request, now);
                }
            }
        }
        picked.retain(|j| !failed.contains(j));
        if picked.is_empty() {
            return if self.jobs.is_empty() { None } else { self.start_step(now) };
        }

        let any_spec = picked
            .iter()
            .any(|j| self.jobs[j].class == QueueClass::Speculative);
        // a regular-first step ends the speculative streak for every pending
        // regular item, including ones that lost out to older regular items
        let regular_round = sched.forced_regular || !any_spec;
        for (jid, wait) in self.regular_wait.iter_mut() {
            if regular_round || picked.contains(jid) {
                *wait = 0;
            } else {
                *wait += 1;
                self.stats.max_regular_wait = self.stats.max_regular_wait.max(*wait);
            }
        }

        let mean_context = picked
            .iter()
            .map(|j| self.jobs[j].context as f64)
            .sum::<f64>()
            / picked.len() as f64;
        let latency = mixed_step_latency(picked.len(), mean_context, &self.cfg.latency);
        if self.keep_trace {
            let spec = picked
                .iter()
                .filter(|j| self.jobs[j].class == QueueClass::Speculative)
                .count();
            self.trace.push(DraftStepTrace {
                at: now,
                speculative: spec,
                regular: picked.len() - spec,
                t_draft_mix: latency,
                forced_regular: sched.forced_regular,
            });
        }
        self.stats.steps += 1;
        self.stats.busy_time += latency;
        self.running = Some((picked, latency));
        Some(latency)
    }

    fn promote_held(&mut self, request: RequestId, now: f64) {
        if let Some(q) = self.held.remove(&request) {
            if self.sessions.contains_key(&request) {
                self.enqueue_query(q, now);
            }
        }
    }

    /// Completes the running step and returns replies for finished
    /// speculative jobs.
    pub fn finish_step(&mut self, now: f64) -> Vec<DraftReply> {
        let Some((picked, latency)) = self.running.take() else {
            return Vec::new();
        };
        let mut replies = Vec::new();
        for jid in picked {
            let Some(job) = self.jobs.get_mut(&jid) else {
                continue;
            };
            job.remaining -= 1;
            job.steps += 1;
            job.latency_sum += latency;
            if job.class == QueueClass::Regular {
                job.context += 1;
                self.stats.regular_tokens += 1;
            }
            if job.remaining > 0 {
                continue;
            }
            let job = self.jobs.remove(&jid).expect("present");
            match job.query {
                None => {
                    self.stats.regular_completed += 1;
                    self.regular_wait.remove(&jid);
                }
                Some(q) => {
                    // the request may have been closed while the step ran
                    if self.job_of.get(&q.request) == Some(&jid) {
                        self.job_of.remove(&q.request);
                    }
                    if self.sessions.contains_key(&q.request) {
                        replies.push(DraftReply {
                            request: q.request,
                            round: q.round,
                            purpose: q.purpose,
                            segment: job.segment.expect("started job has a segment"),
                            t_draft_mix: job.latency_sum / job.steps as f64,
                            committed_pos: q.committed_pos,
                        });
                    }
                    self.promote_held(q.request, now);
                }
            }
        }
        replies
    }

    /// Number of regular jobs still pending.
    pub fn regular_backlog(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| j.class == QueueClass::Regular)
            .count()
    }
}
