//! Target-side protocol state: per-request records, rollback detection,
//! batch assembly for both modes, commit with suffix reuse, reply validity,
//! the circuit breaker and the adaptive mode controller.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::{critical_fallback_ratio, preferred_mode, ThroughputParams};
use crate::error::{Error, Result};
use crate::oracle::VerifyOutcome;
use crate::types::{Mode, RequestId, RoundId, SpeculativeSegment, Token};

/// How a candidate was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidateKind {
    /// Bonus seed followed by a freshly repaired draft continuation.
    Repaired,
    /// Continuation prepared by the draft during the previous round.
    Cached,
    /// Bonus seed followed by PAD slots.
    Padded,
    /// Bonus seed alone (or nothing, for the very first round).
    Fallback,
}

impl CandidateKind {
    /// CACHED and REPAIRED rounds carry draft tokens; the rest fall back to
    /// one token per round.
    pub fn is_speculative(self) -> bool {
        matches!(self, CandidateKind::Cached | CandidateKind::Repaired)
    }
}

/// One request's verification input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSequence {
    pub request: RequestId,
    /// Output position of `tokens[0]`.
    pub start: usize,
    pub tokens: Vec<Token>,
    pub kind: CandidateKind,
}

impl CandidateSequence {
    /// Number of non-PAD tokens.
    pub fn real_len(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_pad()).count()
    }
}

/// Candidates for one verification round, ordered by request id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationBatch {
    pub round: RoundId,
    pub mode: Mode,
    pub candidates: Vec<CandidateSequence>,
}

impl VerificationBatch {
    /// Adds candidates, keeping the batch keyed by request.
    pub fn merge(&mut self, extra: impl IntoIterator<Item = CandidateSequence>) {
        self.candidates.extend(extra);
        self.candidates.sort_by_key(|c| c.request);
        self.candidates.dedup_by_key(|c| c.request);
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Authoritative target-side record of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestState {
    pub id: RequestId,
    pub round: RoundId,
    /// Number of output tokens committed so far.
    pub committed_pos: usize,
    /// Committed output tokens; `committed.len() == committed_pos`.
    pub committed: Vec<Token>,
    pub cached_segment: Option<SpeculativeSegment>,
    /// Last committed token, reused as the seed of repaired, padded and
    /// fallback candidates.
    pub pending_bonus: Option<Token>,
    pub in_rollback: bool,
    pub done: bool,
    pub output_len: usize,
}

impl RequestState {
    pub fn new(id: RequestId, output_len: usize) -> Self {
        Self {
            id,
            round: RoundId(0),
            committed_pos: 0,
            committed: Vec::new(),
            cached_segment: None,
            pending_bonus: None,
            in_rollback: true,
            done: output_len == 0,
            output_len,
        }
    }

    /// Start position of a candidate seeded with the pending bonus.
    fn seed_start(&self) -> usize {
        self.committed_pos.saturating_sub(1)
    }
}

/// Per-request verification result with the candidate that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub candidate: CandidateSequence,
    pub outcome: VerifyOutcome,
}

/// True when `prepared` continues exactly at the bonus slot and predicts the
/// bonus.
pub fn continuation_consistent(outcome: &VerifyOutcome, prepared: &SpeculativeSegment) -> bool {
    prepared.start_position + 1 == outcome.new_position && prepared.first() == Some(outcome.bonus)
}

/// Requests whose speculative prefix was rejected or whose prepared
/// continuation is missing or invalidated.
pub fn compute_rollback_set(
    outcomes: &[RoundOutcome],
    prepared: &BTreeMap<RequestId, SpeculativeSegment>,
) -> BTreeSet<RequestId> {
    outcomes
        .iter()
        .filter(|o| {
            let rejected = o.outcome.accepted_count < o.candidate.real_len();
            let invalid = match prepared.get(&o.candidate.request) {
                Some(seg) => !continuation_consistent(&o.outcome, seg),
                None => true,
            };
            rejected || invalid
        })
        .map(|o| o.candidate.request)
        .collect()
}

/// `|R| / B`.
pub fn observe_rollback_ratio(rollback_count: usize, batch: usize) -> f64 {
    assert!(batch >= 1, "rollback ratio needs a non-empty batch");
    rollback_count as f64 / batch as f64
}

fn cached_candidate(state: &RequestState) -> Result<CandidateSequence> {
    let seg = state.cached_segment.as_ref().ok_or_else(|| Error::Assembly {
        request: state.id,
        reason: "no cached segment".into(),
    })?;
    if seg.start_position != state.committed_pos {
        return Err(Error::Assembly {
            request: state.id,
            reason: format!(
                "cached segment starts at {} but committed position is {}",
                seg.start_position, state.committed_pos
            ),
        });
    }
    Ok(CandidateSequence {
        request: state.id,
        start: seg.start_position,
        tokens: seg.tokens.clone(),
        kind: CandidateKind::Cached,
    })
}

/// Ordinary-mode batch. Rollback requests need a repaired segment starting
/// at their committed position; the others reuse their cached segment.
pub fn assemble_ordinary(
    round: RoundId,
    requests: &[&RequestState],
    repaired: &BTreeMap<RequestId, SpeculativeSegment>,
    gamma: usize,
) -> Result<VerificationBatch> {
    let mut candidates = Vec::with_capacity(requests.len());
    for st in requests {
        let Some(bonus) = st.pending_bonus else {
            candidates.push(fallback_candidate(st));
            continue;
        };
        if st.in_rollback {
            let seg = repaired.get(&st.id).ok_or_else(|| Error::Assembly {
                request: st.id,
                reason: "rollback request has no repaired segment".into(),
            })?;
            if seg.start_position != st.committed_pos {
                return Err(Error::Assembly {
                    request: st.id,
                    reason: format!(
                        "repaired segment starts at {} but committed position is {}",
                        seg.start_position, st.committed_pos
                    ),
                });
            }
            let mut tokens = Vec::with_capacity(gamma);
            tokens.push(bonus);
            tokens.extend(seg.tokens.iter().take(gamma.saturating_sub(1)));
            candidates.push(CandidateSequence {
                request: st.id,
                start: st.seed_start(),
                tokens,
                kind: CandidateKind::Repaired,
            });
        } else {
            candidates.push(cached_candidate(st)?);
        }
    }
    let mut batch = VerificationBatch {
        round,
        mode: Mode::Ordinary,
        candidates: Vec::new(),
    };
    batch.merge(candidates);
    Ok(batch)
}

/// Parallel-mode batch. Never waits on the draft.
pub fn assemble_parallel(
    round: RoundId,
    requests: &[&RequestState],
    gamma: usize,
) -> Result<VerificationBatch> {
    let mut candidates = Vec::with_capacity(requests.len());
    for st in requests {
        if st.pending_bonus.is_none() {
            candidates.push(fallback_candidate(st));
        } else if st.in_rollback {
            candidates.push(padded_candidate(st, gamma));
        } else {
            candidates.push(cached_candidate(st)?);
        }
    }
    let mut batch = VerificationBatch {
        round,
        mode: Mode::Parallel,
        candidates: Vec::new(),
    };
    batch.merge(candidates);
    Ok(batch)
}

/// `[bonus, PAD × (γ−1)]`.
pub fn padded_candidate(state: &RequestState, gamma: usize) -> CandidateSequence {
    let mut tokens = vec![Token::PAD; gamma.max(1)];
    tokens[0] = state.pending_bonus.expect("padded candidate needs a bonus");
    CandidateSequence {
        request: state.id,
        start: state.seed_start(),
        tokens,
        kind: CandidateKind::Padded,
    }
}

/// One-token decoding: `[bonus]`, or an empty candidate before the first
/// commit.
pub fn fallback_candidate(state: &RequestState) -> CandidateSequence {
    match state.pending_bonus {
        Some(b) => CandidateSequence {
            request: state.id,
            start: state.seed_start(),
            tokens: vec![b],
            kind: CandidateKind::Fallback,
        },
        None => CandidateSequence {
            request: state.id,
            start: state.committed_pos,
            tokens: Vec::new(),
            kind: CandidateKind::Fallback,
        },
    }
}

/// Appends the newly committed positions, advances the round and returns
/// the number of new tokens (capped at the output length).
pub fn commit_round(state: &mut RequestState, outcome: &VerifyOutcome) -> Result<usize> {
    let start = outcome.new_position - outcome.committed.len();
    if outcome.new_position <= state.committed_pos || start > state.committed_pos {
        return Err(Error::CommitRegression {
            request: state.id,
            from: state.committed_pos,
            to: outcome.new_position,
        });
    }
    let before = state.committed_pos;
    let fresh = &outcome.committed[state.committed_pos - start..];
    let room = state.output_len.saturating_sub(state.committed_pos);
    state.committed.extend(fresh.iter().take(room));
    state.committed_pos = state.committed.len();
    state.pending_bonus = Some(outcome.bonus);
    state.round = state.round.next();
    if state.committed_pos >= state.output_len {
        state.done = true;
    }
    Ok(state.committed_pos - before)
}

/// Keeps the prepared continuation (minus its head, which is the bonus
/// already committed) when it agrees with the bonus; otherwise marks the
/// request for rollback. Returns true when the continuation was kept. With
/// γ = 1 the kept continuation is empty.
pub fn reuse_or_discard_suffix(
    state: &mut RequestState,
    outcome: &VerifyOutcome,
    prepared_next: Option<SpeculativeSegment>,
) -> bool {
    match prepared_next {
        Some(seg) if continuation_consistent(outcome, &seg) => {
            let tokens = seg.tokens[1..].to_vec();
            state.cached_segment = Some(SpeculativeSegment::new(
                tokens,
                seg.origin_round,
                seg.start_position + 1,
            ));
            state.in_rollback = false;
            true
        }
        _ => {
            state.cached_segment = None;
            state.in_rollback = true;
            false
        }
    }
}

/// A reply is valid only for the exact (request, round) pair in flight.
pub fn handle_draft_reply(
    reply: (RequestId, RoundId),
    active: Option<(RequestId, RoundId)>,
) -> bool {
    active == Some(reply)
}

/// Disables remote speculation after repeated draft timeouts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitBreakerState {
    pub consecutive_timeouts: u32,
    /// Speculation is disabled while `round < disabled_until_round`.
    pub disabled_until_round: RoundId,
    pub threshold: u32,
    pub cooldown: u64,
    /// Number of trips so far.
    pub activations: u32,
}

impl CircuitBreakerState {
    pub fn new(threshold: u32, cooldown: u64) -> Self {
        Self {
            consecutive_timeouts: 0,
            disabled_until_round: RoundId(0),
            threshold,
            cooldown,
            activations: 0,
        }
    }

    pub fn is_enabled(&self, round: RoundId) -> bool {
        round >= self.disabled_until_round
    }

    /// Records the outcome of `current`'s draft queries. Returns whether
    /// speculation is enabled for the next round.
    pub fn step(&mut self, reply_timely: bool, current: RoundId) -> bool {
        if reply_timely {
            self.consecutive_timeouts = 0;
        } else {
            self.consecutive_timeouts += 1;
            if self.consecutive_timeouts >= self.threshold {
                self.disabled_until_round = RoundId(current.0 + self.cooldown + 1);
                self.consecutive_timeouts = 0;
                self.activations += 1;
            }
        }
        self.is_enabled(current.next())
    }
}

/// Node of a linear verification chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainNode {
    pub token: Token,
    pub child: Option<usize>,
}

/// Degenerate token tree in which every node has at most one child.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerificationChain {
    pub nodes: Vec<ChainNode>,
}

impl VerificationChain {
    /// Tokens in traversal order from the root.
    pub fn traverse(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut at = if self.nodes.is_empty() { None } else { Some(0) };
        while let Some(i) = at {
            out.push(self.nodes[i].token);
            at = self.nodes[i].child;
        }
        out
    }
}

pub fn to_verification_chain(candidate: &CandidateSequence) -> VerificationChain {
    let n = candidate.tokens.len();
    VerificationChain {
        nodes: candidate
            .tokens
            .iter()
            .enumerate()
            .map(|(j, &token)| ChainNode {
                token,
                child: (j + 1 < n).then_some(j + 1),
            })
            .collect(),
    }
}

/// Which rollback ratio the mode decision compares against r*.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RollbackEstimator {
    /// The last round's |R|/B as observed in whatever mode ran.
    Observed,
    /// Long-run ratio parallel mode would settle at, from smoothed rollback
    /// and draft-match rates. Unlike the observed ratio it does not depend
    /// on the mode currently running.
    Stationary,
}

impl fmt::Display for RollbackEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RollbackEstimator::Observed => "observed",
            RollbackEstimator::Stationary => "stationary",
        })
    }
}

impl FromStr for RollbackEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "observed" => Ok(RollbackEstimator::Observed),
            "stationary" => Ok(RollbackEstimator::Stationary),
            other => Err(Error::Parse(format!("unknown rollback estimator `{other}`"))),
        }
    }
}

/// One round's inputs to [`RollbackTracker`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RollbackSample {
    /// CACHED or REPAIRED candidates in the round.
    pub speculative: usize,
    /// How many of those ended in the rollback set.
    pub speculative_rollbacks: usize,
    /// Draft tokens compared during verification.
    pub drafts_checked: usize,
    pub drafts_matched: usize,
}

impl RollbackSample {
    /// Adds one verified candidate and the continuation prepared for it.
    /// A prepared head that lines up with the bonus slot counts as one more
    /// draft comparison.
    pub fn add(&mut self, o: &RoundOutcome, prepared: Option<&SpeculativeSegment>, rolled_back: bool) {
        let c = &o.candidate;
        if c.kind.is_speculative() {
            self.speculative += 1;
            self.speculative_rollbacks += usize::from(rolled_back);
        }
        let (checked, matched) = draft_match_counts(o);
        self.drafts_checked += checked;
        self.drafts_matched += matched;
        if let Some(seg) = prepared {
            if seg.start_position + 1 == o.outcome.new_position && !seg.is_empty() {
                self.drafts_checked += 1;
                self.drafts_matched += usize::from(seg.first() == Some(o.outcome.bonus));
            }
        }
    }
}

/// Draft tokens compared and matched when verifying one candidate. The
/// committed seed in front of REPAIRED and PADDED candidates is not a draft.
pub fn draft_match_counts(o: &RoundOutcome) -> (usize, usize) {
    let c = &o.candidate;
    let seed = usize::from(c.kind != CandidateKind::Cached && !c.tokens.is_empty());
    let drafts = c.real_len().saturating_sub(seed);
    let matched = o.outcome.accepted_count.saturating_sub(seed).min(drafts);
    let checked = if matched < drafts { matched + 1 } else { drafts };
    (checked, matched)
}

/// Smoothed rollback statistics behind [`RollbackEstimator::Stationary`].
///
/// In parallel mode a request alternates between speculative rounds, which
/// roll back at rate q, and one-token rounds, whose prepared head matches
/// the bonus at the draft match rate a. The fraction of requests in
/// rollback then settles at q / (q + a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackTracker {
    pub decay: f64,
    speculative: f64,
    speculative_rollbacks: f64,
    drafts_checked: f64,
    drafts_matched: f64,
}

impl RollbackTracker {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            speculative: 0.0,
            speculative_rollbacks: 0.0,
            drafts_checked: 0.0,
            drafts_matched: 0.0,
        }
    }

    pub fn observe(&mut self, s: &RollbackSample) {
        let d = self.decay;
        self.speculative = d * self.speculative + s.speculative as f64;
        self.speculative_rollbacks = d * self.speculative_rollbacks + s.speculative_rollbacks as f64;
        self.drafts_checked = d * self.drafts_checked + s.drafts_checked as f64;
        self.drafts_matched = d * self.drafts_matched + s.drafts_matched as f64;
    }

    /// `None` until both a speculative round and a draft comparison were seen.
    pub fn stationary(&self) -> Option<f64> {
        if self.speculative <= 0.0 || self.drafts_checked <= 0.0 {
            return None;
        }
        let q = self.speculative_rollbacks / self.speculative;
        let a = self.drafts_matched / self.drafts_checked;
        if q + a <= 0.0 {
            return Some(1.0);
        }
        Some(q / (q + a))
    }

    pub fn estimate(&self, estimator: RollbackEstimator, r_hat: f64) -> f64 {
        match estimator {
            RollbackEstimator::Observed => r_hat,
            RollbackEstimator::Stationary => self.stationary().unwrap_or(r_hat),
        }
    }
}

/// Which threshold rule a run applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdRule {
    /// r* from the throughput model.
    Adaptive,
    /// r* = +inf: always parallel.
    AlwaysParallel,
    /// r* = −1: always ordinary.
    AlwaysOrdinary,
}

/// Chooses the next round's mode from the observed rollback ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeController {
    pub rule: ThresholdRule,
    /// Running estimate of accepted length on speculative rounds.
    pub accept_len: f64,
    pub frozen: bool,
    pub decay: f64,
    pub mode: Mode,
    /// Decayed sums behind `accept_len`: committed tokens and rounds.
    len_sum: f64,
    len_weight: f64,
}

impl ModeController {
    pub fn new(rule: ThresholdRule, gamma: usize, frozen_len: Option<f64>, decay: f64) -> Self {
        let mode = match rule {
            ThresholdRule::AlwaysOrdinary => Mode::Ordinary,
            _ => Mode::Parallel,
        };
        Self {
            rule,
            accept_len: frozen_len.unwrap_or(gamma as f64),
            frozen: frozen_len.is_some(),
            decay,
            mode,
            len_sum: gamma as f64,
            len_weight: 1.0,
        }
    }

    /// Folds in `count` speculative request-rounds that committed `sum`
    /// tokens. Sums decay per round, so busy rounds weigh more than sparse
    /// ones. The prior is one round of length γ.
    pub fn observe(&mut self, sum: f64, count: usize) {
        if self.frozen || count == 0 {
            return;
        }
        self.len_sum = self.decay * self.len_sum + sum;
        self.len_weight = self.decay * self.len_weight + count as f64;
        self.accept_len = self.len_sum / self.len_weight;
    }

    pub fn threshold(&self, gamma: usize, t_target: f64, t_draft_mix: f64) -> f64 {
        match self.rule {
            ThresholdRule::AlwaysParallel => f64::INFINITY,
            ThresholdRule::AlwaysOrdinary => -1.0,
            ThresholdRule::Adaptive => {
                let p = ThroughputParams::new(1, self.accept_len, gamma, t_target, t_draft_mix);
                critical_fallback_ratio(&p).unwrap_or(f64::INFINITY)
            }
        }
    }

    /// Applies the switching rule and returns `(mode, r*)`.
    pub fn decide(&mut self, r_hat: f64, gamma: usize, t_target: f64, t_draft_mix: f64) -> (Mode, f64) {
        let r_star = self.threshold(gamma, t_target, t_draft_mix);
        self.mode = preferred_mode(r_hat, r_star);
        (self.mode, r_star)
    }
}

/// Per-round record emitted by the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: RoundId,
    /// Time the verification finished.
    pub at: f64,
    pub mode: Mode,
    pub batch: usize,
    /// Rollback ratio observed at the end of this round.
    pub r_hat: f64,
    /// Ratio compared against r* for the next round's mode.
    pub r_decision: f64,
    /// Threshold used for the next round's decision.
    pub r_star: f64,
    pub committed_delta: usize,
    pub rollback_count: usize,
    pub speculation_enabled: bool,
    pub conservative: bool,
    /// Observed per-token draft latency when the batch was dispatched.
    pub t_draft_mix: f64,
    /// Draft queries sent for this round and how many were answered in time.
    pub queries: usize,
    pub timely_replies: usize,
    /// Prepare replies still missing when verification finished.
    pub late_prepares: usize,
    pub cached: usize,
    pub repaired: usize,
    pub padded: usize,
    pub fallback: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::TokenStreamOracle;

    fn state_at(oracle: &TokenStreamOracle, id: u64, pos: usize) -> RequestState {
        let rid = RequestId(id);
        let mut st = RequestState::new(rid, 1024);
        st.committed = oracle.reference_slice(rid, 0, pos);
        st.committed_pos = pos;
        st.pending_bonus = st.committed.last().copied();
        st
    }

    #[test]
    fn ordinary_candidate_shapes() {
        let o = TokenStreamOracle::new(1);
        let mut a = state_at(&o, 1, 10);
        let b = state_at(&o, 2, 10);
        a.in_rollback = true;
        let mut b = b;
        b.in_rollback = false;
        b.cached_segment = Some(SpeculativeSegment::new(
            vec![Token(1), Token(2), Token(3), Token(4)],
            RoundId(0),
            10,
        ));
        let mut rep = BTreeMap::new();
        rep.insert(
            a.id,
            SpeculativeSegment::new(vec![Token(7), Token(8), Token(9)], RoundId(0), 10),
        );
        let batch = assemble_ordinary(RoundId(1), &[&b, &a], &rep, 4).unwrap();
        assert_eq!(batch.mode, Mode::Ordinary);
        assert_eq!(batch.candidates[0].request, a.id);
        assert_eq!(
            batch.candidates[0].tokens,
            vec![a.pending_bonus.unwrap(), Token(7), Token(8), Token(9)]
        );
        assert_eq!(batch.candidates[0].kind, CandidateKind::Repaired);
        assert_eq!(batch.candidates[0].start, 9);
        assert_eq!(batch.candidates[1].tokens, vec![Token(1), Token(2), Token(3), Token(4)]);
        assert_eq!(batch.candidates[1].kind, CandidateKind::Cached);

        let err = assemble_ordinary(RoundId(1), &[&a], &BTreeMap::new(), 4);
        assert!(matches!(err, Err(Error::Assembly { .. })));
    }

    #[test]
    fn parallel_pads_rollback_requests() {
        let o = TokenStreamOracle::new(1);
        let a = state_at(&o, 1, 10);
        let batch = assemble_parallel(RoundId(1), &[&a], 4).unwrap();
        let c = &batch.candidates[0];
        assert_eq!(c.kind, CandidateKind::Padded);
        assert_eq!(c.tokens[0], a.pending_bonus.unwrap());
        assert!(c.tokens[1..].iter().all(|t| t.is_pad()));
        assert_eq!(c.tokens.len(), 4);

        let mut st = a.clone();
        let out = o.verify(st.id, c.start, &c.tokens);
        assert_eq!(commit_round(&mut st, &out).unwrap(), 1);
        assert_eq!(st.committed_pos, 11);
    }

    #[test]
    fn modes_agree_without_rollback() {
        let o = TokenStreamOracle::new(1);
        let mut a = state_at(&o, 1, 10);
        a.in_rollback = false;
        a.cached_segment = Some(SpeculativeSegment::new(vec![Token(5)], RoundId(0), 10));
        let ord = assemble_ordinary(RoundId(2), &[&a], &BTreeMap::new(), 4).unwrap();
        let par = assemble_parallel(RoundId(2), &[&a], 4).unwrap();
        assert_eq!(ord.candidates, par.candidates);
    }

    #[test]
    fn commit_examples() {
        let o = TokenStreamOracle::new(2);
        let mut st = state_at(&o, 3, 10);
        let cand = o.reference_slice(st.id, 10, 4);
        let out = o.verify(st.id, 10, &cand);
        assert_eq!(commit_round(&mut st, &out).unwrap(), 5);
        assert_eq!(st.committed_pos, 15);
        assert_eq!(st.committed, o.reference_slice(st.id, 0, 15));

        let mut st = state_at(&o, 3, 10);
        let out = o.verify(st.id, 10, &[Token(1), Token(2), Token(3), Token(4)]);
        assert_eq!(commit_round(&mut st, &out).unwrap(), 1);
        assert_eq!(st.committed_pos, 11);

        // seeded candidate: the bonus at position 9 is not counted again
        let mut st = state_at(&o, 3, 10);
        let mut cand = vec![st.pending_bonus.unwrap()];
        cand.extend(o.reference_slice(st.id, 10, 3));
        let out = o.verify(st.id, 9, &cand);
        assert_eq!(commit_round(&mut st, &out).unwrap(), 4);

        let mut st = state_at(&o, 3, 10);
        let stale = o.verify(st.id, 2, &[]);
        assert!(matches!(
            commit_round(&mut st, &stale),
            Err(Error::CommitRegression { .. })
        ));
    }

    #[test]
    fn commit_caps_at_output_len() {
        let o = TokenStreamOracle::new(2);
        let mut st = state_at(&o, 3, 10);
        st.output_len = 12;
        let out = o.verify(st.id, 10, &o.reference_slice(st.id, 10, 4));
        assert_eq!(commit_round(&mut st, &out).unwrap(), 2);
        assert!(st.done);
    }

    #[test]
    fn suffix_reuse() {
        let o = TokenStreamOracle::new(4);
        let st0 = state_at(&o, 5, 10);
        let out = o.verify(st0.id, 10, &o.reference_slice(st0.id, 10, 3));
        let good = SpeculativeSegment::new(o.reference_slice(st0.id, 13, 4), RoundId(1), 13);

        let mut st = st0.clone();
        assert!(reuse_or_discard_suffix(&mut st, &out, Some(good.clone())));
        let cached = st.cached_segment.clone().unwrap();
        assert_eq!(cached.start_position, 14);
        assert_eq!(cached.tokens, good.tokens[1..].to_vec());
        assert!(!st.in_rollback);

        let mut bad = good.clone();
        bad.tokens[0] = Token(0);
        let mut st = st0.clone();
        assert!(!reuse_or_discard_suffix(&mut st, &out, Some(bad)));
        assert!(st.in_rollback && st.cached_segment.is_none());

        let mut st = st0.clone();
        assert!(!reuse_or_discard_suffix(&mut st, &out, None));
        assert!(st.in_rollback);

        let head = SpeculativeSegment::new(good.tokens[..1].to_vec(), RoundId(1), 13);
        let mut st = st0;
        assert!(reuse_or_discard_suffix(&mut st, &out, Some(head)));
        assert!(st.cached_segment.unwrap().is_empty());
    }

    #[test]
    fn reply_validity() {
        let active = Some((RequestId(7), RoundId(3)));
        assert!(handle_draft_reply((RequestId(7), RoundId(3)), active));
        assert!(!handle_draft_reply((RequestId(7), RoundId(2)), active));
        assert!(!handle_draft_reply((RequestId(7), RoundId(3)), None));
    }

    #[test]
    fn breaker_trips_after_threshold() {
        let mut cb = CircuitBreakerState::new(3, 5);
        assert!(cb.step(false, RoundId(1)));
        assert!(cb.step(false, RoundId(2)));
        assert!(!cb.step(false, RoundId(3)));
        for n in 4..=8 {
            assert!(!cb.is_enabled(RoundId(n)), "round {n}");
        }
        assert!(cb.is_enabled(RoundId(9)));
        assert_eq!(cb.activations, 1);

        let mut cb = CircuitBreakerState::new(3, 5);
        cb.step(false, RoundId(1));
        cb.step(false, RoundId(2));
        assert_eq!(cb.consecutive_timeouts, 2);
        cb.step(true, RoundId(3));
        assert_eq!(cb.consecutive_timeouts, 0);
    }

    #[test]
    fn chain_shape() {
        let c = CandidateSequence {
            request: RequestId(0),
            start: 0,
            tokens: vec![Token(1), Token(2), Token(3), Token(4)],
            kind: CandidateKind::Cached,
        };
        let chain = to_verification_chain(&c);
        assert_eq!(chain.nodes[0].child, Some(1));
        assert_eq!(chain.nodes[3].child, None);
        assert_eq!(chain.traverse(), c.tokens);
        let empty = CandidateSequence { tokens: vec![], ..c };
        assert!(to_verification_chain(&empty).traverse().is_empty());
    }

    #[test]
    fn rollback_ratio_values() {
        assert_eq!(observe_rollback_ratio(16, 32), 0.5);
        assert_eq!(observe_rollback_ratio(0, 32), 0.0);
        assert_eq!(observe_rollback_ratio(32, 32), 1.0);
    }

    #[test]
    fn controller_rules() {
        let mut c = ModeController::new(ThresholdRule::Adaptive, 4, Some(3.0), 0.9);
        let (m, r) = c.decide(0.2, 4, 0.05, 0.005);
        assert_eq!(m, Mode::Parallel);
        assert!((r - 0.045 / 0.13).abs() < 1e-12);
        assert_eq!(c.decide(0.5, 4, 0.05, 0.005).0, Mode::Ordinary);
        c.observe(1.0, 1);
        assert_eq!(c.accept_len, 3.0);

        let mut p = ModeController::new(ThresholdRule::AlwaysParallel, 4, None, 0.9);
        assert_eq!(p.decide(1.0, 4, 0.05, 0.005).0, Mode::Parallel);
        let mut o = ModeController::new(ThresholdRule::AlwaysOrdinary, 4, None, 0.9);
        assert_eq!(o.decide(0.0, 4, 0.05, 0.005).0, Mode::Ordinary);

        let mut e = ModeController::new(ThresholdRule::Adaptive, 4, None, 0.5);
        e.observe(2.0, 1);
        assert!((e.accept_len - 8.0 / 3.0).abs() < 1e-12);
        e.observe(0.0, 0);
        assert!((e.accept_len - 8.0 / 3.0).abs() < 1e-12);
        e.observe(30.0, 10);
        assert!((e.accept_len - (2.0 + 30.0) / (0.75 + 10.0)).abs() < 1e-12);
        let mut one = ModeController::new(ThresholdRule::Adaptive, 4, Some(1.0), 0.9);
        assert_eq!(one.decide(1.0, 4, 0.05, 0.005).0, Mode::Parallel);
    }

    fn outcome_for(o: &TokenStreamOracle, kind: CandidateKind, tokens: Vec<Token>, start: usize) -> RoundOutcome {
        let candidate = CandidateSequence {
            request: RequestId(3),
            start,
            tokens,
            kind,
        };
        let outcome = o.verify(candidate.request, start, &candidate.tokens);
        RoundOutcome { candidate, outcome }
    }

    #[test]
    fn draft_match_counting() {
        let o = TokenStreamOracle::new(4);
        let r = o.reference_slice(RequestId(3), 0, 8);
        // cached: all four are drafts, third one wrong
        let c = outcome_for(&o, CandidateKind::Cached, vec![r[5], r[6], Token(9), r[0]], 5);
        assert_eq!(draft_match_counts(&c), (3, 2));
        // repaired: the seed is not counted
        let rep = outcome_for(&o, CandidateKind::Repaired, vec![r[4], r[5], r[6]], 4);
        assert_eq!(draft_match_counts(&rep), (2, 2));
        let pad = outcome_for(&o, CandidateKind::Padded, vec![r[4], Token::PAD, Token::PAD], 4);
        assert_eq!(draft_match_counts(&pad), (0, 0));
        let fb = outcome_for(&o, CandidateKind::Fallback, vec![r[4]], 4);
        assert_eq!(draft_match_counts(&fb), (0, 0));
    }

    #[test]
    fn rollback_sample_counts_prepared_head() {
        let o = TokenStreamOracle::new(4);
        let r = o.reference_slice(RequestId(3), 0, 8);
        let fb = outcome_for(&o, CandidateKind::Fallback, vec![r[4]], 4);
        // bonus sits at position 5
        let good = SpeculativeSegment::new(vec![r[5], r[6]], RoundId(0), 5);
        let bad = SpeculativeSegment::new(vec![Token(1), r[6]], RoundId(0), 5);
        let misplaced = SpeculativeSegment::new(vec![r[6]], RoundId(0), 6);
        let mut s = RollbackSample::default();
        s.add(&fb, Some(&good), false);
        s.add(&fb, Some(&bad), true);
        s.add(&fb, Some(&misplaced), true);
        s.add(&fb, None, true);
        assert_eq!(s.speculative, 0);
        assert_eq!((s.drafts_checked, s.drafts_matched), (2, 1));
        let c = outcome_for(&o, CandidateKind::Cached, vec![r[5], Token(9)], 5);
        s.add(&c, None, true);
        assert_eq!((s.speculative, s.speculative_rollbacks), (1, 1));
        assert_eq!((s.drafts_checked, s.drafts_matched), (4, 2));
    }

    #[test]
    fn tracker_estimates() {
        let mut t = RollbackTracker::new(0.5);
        assert_eq!(t.stationary(), None);
        assert_eq!(t.estimate(RollbackEstimator::Stationary, 0.7), 0.7);
        // q = 1/4, a = 3/4 gives 0.25
        let s = RollbackSample {
            speculative: 4,
            speculative_rollbacks: 1,
            drafts_checked: 8,
            drafts_matched: 6,
        };
        for _ in 0..5 {
            t.observe(&s);
        }
        assert!((t.stationary().unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(t.estimate(RollbackEstimator::Observed, 0.7), 0.7);
        // a draft that never matches keeps everything in rollback
        let mut never = RollbackTracker::new(0.9);
        never.observe(&RollbackSample {
            speculative: 2,
            speculative_rollbacks: 0,
            drafts_checked: 3,
            drafts_matched: 0,
        });
        assert_eq!(never.stationary(), Some(1.0));
        assert_eq!("observed".parse::<RollbackEstimator>().unwrap(), RollbackEstimator::Observed);
        assert!("other".parse::<RollbackEstimator>().is_err());
    }
}
