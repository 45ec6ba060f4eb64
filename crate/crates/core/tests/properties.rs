use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specsim::analytics::{
    critical_fallback_ratio, ordinary_throughput, parallel_throughput, preferred_mode,
    ThroughputParams,
};
use specsim::config::DelayModel;
use specsim::draft::{
    apply_recovery, compress_prompt, reconcile, schedule_round, DraftQueueItem, DraftSessionState,
    FairnessCounter, QueueClass,
};
use specsim::oracle::TokenStreamOracle;
use specsim::sim::{lossless, run_detailed, workload_for, PolicyVariant, SimOptions};
use specsim::target::{
    commit_round, compute_rollback_set, continuation_consistent, draft_match_counts,
    to_verification_chain, CandidateKind, CandidateSequence, CircuitBreakerState, ModeController,
    RequestState, RollbackSample, RollbackTracker, RoundOutcome, ThresholdRule,
};
use specsim::transport::{BoundedChannel, ChannelConfig, Endpoint, Envelope, EnvelopeKind, Payload};
use specsim::{Mode, RequestId, RoundId, SimConfig, SpeculativeSegment, Token};

fn variant() -> impl Strategy<Value = PolicyVariant> {
    prop::sample::select(PolicyVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_lossless_under_faults(
        v in variant(),
        seed in any::<u64>(),
        alpha in 0.0f64..1.0,
        gamma in 1usize..7,
        batch in 1usize..6,
        delay in 0.0f64..0.02,
        drop in prop::sample::select(vec![0.0, 0.05, 0.3]),
        reorder in prop::sample::select(vec![0.0, 0.3]),
        compress in prop::sample::select(vec![1.0, 0.3]),
    ) {
        let cfg = SimConfig {
            seed,
            alpha,
            gamma,
            batch_size: batch,
            num_requests: 2 * batch,
            output_len: 24,
            delay: DelayModel::Constant { secs: delay },
            drop_prob: drop,
            reorder_prob: reorder,
            compress_p: compress,
            ..SimConfig::default()
        };
        let out = run_detailed(&cfg, v, &workload_for(&cfg).unwrap(), SimOptions::default()).unwrap();
        prop_assert!(lossless(&TokenStreamOracle::new(seed), &out.requests));
        prop_assert_eq!(out.requests.len(), 2 * batch);
        for r in &out.requests {
            prop_assert_eq!(r.committed.len(), 24);
            prop_assert_eq!(r.delta_sum, 24);
            prop_assert!(r.finished_at >= r.arrival);
        }
        prop_assert!(out.clock_monotone);
        prop_assert!(out.transport_conserved);
        prop_assert!(out.max_concurrency <= batch);
        for t in &out.rounds {
            prop_assert!(t.rollback_count <= t.batch);
            prop_assert!((0.0..=1.0).contains(&t.r_hat));
            if v == PolicyVariant::Ar {
                prop_assert!(t.committed_delta <= t.batch);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn commits_follow_the_reference(
        seed in any::<u64>(),
        rounds in prop::collection::vec((0usize..6, any::<bool>()), 1..30),
        output_len in 1usize..60,
    ) {
        let o = TokenStreamOracle::new(seed);
        let id = RequestId(7);
        let mut st = RequestState::new(id, output_len);
        for (good, corrupt) in rounds {
            if st.done {
                break;
            }
            let pos = st.committed_pos;
            let mut cand = o.reference_slice(id, pos, good);
            if corrupt {
                cand.push(Token(1));
            }
            let outcome = o.verify(id, pos, &cand);
            prop_assert_eq!(outcome.accepted_count, good);
            let before = st.committed_pos;
            let round = st.round;
            let delta = commit_round(&mut st, &outcome).unwrap();
            prop_assert_eq!(delta, (good + 1).min(output_len - before));
            prop_assert_eq!(st.committed_pos, before + delta);
            prop_assert_eq!(st.round, round.next());
            prop_assert_eq!(&st.committed, &o.reference_slice(id, 0, st.committed_pos));
            // replaying an old outcome is a regression
            prop_assert!(commit_round(&mut st.clone(), &o.verify(id, before.saturating_sub(1), &[])).is_err() || before == 0);
        }
    }

    #[test]
    fn rollback_set_is_exactly_rejected_or_unprepared(
        seed in any::<u64>(),
        reqs in prop::collection::vec((0usize..5, 0usize..5, 0u8..4), 1..12),
    ) {
        let o = TokenStreamOracle::new(seed);
        let mut outcomes = Vec::new();
        let mut prepared = BTreeMap::new();
        let mut expected = Vec::new();
        for (i, &(len, good, prep)) in reqs.iter().enumerate() {
            let id = RequestId(i as u64);
            let good = good.min(len);
            let mut tokens = o.reference_slice(id, 10, len);
            if good < len {
                tokens[good] = Token(tokens[good].0 ^ 1);
            }
            let candidate = CandidateSequence { request: id, start: 10, tokens, kind: CandidateKind::Cached };
            let outcome = o.verify(id, 10, &candidate.tokens);
            let slot = outcome.new_position - 1;
            // 0: none, 1: consistent, 2: wrong head, 3: misplaced
            let seg = match prep {
                0 => None,
                1 => Some(SpeculativeSegment::new(o.reference_slice(id, slot, 3), RoundId(0), slot)),
                2 => Some(SpeculativeSegment::new(vec![Token(5)], RoundId(0), slot)),
                _ => Some(SpeculativeSegment::new(o.reference_slice(id, slot + 1, 2), RoundId(0), slot + 1)),
            };
            if let Some(s) = &seg {
                prop_assert_eq!(continuation_consistent(&outcome, s), prep == 1);
                prepared.insert(id, s.clone());
            }
            if good < len || prep != 1 {
                expected.push(id);
            }
            outcomes.push(RoundOutcome { candidate, outcome });
        }
        let set = compute_rollback_set(&outcomes, &prepared);
        prop_assert_eq!(set.into_iter().collect::<Vec<_>>(), expected);
        for o in &outcomes {
            let (checked, matched) = draft_match_counts(o);
            prop_assert!(matched <= checked && checked <= o.candidate.tokens.len());
        }
    }

    #[test]
    fn scheduler_bounds_regular_wait(
        k in 1u32..6,
        capacity in 1usize..5,
        steps in prop::collection::vec((0usize..6, 0usize..3), 1..60),
    ) {
        let mut counter = FairnessCounter::new(k);
        let mut next_id = 0u64;
        let mut queue: Vec<DraftQueueItem> = Vec::new();
        let mut waits: BTreeMap<u64, u32> = BTreeMap::new();
        for (t, (spec, reg)) in steps.into_iter().enumerate() {
            for (class, n) in [(QueueClass::Speculative, spec), (QueueClass::Regular, reg)] {
                for _ in 0..n {
                    queue.push(DraftQueueItem { class, id: next_id, enqueued_at: t as f64 });
                    next_id += 1;
                }
            }
            if queue.is_empty() {
                continue;
            }
            let before = counter.consecutive_speculative;
            let regular_waiting = queue.iter().any(|i| i.class == QueueClass::Regular);
            let s = schedule_round(&queue, &mut counter, capacity);
            prop_assert!(s.picked.len() == capacity.min(queue.len()));
            prop_assert!(counter.consecutive_speculative <= k);
            prop_assert_eq!(s.forced_regular, before >= k && regular_waiting);
            if s.forced_regular {
                prop_assert_eq!(queue[s.picked[0]].class, QueueClass::Regular);
            }
            let picked: Vec<u64> = s.picked.iter().map(|&i| queue[i].id).collect();
            let regular_round = s.forced_regular
                || picked.iter().all(|id| queue.iter().find(|q| q.id == *id).unwrap().class == QueueClass::Regular);
            queue.retain(|i| !picked.contains(&i.id));
            for item in queue.iter().filter(|i| i.class == QueueClass::Regular) {
                let w = waits.entry(item.id).or_insert(0);
                *w = if regular_round { 0 } else { *w + 1 };
                prop_assert!(*w <= k);
            }
        }
    }

    #[test]
    fn breaker_disables_for_cooldown(
        threshold in 1u32..5,
        cooldown in 0u64..6,
        timely in prop::collection::vec(any::<bool>(), 1..80),
    ) {
        let mut b = CircuitBreakerState::new(threshold, cooldown);
        let mut streak = 0u32;
        let mut disabled_until = 0u64;
        for (r, ok) in timely.into_iter().enumerate() {
            let r = r as u64;
            streak = if ok { 0 } else { streak + 1 };
            if streak >= threshold {
                disabled_until = r + cooldown + 1;
                streak = 0;
            }
            let enabled = b.step(ok, RoundId(r));
            prop_assert_eq!(enabled, r + 1 >= disabled_until);
            prop_assert_eq!(b.consecutive_timeouts, streak);
        }
    }

    #[test]
    fn channels_conserve_envelopes(
        seed in any::<u64>(),
        capacity in 1usize..8,
        drop in 0.0f64..0.5,
        reorder in 0.0f64..0.5,
        stale in 0.01f64..0.2,
        ops in prop::collection::vec((any::<bool>(), 0.0f64..0.02), 1..120),
    ) {
        let mut ch = BoundedChannel::new(ChannelConfig {
            capacity,
            delay: DelayModel::Uniform { lo: 0.001, hi: 0.02 },
            reorder_prob: reorder,
            reorder_window: 0.05,
            drop_prob: drop,
            stale_timeout: stale,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut now = 0.0;
        let mut last_delivery = 0.0f64;
        for (i, (send, dt)) in ops.into_iter().enumerate() {
            now += dt;
            if send {
                let env = Envelope::new(Endpoint::Target, RequestId(i as u64), RoundId(0),
                    EnvelopeKind::Heartbeat, Payload::Empty, now);
                let _ = ch.send(env, now, &mut rng);
            } else {
                for e in ch.poll(now) {
                    prop_assert!(e.deliver_at <= now);
                    prop_assert!(e.deliver_at >= last_delivery);
                    prop_assert!(now - e.sent_at <= stale);
                    last_delivery = e.deliver_at;
                }
            }
            prop_assert!(ch.len() <= capacity);
            prop_assert!(ch.conserved());
        }
        ch.poll(f64::INFINITY);
        prop_assert!(ch.is_empty());
        prop_assert!(ch.conserved());
    }

    #[test]
    fn compression_keeps_both_ends(
        tokens in prop::collection::vec(any::<u64>().prop_map(Token), 0..200),
        p in 0.0f64..=1.0,
    ) {
        let c = compress_prompt(&tokens, p);
        let s = tokens.len();
        let keep = ((p / 2.0) * s as f64).floor() as usize;
        if 2 * keep >= s {
            prop_assert_eq!(&c, &tokens);
        } else {
            prop_assert_eq!(c.len(), 2 * keep);
            prop_assert_eq!(&c[..keep], &tokens[..keep]);
            prop_assert_eq!(&c[keep..], &tokens[s - keep..]);
        }
        let full = compress_prompt(&tokens, 1.0);
        prop_assert_eq!(full.len(), s - s % 2);
    }

    #[test]
    fn crossover_separates_modes(
        batch in 1usize..256,
        len in 1.05f64..8.0,
        gamma in 2usize..9,
        tt in 0.005f64..0.2,
        td in 0.0005f64..0.05,
        r in 0.0f64..=1.0,
    ) {
        let p = ThroughputParams::new(batch, len, gamma, tt, td);
        let rs = critical_fallback_ratio(&p).unwrap();
        let ord = ordinary_throughput(&p);
        let at = |x: f64| parallel_throughput(&p.with_r(x));
        prop_assert!(rs > 0.0);
        if rs <= 1.0 {
            prop_assert!(((at(rs) - ord) / ord).abs() < 1e-9);
        }
        let par = at(r);
        prop_assert!(at((r + 0.01).min(1.0)) <= par);
        if (r - rs).abs() > 1e-9 {
            prop_assert_eq!(par > ord, r < rs);
        }
        prop_assert_eq!(preferred_mode(r, rs), if r <= rs { Mode::Parallel } else { Mode::Ordinary });
    }

    #[test]
    fn mode_decision_depends_only_on_inputs(
        samples in prop::collection::vec((0.0f64..10.0, 1usize..10), 0..20),
        r in 0.0f64..=1.0,
        td in 0.0005f64..0.05,
    ) {
        let mut a = ModeController::new(ThresholdRule::Adaptive, 4, None, 0.8);
        for (sum, n) in &samples {
            a.observe(*sum * *n as f64, *n);
        }
        let mut b = a.clone();
        b.mode = if a.mode == Mode::Parallel { Mode::Ordinary } else { Mode::Parallel };
        let (ma, rsa) = a.decide(r, 4, 0.05, td);
        let (mb, rsb) = b.decide(r, 4, 0.05, td);
        prop_assert_eq!(ma, mb);
        prop_assert_eq!(rsa.to_bits(), rsb.to_bits());
        prop_assert_eq!(ma, preferred_mode(r, rsa));
        let mut par = ModeController::new(ThresholdRule::AlwaysParallel, 4, None, 0.8);
        let mut ord = ModeController::new(ThresholdRule::AlwaysOrdinary, 4, None, 0.8);
        prop_assert_eq!(par.decide(r, 4, 0.05, td).0, Mode::Parallel);
        prop_assert_eq!(ord.decide(r, 4, 0.05, td).0, Mode::Ordinary);
    }

    #[test]
    fn recovery_resynchronizes_draft(
        local in prop::collection::vec(0u64..4, 0..30),
        verified in prop::collection::vec(0u64..4, 0..30),
        split in 0usize..30,
    ) {
        let mut st = DraftSessionState::new(RequestId(0), Vec::new());
        let split = split.min(local.len());
        st.history = local[..split].iter().copied().map(Token).collect();
        st.segment = SpeculativeSegment::new(local[split..].iter().copied().map(Token).collect(), RoundId(0), split);
        let verified: Vec<Token> = verified.into_iter().map(Token).collect();
        let delta = reconcile(&st, &verified);
        prop_assert!(delta <= verified.len().min(local.len()));
        let freed = apply_recovery(&mut st, delta, &verified);
        if delta == verified.len() && delta == local.len() {
            prop_assert_eq!(freed, 0);
        } else {
            prop_assert_eq!(freed, local.len() - delta);
            prop_assert_eq!(st.local(), verified);
        }
        prop_assert_eq!(st.cache_cost, st.local_len());
    }

    #[test]
    fn chain_traversal_is_the_candidate(tokens in prop::collection::vec(any::<u64>().prop_map(Token), 0..16)) {
        let c = CandidateSequence { request: RequestId(0), start: 0, tokens: tokens.clone(), kind: CandidateKind::Cached };
        let chain = to_verification_chain(&c);
        prop_assert!(chain.nodes.iter().filter(|n| n.child.is_none()).count() <= 1);
        prop_assert_eq!(chain.traverse(), tokens);
    }

    #[test]
    fn tracker_stays_in_unit_interval(
        samples in prop::collection::vec((0usize..8, 0usize..8, 0usize..20, 0usize..20), 1..30),
        decay in 0.0f64..1.0,
    ) {
        let mut t = RollbackTracker::new(decay);
        for (spec, rb, checked, matched) in samples {
            t.observe(&RollbackSample {
                speculative: spec,
                speculative_rollbacks: rb.min(spec),
                drafts_checked: checked,
                drafts_matched: matched.min(checked),
            });
            if let Some(x) = t.stationary() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
