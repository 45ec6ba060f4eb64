//! Acceptance criteria as runnable checks. Each criterion has serializable
//! parameters (frozen into golden files by the CLI) and returns a pass/fail
//! verdict with a one-line detail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analytics::{
    critical_fallback_ratio, ordinary_throughput, parallel_throughput, preferred_mode,
    ThroughputParams,
};
use crate::config::{DelayModel, SimConfig};
use crate::draft::compress_prompt;
use crate::error::{Error, Result};
use crate::metrics::{benefit_efficiency, MetricsReport, PricingConfig};
use crate::oracle::TokenStreamOracle;
use crate::sim::sweep::replicate_seed;
use crate::sim::{lossless, run_config, run_detailed, workload_for, PolicyVariant, SimOptions};
use crate::types::{Mode, Token};

/// Outcome of one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Verdict {
    /// `PASS [n] name: detail (t s)`.
    pub fn line(&self) -> String {
        format!(
            "{} [{:>2}] {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// A runnable criterion.
#[derive(Clone, Copy)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    /// Default parameters as JSON.
    pub params: fn() -> Value,
    check: fn(&Value) -> Result<(bool, String)>,
}

impl Criterion {
    /// Runs with the given parameters; errors become failures.
    pub fn run_with(&self, params: &Value) -> Verdict {
        let t = Instant::now();
        let (passed, detail) = match (self.check)(params) {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        Verdict {
            id: self.id,
            name: self.name.to_string(),
            passed,
            detail,
            seconds: t.elapsed().as_secs_f64(),
        }
    }

    pub fn run(&self) -> Verdict {
        self.run_with(&(self.params)())
    }
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("criterion params serialize")
}

fn parse<T: DeserializeOwned>(v: &Value) -> Result<T> {
    Ok(serde_json::from_value(v.clone())?)
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

fn within_time(t: Instant, max_secs: f64, detail: &mut String) -> bool {
    let s = t.elapsed().as_secs_f64();
    if s < max_secs {
        true
    } else {
        detail.push_str(&format!("; took {s:.1}s, limit {max_secs}s"));
        false
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// All criteria in order.
pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            id: 1,
            name: "formula fidelity",
            params: || to_value(FormulaParams::default()),
            check: |v| formula_fidelity(&parse(v)?),
        },
        Criterion {
            id: 2,
            name: "crossover identity",
            params: || to_value(CrossoverParams::default()),
            check: |v| crossover_identity(&parse(v)?),
        },
        Criterion {
            id: 3,
            name: "sim-model agreement",
            params: || to_value(AgreementParams::default()),
            check: |v| sim_model_agreement(&parse(v)?),
        },
        Criterion {
            id: 4,
            name: "hybrid dominance",
            params: || to_value(SweepParams::default()),
            check: |v| hybrid_dominance(&parse(v)?),
        },
        Criterion {
            id: 5,
            name: "accepted-length ordering",
            params: || to_value(SweepParams::default()),
            check: |v| accepted_length_ordering(&parse(v)?),
        },
        Criterion {
            id: 6,
            name: "losslessness under chaos",
            params: || to_value(ChaosParams::default()),
            check: |v| lossless_under_chaos(&parse(v)?),
        },
        Criterion {
            id: 7,
            name: "scheduler fairness",
            params: || to_value(FairnessParams::default()),
            check: |v| scheduler_fairness(&parse(v)?),
        },
        Criterion {
            id: 8,
            name: "circuit breaker timing",
            params: || to_value(BreakerParams::default()),
            check: |v| breaker_timing(&parse(v)?),
        },
        Criterion {
            id: 9,
            name: "compression contract",
            params: || to_value(CompressionParams::default()),
            check: |v| compression_contract(&parse(v)?),
        },
        Criterion {
            id: 10,
            name: "mixed-traffic degradation",
            params: || to_value(MixedTrafficParams::default()),
            check: |v| mixed_traffic(&parse(v)?),
        },
        Criterion {
            id: 11,
            name: "benefit formula",
            params: || to_value(BenefitParams::default()),
            check: |v| benefit_formula(&parse(v)?),
        },
    ]
}

pub fn criterion(id: u8) -> Option<Criterion> {
    criteria().into_iter().find(|c| c.id == id)
}

pub fn run_all() -> Vec<Verdict> {
    criteria().iter().map(Criterion::run).collect()
}

// ---------------------------------------------------------------- 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaParams {
    pub batch: usize,
    pub accept_len: f64,
    pub gamma: usize,
    pub t_target: f64,
    pub t_draft: f64,
    pub r: f64,
    pub ordinary: f64,
    pub parallel: f64,
    pub r_star: f64,
    pub rel_tol: f64,
    pub max_secs: f64,
}

impl Default for FormulaParams {
    fn default() -> Self {
        Self {
            batch: 32,
            accept_len: 3.0,
            gamma: 4,
            t_target: 0.05,
            t_draft: 0.005,
            r: 0.2,
            ordinary: 1_476.923_076_923_077,
            parallel: 1664.0,
            r_star: 0.346_153_846_153_846_1,
            rel_tol: 1e-6,
            max_secs: 1.0,
        }
    }
}

pub fn formula_fidelity(p: &FormulaParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let base = ThroughputParams::new(p.batch, p.accept_len, p.gamma, p.t_target, p.t_draft);
    let ord = ordinary_throughput(&base);
    let par = parallel_throughput(&base.with_r(p.r));
    let rs = critical_fallback_ratio(&base)?;
    let worst = rel_err(ord, p.ordinary)
        .max(rel_err(par, p.parallel))
        .max(rel_err(rs, p.r_star));
    let mut detail = format!(
        "ordinary {ord:.2}, parallel {par:.2}, r* {rs:.5}, worst rel err {worst:.1e}"
    );
    let ok = worst <= p.rel_tol;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverParams {
    pub draws: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub max_secs: f64,
}

impl Default for CrossoverParams {
    fn default() -> Self {
        Self {
            draws: 1000,
            seed: 7,
            rel_tol: 1e-9,
            max_secs: 5.0,
        }
    }
}

/// Random parameters with L in (1, γ+1].
pub fn random_params<R: Rng>(rng: &mut R) -> ThroughputParams {
    let gamma = rng.random_range(1..=8usize);
    let accept_len = 1.0 + rng.random_range(1e-3..=1.0) * gamma as f64;
    ThroughputParams::new(
        rng.random_range(1..=256usize),
        accept_len,
        gamma,
        rng.random_range(1e-3..0.2),
        rng.random_range(1e-4..0.05),
    )
}

pub fn crossover_identity(p: &CrossoverParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut worst = 0.0f64;
    let mut sign_errors = 0usize;
    for _ in 0..p.draws {
        let tp = random_params(&mut rng);
        let rs = critical_fallback_ratio(&tp)?;
        let ord = ordinary_throughput(&tp);
        worst = worst.max(rel_err(parallel_throughput(&tp.with_r(rs)), ord));
        let eps = 1e-6 * rs.max(1e-3);
        let below = parallel_throughput(&tp.with_r(rs - eps)) - ord;
        let above = parallel_throughput(&tp.with_r(rs + eps)) - ord;
        let modes_ok = preferred_mode(rs - eps, rs) == Mode::Parallel
            && preferred_mode(rs, rs) == Mode::Parallel
            && preferred_mode(rs + eps, rs) == Mode::Ordinary;
        if below <= 0.0 || above >= 0.0 || !modes_ok {
            sign_errors += 1;
        }
    }
    let mut detail = format!(
        "{} draws, worst rel gap at r* {worst:.1e}, sign errors {sign_errors}",
        p.draws
    );
    let ok = worst <= p.rel_tol && sign_errors == 0;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 3

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementParams {
    pub batches: Vec<usize>,
    pub gamma: usize,
    pub t_target: f64,
    pub t_draft: f64,
    pub output_len: usize,
    /// One-way transport delay in seconds.
    pub delay: f64,
    pub ordinary_tol: f64,
    pub parallel_tol: f64,
    pub seed: u64,
    pub max_secs: f64,
}

impl Default for AgreementParams {
    fn default() -> Self {
        Self {
            batches: vec![1, 16, 32, 64, 128],
            gamma: 4,
            t_target: 0.05,
            t_draft: 0.005,
            output_len: 1024,
            delay: 1e-5,
            ordinary_tol: 0.02,
            parallel_tol: 0.05,
            seed: 42,
            max_secs: 120.0,
        }
    }
}

pub fn sim_model_agreement(p: &AgreementParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let rows: Vec<Result<(usize, f64, f64)>> = p
        .batches
        .par_iter()
        .map(|&b| {
            let cfg = SimConfig {
                batch_size: b,
                num_requests: b,
                qps: 0.0,
                alpha: 1.0,
                gamma: p.gamma,
                t_target: p.t_target,
                t_draft: p.t_draft,
                output_len: p.output_len,
                delay: DelayModel::Constant { secs: p.delay },
                seed: p.seed,
                ..SimConfig::default()
            };
            let ord = run_config(&cfg, PolicyVariant::Ordinary)?;
            let par = run_config(&cfg, PolicyVariant::Parallel)?;
            let om = ordinary_throughput(&ThroughputParams::new(
                b,
                ord.mean_accepted_length,
                p.gamma,
                p.t_target,
                p.t_draft,
            ));
            let pm = parallel_throughput(
                &ThroughputParams::new(
                    b,
                    par.mean_speculative_accepted_length.max(1.0),
                    p.gamma,
                    p.t_target,
                    p.t_draft,
                )
                .with_r(par.mean_rollback_ratio),
            );
            Ok((b, rel_err(ord.target_throughput, om), rel_err(par.target_throughput, pm)))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let worst_o = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst_p = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let mut detail = format!(
        "B {:?}: worst ordinary err {:.2}%, worst parallel err {:.2}%",
        p.batches,
        worst_o * 100.0,
        worst_p * 100.0
    );
    let ok = worst_o <= p.ordinary_tol && worst_p <= p.parallel_tol;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 4, 5

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub alphas: Vec<f64>,
    pub batch: usize,
    pub num_requests: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Hybrid may trail the better fixed mode by this fraction.
    pub tolerance: f64,
    /// The parallel rollback ratio must reach below `r_low` and above `r_high`.
    pub r_low: f64,
    pub r_high: f64,
    pub max_secs: f64,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.15, 0.3, 0.45, 0.6, 0.7, 0.8, 0.9, 0.95, 0.985],
            batch: 32,
            num_requests: 64,
            replicates: 5,
            seed: 42,
            tolerance: 0.03,
            r_low: 0.1,
            r_high: 0.9,
            max_secs: 300.0,
        }
    }
}

/// Per-point replicate reports of ORDINARY, PARALLEL and HYBRID.
pub struct SweepRuns {
    pub alphas: Vec<f64>,
    /// `runs[point][variant][replicate]`, variants in the order above.
    pub runs: Vec<[Vec<MetricsReport>; 3]>,
}

const SWEEP_VARIANTS: [PolicyVariant; 3] = [
    PolicyVariant::Ordinary,
    PolicyVariant::Parallel,
    PolicyVariant::Hybrid,
];

pub fn alpha_sweep(p: &SweepParams) -> Result<SweepRuns> {
    let jobs: Vec<(usize, usize, usize)> = (0..p.alphas.len())
        .flat_map(|a| (0..3).flat_map(move |v| (0..p.replicates).map(move |r| (a, v, r))))
        .collect();
    let reports = jobs
        .par_iter()
        .map(|&(a, v, r)| {
            let cfg = SimConfig {
                alpha: p.alphas[a],
                batch_size: p.batch,
                num_requests: p.num_requests,
                seed: replicate_seed(p.seed, r),
                ..SimConfig::default()
            };
            run_config(&cfg, SWEEP_VARIANTS[v])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut runs: Vec<[Vec<MetricsReport>; 3]> = (0..p.alphas.len())
        .map(|_| [Vec::new(), Vec::new(), Vec::new()])
        .collect();
    for (&(a, v, _), rep) in jobs.iter().zip(reports) {
        runs[a][v].push(rep);
    }
    Ok(SweepRuns {
        alphas: p.alphas.clone(),
        runs,
    })
}

fn point_mean(reps: &[MetricsReport], f: fn(&MetricsReport) -> f64) -> f64 {
    mean(&reps.iter().map(f).collect::<Vec<_>>())
}

pub fn hybrid_dominance(p: &SweepParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let sweep = alpha_sweep(p)?;
    check_dominance(p, &sweep, t)
}

pub fn check_dominance(p: &SweepParams, sweep: &SweepRuns, t: Instant) -> Result<(bool, String)> {
    let thr = |r: &MetricsReport| r.target_throughput;
    let mut worst = (f64::INFINITY, 0.0);
    let mut worst_single = f64::INFINITY;
    for (i, pt) in sweep.runs.iter().enumerate() {
        let best = point_mean(&pt[0], thr).max(point_mean(&pt[1], thr));
        let ratio = point_mean(&pt[2], thr) / best;
        if ratio < worst.0 {
            worst = (ratio, sweep.alphas[i]);
        }
        for ((o, p), h) in pt[0].iter().zip(&pt[1]).zip(&pt[2]) {
            let best = o.target_throughput.max(p.target_throughput);
            worst_single = worst_single.min(h.target_throughput / best);
        }
    }
    let r_par: Vec<f64> = sweep
        .runs
        .iter()
        .map(|pt| point_mean(&pt[1], |r| r.mean_rollback_ratio))
        .collect();
    let r_min = r_par.iter().copied().fold(f64::INFINITY, f64::min);
    let r_max = r_par.iter().copied().fold(0.0, f64::max);
    let span_ok = sweep.alphas.len() >= 9 && r_min <= p.r_low && r_max >= p.r_high;
    let dom_ok = worst.0 >= 1.0 - p.tolerance && worst_single >= 1.0 - p.tolerance;
    let mut detail = format!(
        "{} points, parallel r̂ {r_min:.2}..{r_max:.2}, worst hybrid/best {:.3} at α={} (worst single replicate {:.3})",
        sweep.alphas.len(),
        worst.0,
        worst.1,
        worst_single
    );
    Ok((within_time(t, p.max_secs, &mut detail) && span_ok && dom_ok, detail))
}

pub fn accepted_length_ordering(p: &SweepParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let sweep = alpha_sweep(p)?;
    check_ordering(p, &sweep, t)
}

pub fn check_ordering(p: &SweepParams, sweep: &SweepRuns, t: Instant) -> Result<(bool, String)> {
    let len = |r: &MetricsReport| r.mean_accepted_length;
    let mut violations = Vec::new();
    let mut strict = false;
    for (i, pt) in sweep.runs.iter().enumerate() {
        let (o, pa, h) = (point_mean(&pt[0], len), point_mean(&pt[1], len), point_mean(&pt[2], len));
        if !(o >= h && h >= pa) {
            violations.push(format!("α={}: {o:.3}/{h:.3}/{pa:.3}", sweep.alphas[i]));
        }
        strict |= o > h || h > pa;
    }
    let mut detail = if violations.is_empty() {
        format!("ORDINARY >= HYBRID >= PARALLEL at all {} points, strict somewhere: {strict}", sweep.alphas.len())
    } else {
        format!("violations {}", violations.join(", "))
    };
    let ok = violations.is_empty() && strict;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 6

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosParams {
    pub delays: Vec<f64>,
    pub reorders: Vec<f64>,
    pub drops: Vec<f64>,
    pub batch: usize,
    pub num_requests: usize,
    pub output_len: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_secs: f64,
}

impl Default for ChaosParams {
    fn default() -> Self {
        Self {
            delays: vec![0.0001, 0.005, 0.05],
            reorders: vec![0.0, 0.2],
            drops: vec![0.0, 0.05],
            batch: 8,
            num_requests: 16,
            output_len: 256,
            alpha: 0.8,
            seed: 42,
            max_secs: 300.0,
        }
    }
}

/// The chaos grid as configs, one per (delay, reorder, drop).
pub fn chaos_grid(p: &ChaosParams) -> Vec<SimConfig> {
    let mut out = Vec::new();
    for &d in &p.delays {
        for &r in &p.reorders {
            for &x in &p.drops {
                out.push(SimConfig {
                    batch_size: p.batch,
                    num_requests: p.num_requests,
                    output_len: p.output_len,
                    alpha: p.alpha,
                    seed: p.seed,
                    delay: DelayModel::Constant { secs: d },
                    reorder_prob: r,
                    drop_prob: x,
                    ..SimConfig::default()
                });
            }
        }
    }
    out
}

pub fn lossless_under_chaos(p: &ChaosParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let jobs: Vec<(SimConfig, PolicyVariant)> = chaos_grid(p)
        .into_iter()
        .flat_map(|c| SWEEP_VARIANTS.map(|v| (c.clone(), v)))
        .collect();
    let failures: Vec<String> = jobs
        .par_iter()
        .filter_map(|(cfg, v)| {
            let label = format!("{v} delay={} reorder={} drop={}", cfg.delay, cfg.reorder_prob, cfg.drop_prob);
            let out = match workload_for(cfg)
                .and_then(|w| run_detailed(cfg, *v, &w, SimOptions::default()))
            {
                Ok(o) => o,
                Err(e) => return Some(format!("{label}: {e}")),
            };
            let complete = out.requests.len() == cfg.num_requests
                && out.requests.iter().all(|r| r.committed.len() == cfg.output_len);
            if !complete {
                return Some(format!("{label}: incomplete"));
            }
            if !lossless(&TokenStreamOracle::new(cfg.seed), &out.requests) {
                return Some(format!("{label}: committed tokens differ from reference"));
            }
            None
        })
        .collect();
    let mut detail = format!("{} runs, {} failures", jobs.len(), failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!(", first: {f}"));
    }
    Ok((within_time(t, p.max_secs, &mut detail) && failures.is_empty(), detail))
}

// ---------------------------------------------------------------- 7

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessParams {
    pub fairness_k: u32,
    pub draft_capacity: usize,
    pub t_draft: f64,
    pub background_qps: f64,
    pub num_requests: usize,
    pub min_steps: usize,
    pub seed: u64,
    pub max_secs: f64,
}

impl Default for FairnessParams {
    fn default() -> Self {
        Self {
            fairness_k: 10,
            draft_capacity: 12,
            t_draft: 0.002,
            background_qps: 8.0,
            num_requests: 240,
            min_steps: 10_000,
            seed: 42,
            max_secs: 30.0,
        }
    }
}

pub fn scheduler_fairness(p: &FairnessParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let cfg = SimConfig {
        fairness_k: p.fairness_k,
        draft_capacity: p.draft_capacity,
        t_draft: p.t_draft,
        background_qps: p.background_qps,
        num_requests: p.num_requests,
        seed: p.seed,
        ..SimConfig::default()
    };
    let out = run_detailed(
        &cfg,
        PolicyVariant::Hybrid,
        &workload_for(&cfg)?,
        SimOptions {
            draft_trace: true,
            ..SimOptions::default()
        },
    )?;
    let steps = out.draft_trace.len();
    let forced = out.draft_trace.iter().filter(|s| s.forced_regular).count();
    let wait = out.report.max_regular_wait;
    let gamma = cfg.gamma as f64;
    let eligible: Vec<_> = out
        .rounds
        .iter()
        .filter(|r| r.speculation_enabled && r.queries > 0 && gamma * r.t_draft_mix <= cfg.t_target)
        .collect();
    let late = eligible.iter().filter(|r| r.late_prepares > 0).count();
    let mut detail = format!(
        "{steps} draft steps, {forced} forced regular, max regular wait {wait}, late prepares in {late} of {} eligible rounds",
        eligible.len()
    );
    let ok = steps >= p.min_steps
        && forced > 0
        && wait <= u64::from(p.fairness_k)
        && !eligible.is_empty()
        && late == 0;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 8

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakerParams {
    pub batch: usize,
    pub output_len: usize,
    pub stall_start: f64,
    pub stall_end: f64,
    pub threshold: u32,
    pub cooldown: u64,
    pub throughput_tol: f64,
    pub seed: u64,
    pub max_secs: f64,
}

impl Default for BreakerParams {
    fn default() -> Self {
        Self {
            batch: 8,
            output_len: 512,
            stall_start: 2.0,
            stall_end: 4.0,
            threshold: 3,
            cooldown: 5,
            throughput_tol: 0.01,
            seed: 42,
            max_secs: 30.0,
        }
    }
}

pub fn breaker_timing(p: &BreakerParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let mut problems = Vec::new();
    let mut windows = 0usize;
    for v in SWEEP_VARIANTS {
        let cfg = SimConfig {
            batch_size: p.batch,
            num_requests: p.batch,
            qps: 0.0,
            output_len: p.output_len,
            breaker_threshold: p.threshold,
            breaker_cooldown: p.cooldown,
            draft_stall_start: Some(p.stall_start),
            draft_stall_end: Some(p.stall_end),
            seed: p.seed,
            ..SimConfig::default()
        };
        let out = run_detailed(&cfg, v, &workload_for(&cfg)?, SimOptions::default())?;
        let rounds = &out.rounds;
        let expected_rate = p.batch as f64 / cfg.t_target;
        let mut i = 0;
        while i < rounds.len() {
            if rounds[i].speculation_enabled {
                i += 1;
                continue;
            }
            let start = i;
            while i < rounds.len() && !rounds[i].speculation_enabled {
                i += 1;
            }
            let len = i - start;
            if i == rounds.len() {
                // window cut short by the end of the run
                continue;
            }
            windows += 1;
            if len as u64 != p.cooldown {
                problems.push(format!("{v}: window of {len} rounds"));
            }
            let c = p.threshold as usize;
            let timed_out = start >= c
                && rounds[start - c..start]
                    .iter()
                    .all(|r| r.queries > 0 && r.timely_replies == 0);
            if !timed_out {
                problems.push(format!("{v}: window at round {} not preceded by {c} timeouts", rounds[start].round));
            }
            let w = &rounds[start..i];
            if w.iter().any(|r| r.committed_delta != r.batch || r.fallback != r.batch) {
                problems.push(format!("{v}: disabled round committed other than 1 token per request"));
            }
            if start > 0 && w.iter().all(|r| r.batch == p.batch) {
                let span = w[len - 1].at - rounds[start - 1].at;
                let rate = w.iter().map(|r| r.committed_delta).sum::<usize>() as f64 / span;
                if rel_err(rate, expected_rate) > p.throughput_tol {
                    problems.push(format!("{v}: disabled-window throughput {rate:.1} vs {expected_rate:.1}"));
                }
            }
        }
    }
    let mut detail = format!("{windows} complete disabled windows, {} problems", problems.len());
    if let Some(f) = problems.first() {
        detail.push_str(&format!(", first: {f}"));
    }
    let ok = windows > 0 && problems.is_empty();
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 9

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionParams {
    pub cases: usize,
    pub max_len: usize,
    pub seed: u64,
    pub max_secs: f64,
}

impl Default for CompressionParams {
    fn default() -> Self {
        Self {
            cases: 10_000,
            max_len: 2048,
            seed: 9,
            max_secs: 5.0,
        }
    }
}

/// True iff `sub` is a subsequence of `seq`.
fn is_subsequence(sub: &[Token], seq: &[Token]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|t| it.any(|s| s == t))
}

pub fn compression_contract(p: &CompressionParams) -> Result<(bool, String)> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut failures = 0usize;
    for case in 0..p.cases {
        let s = rng.random_range(0..=p.max_len);
        let prob = if case % 10 == 0 {
            [0.0, 1.0, 0.5, 0.1][case / 10 % 4]
        } else {
            rng.random_range(0.0..=1.0)
        };
        let tokens: Vec<Token> = (0..s).map(|_| Token(rng.random_range(0..1u64 << 63))).collect();
        let out = compress_prompt(&tokens, prob);
        let want = s.min(2 * ((prob * s as f64) / 2.0).floor() as usize);
        if out.len() != want || !is_subsequence(&out, &tokens) {
            failures += 1;
        }
    }
    let example: Vec<Token> = (0..100).map(Token).collect();
    let ten = compress_prompt(&example, 0.1).len();
    let mut detail = format!("{} cases, {failures} failures, p=0.1/S=100 keeps {ten}", p.cases);
    let ok = failures == 0 && ten == 10;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 10

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedTrafficParams {
    pub background_qps: Vec<f64>,
    pub alpha: f64,
    pub batch: usize,
    pub num_requests: usize,
    pub replicates: usize,
    pub seed: u64,
    pub max_degradation: f64,
    pub max_secs: f64,
}

impl Default for MixedTrafficParams {
    fn default() -> Self {
        Self {
            background_qps: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            alpha: 0.8,
            batch: 32,
            num_requests: 64,
            replicates: 5,
            seed: 42,
            max_degradation: 0.05,
            max_secs: 120.0,
        }
    }
}

/// Mean hybrid target throughput per background load.
pub fn mixed_traffic_curve(p: &MixedTrafficParams) -> Result<Vec<f64>> {
    let jobs: Vec<(usize, usize)> = (0..p.background_qps.len())
        .flat_map(|q| (0..p.replicates).map(move |r| (q, r)))
        .collect();
    let thr = jobs
        .par_iter()
        .map(|&(q, r)| {
            let cfg = SimConfig {
                background_qps: p.background_qps[q],
                alpha: p.alpha,
                batch_size: p.batch,
                num_requests: p.num_requests,
                seed: replicate_seed(p.seed, r),
                ..SimConfig::default()
            };
            run_config(&cfg, PolicyVariant::Hybrid).map(|m| m.target_throughput)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(thr.chunks(p.replicates).map(mean).collect())
}

pub fn mixed_traffic(p: &MixedTrafficParams) -> Result<(bool, String)> {
    let t = Instant::now();
    if p.background_qps.len() < 2 || p.background_qps[0] != 0.0 {
        return Err(Error::Parse("background loads must start at 0".into()));
    }
    let curve = mixed_traffic_curve(p)?;
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    let degradation = 1.0 - curve[1] / curve[0];
    let pts: Vec<String> = p
        .background_qps
        .iter()
        .zip(&curve)
        .map(|(q, c)| format!("{q}:{c:.0}"))
        .collect();
    let mut detail = format!(
        "throughput by background qps {}, monotone {monotone}, degradation at {} qps {:.2}%",
        pts.join(" "),
        p.background_qps[1],
        degradation * 100.0
    );
    let ok = monotone && degradation < p.max_degradation;
    Ok((within_time(t, p.max_secs, &mut detail) && ok, detail))
}

// ---------------------------------------------------------------- 11

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenefitParams {
    pub target_throughput: f64,
    pub draft_throughput: f64,
    pub pricing: PricingConfig,
    pub with_draft: f64,
    pub without_draft: f64,
}

impl Default for BenefitParams {
    fn default() -> Self {
        Self {
            target_throughput: 2000.0,
            draft_throughput: 500.0,
            pricing: PricingConfig::default(),
            with_draft: 3.1125,
            without_draft: 3.0,
        }
    }
}

pub fn benefit_formula(p: &BenefitParams) -> Result<(bool, String)> {
    let with = benefit_efficiency(p.target_throughput, p.draft_throughput, &p.pricing);
    let without = benefit_efficiency(
        p.target_throughput,
        p.draft_throughput,
        &PricingConfig {
            include_draft_revenue: false,
            ..p.pricing
        },
    );
    let ok = rel_err(with, p.with_draft) < 1e-12 && rel_err(without, p.without_draft) < 1e-12;
    Ok((ok, format!("{with:.4} with draft revenue, {without:.4} without")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_ordered() {
        let ids: Vec<u8> = criteria().iter().map(|c| c.id).collect();
        assert_eq!(ids, (1..=11).collect::<Vec<_>>());
    }

    #[test]
    fn params_round_trip() {
        for c in criteria() {
            let v = (c.params)();
            let text = serde_json::to_string(&v).unwrap();
            let back: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(back, v, "criterion {}", c.id);
        }
    }

    #[test]
    fn bad_params_fail_cleanly() {
        let c = criterion(1).unwrap();
        let v = c.run_with(&serde_json::json!({"batch": "x"}));
        assert!(!v.passed);
        assert!(v.detail.starts_with("error"));
    }

    #[test]
    fn tampered_expectation_fails() {
        let c = criterion(11).unwrap();
        let mut v = (c.params)();
        v["with_draft"] = serde_json::json!(3.2);
        assert!(!c.run_with(&v).passed);
        assert!(c.run().passed);
    }

    #[test]
    fn subsequence_helper() {
        let s: Vec<Token> = (0..5).map(Token).collect();
        assert!(is_subsequence(&[Token(1), Token(4)], &s));
        assert!(!is_subsequence(&[Token(4), Token(1)], &s));
        assert!(is_subsequence(&[], &s));
    }
}
