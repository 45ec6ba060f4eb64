//! Simulation configuration: every tunable of the protocol, the latency
//! models and the fault injector, plus validation and a flat `key = value`
//! text format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigErrors, ConfigIssue, Error, Result};
use crate::target::RollbackEstimator;

/// One-way transport delay distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    Constant { secs: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl DelayModel {
    /// Mean delay in seconds.
    pub fn mean(&self) -> f64 {
        match *self {
            DelayModel::Constant { secs } => secs,
            DelayModel::Uniform { lo, hi } => 0.5 * (lo + hi),
            DelayModel::Exponential { mean } => mean,
        }
    }
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::Constant { secs: 0.0005 }
    }
}

impl fmt::Display for DelayModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DelayModel::Constant { secs } => write!(f, "const:{secs}"),
            DelayModel::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
            DelayModel::Exponential { mean } => write!(f, "exp:{mean}"),
        }
    }
}

impl FromStr for DelayModel {
    type Err = Error;

    /// Accepts `const:S`, `uniform:LO,HI`, `exp:MEAN`, or a bare number
    /// (constant).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k.trim(), r.trim()),
            None => ("const", s),
        };
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad delay value `{v}` in `{s}`")))
        };
        match kind {
            "const" | "constant" => Ok(DelayModel::Constant { secs: num(rest)? }),
            "uniform" => {
                let (lo, hi) = rest
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("uniform delay needs `lo,hi`: `{s}`")))?;
                Ok(DelayModel::Uniform {
                    lo: num(lo)?,
                    hi: num(hi)?,
                })
            }
            "exp" | "exponential" => Ok(DelayModel::Exponential { mean: num(rest)? }),
            other => Err(Error::Parse(format!("unknown delay model `{other}`"))),
        }
    }
}

/// Full parameter set for one simulation run. All times are in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Maximum number of concurrently decoding target requests.
    pub batch_size: usize,
    /// Draft tokens per verification.
    pub gamma: usize,
    /// Target verification latency per round.
    pub t_target: f64,
    /// Extra target latency per batched request (0 keeps T_T constant).
    pub target_slope: f64,
    /// Draft per-token step latency.
    pub t_draft: f64,
    /// Per-token probability that the draft agrees with the reference.
    pub alpha: f64,
    /// Target arrival rate. 0 submits every request at t=0.
    pub qps: f64,
    pub num_requests: usize,
    pub output_len: usize,
    pub prompt_len: usize,
    /// Optional file of arrival times, one float per line. Overrides `qps`.
    pub arrivals_file: Option<String>,
    /// Fairness period of the draft scheduler.
    pub fairness_k: u32,
    /// Consecutive timeouts before the circuit breaker trips.
    pub breaker_threshold: u32,
    /// Rounds of disabled speculation after a trip.
    pub breaker_cooldown: u64,
    /// Reply deadline; defaults to 2·T_T.
    pub reply_timeout: Option<f64>,
    /// Retained prompt fraction on the draft side.
    pub compress_p: f64,
    /// Agreement penalty coefficient applied when compression is active.
    pub compress_penalty: f64,
    pub seed: u64,
    pub delay: DelayModel,
    pub reorder_prob: f64,
    /// Upper bound of the extra delay added to a reordered envelope.
    pub reorder_window: f64,
    pub drop_prob: f64,
    pub channel_capacity: usize,
    /// Age after which buffered envelopes are discarded; defaults to 4·T_T.
    pub stale_timeout: Option<f64>,
    pub heartbeat_interval: f64,
    /// Liveness expiry; defaults to 3 heartbeat intervals.
    pub heartbeat_expiry: Option<f64>,
    /// Draft batch slots per generation step.
    pub draft_capacity: usize,
    /// Extra draft step latency per scheduled item above the reference batch.
    pub draft_slope: f64,
    /// Batch size served at the base step latency; defaults to `batch_size`.
    pub draft_reference_batch: Option<usize>,
    /// Extra draft step latency per token of mean scheduled context.
    pub draft_context_cost: f64,
    /// Arrival rate of the draft server's own (regular) tenant traffic.
    pub background_qps: f64,
    /// Number of background requests; 0 keeps them arriving until the
    /// target workload finishes.
    pub background_requests: usize,
    pub background_output_len: usize,
    /// Freezes the accepted-length estimate used for the mode threshold.
    pub accept_len: Option<f64>,
    /// Decay of the accepted-length moving average.
    pub ema_decay: f64,
    /// Rollback ratio fed to the mode decision.
    pub rollback_estimator: RollbackEstimator,
    /// Abort if this much simulated time passes without any commit.
    pub livelock_horizon: f64,
    /// Fault injection: the draft ignores queries inside this window.
    pub draft_stall_start: Option<f64>,
    pub draft_stall_end: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gamma: 4,
            t_target: 0.050,
            target_slope: 0.0,
            t_draft: 0.005,
            alpha: 0.8,
            qps: 8.0,
            num_requests: 64,
            output_len: 1024,
            prompt_len: 512,
            arrivals_file: None,
            fairness_k: 10,
            breaker_threshold: 3,
            breaker_cooldown: 5,
            reply_timeout: None,
            compress_p: 1.0,
            compress_penalty: 0.1,
            seed: 42,
            delay: DelayModel::default(),
            reorder_prob: 0.0,
            reorder_window: 0.005,
            drop_prob: 0.0,
            channel_capacity: 4096,
            stale_timeout: None,
            heartbeat_interval: 0.1,
            heartbeat_expiry: None,
            draft_capacity: 256,
            draft_slope: 0.000_05,
            draft_reference_batch: None,
            draft_context_cost: 0.0,
            background_qps: 0.0,
            background_requests: 0,
            background_output_len: 256,
            accept_len: None,
            ema_decay: 0.9,
            rollback_estimator: RollbackEstimator::Stationary,
            livelock_horizon: 60.0,
            draft_stall_start: None,
            draft_stall_end: None,
        }
    }
}

/// Every key accepted by [`SimConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "gamma",
    "t_target",
    "target_slope",
    "t_draft",
    "alpha",
    "qps",
    "num_requests",
    "output_len",
    "prompt_len",
    "arrivals_file",
    "fairness_k",
    "breaker_threshold",
    "breaker_cooldown",
    "reply_timeout",
    "compress_p",
    "compress_penalty",
    "seed",
    "delay",
    "reorder_prob",
    "reorder_window",
    "drop_prob",
    "channel_capacity",
    "stale_timeout",
    "heartbeat_interval",
    "heartbeat_expiry",
    "draft_capacity",
    "draft_slope",
    "draft_reference_batch",
    "draft_context_cost",
    "background_qps",
    "background_requests",
    "background_output_len",
    "accept_len",
    "ema_decay",
    "rollback_estimator",
    "livelock_horizon",
    "draft_stall_start",
    "draft_stall_end",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("bad value `{value}` for `{key}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    let v = value.trim();
    if v.is_empty() || v.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn show_opt<T: fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "none".to_string(),
    }
}

impl SimConfig {
    /// Reply deadline after dispatch of a draft query.
    pub fn reply_timeout(&self) -> f64 {
        self.reply_timeout.unwrap_or(2.0 * self.t_target)
    }

    pub fn stale_timeout(&self) -> f64 {
        self.stale_timeout.unwrap_or(4.0 * self.t_target)
    }

    pub fn heartbeat_expiry(&self) -> f64 {
        self.heartbeat_expiry.unwrap_or(3.0 * self.heartbeat_interval)
    }

    pub fn draft_reference_batch(&self) -> usize {
        self.draft_reference_batch.unwrap_or(self.batch_size)
    }

    /// Effective draft agreement after the compression penalty.
    pub fn effective_alpha(&self) -> f64 {
        if self.compress_p < 1.0 {
            self.alpha * (1.0 - self.compress_penalty * (1.0 - self.compress_p))
        } else {
            self.alpha
        }
    }

    /// Sets one field from its textual form. Accepts a few short aliases
    /// (`B`, `T_T`, `T_D`, `K`, `C_max`, `H`, `p`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let canonical = match key {
            "B" | "b" => "batch_size",
            "T_T" | "t_t" => "t_target",
            "T_D" | "t_d" => "t_draft",
            "K" | "k" => "fairness_k",
            "C_max" | "c_max" => "breaker_threshold",
            "H" | "h" => "breaker_cooldown",
            "p" => "compress_p",
            "n" | "requests" => "num_requests",
            other => other,
        };
        let v = value.trim();
        match canonical {
            "batch_size" => self.batch_size = parse_num(canonical, v)?,
            "gamma" => self.gamma = parse_num(canonical, v)?,
            "t_target" => self.t_target = parse_num(canonical, v)?,
            "target_slope" => self.target_slope = parse_num(canonical, v)?,
            "t_draft" => self.t_draft = parse_num(canonical, v)?,
            "alpha" => self.alpha = parse_num(canonical, v)?,
            "qps" => self.qps = parse_num(canonical, v)?,
            "num_requests" => self.num_requests = parse_num(canonical, v)?,
            "output_len" => self.output_len = parse_num(canonical, v)?,
            "prompt_len" => self.prompt_len = parse_num(canonical, v)?,
            "arrivals_file" => {
                self.arrivals_file = if v.is_empty() || v.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(v.to_string())
                }
            }
            "fairness_k" => self.fairness_k = parse_num(canonical, v)?,
            "breaker_threshold" => self.breaker_threshold = parse_num(canonical, v)?,
            "breaker_cooldown" => self.breaker_cooldown = parse_num(canonical, v)?,
            "reply_timeout" => self.reply_timeout = parse_opt(canonical, v)?,
            "compress_p" => self.compress_p = parse_num(canonical, v)?,
            "compress_penalty" => self.compress_penalty = parse_num(canonical, v)?,
            "seed" => self.seed = parse_num(canonical, v)?,
            "delay" => self.delay = v.parse()?,
            "reorder_prob" => self.reorder_prob = parse_num(canonical, v)?,
            "reorder_window" => self.reorder_window = parse_num(canonical, v)?,
            "drop_prob" => self.drop_prob = parse_num(canonical, v)?,
            "channel_capacity" => self.channel_capacity = parse_num(canonical, v)?,
            "stale_timeout" => self.stale_timeout = parse_opt(canonical, v)?,
            "heartbeat_interval" => self.heartbeat_interval = parse_num(canonical, v)?,
            "heartbeat_expiry" => self.heartbeat_expiry = parse_opt(canonical, v)?,
            "draft_capacity" => self.draft_capacity = parse_num(canonical, v)?,
            "draft_slope" => self.draft_slope = parse_num(canonical, v)?,
            "draft_reference_batch" => self.draft_reference_batch = parse_opt(canonical, v)?,
            "draft_context_cost" => self.draft_context_cost = parse_num(canonical, v)?,
            "background_qps" => self.background_qps = parse_num(canonical, v)?,
            "background_requests" => self.background_requests = parse_num(canonical, v)?,
            "background_output_len" => self.background_output_len = parse_num(canonical, v)?,
            "accept_len" => self.accept_len = parse_opt(canonical, v)?,
            "ema_decay" => self.ema_decay = parse_num(canonical, v)?,
            "rollback_estimator" => self.rollback_estimator = parse_num(canonical, v)?,
            "livelock_horizon" => self.livelock_horizon = parse_num(canonical, v)?,
            "draft_stall_start" => self.draft_stall_start = parse_opt(canonical, v)?,
            "draft_stall_end" => self.draft_stall_end = parse_opt(canonical, v)?,
            _ => return Err(Error::Parse(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of one key, as accepted by [`SimConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "batch_size" => self.batch_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "t_target" => self.t_target.to_string(),
            "target_slope" => self.target_slope.to_string(),
            "t_draft" => self.t_draft.to_string(),
            "alpha" => self.alpha.to_string(),
            "qps" => self.qps.to_string(),
            "num_requests" => self.num_requests.to_string(),
            "output_len" => self.output_len.to_string(),
            "prompt_len" => self.prompt_len.to_string(),
            "arrivals_file" => show_opt(&self.arrivals_file),
            "fairness_k" => self.fairness_k.to_string(),
            "breaker_threshold" => self.breaker_threshold.to_string(),
            "breaker_cooldown" => self.breaker_cooldown.to_string(),
            "reply_timeout" => show_opt(&self.reply_timeout),
            "compress_p" => self.compress_p.to_string(),
            "compress_penalty" => self.compress_penalty.to_string(),
            "seed" => self.seed.to_string(),
            "delay" => self.delay.to_string(),
            "reorder_prob" => self.reorder_prob.to_string(),
            "reorder_window" => self.reorder_window.to_string(),
            "drop_prob" => self.drop_prob.to_string(),
            "channel_capacity" => self.channel_capacity.to_string(),
            "stale_timeout" => show_opt(&self.stale_timeout),
            "heartbeat_interval" => self.heartbeat_interval.to_string(),
            "heartbeat_expiry" => show_opt(&self.heartbeat_expiry),
            "draft_capacity" => self.draft_capacity.to_string(),
            "draft_slope" => self.draft_slope.to_string(),
            "draft_reference_batch" => show_opt(&self.draft_reference_batch),
            "draft_context_cost" => self.draft_context_cost.to_string(),
            "background_qps" => self.background_qps.to_string(),
            "background_requests" => self.background_requests.to_string(),
            "background_output_len" => self.background_output_len.to_string(),
            "accept_len" => show_opt(&self.accept_len),
            "ema_decay" => self.ema_decay.to_string(),
            "rollback_estimator" => self.rollback_estimator.to_string(),
            "livelock_horizon" => self.livelock_horizon.to_string(),
            "draft_stall_start" => show_opt(&self.draft_stall_start),
            "draft_stall_end" => show_opt(&self.draft_stall_end),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Serializes every key in [`CONFIG_KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = self.get(key).expect("every listed key is gettable");
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        }
        out
    }

    /// Applies `SPECSIM_<KEY>` overrides from an environment listing, e.g.
    /// `SPECSIM_ALPHA=0.9`.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("SPECSIM_") else {
                continue;
            };
            let key = rest.to_ascii_lowercase();
            if CONFIG_KEYS.contains(&key.as_str()) {
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }
}

/// A configuration that passed [`validate_config`], with any regime warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    pub config: SimConfig,
    pub warnings: Vec<String>,
}

impl std::ops::Deref for ValidatedConfig {
    type Target = SimConfig;

    fn deref(&self) -> &SimConfig {
        &self.config
    }
}

/// Warning emitted when γ·T_D ≥ T_T.
pub const OVERLAP_WARNING: &str = "overlap assumption violated";

/// Checks every invariant and reports all violations at once.
pub fn validate_config(config: SimConfig) -> Result<ValidatedConfig, ConfigErrors> {
    let mut issues = Vec::new();
    let mut bad = |field: &'static str, message: &str| {
        issues.push(ConfigIssue {
            field,
            message: message.to_string(),
        })
    };
    let c = &config;

    let positive = |v: f64| v.is_finite() && v > 0.0;
    let non_negative = |v: f64| v.is_finite() && v >= 0.0;
    let prob = |v: f64| (0.0..=1.0).contains(&v);

    if c.batch_size == 0 {
        bad("batch_size", "B must be at least 1");
    }
    if c.gamma == 0 {
        bad("gamma", "gamma must be at least 1");
    }
    if !positive(c.t_target) {
        bad("t_target", "T_T must be a positive latency");
    }
    if !positive(c.t_draft) {
        bad("t_draft", "T_D must be a positive latency");
    }
    if !non_negative(c.target_slope) {
        bad("target_slope", "must be non-negative");
    }
    if !prob(c.alpha) {
        bad("alpha", "probability must lie in [0,1]");
    }
    if !non_negative(c.qps) {
        bad("qps", "must be non-negative");
    }
    if c.output_len == 0 {
        bad("output_len", "must be at least 1");
    }
    if c.fairness_k == 0 {
        bad("fairness_k", "K must be at least 1");
    }
    if c.breaker_threshold == 0 {
        bad("breaker_threshold", "C_max must be at least 1");
    }
    if c.breaker_cooldown == 0 {
        bad("breaker_cooldown", "H must be at least 1");
    }
    if let Some(t) = c.reply_timeout {
        if !positive(t) {
            bad("reply_timeout", "must be a positive latency");
        }
    }
    if !prob(c.compress_p) {
        bad("compress_p", "ratio must lie in [0,1]");
    }
    if !prob(c.compress_penalty) {
        bad("compress_penalty", "must lie in [0,1]");
    }
    match c.delay {
        DelayModel::Constant { secs } if !non_negative(secs) => {
            bad("delay", "constant delay must be non-negative")
        }
        DelayModel::Uniform { lo, hi } if !(non_negative(lo) && non_negative(hi) && lo <= hi) => {
            bad("delay", "uniform delay needs 0 <= lo <= hi")
        }
        DelayModel::Exponential { mean } if !non_negative(mean) => {
            bad("delay", "exponential mean must be non-negative")
        }
        _ => {}
    }
    if !prob(c.reorder_prob) {
        bad("reorder_prob", "probability must lie in [0,1]");
    }
    if !non_negative(c.reorder_window) {
        bad("reorder_window", "must be non-negative");
    }
    if !prob(c.drop_prob) {
        bad("drop_prob", "probability must lie in [0,1]");
    }
    if c.channel_capacity == 0 {
        bad("channel_capacity", "must be at least 1");
    }
    if let Some(t) = c.stale_timeout {
        if !positive(t) {
            bad("stale_timeout", "must be a positive latency");
        }
    }
    if !positive(c.heartbeat_interval) {
        bad("heartbeat_interval", "must be a positive latency");
    }
    if let Some(t) = c.heartbeat_expiry {
        if !positive(t) {
            bad("heartbeat_expiry", "must be a positive latency");
        }
    }
    if c.draft_capacity == 0 {
        bad("draft_capacity", "must be at least 1");
    }
    if !non_negative(c.draft_slope) {
        bad("draft_slope", "must be non-negative");
    }
    if !non_negative(c.draft_context_cost) {
        bad("draft_context_cost", "must be non-negative");
    }
    if !non_negative(c.background_qps) {
        bad("background_qps", "must be non-negative");
    }
    if let Some(l) = c.accept_len {
        if !(l.is_finite() && l >= 1.0) {
            bad("accept_len", "L must be at least 1");
        }
    }
    if !(0.0..1.0).contains(&c.ema_decay) {
        bad("ema_decay", "must lie in [0,1)");
    }
    if !positive(c.livelock_horizon) {
        bad("livelock_horizon", "must be positive");
    }
    match (c.draft_stall_start, c.draft_stall_end) {
        (Some(a), Some(b)) if !(non_negative(a) && b > a) => {
            bad("draft_stall_start", "stall window needs 0 <= start < end")
        }
        (Some(_), None) | (None, Some(_)) => {
            bad("draft_stall_start", "stall window needs both start and end")
        }
        _ => {}
    }

    if !issues.is_empty() {
        return Err(ConfigErrors(issues));
    }

    let mut warnings = Vec::new();
    if c.gamma as f64 * c.t_draft >= c.t_target {
        warnings.push(format!(
            "{OVERLAP_WARNING}: gamma*T_D = {:.6}s >= T_T = {:.6}s",
            c.gamma as f64 * c.t_draft,
            c.t_target
        ));
    }
    Ok(ValidatedConfig { config, warnings })
}
