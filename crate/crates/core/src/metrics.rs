//! Run reports, derived statistics, revenue accounting and CSV/JSON export.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Mode;

/// Measured outcome of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    /// Committed target tokens per second of simulated time.
    pub target_throughput: f64,
    /// Regular (background) draft tokens per second.
    pub draft_throughput: f64,
    /// Mean committed delta over all request-rounds.
    pub mean_accepted_length: f64,
    /// Mean committed delta over CACHED and REPAIRED request-rounds.
    pub mean_speculative_accepted_length: f64,
    pub mean_rollback_ratio: f64,
    /// Fraction of rounds run in PARALLEL mode.
    pub parallel_fraction: f64,
    pub rounds: u64,
    pub request_rounds: u64,
    pub sim_duration: f64,
    pub total_committed: u64,
    pub requests_finished: u64,
    pub breaker_activations: u64,
    pub disabled_rounds: u64,
    pub conservative_rounds: u64,
    pub envelopes_sent: u64,
    pub envelopes_delivered: u64,
    pub envelopes_dropped: u64,
    pub envelopes_stale: u64,
    pub backpressure_events: u64,
    /// Replies rejected by the (request, round) validity filter.
    pub replies_rejected: u64,
    pub repair_timeouts: u64,
    pub prepare_misses: u64,
    pub sync_gaps: u64,
    pub max_regular_wait: u64,
    pub rollback_ratio_series: Vec<f64>,
    pub mode_timeline: Vec<Mode>,
}

/// Scalar CSV columns, in order. Two list columns follow:
/// `rollback_ratio_series` and `mode_timeline`, each `;`-separated, modes
/// written as `P`/`O`.
pub const CSV_SCALAR_COLUMNS: &[&str] = &[
    "variant",
    "seed",
    "target_throughput",
    "draft_throughput",
    "mean_accepted_length",
    "mean_speculative_accepted_length",
    "mean_rollback_ratio",
    "parallel_fraction",
    "rounds",
    "request_rounds",
    "sim_duration",
    "total_committed",
    "requests_finished",
    "breaker_activations",
    "disabled_rounds",
    "conservative_rounds",
    "envelopes_sent",
    "envelopes_delivered",
    "envelopes_dropped",
    "envelopes_stale",
    "backpressure_events",
    "replies_rejected",
    "repair_timeouts",
    "prepare_misses",
    "sync_gaps",
    "max_regular_wait",
];

pub fn csv_header() -> String {
    let mut cols: Vec<&str> = CSV_SCALAR_COLUMNS.to_vec();
    cols.push("rollback_ratio_series");
    cols.push("mode_timeline");
    cols.join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Parse(format!("unknown format `{other}`"))),
        }
    }
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl MetricsReport {
    /// `target_throughput · sim_duration`.
    pub fn committed_from_throughput(&self) -> f64 {
        self.target_throughput * self.sim_duration
    }

    fn csv_row(&self) -> String {
        let series: Vec<String> = self
            .rollback_ratio_series
            .iter()
            .map(|v| v.to_string())
            .collect();
        let modes: Vec<&str> = self
            .mode_timeline
            .iter()
            .map(|m| match m {
                Mode::Parallel => "P",
                Mode::Ordinary => "O",
            })
            .collect();
        let fields = [
            self.variant.clone(),
            self.seed.to_string(),
            self.target_throughput.to_string(),
            self.draft_throughput.to_string(),
            self.mean_accepted_length.to_string(),
            self.mean_speculative_accepted_length.to_string(),
            self.mean_rollback_ratio.to_string(),
            self.parallel_fraction.to_string(),
            self.rounds.to_string(),
            self.request_rounds.to_string(),
            self.sim_duration.to_string(),
            self.total_committed.to_string(),
            self.requests_finished.to_string(),
            self.breaker_activations.to_string(),
            self.disabled_rounds.to_string(),
            self.conservative_rounds.to_string(),
            self.envelopes_sent.to_string(),
            self.envelopes_delivered.to_string(),
            self.envelopes_dropped.to_string(),
            self.envelopes_stale.to_string(),
            self.backpressure_events.to_string(),
            self.replies_rejected.to_string(),
            self.repair_timeouts.to_string(),
            self.prepare_misses.to_string(),
            self.sync_gaps.to_string(),
            self.max_regular_wait.to_string(),
            series.join(";"),
            modes.join(";"),
        ];
        fields.join(",")
    }

    fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim_end_matches(['\r', '\n']).split(',').collect();
        let expected = CSV_SCALAR_COLUMNS.len() + 2;
        if f.len() != expected {
            return Err(Error::Parse(format!(
                "csv row has {} fields, expected {expected}",
                f.len()
            )));
        }
        let mut i = 0;
        let mut next = || {
            let v = f[i];
            i += 1;
            v
        };
        fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad csv value `{v}`")))
        }
        let variant = next().to_string();
        let mut r = MetricsReport {
            variant,
            seed: num(next())?,
            target_throughput: num(next())?,
            draft_throughput: num(next())?,
            mean_accepted_length: num(next())?,
            mean_speculative_accepted_length: num(next())?,
            mean_rollback_ratio: num(next())?,
            parallel_fraction: num(next())?,
            rounds: num(next())?,
            request_rounds: num(next())?,
            sim_duration: num(next())?,
            total_committed: num(next())?,
            requests_finished: num(next())?,
            breaker_activations: num(next())?,
            disabled_rounds: num(next())?,
            conservative_rounds: num(next())?,
            envelopes_sent: num(next())?,
            envelopes_delivered: num(next())?,
            envelopes_dropped: num(next())?,
            envelopes_stale: num(next())?,
            backpressure_events: num(next())?,
            replies_rejected: num(next())?,
            repair_timeouts: num(next())?,
            prepare_misses: num(next())?,
            sync_gaps: num(next())?,
            max_regular_wait: num(next())?,
            rollback_ratio_series: Vec::new(),
            mode_timeline: Vec::new(),
        };
        let series = next();
        if !series.is_empty() {
            r.rollback_ratio_series = series
                .split(';')
                .map(num::<f64>)
                .collect::<Result<_>>()?;
        }
        let modes = next();
        if !modes.is_empty() {
            r.mode_timeline = modes
                .split(';')
                .map(|m| m.parse::<Mode>().map_err(Error::Parse))
                .collect::<Result<_>>()?;
        }
        Ok(r)
    }
}

/// Serializes reports with a header row (CSV) or as a JSON array.
pub fn export_reports(reports: &[MetricsReport], format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Csv => {
            let mut out = csv_header();
            out.push('\n');
            for r in reports {
                out.push_str(&r.csv_row());
                out.push('\n');
            }
            Ok(out)
        }
        ExportFormat::Json => Ok(serde_json::to_string_pretty(reports)?),
    }
}

pub fn export_report(report: &MetricsReport, format: ExportFormat) -> Result<String> {
    match format {
        ExportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ExportFormat::Csv => export_reports(std::slice::from_ref(report), format),
    }
}

/// Writes an exported report to `sink`.
pub fn write_report<W: Write>(
    report: &MetricsReport,
    format: ExportFormat,
    mut sink: W,
) -> Result<()> {
    sink.write_all(export_report(report, format)?.as_bytes())?;
    Ok(())
}

/// Parses the output of [`export_reports`] or [`export_report`].
pub fn import_reports(text: &str, format: ExportFormat) -> Result<Vec<MetricsReport>> {
    match format {
        ExportFormat::Json => {
            let v: serde_json::Value = serde_json::from_str(text)?;
            if v.is_array() {
                Ok(serde_json::from_value(v)?)
            } else {
                Ok(vec![serde_json::from_value(v)?])
            }
        }
        ExportFormat::Csv => {
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            if header != csv_header() {
                return Err(Error::Parse("csv header does not match schema".into()));
            }
            lines
                .filter(|l| !l.is_empty())
                .map(MetricsReport::from_csv_row)
                .collect()
        }
    }
}

/// Report file name: `{variant}_{axis}_{value}_{seed}.{ext}`.
pub fn report_file_name(variant: &str, axis: &str, value: &str, seed: u64, format: ExportFormat) -> String {
    format!("{variant}_{axis}_{value}_{seed}.{}", format.extension())
}

/// Mean committed delta per round.
pub fn mean_accepted_length(per_round_commits: &[usize]) -> Result<f64> {
    if per_round_commits.is_empty() {
        return Err(Error::Domain("mean accepted length of an empty trace".into()));
    }
    Ok(per_round_commits.iter().sum::<usize>() as f64 / per_round_commits.len() as f64)
}

/// Revenue inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    /// Dollars per million target tokens.
    pub price_target: f64,
    /// Dollars per million draft tokens.
    pub price_draft: f64,
    pub gpu_count_target: u32,
    pub gpu_count_draft: u32,
    pub include_draft_revenue: bool,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            price_target: 3.0,
            price_draft: 0.45,
            gpu_count_target: 1,
            gpu_count_draft: 1,
            include_draft_revenue: true,
        }
    }
}

/// Dollars per 1000 seconds per GPU.
pub fn benefit_efficiency(target_thr: f64, draft_thr: f64, pricing: &PricingConfig) -> f64 {
    let draft = if pricing.include_draft_revenue {
        draft_thr * pricing.price_draft
    } else {
        0.0
    };
    let gpus = f64::from(pricing.gpu_count_target + pricing.gpu_count_draft);
    (target_thr * pricing.price_target + draft) / 1e6 * 1000.0 / gpus
}

/// Sample mean and the half-width of a normal-approximation 99% interval.
pub fn mean_ci99(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 2.576 * (var / n as f64).sqrt())
}

/// Throughput of each report relative to the AR report with the same seed.
/// Reports must come from one sweep; unmatched entries get `None`.
pub fn speedups(reports: &[MetricsReport]) -> Vec<Option<f64>> {
    reports
        .iter()
        .map(|r| {
            reports
                .iter()
                .find(|a| a.variant == "AR" && a.seed == r.seed)
                .filter(|a| a.target_throughput > 0.0)
                .map(|a| r.target_throughput / a.target_throughput)
        })
        .collect()
}
