//! Command-line surface: argument definitions and the commands behind them.
//! `main.rs` only parses and dispatches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::acceptance::{criteria, criterion};
use crate::analytics::{
    critical_fallback_ratio, expected_committed_per_round, ordinary_throughput,
    parallel_throughput, preferred_mode, ThroughputParams,
};
use crate::config::{validate_config, SimConfig};
use crate::error::{Error, Result};
use crate::metrics::{export_report, report_file_name, ExportFormat};
use crate::oracle::TokenStreamOracle;
use crate::presets::{ExperimentPreset, PRESET_NAMES};
use crate::sim::sweep::replicate_seed;
use crate::sim::{run_config, run_sweep, PolicyVariant};
use crate::types::RequestId;

/// Simulator for speculative decoding across a target and a remote draft
/// server, with ordinary, parallel and adaptive coordination.
///
/// Configuration is layered: defaults, then `--config`, then `SPECSIM_<KEY>`
/// environment variables (e.g. `SPECSIM_ALPHA=0.9`), then `--set`, then
/// `--seed`.
#[derive(Debug, Parser)]
#[command(name = "specsim", version, verbatim_doc_comment)]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = "SPECSIM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base seed; replicates derive their seeds from it.
    #[arg(long, global = true, env = "SPECSIM_SEED")]
    pub seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, global = true, env = "SPECSIM_OUT")]
    pub out: Option<PathBuf>,
    /// Report format: csv or json.
    #[arg(long, global = true, env = "SPECSIM_FORMAT", default_value = "csv")]
    pub format: ExportFormat,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the throughput model over a rollback-ratio grid, and r*.
    Model,
    /// Run a single simulation of the configured workload.
    Sim {
        /// AR, ORDINARY, PARALLEL or HYBRID.
        #[arg(long, default_value = "HYBRID")]
        variant: PolicyVariant,
    },
    /// Run a preset sweep and write one report per variant, point and replicate.
    Run {
        /// Preset name or path to a preset JSON file.
        #[arg(long, env = "SPECSIM_PRESET")]
        preset: String,
        /// Override the preset's replicate count.
        #[arg(long, env = "SPECSIM_REPLICATES")]
        replicates: Option<usize>,
    },
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
    /// Write golden files for every acceptance criterion.
    Golden { dir: PathBuf },
    /// Check acceptance criteria against golden files.
    Verify {
        dir: PathBuf,
        /// Only these criterion ids (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Print reference tokens of the synthetic oracle.
    Oracle {
        #[arg(long, default_value_t = 0)]
        request: u64,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
    },
}

/// Builds the effective config from the layered sources.
pub fn load_config<I>(cli: &Cli, env: I) -> Result<SimConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut cfg = match &cli.config {
        Some(p) => SimConfig::from_file(p)?,
        None => SimConfig::default(),
    };
    cfg.apply_env(env)?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Text of `cmd_model`: a header, r*, and one row per grid point.
pub fn cmd_model(cfg: &SimConfig) -> Result<(String, String)> {
    let v = validate_config(cfg.clone())?;
    let len = v
        .accept_len
        .unwrap_or_else(|| expected_committed_per_round(v.alpha, v.gamma));
    let base = ThroughputParams::new(v.batch_size, len, v.gamma, v.t_target, v.t_draft);
    let r_star = critical_fallback_ratio(&base)?;
    let ord = ordinary_throughput(&base);
    let mut text = String::new();
    let mut csv = String::from("r,thr_ordinary,thr_parallel,preferred\n");
    for w in &v.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    let _ = writeln!(
        text,
        "B={} L={len:.4} gamma={} T_T={} T_D={}",
        v.batch_size, v.gamma, v.t_target, v.t_draft
    );
    let _ = writeln!(text, "r* = {r_star:.5}");
    let _ = writeln!(text, "{:>6} {:>12} {:>12}  preferred", "r", "Thr_ord", "Thr_par");
    for i in 0..=20 {
        let r = i as f64 / 20.0;
        let par = parallel_throughput(&base.with_r(r));
        let mode = preferred_mode(r, r_star);
        let _ = writeln!(text, "{r:>6.2} {ord:>12.2} {par:>12.2}  {mode}");
        let _ = writeln!(csv, "{r},{ord},{par},{mode}");
    }
    Ok((text, csv))
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect()
}

/// Files and summary produced by `cmd_run`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub table: String,
    pub all_lossless: bool,
}

/// Runs a preset and writes its reports under `out`.
pub fn cmd_run(
    preset: &ExperimentPreset,
    seed: u64,
    replicates: usize,
    out: &Path,
    format: ExportFormat,
) -> Result<RunSummary> {
    preset.validate()?;
    let mut base = preset.base.clone();
    base.seed = seed;
    let results = run_sweep(&base, &preset.sweep_points(), &preset.variants, replicates)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for r in &results {
        let name = report_file_name(
            r.variant.as_str(),
            &file_safe(&preset.axis),
            &file_safe(&r.label),
            r.report.seed,
            format,
        );
        let path = out.join(name);
        fs::write(&path, export_report(&r.report, format)?)?;
        files.push(path);
    }

    // mean throughput per (point, variant)
    let mut thr: BTreeMap<(usize, PolicyVariant), Vec<f64>> = BTreeMap::new();
    let mut lossless: BTreeMap<usize, bool> = BTreeMap::new();
    for r in &results {
        thr.entry((r.point, r.variant)).or_default().push(r.report.target_throughput);
        *lossless.entry(r.point).or_insert(true) &= r.lossless;
    }
    let mean = |p: usize, v: PolicyVariant| {
        thr.get(&(p, v)).map(|x| x.iter().sum::<f64>() / x.len() as f64)
    };
    let has_ar = preset.variants.contains(&PolicyVariant::Ar);
    let degradation = preset.axis == "background_qps";
    let mut table = String::new();
    let _ = write!(table, "{:<16}", preset.axis);
    for v in &preset.variants {
        let _ = write!(table, " {:>12}", v.as_str());
    }
    if has_ar {
        for v in preset.variants.iter().filter(|v| **v != PolicyVariant::Ar) {
            let _ = write!(table, " {:>12}", format!("{}/AR", v.as_str()));
        }
    }
    if degradation {
        for v in preset.variants.iter().filter(|v| **v != PolicyVariant::Ar) {
            let _ = write!(table, " {:>14}", format!("{} degr.", v.as_str()));
        }
    }
    let _ = writeln!(table, " {:>9}", "lossless");
    for (p, pt) in preset.points.iter().enumerate() {
        let _ = write!(table, "{:<16}", pt.label);
        for &v in &preset.variants {
            let _ = write!(table, " {:>12.1}", mean(p, v).unwrap_or(f64::NAN));
        }
        if has_ar {
            let ar = mean(p, PolicyVariant::Ar).unwrap_or(f64::NAN);
            for &v in preset.variants.iter().filter(|v| **v != PolicyVariant::Ar) {
                let _ = write!(table, " {:>11.2}x", mean(p, v).unwrap_or(f64::NAN) / ar);
            }
        }
        if degradation {
            for &v in preset.variants.iter().filter(|v| **v != PolicyVariant::Ar) {
                let first = mean(0, v).unwrap_or(f64::NAN);
                let d = 1.0 - mean(p, v).unwrap_or(f64::NAN) / first;
                let _ = write!(table, " {:>13.2}%", d * 100.0);
            }
        }
        let _ = writeln!(table, " {:>9}", if lossless[&p] { "yes" } else { "NO" });
    }
    let summary = out.join("summary.txt");
    fs::write(&summary, &table)?;
    files.push(summary);
    Ok(RunSummary {
        files,
        table,
        all_lossless: lossless.values().all(|&b| b),
    })
}

/// Frozen parameters of one criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFile {
    pub id: u8,
    pub name: String,
    pub params: Value,
    /// FNV-1a of the canonical params JSON; edits without regenerating show
    /// up as tampering.
    pub digest: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn params_digest(params: &Value) -> String {
    format!("{:016x}", fnv1a(params.to_string().as_bytes()))
}

pub fn golden_path(dir: &Path, id: u8) -> PathBuf {
    dir.join(format!("criterion_{id:02}.json"))
}

/// Writes one golden file per criterion.
pub fn cmd_golden(dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for c in criteria() {
        let params = (c.params)();
        let g = GoldenFile {
            id: c.id,
            name: c.name.to_string(),
            digest: params_digest(&params),
            params,
        };
        let path = golden_path(dir, c.id);
        fs::write(&path, serde_json::to_string_pretty(&g)? + "\n")?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldenStatus {
    Pass,
    Fail,
    Missing,
    Invalid,
    Tampered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyLine {
    pub id: u8,
    pub name: String,
    pub status: GoldenStatus,
    pub detail: String,
}

/// Checks each criterion against its golden file.
pub fn cmd_verify(dir: &Path, only: &[u8]) -> Vec<VerifyLine> {
    let mut lines = Vec::new();
    for c in criteria() {
        if !only.is_empty() && !only.contains(&c.id) {
            continue;
        }
        let line = |status, detail: String| VerifyLine {
            id: c.id,
            name: c.name.to_string(),
            status,
            detail,
        };
        let path = golden_path(dir, c.id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(_) => {
                lines.push(line(GoldenStatus::Missing, format!("{} not found", path.display())));
                continue;
            }
        };
        let g: GoldenFile = match serde_json::from_str(&text) {
            Ok(g) => g,
            Err(e) => {
                lines.push(line(GoldenStatus::Invalid, e.to_string()));
                continue;
            }
        };
        if g.id != c.id {
            lines.push(line(GoldenStatus::Invalid, format!("file holds criterion {}", g.id)));
            continue;
        }
        if params_digest(&g.params) != g.digest {
            lines.push(line(GoldenStatus::Tampered, "params do not match digest".into()));
            continue;
        }
        let v = criterion(c.id).expect("listed").run_with(&g.params);
        let status = if v.passed { GoldenStatus::Pass } else { GoldenStatus::Fail };
        lines.push(line(status, v.detail));
    }
    lines
}

pub fn cmd_oracle(seed: u64, request: u64, start: usize, len: usize) -> String {
    TokenStreamOracle::new(seed)
        .reference_slice(RequestId(request), start, len)
        .iter()
        .map(|t| t.0.to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Lists presets or returns one as JSON.
pub fn cmd_presets(name: Option<&str>) -> Result<String> {
    match name {
        None => Ok(PRESET_NAMES.join("\n")),
        Some(n) => Ok(serde_json::to_string_pretty(&ExperimentPreset::resolve(n)?)?),
    }
}

/// Executes a parsed command. Returns false when work completed but some
/// item failed (a failing criterion, a lossy run).
pub fn execute(cli: &Cli) -> Result<bool> {
    let cfg = || load_config(cli, std::env::vars());
    match &cli.command {
        Command::Model => {
            let (text, csv) = cmd_model(&cfg()?)?;
            print!("{text}");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("model.csv"), csv)?;
            }
            Ok(true)
        }
        Command::Sim { variant } => {
            let cfg = cfg()?;
            let report = run_config(&cfg, *variant)?;
            let text = export_report(&report, cli.format)?;
            match &cli.out {
                Some(out) => {
                    fs::create_dir_all(out)?;
                    let name = report_file_name(variant.as_str(), "single", "0", cfg.seed, cli.format);
                    fs::write(out.join(name), text)?;
                }
                None => println!("{text}"),
            }
            Ok(true)
        }
        Command::Run { preset, replicates } => {
            let p = ExperimentPreset::resolve(preset)?;
            let seed = cli.seed.unwrap_or(p.base.seed);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&p.output_dir));
            let reps = replicates.unwrap_or(p.replicates);
            let s = cmd_run(&p, seed, reps, &out, cli.format)?;
            print!("{}", s.table);
            eprintln!("{} files written to {}", s.files.len(), out.display());
            if !s.all_lossless {
                eprintln!("some runs committed tokens that differ from the reference");
            }
            Ok(s.all_lossless)
        }
        Command::Presets { name } => {
            println!("{}", cmd_presets(name.as_deref())?);
            Ok(true)
        }
        Command::Golden { dir } => {
            let files = cmd_golden(dir)?;
            eprintln!("{} golden files written to {}", files.len(), dir.display());
            Ok(true)
        }
        Command::Verify { dir, only } => {
            let lines = cmd_verify(dir, only);
            for l in &lines {
                println!("{}", serde_json::to_string(l)?);
            }
            let failing: Vec<String> = lines
                .iter()
                .filter(|l| l.status != GoldenStatus::Pass)
                .map(|l| format!("{} ({:?})", l.id, l.status))
                .collect();
            if !failing.is_empty() {
                eprintln!("failing criteria: {}", failing.join(", "));
            }
            Ok(failing.is_empty())
        }
        Command::Oracle { request, start, len } => {
            let seed = cfg()?.seed;
            println!("{}", cmd_oracle(seed, *request, *start, *len));
            Ok(true)
        }
    }
}

/// Seeds used for each replicate of a run.
pub fn replicate_seeds(base: u64, replicates: usize) -> Vec<u64> {
    (0..replicates).map(|r| replicate_seed(base, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn model_worked_example() {
        let cfg = SimConfig {
            accept_len: Some(3.0),
            ..SimConfig::default()
        };
        let (text, csv) = cmd_model(&cfg).unwrap();
        assert!(text.contains("1476.92"), "{text}");
        assert!(text.contains("r* = 0.34615"));
        let first = csv.lines().nth(1).unwrap();
        let last = csv.lines().last().unwrap();
        // r = 0 gives B·L/T_T, r = 1 gives B/T_T
        assert!(first.starts_with("0,") && first.contains(",1920,"), "{first}");
        assert!(last.starts_with("1,") && last.contains(",640,"), "{last}");
    }

    #[test]
    fn model_requires_l_above_one() {
        let cfg = SimConfig {
            accept_len: Some(1.0),
            ..SimConfig::default()
        };
        let err = cmd_model(&cfg).unwrap_err().to_string();
        assert!(err.contains("requires L>1"), "{err}");
    }

    #[test]
    fn layered_config() {
        let cli = Cli::parse_from(["specsim", "--set", "alpha=0.5", "--seed", "9", "model"]);
        let env = vec![
            ("SPECSIM_ALPHA".to_string(), "0.7".to_string()),
            ("SPECSIM_GAMMA".to_string(), "6".to_string()),
        ];
        let cfg = load_config(&cli, env).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.gamma, 6);
        assert_eq!(cfg.seed, 9);
        let bad = Cli::parse_from(["specsim", "--set", "alpha", "model"]);
        assert!(load_config(&bad, Vec::new()).is_err());
    }

    #[test]
    fn digest_detects_edits() {
        let v = serde_json::json!({"a": 1, "b": [1.5, 2]});
        let mut w = v.clone();
        assert_eq!(params_digest(&v), params_digest(&w));
        w["a"] = serde_json::json!(2);
        assert_ne!(params_digest(&v), params_digest(&w));
    }

    #[test]
    fn file_names_are_safe() {
        assert_eq!(file_safe("d0.05-r0.2/x:0"), "d0.05-r0.2-x-0");
    }
}
