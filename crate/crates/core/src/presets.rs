//! Named experiment presets. A preset plus a seed fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{validate_config, SimConfig};
use crate::error::{Error, Result};
use crate::sim::{PolicyVariant, SweepPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetPoint {
    pub label: String,
    /// Config keys and values applied on top of the base config.
    pub overrides: Vec<(String, String)>,
}

impl From<&PresetPoint> for SweepPoint {
    fn from(p: &PresetPoint) -> Self {
        SweepPoint {
            label: p.label.clone(),
            overrides: p.overrides.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub base: SimConfig,
    /// Axis name used in report file names.
    pub axis: String,
    pub points: Vec<PresetPoint>,
    pub variants: Vec<PolicyVariant>,
    pub replicates: usize,
    pub output_dir: String,
}

pub const PRESET_NAMES: [&str; 5] = [
    "crossover",
    "batch-scaling",
    "mixed-traffic",
    "tp-imbalance",
    "chaos",
];

fn point(label: impl Into<String>, kv: &[(&str, String)]) -> PresetPoint {
    PresetPoint {
        label: label.into(),
        overrides: kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

fn axis(key: &str, values: &[&str]) -> Vec<PresetPoint> {
    values.iter().map(|v| point(*v, &[(key, v.to_string())])).collect()
}

impl ExperimentPreset {
    fn new(name: &str, base: SimConfig, axis: &str, points: Vec<PresetPoint>, variants: &[PolicyVariant]) -> Self {
        Self {
            name: name.into(),
            base,
            axis: axis.into(),
            points,
            variants: variants.to_vec(),
            replicates: 1,
            output_dir: format!("results/{name}"),
        }
    }

    /// Looks up a shipped preset by name.
    pub fn builtin(name: &str) -> Result<Self> {
        use PolicyVariant::*;
        let all = [Ar, Ordinary, Parallel, Hybrid];
        let p = match name {
            "crossover" => Self::new(
                name,
                SimConfig::default(),
                "alpha",
                axis(
                    "alpha",
                    &["0.05", "0.15", "0.3", "0.45", "0.6", "0.7", "0.8", "0.9", "0.95", "0.985"],
                ),
                &all,
            ),
            "batch-scaling" => {
                // arrival rate and sample count grow with the batch
                let points = [1usize, 16, 32, 64, 128]
                    .iter()
                    .map(|&b| {
                        point(
                            b.to_string(),
                            &[
                                ("batch_size", b.to_string()),
                                ("num_requests", (2 * b).to_string()),
                                ("qps", (b as f64 / 4.0).max(1.0).to_string()),
                            ],
                        )
                    })
                    .collect();
                Self::new(
                    name,
                    SimConfig {
                        output_len: 512,
                        ..SimConfig::default()
                    },
                    "batch",
                    points,
                    &all,
                )
            }
            "mixed-traffic" => Self::new(
                name,
                SimConfig::default(),
                "background_qps",
                axis("background_qps", &["0", "1", "2", "4", "8"]),
                &[Ar, Hybrid],
            ),
            "tp-imbalance" => Self::new(
                name,
                SimConfig {
                    t_target: SimConfig::default().t_target / 4.0,
                    ..SimConfig::default()
                },
                "compress_p",
                axis("compress_p", &["0.1", "1.0"]),
                &all,
            ),
            "chaos" => {
                let mut points = Vec::new();
                for d in ["0.0001", "0.005", "0.05"] {
                    for r in ["0", "0.2"] {
                        for x in ["0", "0.05"] {
                            points.push(point(
                                format!("d{d}-r{r}-x{x}"),
                                &[
                                    ("delay", d.to_string()),
                                    ("reorder_prob", r.to_string()),
                                    ("drop_prob", x.to_string()),
                                ],
                            ));
                        }
                    }
                }
                Self::new(
                    name,
                    SimConfig {
                        batch_size: 8,
                        num_requests: 16,
                        output_len: 256,
                        ..SimConfig::default()
                    },
                    "grid",
                    points,
                    &[Ordinary, Parallel, Hybrid],
                )
            }
            other => return Err(Error::UnknownPreset(other.to_string())),
        };
        Ok(p)
    }

    /// A built-in name or a path to a JSON preset file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if PRESET_NAMES.contains(&name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            let p: Self = serde_json::from_str(&text)?;
            p.validate()?;
            return Ok(p);
        }
        Err(Error::UnknownPreset(name_or_path.to_string()))
    }

    /// Every point must produce a valid config.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.variants.is_empty() || self.replicates == 0 {
            return Err(Error::Parse(format!(
                "preset `{}` needs points, variants and at least one replicate",
                self.name
            )));
        }
        for p in &self.points {
            let cfg = SweepPoint::from(p).apply(&self.base)?;
            validate_config(cfg)?;
        }
        Ok(())
    }

    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        self.points.iter().map(SweepPoint::from).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_valid() {
        for n in PRESET_NAMES {
            let p = ExperimentPreset::builtin(n).unwrap();
            p.validate().unwrap();
            assert_eq!(p.name, n);
        }
        assert_eq!(ExperimentPreset::builtin("crossover").unwrap().points.len(), 10);
        assert_eq!(ExperimentPreset::builtin("chaos").unwrap().points.len(), 12);
        let tp = ExperimentPreset::builtin("tp-imbalance").unwrap();
        assert!((tp.base.t_target - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(
            ExperimentPreset::resolve("nope"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = ExperimentPreset::builtin("mixed-traffic").unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&p).unwrap()).unwrap();
        assert_eq!(ExperimentPreset::resolve(path.to_str().unwrap()).unwrap(), p);
    }

    #[test]
    fn invalid_point_rejected() {
        let mut p = ExperimentPreset::builtin("crossover").unwrap();
        p.points[0].overrides = vec![("alpha".into(), "1.5".into())];
        assert!(p.validate().is_err());
    }
}
