use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specsim::cli::{cmd_golden, golden_path, GoldenFile};
use specsim::presets::{ExperimentPreset, PresetPoint};
use specsim::sim::PolicyVariant;
use specsim::SimConfig;

fn specsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specsim"))
        .args(args)
        .env_remove("SPECSIM_CONFIG")
        .env_remove("SPECSIM_SEED")
        .env_remove("SPECSIM_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_documents_every_flag() {
    let o = specsim(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--config", "--seed", "--out", "--format", "--set", "SPECSIM_CONFIG"] {
        assert!(text.contains(flag), "help lacks {flag}");
    }
    for cmd in ["model", "sim", "run", "presets", "golden", "verify", "oracle"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    let run = stdout(&specsim(&["run", "--help"]));
    assert!(run.contains("--preset") && run.contains("--replicates"));
}

#[test]
fn model_prints_worked_example_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = specsim(&["--set", "accept_len=3", "--out", out, "model"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("1476.92"), "{text}");
    assert!(text.contains("0.34615"), "{text}");
    let csv = fs::read_to_string(dir.path().join("model.csv")).unwrap();
    let row: Vec<&str> = csv.lines().find(|l| l.starts_with("0.2,")).unwrap().split(',').collect();
    let num = |i: usize| row[i].parse::<f64>().unwrap();
    assert!((num(1) - 1476.923076923077).abs() < 1e-9);
    assert!((num(2) - 1664.0).abs() < 1e-9);
    assert_eq!(row[3], "PARALLEL");
}

#[test]
fn model_rejects_unit_accept_length() {
    let o = specsim(&["--set", "accept_len=1", "model"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires L>1"));
}

#[test]
fn env_and_config_file_layers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "accept_len = 3\ngamma = 2\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_specsim"))
        .args(["--config", cfg.to_str().unwrap(), "model"])
        .env("SPECSIM_GAMMA", "4")
        .env_remove("SPECSIM_SEED")
        .output()
        .unwrap();
    assert!(o.status.success());
    // the environment overrides the file
    assert!(stdout(&o).contains("gamma=4"));
}

#[test]
fn golden_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(specsim(&["golden", d]).status.success());
    let o = specsim(&["verify", d, "--only", "1,2,9,11"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["status"] == "pass"));
}

#[test]
fn verify_flags_tampered_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    cmd_golden(dir.path()).unwrap();
    let p1 = golden_path(dir.path(), 1);
    let mut g: GoldenFile = serde_json::from_str(&fs::read_to_string(&p1).unwrap()).unwrap();
    g.params["ordinary"] = serde_json::json!(1500.0);
    fs::write(&p1, serde_json::to_string(&g).unwrap()).unwrap();
    fs::remove_file(golden_path(dir.path(), 2)).unwrap();
    fs::write(golden_path(dir.path(), 9), "{not json").unwrap();

    let o = specsim(&["verify", dir.path().to_str().unwrap(), "--only", "1,2,9,11"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    let status = |id: u64| {
        text.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
            .find(|v| v["id"] == id)
            .unwrap()["status"]
            .as_str()
            .unwrap()
            .to_string()
    };
    assert_eq!(status(1), "tampered");
    assert_eq!(status(2), "missing");
    assert_eq!(status(9), "invalid");
    assert_eq!(status(11), "pass");
}

#[test]
fn wrong_expectation_fails_verification() {
    // a regenerated digest with a wrong frozen value is not tampering, just wrong
    let dir = tempfile::tempdir().unwrap();
    cmd_golden(dir.path()).unwrap();
    let p1 = golden_path(dir.path(), 1);
    let mut g: GoldenFile = serde_json::from_str(&fs::read_to_string(&p1).unwrap()).unwrap();
    g.params["ordinary"] = serde_json::json!(1500.0);
    g.digest = specsim::cli::params_digest(&g.params);
    fs::write(&p1, serde_json::to_string(&g).unwrap()).unwrap();
    let o = specsim(&["verify", dir.path().to_str().unwrap(), "--only", "1"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("\"status\":\"fail\""));
}

#[test]
fn shipped_golden_files_verify() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let o = specsim(&["verify", dir.to_str().unwrap(), "--only", "1,2,9,11"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

fn small_preset(path: &Path) {
    let p = ExperimentPreset {
        name: "tiny".into(),
        base: SimConfig {
            batch_size: 4,
            num_requests: 8,
            output_len: 32,
            ..SimConfig::default()
        },
        axis: "alpha".into(),
        points: ["0.3", "0.9"]
            .iter()
            .map(|a| PresetPoint {
                label: a.to_string(),
                overrides: vec![("alpha".into(), a.to_string())],
            })
            .collect(),
        variants: PolicyVariant::ALL.to_vec(),
        replicates: 2,
        output_dir: "unused".into(),
    };
    fs::write(path, serde_json::to_string_pretty(&p).unwrap()).unwrap();
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let preset = dir.path().join("tiny.json");
    small_preset(&preset);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = specsim(&[
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
            "run",
            "--preset",
            preset.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files: Vec<(String, String)> = fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read_to_string(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push((stdout(&o), files));
    }
    // 4 variants x 2 points x 2 replicates, plus the summary
    assert_eq!(outputs[0].1.len(), 17);
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].0.contains("HYBRID/AR"));
}

#[test]
fn sim_json_report() {
    let o = specsim(&[
        "--format", "json", "--set", "num_requests=4", "--set", "batch_size=4",
        "--set", "output_len=16", "sim", "--variant", "PARALLEL",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["target_throughput"].as_f64().unwrap() > 0.0);
}

#[test]
fn oracle_and_presets() {
    let a = stdout(&specsim(&["--seed", "5", "oracle", "--len", "4"]));
    let b = stdout(&specsim(&["--seed", "5", "oracle", "--start", "2", "--len", "2"]));
    let a: Vec<&str> = a.lines().collect();
    assert_eq!(a.len(), 4);
    assert_eq!(&a[2..], b.lines().collect::<Vec<_>>().as_slice());

    let list = stdout(&specsim(&["presets"]));
    assert!(list.contains("mixed-traffic"));
    let chaos: ExperimentPreset = serde_json::from_str(&stdout(&specsim(&["presets", "chaos"]))).unwrap();
    assert_eq!(chaos.points.len(), 12);
    assert!(!specsim(&["presets", "nope"]).status.success());
}
