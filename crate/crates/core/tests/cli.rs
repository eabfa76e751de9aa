use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_biphoton"))
}

fn minimal_config(dir: &Path, n_particles: usize) -> PathBuf {
    let text = format!(
        r#"output_dir = "{out}"

[scene]
layout = {{ kind = "random_cube", n_particles = {n_particles}, box_edge = 5.0 }}

[[states]]
kind = "entangled_pure"
schmidt_rank = 2
theta_middle_deg = 140.0
delta_theta_deg = 1.0

[[states]]
kind = "fully_mixed"
schmidt_rank = 2
theta_middle_deg = 140.0
delta_theta_deg = 1.0

[[states]]
kind = "coherent_single_wave"
theta_middle_deg = 140.0
delta_theta_deg = 1.0

[ensemble]
n_realizations = 10
master_seed = 21
block_size = 2

[grid]
min_deg = -90.0
max_deg = 90.0
step_deg = 1.0

[analyses]
gaussian_compare = true
averaging_order_compare = true
write_smatrix = true
"#,
        out = dir.join("out").display()
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(csv_files(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_curves_manifest_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 50);
    let status = bin().arg("run").arg("--config").arg(&cfg).status().unwrap();
    assert!(status.success());
    let out = tmp.path().join("out");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["master_seed"], 21);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 0);
    assert_eq!(manifest["states"].as_array().unwrap().len(), 3);
    for st in manifest["states"].as_array().unwrap() {
        for f in st["files"].as_array().unwrap() {
            let text = fs::read_to_string(out.join(f.as_str().unwrap())).unwrap();
            let mut lines = text.lines();
            assert_eq!(lines.next(), Some("theta_rad,value,stderr"));
            let rows: Vec<&str> = lines.collect();
            assert_eq!(rows.len(), 181);
            for r in rows {
                let cols: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
                assert_eq!(cols.len(), 3);
                assert!(cols[1].is_finite() && cols[2].is_finite());
            }
        }
    }
    let norm = fs::read_to_string(out.join("coherent_single_wave_M1_mid140_d1/i2_normalized.csv")).unwrap();
    let max = norm
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .fold(f64::MIN, f64::max);
    assert_eq!(max, 2.0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["states"][0]["gaussian_compare"]["predicted_c_coinciding"].as_f64().is_some());
    assert_eq!(report["pure_mixed_contrast"].as_array().unwrap().len(), 1);
    assert!(out.join("smatrix_0.bin").exists());
}

#[test]
fn reruns_and_worker_counts_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 40);
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, workers) in runs {
        let status = bin()
            .args(["run", "--workers", workers, "--output"])
            .arg(tmp.path().join(name))
            .arg("--config")
            .arg(&cfg)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = csv_files(&tmp.path().join("a"));
    assert_eq!(a.len(), 15);
    for other in ["b", "c"] {
        let b = csv_files(&tmp.path().join(other));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
    }
    let hash = |d: &str| -> Value {
        let m: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join(d).join("manifest.json")).unwrap()).unwrap();
        m["config_hash"].clone()
    };
    assert_eq!(hash("a"), hash("c"));
}

#[test]
fn invalid_config_exits_nonzero_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 50);
    let text = fs::read_to_string(&cfg).unwrap().replace("theta_middle_deg = 140.0\ndelta_theta_deg = 1.0\n\n[[states]]\nkind = \"fully_mixed\"", "theta_middle_deg = 40.0\ndelta_theta_deg = 1.0\n\n[[states]]\nkind = \"fully_mixed\"");
    fs::write(&cfg, text).unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("states[0]"), "{err}");
    assert!(!tmp.path().join("out").exists());

    let typo = fs::read_to_string(&cfg).unwrap().replace("block_size = 2", "blocksize = 2");
    fs::write(&cfg, typo).unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocksize"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn dry_run_validates_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 50);
    let out = bin().args(["--dry-run", "run", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("config valid"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn compute_failure_reports_realization_index() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 50);
    let text = fs::read_to_string(&cfg).unwrap().replace("box_edge = 5.0", "box_edge = 1.0").replace("n_particles = 50", "n_particles = 400");
    fs::write(&cfg, text).unwrap();
    let out = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("realization 0"), "{err}");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 1);
    assert!(csv_files(&tmp.path().join("out")).is_empty());
}

#[test]
fn fewbody_pair_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["fewbody", "--layout", "pair", "--spacing", "1.0", "--rank", "2", "--delta-theta", "2", "--output"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("fewbody_report.json")).unwrap()).unwrap();
    let curves = report["curves"].as_array().unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves[0]["max"].as_f64().unwrap() <= 2.0 + 1e-9);
    assert_eq!(report["contrast"]["violation"], false);
    assert!(tmp.path().join("fewbody_entangled_pure_M2_mid180_d2.csv").exists());
}

#[test]
fn speckle_command_writes_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        r#"output_dir = "{}"
[scene]
layout = {{ kind = "random_cube", n_particles = 60, box_edge = 5.0 }}
[ensemble]
n_realizations = 12
master_seed = 3
[grid]
min_deg = -80.0
max_deg = 80.0
step_deg = 2.0
[analyses]
cone_fit = false
[analyses.speckle]
reference_deg = 140.0
offsets_deg = [0.0, 1.0, 2.0, 4.0, 8.0]
"#,
        tmp.path().join("sp").display()
    );
    let cfg = tmp.path().join("sp.toml");
    fs::write(&cfg, text).unwrap();
    let out = bin().arg("speckle").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("sp/speckle.csv")).unwrap();
    let first = csv.lines().nth(1).unwrap();
    assert_eq!(first, "0,1,1");
}

#[test]
fn sweep_over_schmidt_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = minimal_config(tmp.path(), 30);
    let out = bin()
        .args(["sweep", "--axis", "schmidt-rank", "--values", "1,2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/sweep_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["values"].as_array().unwrap().len(), 2);
    let seeds = summary["seeds"].as_array().unwrap();
    assert_ne!(seeds[0], seeds[1]);
    assert!(tmp.path().join("out/schmidt_rank_1/manifest.json").exists());
}

#[test]
fn oracle_check_command() {
    let out = bin().args(["oracle-check", "--trials", "10"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-10);
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = bin().arg("run").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
