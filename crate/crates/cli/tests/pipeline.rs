//! End-to-end pipeline through the binary, stage by stage and via the full
//! evaluate verb.

use std::path::Path;
use std::process::Command;

fn flipad() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flipad"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn flipad");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(out.status.success(), "command failed:\n{stdout}\n{stderr}");
    stdout
}

fn out(path: &Path) -> [std::ffi::OsString; 2] {
    ["--out".into(), path.as_os_str().to_owned()]
}

/// Concatenate two labeled-set directories into one.
fn merge_sets(a: &Path, b: &Path, merged: &Path) {
    let mut all = Vec::new();
    for dir in [a, b] {
        let m: serde_json::Value =
            serde_json::from_reader(std::fs::File::open(dir.join("set.json")).unwrap()).unwrap();
        for e in m["entries"].as_array().unwrap() {
            let file = e["file"].as_str().unwrap();
            std::fs::copy(dir.join(file), merged.join(file)).unwrap();
            all.push(e.clone());
        }
    }
    serde_json::to_writer_pretty(
        std::fs::File::create(merged.join("set.json")).unwrap(),
        &serde_json::json!({ "entries": all }),
    )
    .unwrap();
}

const STAGE_CONFIG: &str = r#"{
    "lambda": 5e-4,
    "pool": [2, 2],
    "mean_samples": 100,
    "train": {
        "epochs": 8, "lr": 5e-4, "decay_epochs": [4], "decay_factor": 0.1,
        "batch_size": 32, "betas": [0.9, 0.999], "weight_decay": 5e-7,
        "eta": 1.0, "seed": 0, "eps_sad": 1e-6,
        "hidden": [32, 16], "leaky_slope": 0.01
    }
}"#;

#[test]
fn stage_wise_pipeline_produces_a_calibrated_detector() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let gen_a = base.join("gen_a");
    let gen_b = base.join("gen_b");
    run(flipad().args(["synth-gen", "--gen-seed", "11"]).args(out(&gen_a)));
    run(flipad().args(["synth-gen", "--gen-seed", "22"]).args(out(&gen_b)));
    assert!(gen_a.join("manifest.json").exists());

    let cfg_path = base.join("config.json");
    std::fs::write(&cfg_path, STAGE_CONFIG).unwrap();

    // labeled training data from both generators
    let data_in = base.join("data_in");
    let data_out = base.join("data_out");
    run(flipad()
        .args(["gen-data", "--count", "48", "--source", "gen", "--label", "1"])
        .arg("--generator")
        .arg(&gen_a)
        .args(["--seed", "5"])
        .args(out(&data_in)));
    run(flipad()
        .args(["gen-data", "--count", "48", "--source", "opp0", "--label", "-1"])
        .arg("--generator")
        .arg(&gen_b)
        .args(["--seed", "6"])
        .args(out(&data_out)));

    let merged = base.join("merged");
    std::fs::create_dir_all(&merged).unwrap();
    merge_sets(&data_in, &data_out, &merged);

    let feats = base.join("features");
    run(flipad()
        .args(["extract", "--method", "flipad"])
        .arg("--generator")
        .arg(&gen_a)
        .arg("--data")
        .arg(&merged)
        .arg("--config")
        .arg(&cfg_path)
        .args(out(&feats)));

    let detector = base.join("detector");
    run(flipad()
        .arg("train-detector")
        .arg("--features")
        .arg(&feats)
        .arg("--config")
        .arg(&cfg_path)
        .args(out(&detector)));
    assert!(detector.join("detector.json").exists());

    // validation data -> features -> threshold
    let val = base.join("val");
    run(flipad()
        .args([
            "gen-data", "--count", "40", "--source", "gen", "--label", "1", "--split", "val",
        ])
        .arg("--generator")
        .arg(&gen_a)
        .args(["--seed", "7"])
        .args(out(&val)));
    let val_feats = base.join("val_features");
    run(flipad()
        .args(["extract", "--method", "flipad"])
        .arg("--generator")
        .arg(&gen_a)
        .arg("--data")
        .arg(&val)
        .arg("--config")
        .arg(&cfg_path)
        .args(out(&val_feats)));
    let stdout = run(flipad()
        .arg("threshold")
        .arg("--detector")
        .arg(&detector)
        .arg("--features")
        .arg(&val_feats)
        .args(["--fnr", "0.05"]));
    assert!(stdout.contains("calibrated tau"));

    let manifest = std::fs::read_to_string(detector.join("detector.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert!(parsed["tau"].as_f64().is_some());
}

#[test]
fn evaluate_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    let cfg_path = base.join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
            "method": "rawpad",
            "gen_seed": 3, "opponent_seeds": [4],
            "n_tr": 60, "n_val": 40, "n_test": 30,
            "fnr": 0.05, "mean_samples": 50,
            "train": {
                "epochs": 6, "lr": 5e-4, "decay_epochs": [3], "decay_factor": 0.1,
                "batch_size": 32, "betas": [0.9, 0.999], "weight_decay": 5e-7,
                "eta": 1.0, "seed": 0, "eps_sad": 1e-6,
                "hidden": [16, 8], "leaky_slope": 0.01
            }
        }"#,
    )
    .unwrap();
    let out_dir = base.join("results");
    let stdout = run(flipad()
        .arg("evaluate")
        .arg("--config")
        .arg(&cfg_path)
        .args(["--seed", "9"])
        .args(out(&out_dir)));
    assert!(stdout.contains("mean accuracy"));
    assert!(out_dir.join("report.json").exists());

    let csv = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    assert!(csv.starts_with("sample_id,source,split,score,prediction"));
    assert_eq!(csv.lines().count(), 1 + 40 + 30 + 30);

    let summary = run(flipad()
        .arg("report")
        .arg("--report")
        .arg(out_dir.join("report.json")));
    assert!(summary.contains("vs opp0"));
}

#[test]
fn verify_writes_suite_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("v");
    let stdout = run(flipad().arg("verify").args(["--seed", "1"]).args(out(&out_dir)));
    for suite in [
        "rip_probe",
        "recovery",
        "uniqueness",
        "solution_space_shift",
        "box_logprob",
    ] {
        assert!(stdout.contains(&format!("{suite}: PASS")), "{stdout}");
    }
    let json = std::fs::read_to_string(out_dir.join("verification.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 5);
}
