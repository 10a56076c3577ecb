use std::path::Path;
use std::process::{Command, Output};

fn dcasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcasr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "seed": 3,
        "out_dir": dir.join("run"),
        "simulator": {
            "world": {
                "n_items": 20,
                "user_types": [
                    {"name": "UT1", "preferred": [{"start": 0, "end": 10}]},
                    {"name": "UT2", "preferred": [{"start": 10, "end": 20}]}
                ]
            },
            "logged_sessions": 60,
            "heldout_sessions": 20,
            "eval_sessions": 20
        },
        "sr": {"dim": 4, "epochs": 2, "batch_size": 32},
        "diffusion": {"dim": 4, "steps": 10, "epochs": 2, "max_len": 5},
        "scm": {"dim": 4, "epochs": 2},
        "eval": {"guidance_grid": [0.0, 2.0], "guidance_valid_sessions": 10}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_all_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dcasr(&["run-all", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model baseline (offline)"));
    assert!(stdout.contains("model dcasr (online)"));
    for f in [
        "observed.jsonl",
        "diffusion.ckpt",
        "scm.ckpt",
        "counterfactuals.jsonl",
        "sr-baseline.ckpt",
        "sr-dcasr.ckpt",
        "report-eval-offline.json",
        "report-eval-online.txt",
        "report-run-all.json",
    ] {
        assert!(dir.path().join("run").join(f).is_file(), "{f}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let other = dir.path().join("elsewhere");
    let out = dcasr(&["show-config", "--config", &cfg, "--seed", "42", "--out", other.to_str().unwrap()]);
    assert!(out.status.success());
    let shown: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(shown["seed"], 42);
    assert_eq!(shown["out_dir"], other.to_str().unwrap());
    assert_eq!(shown["sr"]["dim"], 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sr": {"dimension": 3}}"#).unwrap();
    assert_eq!(dcasr(&["show-config", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let empty = dir.path().join("empty");
    let out = dcasr(&["eval-offline", "--out", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate-log"));

    let missing = dir.path().join("nope.json");
    assert_eq!(dcasr(&["run-all", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
}
