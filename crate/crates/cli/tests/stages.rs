//! Running the stages one by one matches a single `run`.

use std::path::Path;
use std::process::Command;

const FLAGS: [&str; 6] = ["--channels", "16", "--layers", "2", "--n-objects", "6"];

fn mv2d(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mv2d"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = mv2d(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn staged_run_matches_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let (whole, staged) = (dir.path().join("whole"), dir.path().join("staged"));
    let with = |cmd: &'static str, seed: bool| {
        let mut v = vec![cmd];
        if seed {
            v.extend(["--seed", "21"]);
        }
        v.extend(FLAGS);
        v
    };
    let summary = ok(&with("run", true), &whole);
    assert!(summary.contains("\"queries\""));
    ok(&with("simulate", true), &staged);
    for cmd in ["detect", "associate", "forward", "eval"] {
        ok(&with(cmd, false), &staged);
    }
    for name in [
        "config.json",
        "scene.json",
        "detections.json",
        "params.json",
        "associations.json",
        "queries.json",
        "predictions.json",
        "metrics.json",
    ] {
        let a = std::fs::read(whole.join(name)).unwrap();
        let b = std::fs::read(staged.join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }

    ok(&["plot-bev", "--source", "predictions"], &staged);
    let svg = std::fs::read_to_string(staged.join("bev.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn failures_exit_non_zero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = mv2d(&["simulate"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));

    let o = mv2d(&["detect"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("scene.json"));

    let o = mv2d(&["run", "--seed", "1", "--frames", "3"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("frames"));
}

#[test]
fn short_training_run_writes_trace_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "7", "--iters", "3", "--lr", "0.05"];
    args.extend(FLAGS);
    let stdout = ok(&args, dir.path());
    assert!(stdout.contains("L_3d"));
    let trace: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(dir.path().join("loss_trace.json")).unwrap()).unwrap();
    assert_eq!(trace.len(), 4);
    assert!(dir.path().join("params.json").exists());
}
