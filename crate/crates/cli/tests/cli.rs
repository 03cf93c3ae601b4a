use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use radiomamba_core::data::read_f32grid;
use serde_json::Value;

fn radiomamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiomamba"))
        .args(args)
        .output()
        .expect("spawn radiomamba")
}

fn ok(args: &[&str]) -> String {
    let out = radiomamba(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    radiomamba(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Every file under `root` as (relative path, bytes), sorted by path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, extra: &[&str]) {
    let d = s(dir);
    let mut args = vec![
        "synth", "--seed", "4", "--grid", "32", "--count", "4", "--val", "2", "--test", "2",
        "--out", &d,
    ];
    args.extend(extra);
    ok(&args);
}

const TINY: [&str; 10] = [
    "--base-channels",
    "4",
    "--stage-depths",
    "1,1",
    "--bottleneck-depth",
    "1",
    "--state-dim",
    "2",
    "--batch-size",
    "2",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let (d, o) = (s(data), s(out));
    let mut args = vec!["train", "--data", &d, "--out", &o];
    args.extend(TINY);
    args.extend(extra);
    radiomamba(&args)
}

fn config_value(run: &Path, key: &str) -> String {
    let text = fs::read_to_string(run.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("config.txt lacks {key}:\n{text}"))
        .to_string()
}

#[test]
fn synth_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), &[]);
    synth(b.path(), &[]);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() > 8);
    assert_eq!(ta, tb);
}

#[test]
fn drm_synth_writes_vehicle_layer() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--mode", "drm"]);
    assert!(tree(dir.path())
        .iter()
        .any(|(p, _)| p.ends_with("vehicles.png")));
}

#[test]
fn grid_below_minimum_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        exit_code(&[
            "synth",
            "--grid",
            "16",
            "--count",
            "2",
            "--out",
            &s(dir.path())
        ]),
        2
    );
}

#[test]
fn train_echoes_resolved_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    synth(&data, &[]);
    let out = train(&data, &run, &["--steps", "2"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for (k, v) in [
        ("steps", "2"),
        ("lr_max", "0.0009"),
        ("lr_min", "0.000001"),
        ("weight_decay", "0.0001"),
        ("loss_weights", "0.4,0.1,0.2,0.3"),
        ("grid", "32"),
        ("mode", "srm"),
        ("base_channels", "4"),
    ] {
        assert_eq!(config_value(&run, k), v, "{k}");
    }
    for f in ["last.rmck", "best.rmck", "telemetry.csv", "validation.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(run.join("telemetry.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    // a second run into the same directory needs --resume
    assert_eq!(train(&data, &run, &["--steps", "2"]).status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    synth(&data, &[]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "steps=5\nlr_max=0.01\nval_every=1\n").unwrap();
    let out = train(&data, &run, &["--config", &s(&cfg), "--steps", "1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(config_value(&run, "steps"), "1");
    assert_eq!(config_value(&run, "lr_max"), "0.01");

    fs::write(&cfg, "stepz=5\n").unwrap();
    assert_eq!(
        train(&data, &dir.path().join("run2"), &["--config", &s(&cfg)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn resume_continues_a_stopped_run() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    synth(&data, &[]);
    assert!(train(&data, &run, &["--steps", "2"]).status.success());
    let out = train(&data, &run, &["--steps", "2", "--resume"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        train(
            &data,
            &run,
            &["--steps", "2", "--lr-max", "0.1", "--resume"]
        )
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn infer_eval_and_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, pred) = (
        dir.path().join("data"),
        dir.path().join("run"),
        dir.path().join("pred"),
    );
    synth(&data, &[]);
    assert!(train(&data, &run, &["--steps", "2"]).status.success());
    let ckpt = s(&run.join("best.rmck"));

    ok(&[
        "infer",
        "--ckpt",
        &ckpt,
        "--input-dir",
        &s(&data.join("test")),
        "--out",
        &s(&pred),
    ]);
    let maps = tree(&pred);
    let grids: Vec<_> = maps
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "f32grid"))
        .collect();
    assert_eq!(grids.len(), 2);
    let (h, w, v) = read_f32grid(&pred.join(&grids[0].0)).unwrap();
    assert_eq!((h, w, v.len()), (32, 32, 1024));
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    assert_eq!(
        fs::read_to_string(pred.join("timing.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let report = dir.path().join("eval.txt");
    ok(&[
        "eval",
        "--ckpt",
        &ckpt,
        "--data",
        &s(&data),
        "--report",
        &s(&report),
    ]);
    let json: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    for k in ["mean", "median", "p95"] {
        assert!(json["latency_s"][k].as_f64().unwrap() > 0.0, "{k}");
    }
    assert_eq!(json["latency_s"]["runs"], 20);
    for b in ["free_space", "mean_target"] {
        assert!(json["baselines"][b]["nmse"].as_f64().unwrap() > 0.0, "{b}");
    }
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("nmse=") && text.contains("latency.p95_s="));

    // the predictions written by infer score the same as the checkpoint
    let from_pred = dir.path().join("pred_eval.txt");
    ok(&[
        "eval",
        "--predictions",
        &s(&pred),
        "--data",
        &s(&data),
        "--report",
        &s(&from_pred),
    ]);
    let pj: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("pred_eval.json")).unwrap())
            .unwrap();
    let (a, b) = (
        json["metrics"]["nmse"].as_f64().unwrap(),
        pj["metrics"]["nmse"].as_f64().unwrap(),
    );
    assert!((a - b).abs() <= 1e-6 * a.max(1e-12), "{a} vs {b}");

    assert_eq!(
        exit_code(&[
            "eval",
            "--ckpt",
            &ckpt,
            "--data",
            &s(&data),
            "--report",
            &s(&report),
            "--latency-runs",
            "5"
        ]),
        2
    );
}

#[test]
fn eval_of_targets_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pred) = (dir.path().join("data"), dir.path().join("pred"));
    synth(&data, &["--format", "f32grid"]);
    for map in fs::read_dir(data.join("test")).unwrap() {
        let map = map.unwrap().path();
        let dst = pred.join(map.file_name().unwrap());
        fs::create_dir_all(&dst).unwrap();
        fs::copy(map.join("gain_0.f32grid"), dst.join("pred_0.f32grid")).unwrap();
    }
    let report = dir.path().join("self.txt");
    ok(&[
        "eval",
        "--predictions",
        &s(&pred),
        "--data",
        &s(&data),
        "--report",
        &s(&report),
    ]);
    let json: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("self.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"]["nmse"].as_f64().unwrap(), 0.0);
    assert!((json["metrics"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(json["latency_s"].is_null());
}

#[test]
fn gradcheck_passes_and_negative_control_exits_4() {
    let out = ok(&["gradcheck", "--scope", "ops", "--tol", "1e-4"]);
    assert!(out.contains("25 of 25 checks passed"), "{out}");
    assert_eq!(
        exit_code(&["gradcheck", "--scope", "ops", "--corrupt-backward"]),
        4
    );
    assert_eq!(exit_code(&["gradcheck", "--scope", "nope"]), 2);
}

#[test]
fn bench_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    ok(&[
        "bench",
        "--scan-lengths",
        "64,256",
        "--channels",
        "2",
        "--state",
        "2",
        "--repeats",
        "1",
        "--report",
        &s(&report),
    ]);
    let json: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(json["sequential_slope"].as_f64().unwrap().is_finite());
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing"));
    assert_eq!(
        exit_code(&[
            "eval",
            "--predictions",
            &missing,
            "--data",
            &missing,
            "--report",
            &missing
        ]),
        3
    );
    let junk = dir.path().join("junk.rmck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(
        exit_code(&[
            "infer",
            "--ckpt",
            &s(&junk),
            "--input-dir",
            &missing,
            "--out",
            &missing
        ]),
        3
    );
}
