use std::path::Path;
use std::process::{Command, Output};

fn fewshot(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const GAUSSIAN: &str = r#"{"synthetic_gaussian": {"seed": 1, "classes": 10, "per_class": 20, "dim": 8, "offset": 1.0, "nonnegative": true}}"#;

#[test]
fn eval_prints_a_report() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.json", &format!(r#"{{"dataset": {GAUSSIAN}, "episodes": 50}}"#));
    let out = fewshot(&["eval", "--config", "run.json", "--seed", "3", "--workers", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_episodes"], 50);
    assert_eq!(report["master_seed"], 3);
    assert!(report.get("wall_time_secs").is_none());

    // Same report regardless of worker count.
    let again = fewshot(&["eval", "--config", "run.json", "--seed", "3", "--workers", "1"], dir.path());
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn train_embed_eval_and_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "train.json",
        &format!(
            r#"{{"dataset": {GAUSSIAN}, "split": {{"base_classes": [0,1,2,3,4,5], "val_classes": [], "novel_classes": [6,7,8,9]}},
                "model": {{"widths": [16, 8]}},
                "training": {{"epochs": 3, "batch_size": 16, "hct": {{"alpha": 2, "eta": 1, "schedule_fraction": 0.34,
                    "weak_aug": {{"kind": "identity"}}, "strong_aug": {{"kind": "identity"}}}}}}}}"#
        ),
    );
    let out = fewshot(&["train", "--config", "train.json", "--out", "m.fslm"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("epoch,loss_ce,loss_hct,loss_rot"));
    assert_eq!(curve.lines().count(), 4);

    write(
        dir.path(),
        "eval.json",
        &format!(
            r#"{{"dataset": {GAUSSIAN}, "split": {{"base_classes": [0,1,2,3,4,5], "val_classes": [], "novel_classes": [6,7,8,9]}},
                "model": {{"path": "m.fslm"}}, "episode": {{"n_way": 4, "k_shot": 1, "q_query": 5}}, "episodes": 20}}"#
        ),
    );
    let out = fewshot(&["embed", "--config", "eval.json", "--out", "emb.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let emb = std::fs::read_to_string(dir.path().join("emb.csv")).unwrap();
    assert_eq!(emb.lines().next(), Some("label,f0,f1,f2,f3,f4,f5,f6,f7"));
    assert_eq!(emb.lines().count(), 201);

    let out = fewshot(&["eval", "--config", "eval.json", "--out", "report.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("report.json").exists());

    let out = fewshot(&["export-traj", "--config", "eval.json", "--episode", "2", "--out", "t.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(traj.lines().filter(|l| l.starts_with("prototype,")).count(), 21 * 4);
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "grid.json",
        &format!(
            r#"{{"dataset": {GAUSSIAN}, "episodes": 20,
                "ablation": {{"methods": [{{"label": "PN",
                                "calibration": {{"beta": 0.5, "power": false, "center": false, "l2": false, "center_query": false}},
                                "inference": {{"tau": 15, "sigma": 0.2, "n_iter": 0}}}}],
                              "shots": [1, 2]}}}}"#
        ),
    );
    let out = fewshot(&["ablate", "--config", "grid.json", "--out", "grid.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("grid.reports.json").exists());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", &format!(r#"{{"dataset": {GAUSSIAN}, "inference": {{"tau": -1, "sigma": 0.2, "n_iter": 3}}}}"#));
    assert_eq!(fewshot(&["eval", "--config", "bad.json"], dir.path()).status.code(), Some(2));
    write(dir.path(), "typo.json", &format!(r#"{{"dataset": {GAUSSIAN}, "epsiodes": 5}}"#));
    assert_eq!(fewshot(&["eval", "--config", "typo.json"], dir.path()).status.code(), Some(2));
    assert_eq!(fewshot(&["eval", "--config", "missing.json"], dir.path()).status.code(), Some(2));
    write(dir.path(), "notrain.json", &format!(r#"{{"dataset": {GAUSSIAN}}}"#));
    assert_eq!(fewshot(&["train", "--config", "notrain.json"], dir.path()).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.json", r#"{"dataset": {"path": "data.fsle"}, "episodes": 5}"#);
    assert_eq!(fewshot(&["eval", "--config", "run.json"], dir.path()).status.code(), Some(3));
    write(dir.path(), "data.fsle", "FSLE\x01\x00");
    let out = fewshot(&["eval", "--config", "run.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
