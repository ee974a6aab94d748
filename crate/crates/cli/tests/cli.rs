use std::path::Path;
use std::process::{Command, Output};

use visfit_core::visibility::{write_iuv_png, DenseUVMap};

fn visfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visfit")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    let lines: Vec<_> = stderr(o).lines().filter(|l| l.starts_with("error_code=")).map(String::from).collect();
    assert_eq!(lines.len(), 1, "stderr: {}", stderr(o));
    lines[0].clone()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", stderr(o));
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--seed", "3", "--iuv-size", "64", "--out", "bundle"];
    args.extend_from_slice(extra);
    ok(&visfit(dir, &args));
}

fn fit_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "fit",
        "--model",
        "bundle/model.json",
        "--prior",
        "bundle/prior.json",
        "--obs",
        "bundle/observations.json",
        "--out",
        "fit",
    ];
    args.extend_from_slice(extra);
    args
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_writes_result_and_mesh() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    ok(&visfit(dir.path(), &fit_args(&[])));
    let fit = dir.path().join("fit");
    assert!(fit.join("fit_result.json").is_file());
    let obj = std::fs::read_to_string(fit.join("fitted.obj")).unwrap();
    assert!(obj.starts_with("v "));
    assert!(obj.lines().any(|l| l.starts_with("f ")));
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--occluded-fraction", "0.3"]);
    ok(&visfit(dir.path(), &fit_args(&[])));
    let first = std::fs::read(dir.path().join("fit/fit_result.json")).unwrap();
    ok(&visfit(dir.path(), &fit_args(&[])));
    assert_eq!(first, std::fs::read(dir.path().join("fit/fit_result.json")).unwrap());
}

#[test]
fn missing_model_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let o = visfit(
        dir.path(),
        &["fit", "--model", "absent/model.json", "--obs", "bundle/observations.json", "--out", "fit"],
    );
    assert_eq!(o.status.code(), Some(2));
    let line = error_line(&o);
    assert!(line.starts_with("error_code=missing_path"), "{line}");
    assert!(line.contains("absent/model.json"), "{line}");
    assert!(!dir.path().join("fit").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = visfit(dir.path(), &["fit", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error_code=usage"));
    let o = visfit(dir.path(), &["synth", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error_code=missing_seed"));
    ok(&visfit(dir.path(), &["--help"]));
}

#[test]
fn non_finite_observations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    // an enormous coordinate overflows the objective
    let path = dir.path().join("bundle/observations.json");
    let mut obs = read_json(&path);
    obs["vertices"]["coords"][0][0] = serde_json::json!(1e308);
    obs["vertices"]["coords"][1][0] = serde_json::json!(-1e308);
    std::fs::write(&path, obs.to_string()).unwrap();
    let o = visfit(dir.path(), &fit_args(&["--no-visibility"]));
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr(&o));
    assert!(error_line(&o).starts_with("error_code=non_finite"));
}

#[test]
fn config_file_and_flags_resolve_in_order() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"seed": 11, "fit": {"max_iters": 4, "learning_rate": 0.01}}"#,
    )
    .unwrap();
    ok(&visfit(dir.path(), &fit_args(&["--config", "run.json", "--max-iters", "6"])));
    let resolved = read_json(&dir.path().join("fit/resolved_config.json"));
    assert_eq!(resolved["fit"]["max_iters"], 6);
    assert_eq!(resolved["fit"]["learning_rate"], 0.01);
    assert_eq!(resolved["fit"]["lr_decay"], 0.98);
    assert_eq!(resolved["seed"], 11);
    let result = read_json(&dir.path().join("fit/fit_result.json"));
    assert_eq!(result["config"]["max_iters"], 6);
    assert!(result["iterations"].as_u64().unwrap() <= 6);

    ok(&visfit(dir.path(), &fit_args(&["--config", "run.json", "--seed", "12"])));
    assert_eq!(read_json(&dir.path().join("fit/resolved_config.json"))["seed"], 12);
}

#[test]
fn jobs_fit_several_problems_in_input_order() {
    let dir = tempfile::tempdir().unwrap();
    ok(&visfit(dir.path(), &["synth", "--seed", "5", "--count", "3", "--iuv-size", "64", "--out", "many", "--jobs", "3"]));
    let mut args = vec!["fit", "--model", "many/model.json", "--out", "fits", "--jobs", "2"];
    for k in ["many/problem_000/observations.json", "many/problem_001/observations.json", "many/problem_002/observations.json"] {
        args.extend(["--obs", k]);
    }
    ok(&visfit(dir.path(), &args));
    let serial = tempfile::tempdir().unwrap();
    ok(&visfit(
        dir.path(),
        &[
            "fit",
            "--model",
            "many/model.json",
            "--obs",
            "many/problem_002/observations.json",
            "--out",
            serial.path().to_str().unwrap(),
        ],
    ));
    assert_eq!(
        std::fs::read(dir.path().join("fits/fit_002/fit_result.json")).unwrap(),
        std::fs::read(serial.path().join("fit_result.json")).unwrap()
    );
    let spec = read_json(&dir.path().join("many/problem_001/spec.json"));
    assert_eq!(spec["seed"], 6);
}

#[test]
fn synth_full_occlusion_hides_every_vertex() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--occluded-fraction", "1.0"]);
    let gt = read_json(&dir.path().join("bundle/ground_truth.json"));
    assert!(gt["labels"]["vertices"].as_array().unwrap().iter().all(|l| l[2] == 0));
}

fn pseudo_gt(dir: &Path, iuv: &str) -> Output {
    visfit(
        dir,
        &[
            "pseudo-gt",
            "--model",
            "bundle/model.json",
            "--iuv",
            iuv,
            "--obs",
            "bundle/observations.json",
            "--params",
            "bundle/ground_truth.json",
            "--out",
            "pgt",
        ],
    )
}

#[test]
fn pseudo_gt_reproduces_synthetic_labels() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--occluded-fraction", "0.2"]);
    ok(&pseudo_gt(dir.path(), "bundle/iuv.png"));
    let pgt = read_json(&dir.path().join("pgt/pseudo_gt.json"));
    let gt = read_json(&dir.path().join("bundle/ground_truth.json"));
    assert_eq!(pgt["labels"], gt["labels"]);
}

#[test]
fn pseudo_gt_on_background_has_no_visible_vertex() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    write_iuv_png(dir.path().join("empty.png"), &DenseUVMap::background(64, 64)).unwrap();
    ok(&pseudo_gt(dir.path(), "empty.png"));
    let pgt = read_json(&dir.path().join("pgt/pseudo_gt.json"));
    let gt = read_json(&dir.path().join("bundle/ground_truth.json"));
    let labels = pgt["labels"]["vertices"].as_array().unwrap();
    assert!(pgt["pixels"].as_array().unwrap().is_empty());
    for (p, g) in labels.iter().zip(gt["labels"]["vertices"].as_array().unwrap()) {
        assert_eq!(p[2], 0);
        // truncation still comes from the projection
        assert_eq!((&p[0], &p[1]), (&g[0], &g[1]));
    }
}

#[test]
fn pseudo_gt_unknown_part_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let mut iuv = DenseUVMap::background(8, 8);
    iuv.set(2, 3, 23, 0.5, 0.5);
    write_iuv_png(dir.path().join("bad.png"), &iuv).unwrap();
    let o = pseudo_gt(dir.path(), "bad.png");
    assert_eq!(o.status.code(), Some(2));
    let line = error_line(&o);
    assert!(line.starts_with("error_code=unknown_part"), "{line}");
    assert!(line.contains("23"), "{line}");
}

#[test]
fn eval_reports_metrics_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    ok(&visfit(dir.path(), &fit_args(&[])));
    ok(&visfit(
        dir.path(),
        &[
            "eval",
            "--model",
            "bundle/model.json",
            "--pred",
            "fit/fit_result.json",
            "--gt",
            "bundle/ground_truth.json",
            "--out",
            "eval",
            "--csv",
        ],
    ));
    let report = read_json(&dir.path().join("eval/metrics.json"));
    let pa = report["pa_mpjpe_mm"].as_f64().unwrap();
    assert!(pa >= 0.0 && pa < 40.0, "{pa}");
    let csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    // ground truth against itself
    ok(&visfit(
        dir.path(),
        &[
            "eval",
            "--model",
            "bundle/model.json",
            "--pred",
            "bundle/ground_truth.json",
            "--gt",
            "bundle/ground_truth.json",
            "--out",
            "self",
        ],
    ));
    let report = read_json(&dir.path().join("self/metrics.json"));
    assert!(report["mpjpe_mm"].as_f64().unwrap() < 1e-9);
    assert!(report["mpve_mm"].as_f64().unwrap() < 1e-9);
}

#[test]
fn export_obj_writes_posed_mesh() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    ok(&visfit(
        dir.path(),
        &["export-obj", "--model", "bundle/model.json", "--params", "bundle/ground_truth.json", "--out", "mesh/gt.obj"],
    ));
    let text = std::fs::read_to_string(dir.path().join("mesh/gt.obj")).unwrap();
    let gt = read_json(&dir.path().join("bundle/ground_truth.json"));
    let first: Vec<f64> = text.lines().next().unwrap()[2..].split(' ').map(|x| x.parse().unwrap()).collect();
    for k in 0..3 {
        assert!((first[k] - gt["vertices"][0][k].as_f64().unwrap()).abs() <= 5e-7);
    }
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), gt["vertices"].as_array().unwrap().len());
}
