use std::path::Path;
use std::process::{Command, Output};

fn camvos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camvos"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth_static(dir: &Path) -> std::path::PathBuf {
    let out = camvos(&["synth", "--suite", "static", "--out", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("static-disk")
}

fn count(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn run_writes_one_mask_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = synth_static(tmp.path());
    let out = tmp.path().join("out");
    let r = camvos(&[
        "run",
        "--frames",
        s(&seq.join("frames")),
        "--first-mask",
        s(&seq.join("gt/00000.pgm")),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dir = out.join("static-disk");
    let frames = count(&seq.join("frames"), "ppm");
    assert_eq!(count(&dir, "pgm"), frames);
    assert_eq!(count(&dir.join("probs"), "camt"), frames);
    let report = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(report.contains(&format!("frames = {frames}")), "{report}");
    assert!(report.contains("total_seconds = "));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = synth_static(tmp.path());
    let report = tmp.path().join("report.txt");
    let gt = seq.join("gt");
    let r = camvos(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--report", s(&report)]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("overall = 1.000000"), "{text}");
    assert_eq!(stdout(&r), text);
}

#[test]
fn synth_from_spec_file() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(
        &spec,
        r#"
width = 32
height = 24
frames = 4
background = [10, 10, 10]
noise = 0
objects = [{ shape = { kind = "disk", radius = 4.0 }, color = [200, 60, 60], position = [10.0, 12.0], velocity = [2.0, 0.0], drift = [0.0, 0.0, 0.0] }]
distractors = []
occluders = []
"#,
    )
    .unwrap();
    let out = tmp.path().join("seq");
    let r = camvos(&["synth", "--spec", s(&spec), "--seed", "3", "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(count(&out.join("frames"), "ppm"), 4);
    assert_eq!(count(&out.join("gt"), "pgm"), 4);
}

#[test]
fn ablate_prints_component_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("ablation.txt");
    let r = camvos(&["ablate", "--suite", "static", "--no-train", "--out", s(&table)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let names: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("row").and_then(|l| l.split_once(".name = ")).map(|(_, n)| n))
        .collect();
    assert_eq!(
        names,
        [
            "Baseline",
            "+FPN",
            "+PAN",
            "+OCNet",
            "+Flip and multi-scale",
            "+Post-processing",
            "STM + ensemble modeling",
            "Final (STM + ensemble modeling + post-processing)",
        ]
    );
    assert!(text.starts_with("Baseline and components"));
}

#[test]
fn ensemble_train_then_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model.camt");
    let r = camvos(&["ensemble-train", "--out", s(&model)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(stdout(&r).contains("weights = "));

    let seq = synth_static(tmp.path());
    let cfg = tmp.path().join("single.cfg");
    std::fs::write(&cfg, "ensemble = false\nstm = false\n").unwrap();
    let mut inputs = Vec::new();
    for name in ["a", "b", "c"] {
        let out = tmp.path().join(name);
        let r = camvos(&[
            "run",
            "--frames",
            s(&seq.join("frames")),
            "--first-mask",
            s(&seq.join("gt/00000.pgm")),
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--name",
            "x",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        inputs.push(out.join("x"));
    }
    let fused = tmp.path().join("fused");
    let mut args = vec!["ensemble-apply", "--model", s(&model), "--out", s(&fused), "--input"];
    args.extend(inputs.iter().map(|p| s(p)));
    let r = camvos(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let r = camvos(&["eval", "--pred", s(&fused), "--gt", s(&seq.join("gt"))]);
    assert!(stdout(&r).contains("overall = 1.000000"), "{}", stdout(&r));

    // three weights, one input
    let bad = tmp.path().join("bad.camt");
    std::fs::write(&bad, std::fs::read(&model).unwrap()).unwrap();
    let r = camvos(&["ensemble-apply", "--model", s(&bad), "--out", s(&fused), "--input", s(&inputs[0])]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    assert_eq!(camvos(&["--help"]).status.code(), Some(0));
    assert_eq!(camvos(&["--version"]).status.code(), Some(0));
    assert_eq!(camvos(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(camvos(&["run", "--frames", "x"]).status.code(), Some(1));
    assert_eq!(camvos(&["synth", "--out", "x"]).status.code(), Some(1));

    let r = camvos(&["eval", "--pred", "/nonexistent/p", "--gt", "/nonexistent/g"]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error kind=data message=\""), "{line}");
    assert!(line.contains("/nonexistent/g"), "{line}");
}

#[test]
fn bad_config_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = synth_static(tmp.path());
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let r = camvos(&[
        "run",
        "--frames",
        s(&seq.join("frames")),
        "--first-mask",
        s(&seq.join("gt/00000.pgm")),
        "--config",
        s(&cfg),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no_such_key"));
}
