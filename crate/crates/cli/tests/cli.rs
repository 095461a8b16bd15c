use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn logo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logo"))
        .args(args)
        .env_remove("LOGO_OUT_DIR")
        .output()
        .expect("spawn logo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// A small model that trains in well under a second.
const SMALL: [&str; 12] = [
    "--set",
    "model.input_len=48",
    "--set",
    "model.backbone.n_layers=2",
    "--set",
    "model.backbone.d_model=16",
    "--set",
    "model.backbone.d_ff=32",
    "--set",
    "train.horizons=[24]",
    "--set",
    "train.max_steps=5",
];

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let path = dir.join(name);
    let mut args = vec![
        "synth",
        "--length",
        "800",
        "--input-len",
        "48",
        "--horizon",
        "24",
        "--path",
    ];
    let p = s(&path);
    args.push(&p);
    args.extend_from_slice(extra);
    let out = logo(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn run(cmd: &str, data: &Path, out: &Path, extra: &[&str]) -> Output {
    let data_arg = format!("data.path={}", s(data));
    let out_arg = s(out);
    let mut args = vec![cmd, "--out", &out_arg, "--set", &data_arg];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    logo(&args)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&logo(&["frobnicate"])), 1);
    assert_eq!(code(&logo(&["train", "--bogus"])), 1);
    assert_eq!(code(&logo(&["train", "--set", "train.nope=1"])), 1);
    assert_eq!(
        code(&logo(&["train", "--config", "/nonexistent/run.toml"])),
        1
    );
    assert_eq!(
        code(&logo(&[
            "ablate",
            "--axis",
            "colour",
            "--set",
            "data.path=x.csv"
        ])),
        1
    );
    assert_eq!(code(&logo(&["--help"])), 0);
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("nan.csv");
    std::fs::write(
        &csv,
        "date,a\n2020-01-01 00:00:00,1.0\n2020-01-01 01:00:00,NaN\n",
    )
    .unwrap();
    let out = run("train", &csv, dir.path(), &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&run("train", &missing, dir.path(), &[])), 2);
}

#[test]
fn failed_gradient_check_exits_three() {
    let out = logo(&["gradcheck", "--h", "0.5"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(code(&logo(&["gradcheck"])), 0);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.csv", &["--seed", "9"]);
    let b = synth(dir.path(), "b.csv", &["--seed", "9"]);
    let c = synth(dir.path(), "c.csv", &["--seed", "10"]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let text = String::from_utf8(read(&a)).unwrap();
    assert_eq!(text.lines().count(), 801);
    assert!(text.starts_with("date,"));
}

#[test]
fn report_records_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nseed = 11\n[output]\nrun_name = \"named\"\n").unwrap();
    let cfg_s = s(&cfg);
    let out = run(
        "train",
        &data,
        dir.path(),
        &["--config", &cfg_s, "--set", "train.lr=0.002"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("named");
    let report = std::fs::read_to_string(run_dir.join("report.txt")).unwrap();
    let parsed: toml::Table = toml::from_str(&report).unwrap();
    let train = parsed["config"]["train"].as_table().unwrap();
    assert_eq!(train["seed"].as_integer(), Some(11));
    assert_eq!(train["lr"].as_float(), Some(0.002));
    assert_eq!(
        parsed["config"]["model"]["input_len"].as_integer(),
        Some(48)
    );
    assert!(run_dir.join("weights.bin").is_file());

    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        lines[0],
        "dataset,protocol,horizon,mse,mae,params_total,params_trainable"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].contains(",avg,"));
}

#[test]
fn eval_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    assert_eq!(code(&run("train", &data, dir.path(), &[])), 0);
    assert_eq!(code(&run("eval", &data, dir.path(), &[])), 0);
    let field = |file: &str| {
        let text = std::fs::read_to_string(dir.path().join("run").join(file)).unwrap();
        let row: Vec<String> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(String::from)
            .collect();
        (row[3].clone(), row[4].clone())
    };
    assert_eq!(field("metrics.csv"), field("metrics_eval.csv"));

    let wrong = run(
        "eval",
        &data,
        dir.path(),
        &["--set", "model.backbone.n_layers=3"],
    );
    assert_eq!(code(&wrong), 2);
}

#[test]
fn multiple_horizons_write_one_weight_file_each() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out = run(
        "train",
        &data,
        dir.path(),
        &["--set", "train.horizons=[24, 12]", "--jobs", "2"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("run");
    assert!(run_dir.join("weights_h24.bin").is_file());
    assert!(run_dir.join("weights_h12.bin").is_file());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn probe_single_layer() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out = run("probe", &data, dir.path(), &["--layer", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(dir.path().join("run")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let text = std::fs::read_to_string(dir.path().join("run/sim_layer_2.csv")).unwrap();
    // L=48 with the default patching gives 6 patches
    assert_eq!(text.lines().next(), Some("p0,p1,p2,p3,p4,p5"));
    assert_eq!(text.lines().count(), 7);
    assert_eq!(code(&run("probe", &data, dir.path(), &["--layer", "3"])), 1);
}

#[test]
fn ablate_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out = run(
        "ablate",
        &data,
        dir.path(),
        &[
            "--axis",
            "fusion_variant",
            "--values",
            "MIXER,ADD,NONE",
            "--jobs",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    let values: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(values, ["MIXER", "ADD", "NONE"]);
    assert!(dir.path().join("run/report.txt").is_file());
}

#[test]
fn fewshot_reports_insufficient_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let out = run("fewshot", &data, dir.path(), &["--fraction", "0.05"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("few-shot"));
    let out = run("fewshot", &data, dir.path(), &["--fraction", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().contains("few_shot"));
}

#[test]
fn zeroshot_evaluates_on_target() {
    let dir = tempfile::tempdir().unwrap();
    let src = synth(dir.path(), "src.csv", &["--seed", "1"]);
    let tgt = synth(dir.path(), "tgt.csv", &["--seed", "2", "--channels", "3"]);
    let tgt_arg = format!("target.path={}", s(&tgt));
    let out = run("zeroshot", &src, dir.path(), &["--set", &tgt_arg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("run/report.txt")).unwrap();
    assert!(report.contains("zero_shot"));
    assert_eq!(code(&run("zeroshot", &src, dir.path(), &[])), 1);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d.csv", &[]);
    let data_arg = format!("data.path={}", s(&data));
    let mut args = vec!["train", "--set", &data_arg];
    args.extend_from_slice(&SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_logo"))
        .args(&args)
        .env("LOGO_OUT_DIR", dir.path().join("env_root"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("env_root/run/metrics.csv").is_file());
}
