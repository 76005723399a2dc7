use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn snnconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snnconv"))
        .args(args)
        .output()
        .unwrap()
}

fn model_args(dir: &Path) -> Vec<String> {
    vec![
        "--manifest".into(),
        dir.join("model.json").to_string_lossy().into_owned(),
        "--weights".into(),
        dir.join("model.snnf").to_string_lossy().into_owned(),
    ]
}

fn convert_mlp(out: &Path, seed: &str) {
    let o = out.to_string_lossy();
    let r = snnconv(&[
        "convert",
        "--manifest",
        &fixture("mlp.json"),
        "--weights",
        &fixture("mlp.snnf"),
        "--data",
        &fixture("digits_train.snnd"),
        "--out",
        &o,
        "--iters",
        "50",
        "--seed",
        seed,
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

fn run_on(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(model_args(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    snnconv(&refs)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn convert_is_deterministic_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    convert_mlp(a.path(), "7");
    convert_mlp(b.path(), "7");
    for name in ["model.json", "model.snnf", "convergence.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn evaluate_prints_one_row_per_length_and_the_ann() {
    let dir = tempfile::tempdir().unwrap();
    convert_mlp(dir.path(), "0");
    let out: PathBuf = dir.path().join("eval");
    let r = run_on(
        dir.path(),
        "evaluate",
        &[
            "--data",
            &fixture("digits_test.snnd"),
            "--labels",
            &fixture("digits_test.labels"),
            "--timesteps",
            "8,16,32",
            "--out",
            &out.to_string_lossy(),
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("snn ")).count(), 3);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("ann ")).count(), 1);
    let csv = String::from_utf8(read(&out, "eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("model,timesteps,t0,samples,correct,accuracy\n"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    convert_mlp(dir.path(), "0");
    let missing_data = run_on(dir.path(), "evaluate", &["--labels", "x"]);
    assert_eq!(missing_data.status.code(), Some(2));
    let too_short = run_on(
        dir.path(),
        "evaluate",
        &[
            "--data",
            &fixture("digits_test.snnd"),
            "--labels",
            &fixture("digits_test.labels"),
            "--timesteps",
            "1",
        ],
    );
    assert_eq!(too_short.status.code(), Some(2));
    let bad_granularity = snnconv(&["convert", "--granularity", "neuron"]);
    assert_eq!(bad_granularity.status.code(), Some(2));
}

#[test]
fn explicit_delay_allows_short_runs() {
    let dir = tempfile::tempdir().unwrap();
    convert_mlp(dir.path(), "0");
    let r = run_on(
        dir.path(),
        "evaluate",
        &[
            "--data",
            &fixture("digits_test.snnd"),
            "--labels",
            &fixture("digits_test.labels"),
            "--timesteps",
            "2",
            "--delay",
            "0",
        ],
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn bad_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = snnconv(&[
        "diagnose",
        "--manifest",
        "/nonexistent/model.json",
        "--weights",
        "/nonexistent/model.snnf",
        "--data",
        &fixture("digits_test.snnd"),
    ]);
    assert_eq!(missing.status.code(), Some(3));

    let garbage = dir.path().join("garbage.snnd");
    std::fs::write(&garbage, b"not a dataset").unwrap();
    let r = snnconv(&[
        "estimate-delay",
        "--manifest",
        &fixture("mlp.json"),
        "--weights",
        &fixture("mlp.snnf"),
        "--data",
        &garbage.to_string_lossy(),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn diagnose_and_energy_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    convert_mlp(dir.path(), "0");
    let out = dir.path().join("reports");
    let o = out.to_string_lossy().into_owned();
    let d = run_on(
        dir.path(),
        "diagnose",
        &[
            "--data",
            &fixture("digits_test.snnd"),
            "--batch-size",
            "20",
            "--out",
            &o,
        ],
    );
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    let report = String::from_utf8(read(&out, "error_report.csv")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("model,"));

    let e = run_on(
        dir.path(),
        "energy",
        &[
            "--data",
            &fixture("digits_test.snnd"),
            "--timesteps",
            "16",
            "--out",
            &o,
            "--trace",
        ],
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(
        String::from_utf8(read(&out, "energy.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(out.join("trace_T16.csv").exists());
}
