use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ptq_reliability::experiment::{sha256_hex, Evaluation, Manifest, TrainingSummary};
use ptq_reliability::harness::{worst_group, ReliabilityReport};
use ptq_reliability::QuantConfig;

fn bench(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptq-bench"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_json<T: serde::de::DeserializeOwned>(path: PathBuf) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn passthrough_evaluate_matches_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let trained = dir.path().join("trained");
    ok(bench(&["train-reference"], &trained));
    let summary: TrainingSummary = read_json(trained.join("fp_accuracy.json"));

    let fp = dir.path().join("fp");
    ok(bench(&["evaluate", "--wbits", "32", "--abits", "32"], &fp));
    let eval: Evaluation = read_json(fp.join("evaluation.json"));
    assert_eq!(eval.accuracy, summary.accuracy);
    assert_eq!(eval.config_digest, None);

    // Same numbers when the model and data come from the written archives.
    let config = dir.path().join("archives.toml");
    std::fs::write(
        &config,
        format!(
            "model = {:?}\ntrain = {:?}\ntest = {:?}\nwbits = 32\nabits = 32\n",
            trained.join("model.ptq"),
            trained.join("train.ptq"),
            trained.join("test.ptq")
        ),
    )
    .unwrap();
    let from_archives = dir.path().join("from-archives");
    ok(bench(&["evaluate", "--config", config.to_str().unwrap()], &from_archives));
    let eval: Evaluation = read_json(from_archives.join("evaluation.json"));
    assert_eq!(eval.accuracy, summary.accuracy);
    let manifest: Manifest = read_json(from_archives.join("manifest.json"));
    let model_bytes = std::fs::read(trained.join("model.ptq")).unwrap();
    assert_eq!(manifest.inputs["model"], sha256_hex(&model_bytes));
}

#[test]
fn bench_is_deterministic_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["bench", "--trials", "4", "--workers", "2", "--metric", "cosine", "--noise", "0.25"];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(bench(&args, &a));
    ok(bench(&args, &b));
    let report = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, std::fs::read(b.join("report.json")).unwrap());

    let manifest: Manifest = read_json(a.join("manifest.json"));
    assert_eq!(manifest.tool, "ptq-bench");
    assert_eq!(manifest.command, "bench");
    for name in ["report.json", "report.csv", "boxplot.csv"] {
        let bytes = std::fs::read(a.join(name)).unwrap();
        assert_eq!(manifest.artifacts[name], sha256_hex(&bytes), "{name}");
    }

    let replay = dir.path().join("replay");
    let manifest_path = a.join("manifest.json");
    ok(bench(&["bench", "--config", manifest_path.to_str().unwrap()], &replay));
    assert_eq!(std::fs::read(replay.join("report.json")).unwrap(), report);
}

#[test]
fn report_renders_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("report_fixture.json");
    ok(bench(&["report", input.to_str().unwrap()], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(fixture("report_golden.csv")).unwrap());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("boxplot.csv")).unwrap(),
        std::fs::read_to_string(fixture("boxplot_golden.csv")).unwrap()
    );

    // Worst class by scanning the rendered table matches worst_group.
    let report = ReliabilityReport::from_json(&std::fs::read_to_string(&input).unwrap()).unwrap();
    let mut scanned = (usize::MAX, f64::INFINITY);
    for (i, line) in csv.lines().skip(2).enumerate() {
        let cell = line.split(',').nth(1).unwrap();
        let mean: f64 = cell.split('±').next().unwrap().parse().unwrap();
        if mean < scanned.1 {
            scanned = (i, mean);
        }
    }
    assert_eq!(scanned.0, worst_group(&report).0);
}

#[test]
fn report_accepts_several_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("report_fixture.json");
    let input = input.to_str().unwrap();
    ok(bench(&["report", input, input], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("Category,W4A4 mse,W4A4 mse\n"));
    assert!(dir.path().join("boxplot-1.csv").is_file());
}

#[test]
fn calibrate_writes_quant_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(bench(&["calibrate", "--seed", "3", "--wbits", "6", "--abits", "5"], dir.path()));
    let json = std::fs::read_to_string(dir.path().join("quant_config.json")).unwrap();
    let config = QuantConfig::from_json(&json).unwrap();
    assert_eq!(config.len(), 6);
    assert!(config.sites().iter().all(|(site, p)| p.bits() == if site.to_string().ends_with("weight") { 6 } else { 5 }));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), config.digest());
}

#[test]
fn usage_errors_exit_one_with_schema() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["bench", "--wbits", "9"],
        vec!["bench", "--metric", "l1"],
        vec!["calibrate", "--wbits", "32", "--abits", "32"],
        vec!["bench", "--config", "/nonexistent/config.toml"],
    ] {
        let o = bench(&args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Experiment config (TOML)"), "{args:?}");
    }
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "trails = 5\n").unwrap();
    assert_eq!(bench(&["bench", "--config", bad.to_str().unwrap()], dir.path()).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ptq");
    std::fs::write(&junk, b"not an archive at all").unwrap();
    let config = dir.path().join("junk.toml");
    std::fs::write(&config, format!("model = {junk:?}\n")).unwrap();
    let o = bench(&["evaluate", "--config", config.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_ptq-bench")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in ["train-reference", "calibrate", "evaluate", "bench", "report"] {
        assert!(text.contains(sub), "{sub}");
    }
}
