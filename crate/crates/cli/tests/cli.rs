use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protomem::encoder::LinearEncoder;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protomem"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"{
  "dataset": {"num_classes": 30, "per_class": 12, "dim_in": 16, "sigma": 0.2, "seed": 1},
  "pm": {"D": 8, "M": 10, "k": 4, "r": 0.2, "loss": {"cosface": {"s": 16.0, "m": 0.2}}, "seed": 2},
  "train": {"steps": 60, "learning_rate": 0.1,
            "sampling": [{"strategy": "iterate_shuffle", "groups": 2},
                         {"strategy": "classes_then_images", "groups": 4}],
            "eval_every": 20}
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_config_error() {
    let out = run(&[
        "gen-data",
        "/nonexistent/config.json",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        &SMALL.replace("\"sigma\"", "\"sigmaa\""),
    );
    let out = run(&["train", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        assert!(run(&["gen-data", s(&cfg), "--out", s(o)]).status.success());
    }
    for name in ["manifest.json", "examples.bin", "directions.bin"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 30);
    assert_eq!(
        std::fs::metadata(a.join("examples.bin")).unwrap().len(),
        30 * 12 * 16 * 8
    );
}

#[test]
fn train_with_fixed_seed_repeats_its_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    for system in ["pm", "pprn", "dsoftmaxk", "full"] {
        let mut csvs = Vec::new();
        for run_id in 0..2 {
            let out_dir = dir.path().join(format!("{system}{run_id}"));
            let out = run(&[
                "train",
                s(&cfg),
                "--out",
                s(&out_dir),
                "--system",
                system,
                "--seed",
                "5",
                "--mdm",
                "--hem",
                "0.5",
            ]);
            assert!(
                out.status.success(),
                "{}",
                String::from_utf8_lossy(&out.stderr)
            );
            csvs.push(std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "{system}");
        assert!(csvs[0].starts_with("step,loss,occupancy,evictions,refreshes,eval_accuracy\n"));
        assert_eq!(csvs[0].lines().count(), 61);
    }
}

#[test]
fn loss_flag_switches_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["train", s(&cfg), "--out", s(&a)]).status.success());
    assert!(
        run(&["train", s(&cfg), "--out", s(&b), "--loss", "dsoftmax"])
            .status
            .success()
    );
    assert_ne!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn conflicting_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let teacher = dir.path().join("teacher.bin");
    LinearEncoder::identity(8)
        .write_to(&mut std::fs::File::create(&teacher).unwrap())
        .unwrap();
    let out = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--pmkd",
        s(&teacher),
        "--system",
        "full",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let only_shuffle = write(
        dir.path(),
        "shuffle.json",
        &SMALL.replace(
            r#",
                         {"strategy": "classes_then_images", "groups": 4}"#,
            "",
        ),
    );
    let out = run(&[
        "train",
        s(&only_shuffle),
        "--out",
        s(&dir.path().join("o")),
        "--mdm",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--hem",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pmkd_with_a_teacher_trains_and_a_degenerate_teacher_is_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let mut rng = protomem::sampling::stream_rng(1, 0);
    let teacher = dir.path().join("teacher.bin");
    LinearEncoder::random(16, 8, &mut rng)
        .write_to(&mut std::fs::File::create(&teacher).unwrap())
        .unwrap();
    let out = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&dir.path().join("kd")),
        "--pmkd",
        s(&teacher),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let zero = dir.path().join("zero.bin");
    LinearEncoder::from_weights(16, 8, vec![0.0; 128])
        .unwrap()
        .write_to(&mut std::fs::File::create(&zero).unwrap())
        .unwrap();
    let out = run(&[
        "train",
        s(&cfg),
        "--out",
        s(&dir.path().join("z")),
        "--pmkd",
        s(&zero),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_on_generated_data_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let data = dir.path().join("data");
    assert!(run(&["gen-data", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["train", s(&cfg), "--out", s(&a)]).status.success());
    assert!(run(&["train", s(&cfg), "--out", s(&b), "--data", s(&data)])
        .status
        .success());
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

fn curve(csv: &str, system: &str) -> Vec<(u64, String)> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1] == system).then(|| (f[0].parse().unwrap(), f[2].to_string()))
        })
        .collect()
}

#[test]
fn ab_diagnose_emits_paired_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out_dir = dir.path().join("ab");
    let out = run(&["diagnose", s(&cfg), "--out", s(&out_dir), "--ab"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("obsolescence.csv")).unwrap();
    assert!(csv.starts_with("step,system,metric\n"));
    let pm = curve(&csv, "pm");
    let pprn = curve(&csv, "pprn");
    assert!(pm.len() > 2);
    assert_eq!(
        pm.iter().map(|p| p.0).collect::<Vec<_>>(),
        pprn.iter().map(|p| p.0).collect::<Vec<_>>()
    );
    let memory = std::fs::read_to_string(out_dir.join("memory.csv")).unwrap();
    assert_eq!(memory.lines().count(), 3);
}

#[test]
fn diagnose_before_training_marks_rows_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &SMALL.replace("\"steps\": 60", "\"steps\": 0"),
    );
    let out_dir = dir.path().join("d");
    let out = run(&["diagnose", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("obsolescence.csv")).unwrap();
    assert_eq!(csv, "step,system,metric\n0,pm,\n");
}

#[test]
fn bench_emits_a_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "b.json",
        r#"{"num_classes": 2000, "sizes": [100, 200], "dim": 8, "batch_size": 16, "k": 4, "steps": 5, "warmup": 1, "systems": ["pm", "pprn"]}"#,
    );
    let out_dir = dir.path().join("b");
    let out = run(&["bench", s(&cfg), "--out", s(&out_dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("pm,2000,100,") && rows[1].starts_with("pm,2000,200,"));
    assert!(rows[3].ends_with(&format!(",{}", 200 * 8 * 8)));
}
