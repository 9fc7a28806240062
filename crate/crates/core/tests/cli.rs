use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deep_disaster::meta::strip_comment_header;
use deep_disaster::training::load_checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "image_size=32",
    "--set",
    "channels=1",
    "--set",
    "latent_dim=8",
    "--set",
    "teacher_base_width=8",
    "--set",
    "student_base_width=4",
    "--set",
    "batch_size=8",
    "--seed",
    "9",
];

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deep-disaster")).args(args).output().unwrap()
}

fn small(extra: &[&str]) -> Output {
    let args: Vec<&str> = SMALL.iter().chain(extra).copied().collect();
    cli(&args)
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut m = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                m.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    m
}

fn synth(data: &Path, class: &str) {
    ok(small(&[
        "--out",
        &s(data),
        "synth",
        "--normal",
        "16",
        "--anomalous",
        "5",
        "--class",
        class,
        "--defect-min",
        "6",
        "--defect-max",
        "9",
    ]));
}

/// Teacher and student for `class`, one epoch each.
fn train(data: &Path, out: &Path, class: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let teacher = out.join("teacher.ckpt");
    let (d, o, t) = (s(data), s(out), s(&teacher));
    ok(small(&[extra, &["--out", &o, "pretrain", "--data", &d, "--class", class, "--epochs", "1"]].concat()));
    ok(small(
        &[extra, &["--out", &o, "train", "--teacher", &t, "--data", &d, "--class", class, "--epochs", "1"]].concat(),
    ));
    (out.join("student.ckpt"), teacher)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&["synth", "--normal", "0"]).status.code(), Some(1));
    assert_eq!(cli(&["train", "--data", "somewhere"]).status.code(), Some(1));
    assert_eq!(cli(&["--set", "lambda_kgg=3", "synth"]).status.code(), Some(1));
    assert_eq!(cli(&["--set", "image_size=48", "synth"]).status.code(), Some(1));
    assert_eq!(cli(&["eval", "--model", "broken", "--data", "x"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let none = s(&dir.path().join("none.ckpt"));
    let out = cli(&["score", "--student", &none, "--teacher", &none, "--data", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.ckpt"));
}

#[test]
fn synth_is_reproducible_and_annotated() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "quake");
    let first = files(&data);
    std::fs::remove_dir_all(&data).unwrap();
    synth(&data, "quake");
    assert_eq!(first, files(&data));
    assert_eq!(first.keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count(), 21);
    let manifest = String::from_utf8(first[Path::new("manifest.csv")].clone()).unwrap();
    assert!(manifest.starts_with("# "));
    assert_eq!(strip_comment_header(&manifest).lines().count(), 1 + 5);
}

#[test]
fn pipeline_with_overrides_and_unseen_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "flood");
    synth(&data, "quake");
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(strip_comment_header(&manifest).lines().count(), 1 + 5 + 5);
    let m = dir.path().join("flood_models");
    let (student, teacher) = train(&data, &m, "flood", &["--set", "lambda_kg=0"]);
    let ckpt = load_checkpoint(&student).unwrap();
    assert_eq!(ckpt.config.lambda_kg, 0.0);
    assert_eq!(ckpt.epoch, 1);
    let log = std::fs::read_to_string(m.join("student_log.csv")).unwrap();
    assert!(log.starts_with("# "));
    assert!(strip_comment_header(&log).starts_with("iteration,epoch,l_adv"));

    let out = dir.path().join("out");
    let (st, te) = (s(&student), s(&teacher));
    ok(small(&[
        "--out",
        &s(&out),
        "score",
        "--student",
        &st,
        "--teacher",
        &te,
        "--data",
        &s(&data),
        "--class",
        "flood",
    ]));
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    let body = strip_comment_header(&scores);
    assert!(body.starts_with("sample_id,label,l_term,r_term,v_term,d_term,raw,normalized"));
    // round(16 * 0.8) = 13 normals train, leaving 3 plus 5 damaged.
    assert_eq!(body.lines().count(), 1 + 3 + 5);

    ok(small(&[
        "--out",
        &s(&out),
        "localize",
        "--student",
        &st,
        "--teacher",
        &te,
        "--data",
        &s(&data),
        "--class",
        "flood",
        "--method",
        "smoothgrad",
        "--n",
        "2",
        "--damage-only",
    ]));
    let maps = std::fs::read_dir(out.join("heatmaps/smoothgrad")).unwrap().count();
    assert_eq!(maps, 5);
    let metrics = std::fs::read_to_string(out.join("saliency_smoothgrad.csv")).unwrap();
    assert_eq!(strip_comment_header(&metrics).lines().count(), 1 + 5);

    let model = format!("flood={st},{te}");
    ok(small(&["--out", &s(&out), "eval", "--model", &model, "--data", &s(&data), "--unseen"]));
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let body = strip_comment_header(&results);
    assert!(body.lines().any(|l| l.starts_with("flood,seen,")));
    assert!(body.lines().any(|l| l.starts_with("quake,unseen,")));
    assert!(!body.lines().any(|l| l.starts_with("flood,unseen,")));
    assert!(std::fs::read_to_string(out.join("table.txt")).unwrap().contains("Average"));

    let floor = small(&["--out", &s(&out), "eval", "--model", &model, "--data", &s(&data), "--floor", "1.01"]);
    assert_eq!(floor.status.code(), Some(3));
}

#[test]
fn student_training_rejects_a_student_as_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "fire");
    let (student, _) = train(&data, &dir.path().join("m"), "fire", &[]);
    let out = small(&["--out", &s(dir.path()), "train", "--teacher", &s(&student), "--data", &s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablation_writes_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "storm");
    let out = dir.path().join("out");
    ok(small(&[
        "--set",
        "epochs=1",
        "--set",
        "teacher_epochs=1",
        "--out",
        &s(&out),
        "ablate",
        "--kind",
        "student_size",
        "--data",
        &s(&data),
    ]));
    let csv = std::fs::read_to_string(out.join("ablation_student_size.csv")).unwrap();
    let rows: Vec<&str> = strip_comment_header(&csv).lines().collect();
    assert_eq!(rows[0], "kind,variant,class,auc");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("student_size,smaller,storm,"));
    assert!(rows[2].starts_with("student_size,equal,storm,"));
    assert!(out.join("ablation_student_size.txt").exists());
}
