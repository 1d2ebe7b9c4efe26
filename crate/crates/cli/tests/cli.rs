use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use beampred::scene::load_dataset;
use beampred::train::EvalReport;

fn beampred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beampred")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = beampred(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    beampred(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small and quick: few samples at low resolution.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 4\n\n[data]\nsamples = 300\n\n[render]\nwidth = 8\nheight = 8\n\n[model.mlm]\nd_v = 32\npatch_size = 8\n\n[train]\nepochs = 1\nlearning_rate = 0.001\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn empty_scene_gives_line_of_sight_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let stdout = ok(&["gen-data", "--out", s(&out), "--scene", "empty", "--samples", "10"]);
    assert!(stdout.contains("wrote 10 samples"));
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.manifest.los_fraction, 1.0);
    assert_eq!(ds.manifest.counts, [7, 1, 2]);
    assert!(out.join("config.toml").exists());
}

#[test]
fn gen_data_refuses_non_empty_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&["gen-data", "-c", s(&cfg), "--out", s(&a), "--seed", "1"]);
    assert!(stdout.contains("split train 210 / val 30 / test 60"), "{stdout}");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&b), "--seed", "1"]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    assert_eq!(code(&["gen-data", "-c", s(&cfg), "--out", s(&a), "--seed", "2"]), 2);
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&a), "--seed", "2", "--force"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&b));

    // the resolved config regenerates the same dataset on its own
    let c = tmp.path().join("c");
    ok(&["gen-data", "-c", s(&b.join("config.toml")), "--out", s(&c)]);
    assert_eq!(dir_bytes(&b), dir_bytes(&c));
}

#[test]
fn train_eval_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);

    let run = tmp.path().join("dnn");
    let stdout = ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&run), "--model", "dnn-pos", "--epochs", "2"]);
    assert!(stdout.starts_with("dnn-pos on test (60 samples)"), "{stdout}");
    let report: EvalReport = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.loss_curve.len(), 2);
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(run.join("checkpoint_best").join("manifest.json").exists());

    // identical config and seed give a byte-identical report
    let again = tmp.path().join("dnn2");
    ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&again), "--model", "dnn-pos", "--epochs", "2"]);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());

    let eval_json = tmp.path().join("eval.json");
    let stdout = ok(&["eval", "--checkpoint", s(&run), "-d", s(&ds), "--split", "test", "--out", s(&eval_json)]);
    assert!(stdout.contains(&format!("top1 {:.4}", report.top1())), "{stdout}");

    let dump = ok(&["inspect", s(&run)]);
    assert!(dump.contains("checkpoint") && dump.contains("dnn.stem.weight") && dump.contains("trainable"));
    assert!(dump.contains("0 frozen"));
    let dump = ok(&["inspect", s(&ds)]);
    assert!(dump.contains("label histogram") && dump.contains("63:"));
    let dump = ok(&["inspect", s(&run.join("checkpoint_best").join("params").join("dnn.out.bias.bctn"))]);
    assert!(dump.contains("shape [64]"));

    let mlm = tmp.path().join("mlm");
    ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&mlm), "--model", "mlm-bp", "--epochs", "0"]);
    let dump = ok(&["inspect", s(&mlm)]);
    assert!(dump.contains("frozen,") && dump.contains("enc.0.q.lora_b"));
    assert!(!dump.contains(" 0 frozen"));
}

#[test]
fn untrained_model_is_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);
    let run = tmp.path().join("r");
    ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&run), "--model", "cnn-vis", "--epochs", "0"]);
    let report: EvalReport = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert!(report.loss_curve.is_empty());
    // an untrained classifier is far from the trained regime
    assert!(report.top1() < 0.3, "{}", report.top1());
}

#[test]
fn resume_continues_where_training_stopped() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);
    let full = tmp.path().join("full");
    ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&full), "--model", "fusion", "--epochs", "3"]);
    let part = tmp.path().join("part");
    ok(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&part), "--model", "fusion", "--epochs", "2"]);
    let out = beampred(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&part), "--model", "fusion", "--epochs", "3", "--resume"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("resumed"));
    assert_eq!(fs::read(full.join("report.json")).unwrap(), fs::read(part.join("report.json")).unwrap());
    assert_eq!(code(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&part), "--model", "dnn-pos", "--resume"]), 2);
}

#[test]
fn codebook_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);
    let other = tmp.path().join("other");
    fs::create_dir(&other).unwrap();
    let other_cfg = small_config(&other, "\n[array]\nn_h = 4\n");
    let run = tmp.path().join("r");
    let out = beampred(&["train", "-c", s(&other_cfg), "-d", s(&ds), "-o", s(&run), "--model", "dnn-pos"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codebook"));
}

#[test]
fn corrupted_artifacts_are_integrity_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "--out", s(&ds), "--scene", "empty", "--samples", "12"]);
    let samples = ds.join("samples.bin");
    let bytes = fs::read(&samples).unwrap();
    fs::write(&samples, &bytes[..bytes.len() - 7]).unwrap();
    let out = beampred(&["inspect", s(&ds)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));

    let junk = tmp.path().join("junk.bctn");
    fs::write(&junk, b"NOPE\x01\x02\x03").unwrap();
    assert_eq!(code(&["inspect", s(&junk)]), 3);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatchsize = 3\n").unwrap();
    assert_eq!(code(&["gen-data", "-c", s(&bad), "--out", s(&tmp.path().join("x"))]), 2);
    assert_eq!(code(&["gen-data", "--out", s(&tmp.path().join("y")), "--scene", "moon"]), 2);
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);
    assert_eq!(code(&["train", "-c", s(&cfg), "-d", s(&ds), "-o", s(&tmp.path().join("r")), "--model", "resnet"]), 2);
}

#[test]
fn fewshot_grid_covers_every_model_and_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let ds = tmp.path().join("ds");
    ok(&["gen-data", "-c", s(&cfg), "--out", s(&ds)]);
    let out = tmp.path().join("fs");
    let stdout = ok(&["fewshot", "-c", s(&cfg), "-d", s(&ds), "-o", s(&out), "--ratios", "0.1,0.2,0.3", "--seeds", "1,2"]);
    assert_eq!(stdout.lines().count(), 1 + 12);
    let csv = fs::read_to_string(out.join("fewshot.csv")).unwrap();
    assert_eq!(csv, stdout);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fewshot.json")).unwrap()).unwrap();
    let cells = report["table"]["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 12);
    for c in cells {
        assert_eq!(c["runs"].as_array().unwrap().len(), 2);
        assert!(c["spread_top1"].as_f64().unwrap() >= 0.0);
        assert!(c["mean_top3"].as_f64().unwrap() >= c["mean_top1"].as_f64().unwrap());
    }
    // a ratio leaving fewer samples than one batch is rejected up front
    assert_eq!(code(&["fewshot", "-c", s(&cfg), "-d", s(&ds), "-o", s(&out), "--ratios", "0.01", "--models", "dnn-pos"]), 2);
}
