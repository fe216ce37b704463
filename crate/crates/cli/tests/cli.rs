use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 11,
  "corpus": {"generate": {"spec": {
    "num_speakers": 8, "eval_speakers": 4, "utterances_per_speaker": 4,
    "enroll_utterances": 2, "phones_per_utterance": 12, "num_target_speakers": 4,
    "target_utterances": 4, "duration_train_utterances": 6
  }}},
  "anon": "(3-8)"
}"#;

fn pkvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pkvc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_is_reproducible_across_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let mut outputs = Vec::new();
    for (name, jobs) in [("a", "1"), ("b", "3"), ("c", "1")] {
        let out = tmp.path().join(name);
        let o = pkvc(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--jobs", jobs]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(out);
    }
    for file in ["privacy_report.json", "scores.csv", "utility.json", "manifest.json"] {
        let first = fs::read(outputs[0].join(file)).unwrap();
        for dir in &outputs[1..] {
            assert_eq!(first, fs::read(dir.join(file)).unwrap(), "{file} differs");
        }
    }
    let report = pkvc(&["report", outputs[0].to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("EER female"));
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("run");
    let o = pkvc(&[
        "run", "--config", &config, "--out", out.to_str().unwrap(),
        "--seed", "5", "--anon", "(0-0)", "--strategy", "random",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["anon"], "(0-0)_r");
    assert_eq!(manifest["seeds"]["master"], 5);
}

#[test]
fn gen_corpus_is_byte_stable_and_echoes_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let mut bytes = Vec::new();
    for name in ["x", "y"] {
        let out = tmp.path().join(name);
        let o = pkvc(&["gen-corpus", "--config", &config, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        bytes.push(fs::read(out.join("corpus.pkvc")).unwrap());
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["spec"]["num_speakers"], 8);
        assert_eq!(manifest["spec"]["noise_scale"], 0.6);
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn train_writes_models() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("models");
    let o = pkvc(&["train", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["classifier.pkvc", "duration_model.json", "train.json"] {
        assert!(out.join(file).exists(), "{file}");
    }
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.trim_end().trim_end_matches('}').to_string()
        + r#", "sweep": {"w": [0, 1], "clusters": [0, 8], "strategies": ["random"], "seeds": [1, 2]}}"#;
    let config = write_config(tmp.path(), &text);
    let out = tmp.path().join("sweep");
    let o = pkvc(&["sweep", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let report = pkvc(&["report", out.join("results.csv").to_str().unwrap()]);
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(String::from_utf8_lossy(&report.stdout).contains("(10-8)_r"));
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = pkvc(&["run", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));

    let o = pkvc(&["run", "--seed", "1", "--anon", "(11-0)", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"));

    let config = write_config(tmp.path(), SMALL);
    let o = pkvc(&["run", "--config", &config, "--strategy", "cross_gender", "--num", "3"]);
    assert!(!o.status.success());

    // A one-speaker pool cannot be split into two groups.
    let text = SMALL.replace("\"anon\": \"(3-8)\"", "\"anon\": \"(3-8)_d,1\", \"num_targets\": 1");
    let config = write_config(tmp.path(), &text);
    let o = pkvc(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[select]"), "{}", stderr(&o));
    assert!(!out.join("privacy_report.json").exists());
}
