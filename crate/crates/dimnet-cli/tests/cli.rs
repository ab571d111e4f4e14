//! End-to-end checks of the installed commands through the real binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimnet"))
        .args(args)
        .env("DIMNET_TOY_THREADS", "1")
        .output()
        .expect("spawning the binary")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small corpus and model so every test stays in the sub-second range.
fn tiny_sets() -> Vec<&'static str> {
    vec![
        "--set", "corpus.n_train=16",
        "--set", "corpus.n_dev=6",
        "--set", "corpus.n_test=6",
        "--set", "corpus.n_accents=3",
        "--set", "corpus.n_fine=7",
        "--set", "corpus.n_coarse=9",
        "--set", "corpus.feat_dim=5",
        "--set", "corpus.utt_len_min=2",
        "--set", "corpus.utt_len_max=4",
        "--set", "model.d_model=8",
        "--set", "model.ffn=12",
        "--set", "model.heads=2",
        "--set", "model.conv_kernel=3",
        "--set", "model.shared_depth=2",
        "--set", "model.ctc_depth=1",
        "--set", "model.att_depth=1",
        "--set", "model.decoder_depth=1",
        "--set", "model.n_spaces=2",
        "--set", "model.bimodal_width=8",
        "--set", "model.d_k=4",
        "--set", "model.classifier_hidden=6",
        "--set", "model.emb_width=5",
        "--set", "model.init_scale=0.5",
        "--set", "train.batch_size=4",
        "--set", "train.dev_beam=2",
        "--set", "train.rescore_beam=2",
        "--set", "optimizer.warmup_steps=5",
    ]
}

fn gen_and_train(root: &Path) -> (String, String) {
    let data = root.join("data").to_str().unwrap().to_owned();
    let run_dir = root.join("run").to_str().unwrap().to_owned();
    let mut args = vec!["gen-data", "--out", &data, "--seed", "7"];
    let sets = tiny_sets();
    args.extend(&sets);
    ok(&run(&args));
    let mut args = vec!["train", "--data", &data, "--out", &run_dir, "--epochs", "1"];
    args.extend(&sets);
    ok(&run(&args));
    (data, run_dir)
}

/// Every file in the tree as path -> bytes, for exact comparison.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_str().unwrap().to_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = tmp.path().join(name).to_str().unwrap().to_owned();
        let mut args = vec!["gen-data", "--out", &out, "--seed", "7"];
        let sets = tiny_sets();
        args.extend(&sets);
        ok(&run(&args));
    }
    let a = snapshot(&tmp.path().join("a"));
    let b = snapshot(&tmp.path().join("b"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (path, bytes) in &a {
        assert_eq!(bytes, &b[path], "file {path} differs between runs");
    }
    assert!(a.contains_key("train.jsonl") && a.contains_key("config.effective"));
}

fn best_hyps(nbest: &Path) -> Vec<Vec<u64>> {
    std::fs::read_to_string(nbest)
        .unwrap()
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            v["best"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| t.as_u64().unwrap())
                .collect()
        })
        .collect()
}

#[test]
fn zero_ctc_and_lm_weights_reduce_to_single_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = gen_and_train(tmp.path());
    let model = format!("{run_dir}/checkpoint.json");
    let rescored = tmp.path().join("rescored").to_str().unwrap().to_owned();
    let single = tmp.path().join("single").to_str().unwrap().to_owned();
    ok(&run(&[
        "decode", "--data", &data, "--model", &model, "--out", &rescored, "--split", "dev",
        "--beam", "3", "--w2", "0",
    ]));
    ok(&run(&[
        "decode", "--data", &data, "--model", &model, "--out", &single, "--split", "dev",
        "--beam", "3", "--single-pass",
    ]));
    let a = best_hyps(&Path::new(&rescored).join("nbest.jsonl"));
    let b = best_hyps(&Path::new(&single).join("nbest.jsonl"));
    assert!(!a.is_empty());
    assert_eq!(a, b, "w2 = 0 (with w3 = 0) must reproduce the first pass");
}

#[test]
fn full_pipeline_smoke_produces_every_declared_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = gen_and_train(tmp.path());
    let model = format!("{run_dir}/checkpoint.json");
    let dec = tmp.path().join("dec").to_str().unwrap().to_owned();
    let ev = tmp.path().join("ev").to_str().unwrap().to_owned();
    ok(&run(&[
        "decode", "--data", &data, "--model", &model, "--out", &dec, "--split", "test",
        "--beam", "2",
    ]));
    ok(&run(&[
        "eval", "--data", &data, "--model", &model, "--out", &ev, "--split", "test",
        "--beam", "2",
    ]));

    for file in [
        "units_fine.txt", "units_coarse.txt", "lexicon.txt", "meta.json",
        "train.jsonl", "dev.jsonl", "test.jsonl", "config.effective",
    ] {
        assert!(Path::new(&data).join(file).exists(), "missing data file {file}");
    }
    for file in ["checkpoint.json", "metrics.jsonl", "config.effective"] {
        assert!(Path::new(&run_dir).join(file).exists(), "missing run file {file}");
    }
    for file in ["nbest.jsonl", "accents.jsonl", "config.effective"] {
        assert!(Path::new(&dec).join(file).exists(), "missing decode file {file}");
    }
    for file in ["accents.csv", "phonemes.csv", "summary.json", "config.effective"] {
        assert!(Path::new(&ev).join(file).exists(), "missing eval file {file}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&ev).join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["wer"].is_number() && summary["accent_accuracy"].is_number());
}

#[test]
fn unknown_config_key_fails_listing_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d").to_str().unwrap().to_owned();
    let result = run(&["gen-data", "--out", &out, "--set", "corpus.nope=1"]);
    assert!(!result.status.success());
    let err = stderr(&result);
    assert!(err.contains("unknown config key `corpus.nope`"), "{err}");
    assert!(err.contains("corpus.n_train"), "{err}");
}

#[test]
fn missing_checkpoint_is_a_clean_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data").to_str().unwrap().to_owned();
    let mut args = vec!["gen-data", "--out", &data, "--seed", "3"];
    let sets = tiny_sets();
    args.extend(&sets);
    ok(&run(&args));
    let missing = tmp.path().join("nope.json").to_str().unwrap().to_owned();
    let out = tmp.path().join("dec").to_str().unwrap().to_owned();
    let result = run(&["decode", "--data", &data, "--model", &missing, "--out", &out]);
    assert!(!result.status.success());
    assert!(stderr(&result).contains("missing checkpoint"), "{}", stderr(&result));
}
