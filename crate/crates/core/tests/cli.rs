use std::path::Path;
use std::process::{Command, Output};

use innerloop::checkpoint::save_checkpoint;
use innerloop::model::{init_random, ModelSpec};
use innerloop::tensor::Tensor;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_innerloop"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn toy(dir: &Path) -> String {
    let path = dir.join("toy.lprn");
    let out = run(&["init", "--out", path.to_str().unwrap(), "--layers", "4", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path.to_str().unwrap().to_string()
}

#[test]
fn single_pass_schedule_generates_like_the_plain_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let plain = run(&["run", "--model", &m, "--prompt", "ab", "--max-new", "6"]);
    let looped = run(&["run", "--model", &m, "--prompt", "ab", "--max-new", "6", "--schedule", "1:3:1", "--strategy", "uniform"]);
    assert!(plain.status.success());
    assert_eq!(plain.stdout, looped.stdout);
}

#[test]
fn exit_codes_are_contractual() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let bad = run(&["run", "--model", &m, "--prompt", "ab", "--schedule", "3:1:2"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("s < e"));
    assert_eq!(run(&["run", "--model", "/nonexistent.lprn", "--prompt", "x"]).status.code(), Some(3));
    assert_eq!(run(&["run", "--model", &m, "--prompt", "x", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["run", "--model", &m, "--prompt", "x", "--strategy", "wild"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_flags() {
    let out = run(&["run", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--model", "--tokenizer", "--prompt", "--schedule", "--extra-passes", "--strategy", "--eta", "--align-temp", "--noise-seed", "--max-new", "--trace", "--config"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let out = run(&["sweep", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--jobs"));
}

#[test]
fn trace_file_has_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let trace = dir.path().join("t.json");
    let out = run(&["run", "--model", &m, "--prompt", "hello", "--schedule", "1:3:3", "--strategy", "mavg", "--max-new", "2", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(v["meta"]["schedule"], "1:3:3");
    assert_eq!(v["meta"]["strategy"], "mavg");
    let steps = v["steps"].as_array().unwrap();
    // embedding + K = 4 + 2*2 steps + 2 boundary states
    assert_eq!(steps.len(), 1 + 8 + 2);
    for s in steps {
        for key in ["k", "block", "phase", "rep", "x", "y"] {
            assert!(s.get(key).is_some(), "missing {key}");
        }
    }
    assert_eq!(v["components_variance"].as_array().unwrap().len(), 2);
}

#[test]
fn trace_compare_reports_onset() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let out = run(&["trace-compare", "--model", &m, "--prompt", "abc", "--schedule", "1:3:2"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["divergence"]["first_divergent_step"], 3);
    let runs: Vec<&str> = v["steps"].as_array().unwrap().iter().map(|s| s["run"].as_str().unwrap()).collect();
    assert!(runs.contains(&"base") && runs.contains(&"looped"));
}

fn forced_model(dir: &Path) -> String {
    // every position predicts byte 'Y'
    let vocab = 258;
    let mut spec = ModelSpec::toy(3, 8, vocab);
    spec.tied_embeddings = false;
    let mut store = init_random(&spec, 1).unwrap();
    for b in 0..3 {
        for w in ["attn.o", "ffn.down"] {
            let name = format!("block.{b}.{w}.weight");
            let shape = store.get(&name).shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
    }
    store.set("embed.weight", Tensor::new(vec![vocab, 8], vec![1.0; vocab * 8]).unwrap()).unwrap();
    let mut unembed = vec![0.0; vocab * 8];
    unembed[b'Y' as usize * 8..(b'Y' as usize + 1) * 8].fill(1.0);
    store.set("unembed.weight", Tensor::new(vec![vocab, 8], unembed).unwrap()).unwrap();
    let path = dir.join("forced.lprn");
    save_checkpoint(&path, &spec, &store).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn forced_answer_dataset_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let m = forced_model(dir.path());
    let data = dir.path().join("d.jsonl");
    std::fs::write(
        &data,
        "{\"query\":\"a?\",\"choices\":[\"N\",\"Y\"],\"gold\":1}\n{\"query\":\"b?\",\"choices\":[\"Y\",\"N\",\"M\"],\"gold\":0}\n{\"query\":\"c?\",\"choices\":[\"Q\",\"Y\"],\"gold\":1}\n",
    )
    .unwrap();
    let report = dir.path().join("r.json");
    for schedule in ["0:3:1", "1:2:3"] {
        let out = run(&["score", "--model", &m, "--dataset", data.to_str().unwrap(), "--schedule", schedule, "--shots", "1", "--json", report.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(v["accuracy"], 1.0);
        assert_eq!(v["stderr"], 0.0);
        assert!(String::from_utf8_lossy(&out.stdout).contains("100.00 ± 0.00"));
    }
}

#[test]
fn sweep_writes_heatmap_and_config_sets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "{\"query\":\"x\",\"choices\":[\"a\",\"b\"],\"gold\":0}\n{\"query\":\"y\",\"choices\":[\"c\",\"d\"],\"gold\":1}\n").unwrap();
    let conf = dir.path().join("sweep.conf");
    std::fs::write(&conf, "repeats = 3\nstrategy = uniform\njobs = 2\n").unwrap();
    let csv = dir.path().join("h.csv");
    let out = run(&["sweep", "--config", conf.to_str().unwrap(), "--model", &m, "--dataset", data.to_str().unwrap(), "--strategy", "align", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "s,e,R,strategy,accuracy,delta,stderr,n");
    assert!(lines[1].starts_with("0,4,1,baseline,"));
    assert_eq!(lines.len(), 2 + 10);
    assert!(lines[2..].iter().all(|l| l.contains(",3,align,")));
}

#[test]
fn commands_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path());
    let args = ["run", "--model", &m, "--prompt", "xyz", "--schedule", "0:2:3", "--strategy", "noise", "--noise-seed", "7", "--max-new", "5"];
    assert_eq!(run(&args).stdout, run(&args).stdout);
}
