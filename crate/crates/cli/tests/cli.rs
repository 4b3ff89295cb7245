use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forge_core::model::ModelSpec;
use forge_core::multimodal::VisionSpec;
use forge_core::synth_data::Tokenizer;
use forge_core::training::{Stage, StageConfig};
use serde_json::{json, Value};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    forge(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn data_config() -> Value {
    json!({"seed": 3, "n_text_train": 96, "n_vqa_train": 96, "n_text_eval": 12, "n_vqa_eval": 12})
}

fn small_model() -> ModelSpec {
    let mut m = ModelSpec::toy(Tokenizer::standard().vocab_size());
    m.n_layers = 4;
    m.d_model = 32;
    m
}

fn small_vision() -> VisionSpec {
    let mut v = VisionSpec::toy(32);
    v.width = 24;
    v.n_heads = 2;
    v.depth = 2;
    v
}

fn stage(stage: Stage) -> Value {
    serde_json::to_value(StageConfig {
        batch_size: 16,
        ..StageConfig::toy(stage)
    })
    .unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_reproducible_and_seed_overridable() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "data.json", &data_config());
    assert_ok(&run("gen-data", &cfg, &t.path().join("a")));
    assert_ok(&run("gen-data", &cfg, &t.path().join("b")));
    let read = |d: &str| fs::read(t.path().join(d).join("MANIFEST.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let o = forge(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        t.path().join("c").to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert_ok(&o);
    assert_ne!(read("a"), read("c"));
}

#[test]
fn configuration_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let mut v = data_config();
    v["colour"] = json!("red");
    let cfg = write(t.path(), "bad.json", &v);
    assert_eq!(code(&run("gen-data", &cfg, t.path())), 2);
    assert_eq!(code(&run("gen-data", &t.path().join("missing.json"), t.path())), 2);
    assert_eq!(code(&forge(&["gen-data"])), 2);
    assert_eq!(code(&forge(&["no-such-command"])), 2);
    let zero = write(t.path(), "zero.json", &json!({"seed": 1, "n_text_train": 0, "n_vqa_train": 1, "n_text_eval": 1, "n_vqa_eval": 1}));
    assert_eq!(code(&run("gen-data", &zero, t.path())), 2);
}

#[test]
fn missing_corpus_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(
        t.path(),
        "train.json",
        &json!({
            "corpus": t.path().join("nowhere"),
            "model": small_model(),
            "init_seed": 1,
            "train": stage(Stage::TargetLm),
        }),
    );
    assert_eq!(code(&run("train-target", &cfg, &t.path().join("out"))), 3);
}

#[test]
fn commands_chain_through_all_stages() {
    let t = tempfile::tempdir().unwrap();
    let p = |s: &str| t.path().join(s);
    let data = p("data");
    assert_ok(&run("gen-data", &write(t.path(), "data.json", &data_config()), &data));

    let train = write(
        t.path(),
        "train.json",
        &json!({"corpus": data, "model": small_model(), "init_seed": 1, "train": stage(Stage::TargetLm)}),
    );
    assert_ok(&run("train-target", &train, &p("target")));
    let target = p("target/target.safetensors");
    assert!(target.exists());

    let traj = write(
        t.path(),
        "traj.json",
        &json!({"model": target, "corpus": data, "mode": "teacher_forced", "n_samples": 6}),
    );
    assert_ok(&run("trajectory", &traj, &p("traj")));

    let bad_plan = write(t.path(), "plan0.json", &json!({"target": target, "first_replaced": 0, "last_replaced": 1}));
    assert_eq!(code(&run("surgery", &bad_plan, &p("bad"))), 2);
    let plan = write(t.path(), "plan.json", &json!({"target": target, "first_replaced": 1, "last_replaced": 2}));
    assert_ok(&run("surgery", &plan, &p("surgery")));
    let surrogate = p("surgery/surrogate.safetensors");

    let s1 = write(
        t.path(),
        "s1.json",
        &json!({"stage": stage(Stage::S1AdapterTranslator), "corpus": data, "decoder": surrogate, "vision": small_vision(), "bundle_seed": 2}),
    );
    assert_ok(&run("stage", &s1, &p("s1")));

    // stage 2 with a decoder other than the stage-1 one is refused
    let wrong = write(
        t.path(),
        "s2_wrong.json",
        &json!({"stage": stage(Stage::S2Encoder), "corpus": data, "decoder": target, "bundle": p("s1/bundle.safetensors")}),
    );
    assert_eq!(code(&run("stage", &wrong, &p("s2_wrong"))), 5);

    let s2 = write(
        t.path(),
        "s2.json",
        &json!({"stage": stage(Stage::S2Encoder), "corpus": data, "decoder": p("s1/decoder.safetensors"), "bundle": p("s1/bundle.safetensors")}),
    );
    assert_ok(&run("stage", &s2, &p("s2")));

    let s3 = write(
        t.path(),
        "s3.json",
        &json!({
            "stage": stage(Stage::S3Decoder), "corpus": data, "decoder": target,
            "bundle": p("s2/bundle.safetensors"), "scope": {"last_k_layers": 1},
            "eval": {"n_vqa": 6, "n_text": 6},
        }),
    );
    assert_ok(&run("stage", &s3, &p("s3")));
    let evals: Vec<Value> = serde_json::from_slice(&fs::read(p("s3/evals.json")).unwrap()).unwrap();
    assert!(!evals.is_empty());

    let cond = |name: &str, decoder: PathBuf| json!({"name": name, "bundle": p("s2/bundle.safetensors"), "decoder": decoder});
    let mut conditions = vec![
        cond("target_paired", target.clone()),
        cond("late_paired", p("s1/decoder.safetensors")),
        cond("late_grafted", target.clone()),
        cond("early_grafted", target.clone()),
    ];
    let partial = write(t.path(), "partial.json", &json!({"corpus": data, "n_vqa": 6, "conditions": conditions}));
    assert_eq!(code(&run("report", &partial, &p("partial"))), 5);
    conditions.push(cond("control_grafted", target.clone()));
    let report = write(t.path(), "report.json", &json!({"corpus": data, "n_vqa": 6, "conditions": conditions}));
    assert_ok(&run("report", &report, &p("report")));
    assert!(p("report/comparison.csv").exists());
}

#[test]
fn stage_stop_and_resume_matches_a_straight_run() {
    let t = tempfile::tempdir().unwrap();
    let p = |s: &str| t.path().join(s);
    let data = p("data");
    assert_ok(&run("gen-data", &write(t.path(), "data.json", &data_config()), &data));
    let train = write(
        t.path(),
        "train.json",
        &json!({"corpus": data, "model": small_model(), "init_seed": 1, "train": stage(Stage::TargetLm)}),
    );
    assert_ok(&run("train-target", &train, &p("target")));
    let base = json!({
        "stage": stage(Stage::S1AdapterTranslator), "corpus": data,
        "decoder": p("target/target.safetensors"), "vision": small_vision(), "bundle_seed": 2,
    });
    assert_ok(&run("stage", &write(t.path(), "straight.json", &base), &p("straight")));

    let mut stop = base.clone();
    stop["stop_after"] = json!(3);
    assert_ok(&run("stage", &write(t.path(), "stop.json", &stop), &p("resumed")));
    assert!(!p("resumed/bundle.safetensors").exists());
    let mut resume = base.clone();
    resume["resume"] = json!(true);
    assert_ok(&run("stage", &write(t.path(), "resume.json", &resume), &p("resumed")));

    let a = fs::read(p("straight/bundle.safetensors")).unwrap();
    let b = fs::read(p("resumed/bundle.safetensors")).unwrap();
    assert!(a == b, "resumed bundle differs from the straight run");
}
