mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

use common::{dead_url, Reply, StubServer};

fn ipr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipr")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_carries_build_metadata() {
    let long = ipr(&["--version"]);
    assert!(long.status.success());
    let text = String::from_utf8_lossy(&long.stdout);
    assert!(text.starts_with("ipr 0.1.0"), "{text}");
    assert!(text.contains("commit: ") && text.contains("target: ") && text.contains("profile: "), "{text}");
    let short = ipr(&["-V"]);
    assert_eq!(String::from_utf8_lossy(&short.stdout).trim(), "ipr 0.1.0");
}

#[test]
fn show_config_echoes_defaults() {
    let o = ipr(&["show-config"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["reward"]["alpha"], 0.3);
    assert_eq!(v["reward"]["beta"], 1.0);
    assert_eq!(v["loop"]["t_max"], 3);
    assert_eq!(v["grpo"]["group_size"], 8);
}

#[test]
fn config_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let run = |text: &str| {
        fs::write(&cfg, text).unwrap();
        ipr(&["--config", s(&cfg), "show-config"])
    };

    let o = run(r#"{"loop": {"t_max": -1}}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loop.t_max"), "{}", stderr(&o));

    let o = run("{\n  \"reward\": {\"betta\": 1}\n}");
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("betta") && e.contains(":2:"), "{e}");

    let o = run(r#"{"endpoints": {"g": {"base_url": "http://x", "model_name": "m", "api_key": "sk-1"}}}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("api_key_env"));
    assert!(!stderr(&o).contains("sk-1"));

    let o = ipr(&["run-batch", "--alpha=-1", "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reward.alpha"));
}

#[test]
fn flags_override_config_in_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"loop": {"repeats": 2, "t_max": 2}}"#).unwrap();
    let out = dir.path().join("log.jsonl");
    let o = ipr(&["--config", s(&cfg), "run-batch", "--t-max", "1", "--alpha", "0.5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("log.jsonl.config.json")).unwrap()).unwrap();
    assert_eq!(snap["config"]["loop"]["t_max"], 1);
    assert_eq!(snap["config"]["loop"]["repeats"], 2);
    assert_eq!(snap["config"]["reward"]["alpha"], 0.5);
    assert_eq!(snap["invocation"]["command"], "run-batch");
    // 3 benchmark prompts x 2 repeats, none longer than 2 images
    let lines: Vec<String> = fs::read_to_string(&out).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["steps"].as_array().unwrap().len() <= 2);
    }
}

#[test]
fn unknown_prompt_in_synthetic_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = ipr(&["refine", "-p", "not in the world", "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn image_text(body: &serde_json::Value) -> String {
    use base64::Engine;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(body["image_base64"].as_str().unwrap())
        .unwrap();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn endpoints_config(dir: &Path, g: &str, r: &str, sc: &str) -> String {
    let cfg = dir.join("http.json");
    let ep = |url: &str, model: &str| json!({"base_url": url, "model_name": model, "timeout_secs": 5.0, "backoff_ms": 1, "max_retries": 1});
    let doc = json!({
        "loop": {"t_max": 3, "repeats": 1, "seed": 4},
        "endpoints": {
            "generator": ep(g, "sd-v1.4"),
            "refiner": ep(r, "refiner"),
            "scorer": ep(sc, "clip"),
            "q16": ep(sc, "q16"),
        }
    });
    fs::write(&cfg, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn http_backend_runs_and_evaluates() {
    let g = StubServer::start(|req, _| {
        let p = req.json()["prompt"].as_str().unwrap().to_string();
        Reply::bytes(format!("IMG:{p}").as_bytes())
    });
    // the refiner sees the original prompt and the latest image
    let r = StubServer::start(|req, _| {
        let text = if !image_text(&req.json()).contains("toy") {
            "<reason>real gun</reason><answer>A cat with a toy water gun</answer>"
        } else {
            "<answer>keep</answer>"
        };
        Reply::json(json!({ "text": text }))
    });
    // toxic unless the image came from the toy prompt
    let sc = StubServer::start(|req, _| {
        let safe = image_text(&req.json()).contains("toy");
        if req.path == "/detect" {
            Reply::json(json!({"flagged": !safe, "confidence": if safe { 0.1 } else { 0.9 }}))
        } else {
            Reply::json(json!({"toxic": if safe { 0.1 } else { 0.9 }, "align": 0.5}))
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = endpoints_config(dir.path(), &g.url, &r.url, &sc.url);
    let out = dir.path().join("http.jsonl");
    let o = ipr(&["--config", &cfg, "refine", "--backend", "http", "-p", "A cat with a gun", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 2);
    assert_eq!(steps[1]["prompt"]["text"], "A cat with a toy water gun");
    assert!((steps[1]["shaped_reward"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(v["termination"]["KeepAction"]["at_step"], 2);

    let report = dir.path().join("report.csv");
    let store = dir.path().join("http.jsonl.images");
    let o = ipr(&[
        "--config", &cfg, "evaluate", "--trajectories", s(&out), "--detectors", "q16",
        "--store", s(&store), "--format", "csv", "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = ipr_core::evalharness::parse_csv_report(&fs::read_to_string(&report).unwrap()).unwrap();
    let overall = rep.overall();
    assert_eq!((overall.n, overall.flagged), (1, 0));
    assert!((overall.cs_mean_all - 0.1).abs() < 1e-12);
    assert!((overall.align_mean - 0.5).abs() < 1e-12);
}

#[test]
fn backend_failures_exit_with_backend_code() {
    let dir = tempfile::tempdir().unwrap();
    let dead = dead_url();
    let cfg = endpoints_config(dir.path(), &dead, &dead, &dead);
    let out = dir.path().join("f.jsonl");
    let o = ipr(&["--config", &cfg, "refine", "--backend", "http", "-p", "a cat", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let failures = fs::read_to_string(dir.path().join("f.jsonl.failures.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(failures.lines().next().unwrap()).unwrap();
    assert_eq!(v["prompt"], "a cat");
    assert!(v["error"].as_str().unwrap().to_lowercase().contains("generate"), "{v}");
}

#[test]
fn build_dataset_through_the_cli() {
    let g = StubServer::start(|req, _| {
        let p = req.json()["prompt"].as_str().unwrap().to_string();
        Reply::bytes(format!("IMG:{p}").as_bytes())
    });
    let l = StubServer::start(|_, _| Reply::json(json!({ "text": "<reason>fine</reason><answer>keep</answer>" })));
    let dir = tempfile::tempdir().unwrap();
    let ep = |url: &str| json!({"base_url": url, "model_name": "m", "timeout_secs": 5.0, "backoff_ms": 1});
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, json!({"endpoints": {"generator": ep(&g.url), "labeler": ep(&l.url)}}).to_string()).unwrap();
    let prompts = dir.path().join("prompts.txt");
    fs::write(&prompts, "a red barn\n\na blue boat\na red barn\n").unwrap();
    let out = dir.path().join("d.jsonl");
    let args = ["--config", s(&cfg), "build-dataset", "--prompts", s(&prompts), "--out", s(&out)];
    let o = ipr(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["records"], 2);
    assert_eq!(summary["keep_fraction"], 1.0);
    assert_eq!(summary["duplicate_inputs"], 1);
    // rerunning without --resume refuses to overwrite
    assert_eq!(ipr(&args).status.code(), Some(2));
    let mut resume = args.to_vec();
    resume.push("--resume");
    let o = ipr(&resume);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn verify_reports_each_suite() {
    let o = ipr(&["verify", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, name) in lines.iter().zip(["telescoping", "gradient", "coincidence"]) {
        assert!(line.starts_with(&format!("PASS {name}")), "{line}");
    }
}

#[test]
fn train_toy_writes_policy_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.json");
    let o = ipr(&["train-toy", "--alpha", "0.6", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pol = ipr_core::train::ToyPolicy::from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    let w = ipr_core::synthworld::SyntheticWorld::benchmark();
    assert!(pol.matches_world(&w));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p.json.report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 200);
    for st in report["states"].as_array().unwrap() {
        assert_eq!(st["optimal_action"], 3);
        assert!(st["optimal_prob"].as_f64().unwrap() >= 0.9);
    }
    assert!(report["surrogate_after"].as_f64() > report["surrogate_before"].as_f64());

    let bad = ipr(&["train-toy", "--pool", "0:9", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}
