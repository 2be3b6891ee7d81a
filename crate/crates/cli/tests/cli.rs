use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

const PROMPT: &str = "a photo of a woman with blonde hair, wearing eyeglasses";

fn stori() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stori"));
    c.env_remove("STORI_DATA_DIR");
    c
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn stori");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "exit {:?}", out.status.code());
    String::from_utf8(out.stdout).unwrap()
}

struct Fx {
    _tmp: TempDir,
    data: PathBuf,
    out: PathBuf,
}

impl Fx {
    fn new() -> Fx {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");
        let out = tmp.path().join("out");
        ok(stori()
            .args(["fixture", "--dir"])
            .arg(&data)
            .arg("--out-dir")
            .arg(&out));
        Fx { _tmp: tmp, data, out }
    }

    /// `stori --config <fixture>/stori.toml --out-dir <out>` plus `args`.
    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = stori();
        c.arg("--config")
            .arg(self.data.join("stori.toml"))
            .arg("--out-dir")
            .arg(&self.out)
            .args(args);
        c
    }

    fn json(&self, name: &str) -> Value {
        let text = std::fs::read_to_string(self.out.join(name)).unwrap();
        serde_json::from_str(&text).unwrap()
    }

    fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(&self.data)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect()
    }
}

fn embedding(v: &Value) -> Vec<f64> {
    v["embedding"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn digest(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("ranking digest "))
        .expect("digest line")
        .to_string()
}

#[test]
fn fixture_writes_every_input_file() {
    let fx = Fx::new();
    for f in [
        "model.safetensors",
        "vocab.json",
        "merges.txt",
        "store.safetensors",
        "store.jsonl",
        "spans.json",
        "prompts.json",
        "train.jsonl",
        "eval.jsonl",
        "stori.toml",
    ] {
        assert!(fx.data.join(f).is_file(), "{f} missing");
    }
    let m = fx.json("fixture.manifest.json");
    assert_eq!(m["command"], "fixture");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 10);
}

#[test]
fn neutral_spans_encode_like_the_plain_prompt() {
    let fx = Fx::new();
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT]));
    let plain = embedding(&fx.json("embedding.json"));
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--span", "with blonde hair=1", "--span", "eyeglasses=1"]));
    let neutral = embedding(&fx.json("embedding.json"));
    assert_eq!(plain, neutral);
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--span", "with blonde hair=0"]));
    let silenced = embedding(&fx.json("embedding.json"));
    assert_ne!(plain, silenced);
    let weights: Vec<f64> = fx.json("embedding.json")["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["weight"].as_f64().unwrap())
        .collect();
    assert_eq!(weights[6..9], [0.0, 0.0, 0.0]);
    assert!(weights.iter().enumerate().all(|(i, &w)| (6..9).contains(&i) || w == 1.0));
}

#[test]
fn invalid_input_exits_with_status_two() {
    let fx = Fx::new();
    let out = run(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--span", "purple=0"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("purple"));

    let out = run(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--span", "blonde=-1"]));
    assert_eq!(out.status.code(), Some(2));

    let out = run(fx
        .cmd(&["retrieve", "--prompt", PROMPT, "--store"])
        .arg(fx.data.join("missing.safetensors")));
    assert_eq!(out.status.code(), Some(2));

    let out = run(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--reweight-start", "14"]));
    assert_eq!(out.status.code(), Some(2));

    let bad = fx.data.join("bad.toml");
    std::fs::write(&bad, "epoch = 3\n").unwrap();
    let out = run(stori().arg("--config").arg(&bad).args(["encode", "--prompt", "x"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifest_records_defaults_and_their_sources() {
    let fx = Fx::new();
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT]));
    let m = fx.json("encode.manifest.json");
    assert_eq!(m["config"]["reweight_start"], 7);
    assert_eq!(m["config"]["reweight_mode"], "from_block_onward");
    assert_eq!(m["config"]["sources"]["reweight_start"], "default");
    assert_eq!(m["config"]["sources"]["model"], "config");
    assert_eq!(m["config"]["sources"]["out_dir"], "flag");
    let roles: Vec<&str> = m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["role"].as_str().unwrap())
        .collect();
    assert!(roles.contains(&"model"));
    assert!(m["inputs"][0]["sha256"].as_str().unwrap().len() == 64);
    assert_eq!(m["result"]["reweight_start"], 7);
}

#[test]
fn flags_override_the_config_file() {
    let fx = Fx::new();
    let config = std::fs::read_to_string(fx.data.join("stori.toml")).unwrap();
    std::fs::write(fx.data.join("stori.toml"), format!("{config}reweight_start = 3\nseed = 11\n")).unwrap();
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--reweight-start", "5"]));
    let m = fx.json("encode.manifest.json");
    assert_eq!(m["config"]["reweight_start"], 5);
    assert_eq!(m["config"]["sources"]["reweight_start"], "flag");
    assert_eq!(m["config"]["seed"], 11);
    assert_eq!(m["config"]["sources"]["seed"], "config");
}

#[test]
fn relative_inputs_resolve_under_the_data_dir() {
    let fx = Fx::new();
    let out = fx.out.join("env");
    ok(stori()
        .env("STORI_DATA_DIR", &fx.data)
        .current_dir(std::env::temp_dir())
        .args(["--model", "model.safetensors", "--out-dir"])
        .arg(&out)
        .args(["encode", "--prompt", PROMPT, "--spans", "spans.json"]));
    let e: Value = serde_json::from_str(&std::fs::read_to_string(out.join("embedding.json")).unwrap()).unwrap();
    assert_eq!(e["tokens"][7]["weight"], 1.5);
}

#[test]
fn training_lowers_the_loss_and_is_reproducible() {
    let fx = Fx::new();
    let train = |epochs: &str, seed: &str| {
        ok(fx
            .cmd(&["train", "--epochs", epochs, "--seed", seed, "--batch-size", "8", "--prompts"])
            .arg(fx.data.join("prompts.json"))
            .arg("--data")
            .arg(fx.data.join("train.jsonl"))
            .arg("--eval")
            .arg(fx.data.join("eval.jsonl")));
        (
            std::fs::read_to_string(fx.out.join("loss.csv")).unwrap(),
            fx.json("weights.json"),
        )
    };
    let (csv, weights) = train("20", "3");
    let losses: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 20);
    assert!(losses[19] < losses[0], "{losses:?}");
    for class in weights["classes"].as_array().unwrap() {
        for p in class["prompts"].as_array().unwrap() {
            let theta = p["theta"].as_array().unwrap();
            assert_eq!(theta[0], 0.0);
            assert_eq!(theta[theta.len() - 1], 0.0);
        }
    }
    assert_eq!(train("20", "3").0, csv);

    let (csv, weights) = train("0", "3");
    assert_eq!(csv.lines().count(), 1);
    for class in weights["classes"].as_array().unwrap() {
        for p in class["prompts"].as_array().unwrap() {
            assert!(p["weights"].as_array().unwrap().iter().all(|w| w == 1.0));
        }
    }

    ok(&mut fx.cmd(&["inspect", "--weights"]).arg(fx.out.join("weights.json")));
    let report = std::fs::read_to_string(fx.out.join("inspect.csv")).unwrap();
    assert!(report.starts_with("class,prompt,position,token,weight,normalized\n"));
    assert!(report.contains("\"striped\""));
}

#[test]
fn retrieval_evaluation_and_ablation_write_csvs() {
    let fx = Fx::new();
    let stdout = ok(&mut fx.cmd(&[
        "eval-retrieval",
        "--prompt",
        PROMPT,
        "--span",
        "with blonde hair=1",
        "--positives",
        "blonde",
        "--grid",
        "0,1",
    ]));
    assert!(stdout.contains("AP"));
    let metrics = std::fs::read_to_string(fx.out.join("metrics.csv")).unwrap();
    // one row per grid point and category
    assert_eq!(metrics.lines().count(), 1 + 2 * 8);
    assert!(fx.out.join("curves.csv").is_file());
    let m = fx.json("eval-retrieval.manifest.json");
    assert_eq!(m["result"]["k"], 400);

    ok(&mut fx.cmd(&[
        "eval-retrieval",
        "--prompt",
        PROMPT,
        "--span",
        "blonde=1",
        "--method",
        "prompt-weighting",
        "--sample-per-category",
        "10",
    ]));
    assert_eq!(fx.json("eval-retrieval.manifest.json")["result"]["items"], 80);

    ok(&mut fx.cmd(&["ablate", "--prompt", PROMPT, "--span", "blonde=1", "--grid", "0,1", "--starts", "2,13"]));
    let csv = std::fs::read_to_string(fx.out.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("start,mode,weight,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2 * 8);
    assert!(csv.contains("\n13,single_block,"));

    let out = run(&mut fx.cmd(&["eval-retrieval", "--prompt", PROMPT, "--attrs", ""]));
    assert_eq!(out.status.code(), Some(2));
    let out = run(&mut fx.cmd(&["eval-retrieval", "--prompt", PROMPT]));
    assert_eq!(out.status.code(), Some(2), "no swept span");
}

#[test]
fn bench_reports_a_ratio() {
    let fx = Fx::new();
    ok(&mut fx.cmd(&["bench", "--prompt", PROMPT, "--span", "blonde=0", "--iterations", "1", "--warmup", "0"]));
    let r = fx.json("bench.json");
    assert_eq!(r["iterations"], 1);
    assert_eq!(r["mode"], "reweighted");
    assert!(r["ratio"].as_f64().unwrap() > 0.0);
    ok(&mut fx.cmd(&["bench", "--prompt", PROMPT, "--iterations", "3", "--warmup", "1", "--plain-vs-plain"]));
    assert_eq!(fx.json("bench.json")["mode"], "plain_vs_plain");
    let out = run(&mut fx.cmd(&["bench", "--prompt", PROMPT, "--iterations", "0"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn commands_never_modify_their_inputs() {
    let fx = Fx::new();
    let before = fx.snapshot();
    let data = |f: &str| fx.data.join(f).to_string_lossy().into_owned();
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--spans", &data("spans.json")]));
    ok(&mut fx.cmd(&["retrieve", "--prompt", PROMPT, "--spans", &data("spans.json")]));
    ok(&mut fx.cmd(&[
        "train",
        "--epochs",
        "2",
        "--prompts",
        &data("prompts.json"),
        "--data",
        &data("train.jsonl"),
    ]));
    let out = run(&mut fx.cmd(&[
        "train",
        "--epochs",
        "1",
        "--prompts",
        &data("prompts.json"),
        "--data",
        &data("train.jsonl"),
        "--weights-out",
        &data("train.jsonl"),
    ]));
    assert!(!out.status.success(), "overwrote an input");
    assert_eq!(before, fx.snapshot());
}

fn http(addr: &str, method: &str, path: &str, body: &Value) -> (u16, Value) {
    let body = body.to_string();
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, payload) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    (status, serde_json::from_str(payload).unwrap())
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn service_and_cli_rank_identically() {
    let fx = Fx::new();
    let plain = digest(&ok(&mut fx.cmd(&["retrieve", "--prompt", PROMPT])));
    let silenced = digest(&ok(&mut fx.cmd(&["retrieve", "--prompt", PROMPT, "--span", "with blonde hair=0"])));
    assert_ne!(plain, silenced);

    let mut child = fx
        .cmd(&["--serve-addr", "127.0.0.1:0", "serve"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let _server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();

    let (status, created) = http(
        &addr,
        "POST",
        "/sessions",
        &serde_json::json!({"prompt": PROMPT, "store_id": "store"}),
    );
    assert_eq!(status, 201);
    assert_eq!(created["digest"], plain.as_str());
    let id = created["session_id"].as_str().unwrap();
    let tokens = created["tokens"].as_array().unwrap();
    let positions: Vec<u64> = tokens
        .iter()
        .filter(|t| ["with", "blonde", "hair"].contains(&t["text"].as_str().unwrap()))
        .map(|t| t["index"].as_u64().unwrap())
        .collect();
    assert_eq!(positions, [6, 7, 8]);
    let update: BTreeMap<String, f64> = positions.iter().map(|p| (p.to_string(), 0.0)).collect();
    let (status, snap) = http(
        &addr,
        "POST",
        &format!("/sessions/{id}/weights"),
        &serde_json::json!({ "weights": update }),
    );
    assert_eq!(status, 200);
    assert_eq!(snap["digest"], silenced.as_str());
}

#[test]
fn reweighting_disabled_matches_any_weights() {
    let fx = Fx::new();
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--reweight-start", "13"]));
    let plain = embedding(&fx.json("embedding.json"));
    ok(&mut fx.cmd(&["encode", "--prompt", PROMPT, "--reweight-start", "13", "--span", "blonde=0"]));
    assert_eq!(plain, embedding(&fx.json("embedding.json")));
}
