use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdg")).args(args).output().unwrap()
}

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, json: &str) -> String {
        let p = self.path("config.json");
        fs::write(&p, json).unwrap();
        p.to_string_lossy().into_owned()
    }

    /// Runs with `--out <tmp>/<out>` and returns the output directory.
    fn run(&self, out: &str, args: &[&str]) -> (Output, PathBuf) {
        let dir = self.path(out);
        let mut full = vec!["--out", dir.to_str().unwrap()];
        full.extend_from_slice(args);
        (cdg(&full), dir)
    }

    fn ok(&self, out: &str, args: &[&str]) -> PathBuf {
        let (o, dir) = self.run(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        dir
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let env = Env::new();
    let missing = env.path("nope.json");
    let (o, dir) = env.run("out", &["--config", missing.to_str().unwrap(), "rank-tokens", "a cat"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
    assert!(!dir.exists());
}

#[test]
fn bad_config_and_usage_errors() {
    let env = Env::new();
    let cfg = env.config(r#"{"guidance": {"mode": "CDG", "guidance_scale": 2.0, "r_deg": 3.0}}"#);
    assert_eq!(env.run("a", &["--config", &cfg, "sample"]).0.status.code(), Some(2));
    let cfg = env.config(r#"{"not_a_field": 1}"#);
    assert_eq!(env.run("b", &["--config", &cfg, "sample"]).0.status.code(), Some(2));
    assert_eq!(cdg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(env.run("c", &["build-mask", "a cat", "--r-deg", "2.5"]).0.status.code(), Some(2));
    assert_eq!(cdg(&["--help"]).status.code(), Some(0));
}

#[test]
fn over_long_prompt_is_a_runtime_error() {
    let env = Env::new();
    let long = vec!["word"; 40].join(" ");
    let (o, _) = env.run("out", &["rank-tokens", &long]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let env = Env::new();
    env.ok("out", &["rank-tokens", "a cat"]);
    let (o, _) = env.run("out", &["rank-tokens", "a dog"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let dir = env.ok("out", &["--force", "rank-tokens", "a dog"]);
    assert_eq!(json(&dir.join("rankings.json"))["prompt"], "a dog");
}

#[test]
fn rank_tokens_outputs() {
    let env = Env::new();
    let dir = env.ok("empty", &["rank-tokens", ""]);
    let r = json(&dir.join("rankings.json"));
    let tokens = r["tokens"].as_array().unwrap();
    assert_eq!(tokens.len(), 16);
    assert!(tokens.iter().all(|t| t["type"] == "CtxAgg"));

    let dir = env.ok("chef", &["rank-tokens", "a man is cooking minecraft style"]);
    let r = json(&dir.join("rankings.json"));
    let tokens = r["tokens"].as_array().unwrap();
    for t in tokens {
        let rank = t["rank"].as_u64().unwrap();
        assert_eq!(t["type"] == "Content", rank <= 6, "{t}");
    }
    let total: f64 = tokens.iter().map(|t| t["score"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert_eq!(r["heads"].as_array().unwrap().len(), 4);

    let rows = csv_rows(&dir.join("rankings.csv"));
    assert_eq!(rows.len(), 16);
    assert_eq!(&rows[4][1], "cooking");
    assert_eq!(&rows[4][2], "Content");
}

#[test]
fn build_mask_outputs() {
    let env = Env::new();
    let prompt = "a man is cooking minecraft style";
    let bits = |dir: &Path| -> Vec<(u64, String)> {
        json(&dir.join("mask.json"))["tokens"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| (t["bit"].as_u64().unwrap(), t["type"].as_str().unwrap().to_string()))
            .collect()
    };
    let boundary = bits(&env.ok("r1", &["build-mask", prompt, "--r-deg", "1.0"]));
    assert!(boundary.iter().all(|(b, kind)| (*b == 0) == (kind == "Content")));
    let none = bits(&env.ok("r0", &["build-mask", prompt, "--r-deg", "0"]));
    assert!(none.iter().all(|(b, _)| *b == 1));

    // 8-slot sequence: <bos> four words <eos> <pad> <pad>
    let cfg = env.config(r#"{"encoder": {"seq_len": 8}}"#);
    let short = "a red fox jumps";
    let dir = env.ok("r125", &["--config", &cfg, "build-mask", short, "--r-deg", "1.25"]);
    let m = json(&dir.join("mask.json"));
    assert_eq!(m["k_content"], 4);
    assert_eq!(m["k_ctxagg"], 1);
    let replaced: Vec<u64> = m["replaced_indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    // the one context token replaced is the top-ranked one
    let ranks = json(&env.ok("rank8", &["--config", &cfg, "rank-tokens", short]).join("rankings.json"));
    let top_ctx = ranks["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["type"] == "CtxAgg")
        .min_by_key(|t| t["rank"].as_u64().unwrap())
        .unwrap()["position"]
        .as_u64()
        .unwrap();
    let mut expected = vec![1, 2, 3, 4, top_ctx];
    expected.sort();
    assert_eq!(replaced, expected);
}

fn final_latents(dir: &Path) -> Vec<Value> {
    json(&dir.join("sample_metadata.json"))["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["final_latent"].clone())
        .collect()
}

#[test]
fn sample_outputs_and_reductions() {
    let env = Env::new();
    let cfg = env.config(r#"{"guidance": {"mode": "CDG", "guidance_scale": 5.0, "r_deg": 0.6}}"#);
    let start = std::time::Instant::now();
    let dir = env.ok("cdg", &["--config", &cfg, "sample"]);
    assert!(start.elapsed().as_secs_f64() < 8.0);
    let meta = json(&dir.join("sample_metadata.json"));
    let runs = meta["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 8);
    for r in runs {
        assert_eq!(r["wpr_call_count"], 1);
        assert!(r.get("wall_time_ms").is_none());
    }
    let rows = csv_rows(&dir.join("trajectory_000.csv"));
    assert_eq!(rows.len(), 29);
    assert_eq!(rows[0].len(), 10);
    assert_eq!(&rows[28][1], "0");

    let cfg_run = env.config(r#"{"guidance": {"mode": "CFG", "guidance_scale": 5.0}}"#);
    let a = final_latents(&env.ok("cfg", &["--config", &cfg_run, "sample"]));
    let cdg2 = env.config(r#"{"guidance": {"mode": "CDG", "guidance_scale": 5.0, "r_deg": 2.0}}"#);
    let b = final_latents(&env.ok("cdg2", &["--config", &cdg2, "sample"]));
    assert_eq!(a, b);

    let w1 = env.config(r#"{"guidance": {"mode": "CDG", "guidance_scale": 1.0, "r_deg": 0.6}}"#);
    let c = final_latents(&env.ok("w1", &["--config", &w1, "sample"]));
    let plain = env.config(r#"{"guidance": {"mode": "None", "guidance_scale": 1.0}}"#);
    let d = final_latents(&env.ok("none", &["--config", &plain, "sample"]));
    assert_eq!(c, d);

    let dir = env.ok("timed", &["sample", "--prompt", "a cat", "--record-timing"]);
    let meta = json(&dir.join("sample_metadata.json"));
    assert!(meta["runs"][0]["wall_time_ms"].as_f64().unwrap() < 1000.0);
}

#[test]
fn sweep_outputs() {
    let env = Env::new();
    let dir = env.ok("full", &["sweep"]);
    let rows = csv_rows(&dir.join("sweep.csv"));
    assert_eq!(rows.len(), 168);
    for row in rows.iter().filter(|r| &r[0] == "0") {
        assert_eq!(&row[6], "0");
    }

    let dir = env.ok("small", &["sweep", "--grid", "0,1,2"]);
    let rows = csv_rows(&dir.join("sweep.csv"));
    assert_eq!(rows.len(), 24);
    for p in 0..8 {
        let counts: Vec<usize> = rows.iter().filter(|r| r[1].parse::<usize>().unwrap() == p).map(|r| r[5].parse().unwrap()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        let wpr: Vec<&str> = rows.iter().filter(|r| r[1].parse::<usize>().unwrap() == p).map(|r| &r[7]).collect();
        assert_eq!(wpr, ["1", "0", "1"]);
    }
}

#[test]
fn diagnose_outputs() {
    let env = Env::new();
    let dir = env.ok("geo", &["diagnose"]);
    let rows = csv_rows(&dir.join("geometry.csv"));
    assert_eq!(rows.len(), 56);
    for r in &rows {
        for col in [2, 3] {
            let v: f64 = r[col].parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let report = json(&dir.join("geometry.json"));
    assert_eq!(report["records"].as_array().unwrap().len(), 28);

    let cfg = env.config(r#"{"guidance": {"mode": "CDG", "guidance_scale": 4.5, "r_deg": 2.0}}"#);
    let dir = env.ok("geo2", &["--config", &cfg, "diagnose"]);
    let rows = csv_rows(&dir.join("geometry.csv"));
    for pair in rows.chunks(2) {
        assert_eq!((&pair[0][1], &pair[1][1]), ("CFG", "CDG"));
        assert_eq!(pair[0].iter().skip(2).collect::<Vec<_>>(), pair[1].iter().skip(2).collect::<Vec<_>>());
    }
}

#[test]
fn prompts_file_relative_to_config() {
    let env = Env::new();
    fs::write(env.path("prompts.txt"), "a cat\n\n  a dog on a log  \nthe sea\n").unwrap();
    let cfg = env.config(r#"{"prompts_file": "prompts.txt", "guidance": {"mode": "CFG", "guidance_scale": 3.0}}"#);
    let dir = env.ok("out", &["--config", &cfg, "sample"]);
    let meta = json(&dir.join("sample_metadata.json"));
    let prompts: Vec<&str> = meta["runs"].as_array().unwrap().iter().map(|r| r["prompt"].as_str().unwrap()).collect();
    assert_eq!(prompts, ["a cat", "a dog on a log", "the sea"]);

    let cfg = env.config(r#"{"prompts_file": "missing.txt"}"#);
    assert_eq!(env.run("x", &["--config", &cfg, "sample"]).0.status.code(), Some(2));
}

#[test]
fn seed_flag_changes_outputs() {
    let env = Env::new();
    let a = final_latents(&env.ok("s1", &["--seed", "1", "sample", "--prompt", "a cat"]));
    let b = final_latents(&env.ok("s2", &["--seed", "2", "sample", "--prompt", "a cat"]));
    assert_ne!(a, b);
}
