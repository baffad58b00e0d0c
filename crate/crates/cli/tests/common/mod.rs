//! Shared helpers for driving the `chameleon` binary.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use chameleon_core::editing::Bundle;
use chameleon_core::eval::{gen_synthetic_world, WorldConfig, WorldData};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_chameleon"))
}

/// Runs the binary with `CHAMELEON_*` variables cleared.
pub fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

pub fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    for (k, _) in std::env::vars() {
        if k.starts_with("CHAMELEON_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).envs(env.iter().copied()).output().expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "chameleon {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Five-item movie history for user `u1` plus `n` queries.
pub fn lamp2_inputs(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let history = dir.join("history.jsonl");
    let mut h = String::from("{\"user_id\":\"u1\"}\n");
    for (i, (text, tag)) in [
        ("A detective hunts a killer in a rainy city", "crime"),
        ("Two friends road-trip across the desert", "comedy"),
        ("A ship of explorers finds a hostile planet", "sci-fi"),
        ("A heist crew plans one last job", "crime"),
        ("A robot learns to paint", "sci-fi"),
    ]
    .iter()
    .enumerate()
    {
        h.push_str(&format!("{{\"id\":\"h{i}\",\"text\":\"{text}\",\"label\":\"{tag}\"}}\n"));
    }
    write(&history, &h);
    let queries = dir.join("queries.jsonl");
    let q: String = (0..n)
        .map(|i| format!("{{\"id\":\"q{i}\",\"text\":\"Query movie number {i} about a lighthouse keeper\"}}\n"))
        .collect();
    write(&queries, &q);
    (history, queries)
}

/// Writes one user's synthetic bundle and corpus under `dir`.
pub fn synthetic_user(dir: &Path, cfg: &WorldConfig) -> (WorldData, PathBuf, PathBuf) {
    let data = gen_synthetic_world(cfg).unwrap();
    let acts = dir.join("acts");
    data.users[0].bundle.write(&acts).unwrap();
    let prefs = dir.join("prefs.jsonl");
    write(&prefs, &data.users[0].corpus().to_jsonl());
    (data, acts, prefs)
}

pub fn queries_only(bundle: &Bundle) -> Bundle {
    let mut out = Bundle::default();
    for b in bundle.queries() {
        out.insert(chameleon_core::editing::ActRole::Query, b);
    }
    out
}

/// Config file with short CCS training for quick tests.
pub fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.toml");
    write(&path, "[ccs]\nrestarts = 2\nsteps = 200\n");
    path
}

/// A running `serve` process, killed on drop.
pub struct Server {
    child: Child,
    pub url: String,
}

impl Server {
    pub fn start(profiles: &Path) -> Self {
        let mut child = Command::new(bin())
            .args(["serve", "--profiles", p(profiles), "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("serve starts");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").expect("address line").to_owned();
        Self { child, url }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
