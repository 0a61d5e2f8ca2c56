//! The binary's scripting contract: subcommands, config precedence, and
//! the frozen exit codes 0/1/2/3/4.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_vow");

fn vow() -> Command {
    Command::new(BIN)
}

fn keygen(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let out = vow()
        .args(["keygen", "--seed", &seed.to_string(), "--out"])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    (dir.join("vow.sk"), dir.join("vow.pk"))
}

struct ServeGuard {
    child: Child,
}

impl Drop for ServeGuard {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_serve(key: &Path, fault: Option<&str>) -> (ServeGuard, String) {
    let mut cmd = vow();
    cmd.args(["serve", "--addr", "127.0.0.1:0", "--key"]).arg(key);
    if let Some(mode) = fault {
        cmd.args(["--fault", mode]);
    }
    cmd.stdout(Stdio::piped()).stderr(Stdio::null());
    let mut child = cmd.spawn().unwrap();
    let stdout = child.stdout.take().unwrap();
    let guard = ServeGuard { child };
    for line in BufReader::new(stdout).lines() {
        let line = line.unwrap();
        if let Some(rest) = line.strip_prefix("listening on ") {
            let addr = rest.split_whitespace().next().unwrap().to_string();
            return (guard, addr);
        }
    }
    panic!("server never announced itself");
}

#[test]
fn keygen_refuses_overwrite_and_seeds_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (sk_a, pk_a) = keygen(&a, 7);

    let second = vow()
        .args(["keygen", "--seed", "7", "--out"])
        .arg(&a)
        .output()
        .unwrap();
    assert_eq!(second.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&second.stderr).contains("refusing to overwrite"));

    let forced = vow()
        .args(["keygen", "--seed", "7", "--force", "--out"])
        .arg(&a)
        .output()
        .unwrap();
    assert!(forced.status.success());

    let (sk_b, pk_b) = keygen(&b, 7);
    assert_eq!(std::fs::read(&sk_a).unwrap(), std::fs::read(&sk_b).unwrap());
    assert_eq!(std::fs::read(&pk_a).unwrap(), std::fs::read(&pk_b).unwrap());

    let sk = vow::voprf::read_secret_key(&sk_a).unwrap();
    let pk = vow::voprf::read_public_key(&pk_a).unwrap();
    assert_eq!(sk.public_key().to_bytes(), pk.to_bytes());
}

#[test]
fn loopback_generate_serve_detect_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, pk_path) = keygen(dir.path(), 11);
    let corpus = dir.path().join("corpus");

    let generated = vow()
        .args(["generate", "--count", "2", "--length", "150", "--seed", "3"])
        .args(["--key"])
        .arg(&sk_path)
        .args(["--out"])
        .arg(&corpus)
        .output()
        .unwrap();
    assert!(generated.status.success());
    let stdout = String::from_utf8_lossy(&generated.stdout);
    assert!(stdout.contains("mean proposal draws per token"), "{stdout}");

    let (_guard, addr) = spawn_serve(&sk_path, None);
    let detected = vow()
        .args(["detect", "--json", "--alpha", "1e-5", "--addr", &addr, "--pub"])
        .arg(&pk_path)
        .arg(corpus.join("doc-00000.tokens"))
        .output()
        .unwrap();
    assert_eq!(detected.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&detected.stdout).unwrap();
    assert_eq!(doc["outcome"], "watermarked");
    assert!(doc["report"]["verified"].as_bool().unwrap());
    assert!(doc["report"]["p_value"].as_f64().unwrap() < 1e-5);
    assert_eq!(doc["config"]["params"]["gamma"], "1/2");
}

#[test]
fn unwatermarked_text_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, pk_path) = keygen(dir.path(), 23);
    let file = dir.path().join("null.tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens: Vec<u32> = (0..200).map(|_| rng.gen_range(0..10_000)).collect();
    vow::model::write_tokens(&file, &tokens).unwrap();

    let (_guard, addr) = spawn_serve(&sk_path, None);
    let detected = vow()
        .args(["detect", "--alpha", "1e-5", "--addr", &addr, "--pub"])
        .arg(&pk_path)
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(detected.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&detected.stdout);
    assert!(stdout.contains("outcome = \"not-watermarked\""), "{stdout}");
}

#[test]
fn tampering_server_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, pk_path) = keygen(dir.path(), 31);
    let file = dir.path().join("t.tokens");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tokens: Vec<u32> = (0..60).map(|_| rng.gen_range(0..10_000)).collect();
    vow::model::write_tokens(&file, &tokens).unwrap();

    let (_guard, addr) = spawn_serve(&sk_path, Some("flip-element"));
    let detected = vow()
        .args(["detect", "--alpha", "1e-5", "--addr", &addr, "--pub"])
        .arg(&pk_path)
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(detected.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&detected.stderr).contains("proof rejected"));
}

#[test]
fn dead_server_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let (_sk_path, pk_path) = keygen(dir.path(), 37);
    let file = dir.path().join("t.tokens");
    vow::model::write_tokens(&file, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();

    let unused = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = unused.local_addr().unwrap().to_string();
    drop(unused);

    let detected = vow()
        .args(["detect", "--alpha", "1e-5", "--addr", &addr, "--pub"])
        .arg(&pk_path)
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(detected.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&detected.stderr).contains("transport"));
}

#[test]
fn short_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, pk_path) = keygen(dir.path(), 41);
    let file = dir.path().join("short.tokens");
    vow::model::write_tokens(&file, &[1, 2, 3]).unwrap();

    let (_guard, addr) = spawn_serve(&sk_path, None);
    let detected = vow()
        .args(["detect", "--alpha", "1e-5", "--h", "4", "--addr", &addr, "--pub"])
        .arg(&pk_path)
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(detected.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&detected.stderr).contains("insufficient tokens"));
}

#[test]
fn attack_cost_prints_the_headline_numbers() {
    let defaults = vow().arg("attack-cost").output().unwrap();
    assert!(defaults.status.success());
    let text = String::from_utf8_lossy(&defaults.stdout).to_string();
    assert!(text.contains("24.62%"), "{text}");
    assert!(text.contains("1.93 TB"), "{text}");

    let explicit = vow()
        .args(["attack-cost", "--L", "300", "--alpha", "1e-5", "--gamma", "0.5"])
        .output()
        .unwrap();
    assert!(explicit.status.success());
    assert_eq!(text, String::from_utf8_lossy(&explicit.stdout));
}

#[test]
fn config_precedence_is_flags_env_file_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("vow.toml");
    std::fs::write(&config, "L = 100\ngamma = \"1/4\"\n").unwrap();

    let parse = |out: std::process::Output| -> serde_json::Value {
        assert!(out.status.success());
        serde_json::from_slice(&out.stdout).unwrap()
    };

    let from_file = parse(
        vow()
            .args(["attack-cost", "--json", "--config"])
            .arg(&config)
            .output()
            .unwrap(),
    );
    assert_eq!(from_file["config"]["params"]["length"], 100);
    assert_eq!(from_file["config"]["params"]["gamma"], "1/4");

    let env_wins = parse(
        vow()
            .args(["attack-cost", "--json", "--config"])
            .arg(&config)
            .env("VOW_L", "200")
            .output()
            .unwrap(),
    );
    assert_eq!(env_wins["config"]["params"]["length"], 200);

    let flag_wins = parse(
        vow()
            .args(["attack-cost", "--json", "--L", "300", "--config"])
            .arg(&config)
            .env("VOW_L", "200")
            .output()
            .unwrap(),
    );
    assert_eq!(flag_wins["config"]["params"]["length"], 300);

    let defaults = parse(vow().args(["attack-cost", "--json"]).output().unwrap());
    assert_eq!(defaults["config"]["params"]["length"], 300);
    assert_eq!(defaults["config"]["params"]["gamma"], "1/2");

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "gama = \"1/2\"\n").unwrap();
    let rejected = vow()
        .args(["attack-cost", "--config"])
        .arg(&typo)
        .output()
        .unwrap();
    assert_eq!(rejected.status.code(), Some(1));
}

#[test]
fn calibrate_emits_fpr_rows_and_ecdf() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, _) = keygen(dir.path(), 43);
    let out = vow()
        .args(["calibrate", "--samples", "400", "--length", "40", "--vocab", "500"])
        .args(["--alpha", "0.05,0.01", "--seed", "2", "--key"])
        .arg(&sk_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("alpha"), "{text}");
    assert!(text.contains("p-value ECDF"), "{text}");
    assert!(text.contains("0.05"), "{text}");
}

#[test]
fn forge_runs_end_to_end_and_reports_asr() {
    let dir = tempfile::tempdir().unwrap();
    let (sk_path, _) = keygen(dir.path(), 47);
    let cache = dir.path().join("green.cache");
    let out = vow()
        .args(["forge", "--corpus-docs", "8", "--doc-len", "64", "--vocab", "200"])
        .args(["--trials", "20", "--length", "30", "--seed", "4", "--save-cache"])
        .arg(&cache)
        .args(["--key"])
        .arg(&sk_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("cache:"), "{text}");
    assert!(text.contains("forgery:"), "{text}");
    assert!(cache.exists());

    let reused = vow()
        .args(["forge", "--json", "--trials", "20", "--length", "30", "--vocab", "200"])
        .args(["--seed", "4", "--load-cache"])
        .arg(&cache)
        .args(["--key"])
        .arg(&sk_path)
        .output()
        .unwrap();
    assert!(reused.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&reused.stdout).unwrap();
    assert!(doc["report"]["forgery"]["asr"].is_number());
    assert!(doc["report"]["cache_green_pairs"].as_u64().unwrap() > 0);
}

#[test]
fn unknown_flags_exit_one_not_two() {
    let out = vow().args(["detect", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let help = vow().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn detect_refuses_to_guess_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let (_sk_path, pk_path) = keygen(dir.path(), 3);
    let file = dir.path().join("t.tokens");
    vow::model::write_tokens(&file, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    let out = vow()
        .args(["detect", "--addr", "127.0.0.1:1", "--pub"])
        .arg(&pk_path)
        .arg(&file)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--alpha"), "{err}");
}
