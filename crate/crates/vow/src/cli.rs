//! Operator surface: one binary over the library, speaking flags, key
//! files and exit codes.
//!
//! The scripting contract is frozen: 0 means watermarked or plain
//! success, 1 usage or configuration error, 2 verified but not
//! watermarked, 3 proof rejection, 4 transport failure. Settings resolve
//! as flags over `VOW_*` environment variables over the `--config` TOML
//! file over defaults; every run echoes the effective configuration it
//! acted on, and `--json` switches the whole output to one
//! machine-readable object.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_cost, build_cache, forge, AttackCostParams, ForgeConfig, GreenCache};
use crate::calibrate::{calibrate, CalibrationConfig};
use crate::detector::{binom_sf_exact, dedup_ngrams, DetectorError, Outcome};
use crate::model::{ingest_tokens, write_tokens, GenStats, Strategy, SyntheticModel, Vocabulary};
use crate::protocol::{
    client_detect_chunked, serve, ClientError, FaultMode, ServerConfig, MAX_BATCH,
};
use crate::voprf::{read_public_key, read_secret_key, write_public_key, write_secret_key, KeyPair};
use crate::watermark::{is_green_local, GreenRatio, WatermarkParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_WATERMARKED: i32 = 2;
pub const EXIT_UNVERIFIED: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;

const DEFAULT_ADDR: &str = "127.0.0.1:4177";
const DEFAULT_SEED: u64 = 1;

#[derive(Debug)]
enum CliError {
    /// Bad flags, bad config, unreadable files: exit 1.
    Config(String),
    /// The server's batch proof failed verification: exit 3.
    ProofRejected { request: String, response: String },
    /// Network or wire-format failure: exit 4.
    Transport(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::ProofRejected { request, response } => write!(
                f,
                "proof rejected: the response does not verify against the advertised key \
                 (request sha256 {request}, response sha256 {response})"
            ),
            CliError::Transport(msg) => write!(f, "transport: {msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::ProofRejected { .. } => EXIT_UNVERIFIED,
            CliError::Transport(_) => EXIT_TRANSPORT,
        }
    }
}

/// Entry point for the `vow` binary. Returns the process exit code
/// instead of calling `exit` so tests can drive it in-process.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vow",
    version,
    about = "VOPRF-keyed green/red watermarking: keys, generation, verifiable detection, analysis"
)]
struct Cli {
    /// TOML file supplying any setting not given as a flag or VOW_* variable.
    #[arg(long, global = true, env = "VOW_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Emit one JSON object {config, report} instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key pair and write vow.sk / vow.pk under --out.
    Keygen(KeygenArgs),
    /// Sample watermarked documents from the synthetic model.
    Generate(GenerateArgs),
    /// Run the blind evaluation server.
    Serve(ServeArgs),
    /// Score a token file against a server and print the verdict.
    Detect(DetectArgs),
    /// Measure the null: FPR table, p-value ECDF, KS and chi-squared checks.
    Calibrate(CalibrateArgs),
    /// Price the cache-based forgery attack in closed form.
    AttackCost(AttackCostArgs),
    /// Build a green cache from watermarked text and run the forgery.
    Forge(ForgeArgs),
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Keygen(args) => cmd_keygen(args, &file, cli.json),
        Command::Generate(args) => cmd_generate(args, &file, cli.json),
        Command::Serve(args) => cmd_serve(args, &file, cli.json),
        Command::Detect(args) => cmd_detect(args, &file, cli.json),
        Command::Calibrate(args) => cmd_calibrate(args, &file, cli.json),
        Command::AttackCost(args) => cmd_attack_cost(args, &file, cli.json),
        Command::Forge(args) => cmd_forge(args, &file, cli.json),
    }
}

/// Optional settings from `--config`. Keys are named after the flags
/// they back; anything unknown is rejected so typos fail loudly.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    key: Option<PathBuf>,
    #[serde(rename = "pub")]
    public: Option<PathBuf>,
    out: Option<PathBuf>,
    addr: Option<String>,
    h: Option<u16>,
    gamma: Option<String>,
    delta: Option<f64>,
    int_width: Option<u32>,
    k: Option<usize>,
    top_p: Option<f64>,
    temp: Option<f64>,
    alpha: Option<f64>,
    alphas: Option<Vec<f64>>,
    seed: Option<u64>,
    vocab: Option<u32>,
    zipf: Option<f64>,
    noise: Option<f64>,
    count: Option<usize>,
    length: Option<usize>,
    samples: Option<usize>,
    chunk: Option<usize>,
    max_batch: Option<usize>,
    fault: Option<String>,
    #[serde(rename = "L")]
    big_l: Option<u64>,
    zipf_exponent: Option<f64>,
    total_ngrams: Option<f64>,
    bytes_per_entry: Option<f64>,
    delta_prime: Option<f64>,
    trials: Option<usize>,
    corpus_docs: Option<usize>,
    doc_len: Option<usize>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e)))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e)))
    }
}

/// Watermark parameters shared by every command that colors tokens.
#[derive(Args, Clone)]
struct ParamArgs {
    /// Context length in tokens.
    #[arg(long, env = "VOW_H")]
    h: Option<u16>,
    /// Green fraction as NUM/DEN; a terminating decimal such as 0.25
    /// also parses, exactly.
    #[arg(long, env = "VOW_GAMMA", value_parser = parse_gamma)]
    gamma: Option<GreenRatio>,
    /// Logit boost on green tokens.
    #[arg(long, env = "VOW_DELTA")]
    delta: Option<f64>,
    /// Leading PRF bits the color comparison reads.
    #[arg(long, env = "VOW_INT_WIDTH")]
    int_width: Option<u32>,
}

impl ParamArgs {
    fn resolve(&self, file: &FileConfig) -> Result<WatermarkParams, CliError> {
        let defaults = WatermarkParams::default();
        let gamma = match (self.gamma, file.gamma.as_deref()) {
            (Some(g), _) => g,
            (None, Some(s)) => parse_gamma(s).map_err(CliError::Config)?,
            (None, None) => defaults.gamma,
        };
        WatermarkParams::new(
            self.h.or(file.h).unwrap_or(defaults.h),
            gamma,
            self.delta.or(file.delta).unwrap_or(defaults.delta),
            self.int_width.or(file.int_width).unwrap_or(defaults.int_width),
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Synthetic model knobs.
#[derive(Args, Clone)]
struct ModelArgs {
    /// Vocabulary size.
    #[arg(long, env = "VOW_VOCAB")]
    vocab: Option<u32>,
    /// Zipf exponent of the logit backbone.
    #[arg(long, env = "VOW_ZIPF")]
    zipf: Option<f64>,
    /// Scale of the context-keyed logit noise.
    #[arg(long, env = "VOW_NOISE")]
    noise: Option<f64>,
}

impl ModelArgs {
    fn resolve(
        &self,
        file: &FileConfig,
        default_vocab: u32,
    ) -> Result<(Vocabulary, f64, f64), CliError> {
        let vocab = Vocabulary::new(self.vocab.or(file.vocab).unwrap_or(default_vocab))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let zipf = self.zipf.or(file.zipf).unwrap_or(1.1);
        let noise = self.noise.or(file.noise).unwrap_or(1.0);
        Ok((vocab, zipf, noise))
    }
}

fn parse_gamma(s: &str) -> Result<GreenRatio, String> {
    if s.contains('/') {
        return GreenRatio::parse(s).map_err(|e| e.to_string());
    }
    let (int, frac) = s
        .split_once('.')
        .ok_or_else(|| format!("gamma wants NUM/DEN or a decimal like 0.25, got {s}"))?;
    let digits = |part: &str| !part.is_empty() && part.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !digits(frac) || int.len() + frac.len() > 18 {
        return Err(format!("gamma does not parse as a decimal: {s}"));
    }
    let num: u64 = format!("{int}{frac}")
        .parse()
        .map_err(|_| format!("gamma does not parse as a decimal: {s}"))?;
    let den = 10u64.pow(frac.len() as u32);
    let g = gcd(num, den);
    GreenRatio::new(num / g, den / g).map_err(|e| e.to_string())
}

fn gcd(a: u64, b: u64) -> u64 {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

fn parse_fault(s: &str) -> Result<FaultMode, String> {
    match s {
        "none" => Ok(FaultMode::None),
        "flip-element" => Ok(FaultMode::FlipElement),
        "wrong-key" => Ok(FaultMode::WrongKey),
        "drop-proof" => Ok(FaultMode::DropProof),
        _ => Err(format!(
            "unknown fault mode {s}; use none, flip-element, wrong-key or drop-proof"
        )),
    }
}

fn load_secret(path: &Path) -> Result<crate::voprf::SecretKey, CliError> {
    read_secret_key(path).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))
}

/// Prints the finished run: one JSON object, or a TOML `[config]` echo
/// followed by the human report.
fn emit<C: Serialize, R: Serialize>(json: bool, config: &C, report: &R, text: &str) {
    if json {
        let doc = serde_json::json!({ "config": config, "report": report });
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).expect("reports serialize")
        );
    } else {
        #[derive(Serialize)]
        struct Echo<'a, C: Serialize> {
            config: &'a C,
        }
        print!(
            "{}",
            toml::to_string(&Echo { config }).expect("configs serialize")
        );
        println!();
        print!("{text}");
    }
    let _ = std::io::stdout().flush();
}

#[derive(Args)]
struct KeygenArgs {
    /// Directory to write vow.sk and vow.pk into; created if missing.
    #[arg(long, env = "VOW_OUT")]
    out: Option<PathBuf>,
    /// Derive the key deterministically; omit for OS randomness.
    #[arg(long, env = "VOW_SEED")]
    seed: Option<u64>,
    /// Overwrite existing key files.
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct KeygenEcho {
    command: &'static str,
    out: String,
    seed: Option<u64>,
    force: bool,
}

#[derive(Serialize)]
struct KeygenReport {
    secret_key: String,
    public_key: String,
    public_hex: String,
}

fn cmd_keygen(args: KeygenArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let out = args
        .out
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let seed = args.seed.or(file.seed);
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("create {}: {}", out.display(), e)))?;
    let sk_path = out.join("vow.sk");
    let pk_path = out.join("vow.pk");
    if !args.force {
        for path in [&sk_path, &pk_path] {
            if path.exists() {
                return Err(CliError::Config(format!(
                    "refusing to overwrite {}; pass --force",
                    path.display()
                )));
            }
        }
    }
    let keypair = match seed {
        Some(s) => KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(s)),
        None => KeyPair::generate(&mut OsRng),
    };
    write_secret_key(&sk_path, &keypair.secret)
        .map_err(|e| CliError::Config(format!("{}: {}", sk_path.display(), e)))?;
    write_public_key(&pk_path, &keypair.public)
        .map_err(|e| CliError::Config(format!("{}: {}", pk_path.display(), e)))?;
    let report = KeygenReport {
        secret_key: sk_path.display().to_string(),
        public_key: pk_path.display().to_string(),
        public_hex: hex::encode(keypair.public.to_bytes()),
    };
    let echo = KeygenEcho {
        command: "keygen",
        out: out.display().to_string(),
        seed,
        force: args.force,
    };
    let text = format!(
        "wrote {}\nwrote {}\npublic key {}\n",
        report.secret_key, report.public_key, report.public_hex
    );
    emit(json, &echo, &report, &text);
    Ok(EXIT_OK)
}

#[derive(Args)]
struct GenerateArgs {
    /// Secret key file.
    #[arg(long, env = "VOW_KEY")]
    key: Option<PathBuf>,
    /// Directory for the token files; created if missing.
    #[arg(long, env = "VOW_OUT")]
    out: Option<PathBuf>,
    /// Documents to sample.
    #[arg(long, env = "VOW_COUNT")]
    count: Option<usize>,
    /// Tokens per document.
    #[arg(long, env = "VOW_LENGTH")]
    length: Option<usize>,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Top-k truncation; omit for multinomial sampling.
    #[arg(long, env = "VOW_K")]
    k: Option<usize>,
    /// Nucleus mass bound on top of --k.
    #[arg(long = "top-p", env = "VOW_TOP_P")]
    top_p: Option<f64>,
    /// Softmax temperature.
    #[arg(long, env = "VOW_TEMP")]
    temp: Option<f64>,
    #[arg(long, env = "VOW_SEED")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenerateEcho {
    command: &'static str,
    key: String,
    out: String,
    count: usize,
    length: usize,
    vocab: u32,
    zipf: f64,
    noise: f64,
    strategy: String,
    seed: u64,
    params: WatermarkParams,
}

#[derive(Serialize)]
struct GenerateReport {
    documents: usize,
    tokens_per_document: usize,
    mean_trials: f64,
    mean_calls: f64,
    green_fraction: Option<f64>,
}

fn cmd_generate(args: GenerateArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let key = args
        .key
        .or_else(|| file.key.clone())
        .unwrap_or_else(|| PathBuf::from("vow.sk"));
    let sk = load_secret(&key)?;
    let params = args.params.resolve(file)?;
    let (vocab, zipf, noise) = args.model.resolve(file, 10_000)?;
    let count = args.count.or(file.count).unwrap_or(16);
    let length = args.length.or(file.length).unwrap_or(255);
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let out = args
        .out
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| PathBuf::from("corpus"));
    if count == 0 {
        return Err(CliError::Config("--count must be at least 1".into()));
    }
    let strategy = match args.k.or(file.k) {
        Some(k) => Strategy::TopK {
            k,
            top_p: args.top_p.or(file.top_p),
            temperature: args.temp.or(file.temp),
        },
        None => {
            if args.top_p.or(file.top_p).is_some() {
                return Err(CliError::Config("--top-p needs --k".into()));
            }
            Strategy::Multinomial {
                temperature: args.temp.or(file.temp),
            }
        }
    };
    let model = SyntheticModel::new(seed, vocab, zipf, noise)
        .map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Config(format!("create {}: {}", out.display(), e)))?;

    let docs: Result<Vec<(Vec<u32>, GenStats)>, _> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
            );
            model.generate(&sk, &params, strategy, length, &[], &mut rng)
        })
        .collect();
    let docs = docs.map_err(|e| CliError::Config(e.to_string()))?;

    for (i, (tokens, _)) in docs.iter().enumerate() {
        let path = out.join(format!("doc-{i:05}.tokens"));
        write_tokens(&path, tokens).map_err(|e| CliError::Config(e.to_string()))?;
    }

    let n = docs.len() as f64;
    let mean_trials = docs.iter().map(|(_, s)| s.mean_trials).sum::<f64>() / n;
    let mean_calls = docs.iter().map(|(_, s)| s.mean_calls).sum::<f64>() / n;
    let fractions: Vec<f64> = docs.iter().filter_map(|(_, s)| s.green_fraction).collect();
    let green_fraction = if fractions.is_empty() {
        None
    } else {
        Some(fractions.iter().sum::<f64>() / fractions.len() as f64)
    };

    let echo = GenerateEcho {
        command: "generate",
        key: key.display().to_string(),
        out: out.display().to_string(),
        count,
        length,
        vocab: vocab.size(),
        zipf,
        noise,
        strategy: format!("{strategy:?}"),
        seed,
        params,
    };
    let report = GenerateReport {
        documents: count,
        tokens_per_document: length,
        mean_trials,
        mean_calls,
        green_fraction,
    };
    let text = format!(
        "wrote {count} documents x {length} tokens under {}\n\
         mean proposal draws per token: {mean_trials:.4}\n\
         mean color calls per token:    {mean_calls:.4}\n\
         green fraction:                {}\n",
        out.display(),
        match green_fraction {
            Some(f) => format!("{f:.4}"),
            None => "n/a (documents shorter than h + 1)".into(),
        },
    );
    emit(json, &echo, &report, &text);
    Ok(EXIT_OK)
}

#[derive(Args)]
struct ServeArgs {
    /// Secret key file.
    #[arg(long, env = "VOW_KEY")]
    key: Option<PathBuf>,
    /// Address to bind, host:port; port 0 picks a free one.
    #[arg(long, env = "VOW_ADDR")]
    addr: Option<String>,
    /// Deliberate misbehavior for falsification tests.
    #[arg(long, env = "VOW_FAULT", value_parser = parse_fault)]
    fault: Option<FaultMode>,
    /// Largest batch accepted in one request.
    #[arg(long, env = "VOW_MAX_BATCH")]
    max_batch: Option<usize>,
    /// Log batch sizes and service times to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Serialize)]
struct ServeEcho {
    command: &'static str,
    key: String,
    addr: String,
    fault: String,
    max_batch: usize,
    verbose: bool,
}

#[derive(Serialize)]
struct ServeReport {
    listening: String,
    public_hex: String,
}

fn cmd_serve(args: ServeArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let key = args
        .key
        .or_else(|| file.key.clone())
        .unwrap_or_else(|| PathBuf::from("vow.sk"));
    let sk = load_secret(&key)?;
    let addr = args
        .addr
        .or_else(|| file.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.into());
    let fault = match (args.fault, file.fault.as_deref()) {
        (Some(mode), _) => mode,
        (None, Some(s)) => parse_fault(s).map_err(CliError::Config)?,
        (None, None) => FaultMode::None,
    };
    let config = ServerConfig {
        max_batch: args.max_batch.or(file.max_batch).unwrap_or(MAX_BATCH),
        fault,
        verbose: args.verbose,
    };
    let echo = ServeEcho {
        command: "serve",
        key: key.display().to_string(),
        addr: addr.clone(),
        fault: format!("{fault:?}"),
        max_batch: config.max_batch,
        verbose: config.verbose,
    };
    let keypair = KeyPair {
        public: sk.public_key(),
        secret: sk,
    };
    let public_hex = hex::encode(keypair.public.to_bytes());
    let handle = serve(keypair, &addr, config)
        .map_err(|e| CliError::Transport(format!("bind {addr}: {e}")))?;
    let report = ServeReport {
        listening: handle.addr().to_string(),
        public_hex: public_hex.clone(),
    };
    let text = format!("listening on {} pk {}\n", report.listening, public_hex);
    emit(json, &echo, &report, &text);
    handle.wait();
    Ok(EXIT_OK)
}

#[derive(Args)]
struct DetectArgs {
    /// Token file to score, line-delimited JSON integer arrays.
    file: PathBuf,
    /// Server public key file.
    #[arg(long = "pub", env = "VOW_PUB")]
    public: Option<PathBuf>,
    /// Server address.
    #[arg(long, env = "VOW_ADDR")]
    addr: Option<String>,
    /// Significance level the verdict is judged at.
    #[arg(long, env = "VOW_ALPHA")]
    alpha: Option<f64>,
    #[command(flatten)]
    params: ParamArgs,
    /// Vocabulary bound used to validate the token file.
    #[arg(long, env = "VOW_VOCAB")]
    vocab: Option<u32>,
    /// Elements per request; larger batches chunk transparently.
    #[arg(long, env = "VOW_CHUNK")]
    chunk: Option<usize>,
    /// Deterministic blinding; omit for OS randomness.
    #[arg(long, env = "VOW_SEED")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct DetectEcho {
    command: &'static str,
    public: String,
    addr: String,
    file: String,
    alpha: f64,
    vocab: u32,
    chunk: usize,
    seed: Option<u64>,
    params: WatermarkParams,
}

fn cmd_detect(args: DetectArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let pk_path = args
        .public
        .or_else(|| file.public.clone())
        .unwrap_or_else(|| PathBuf::from("vow.pk"));
    let pk = read_public_key(&pk_path)
        .map_err(|e| CliError::Config(format!("{}: {}", pk_path.display(), e)))?;
    let addr = args
        .addr
        .or_else(|| file.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.into());
    // No production default is endorsed for the verdict threshold; the
    // operator states it (1e-5 is the usual reporting point).
    let alpha = args.alpha.or(file.alpha).ok_or_else(|| {
        CliError::Config("detect needs an explicit --alpha (or alpha in the config file)".into())
    })?;
    let params = args.params.resolve(file)?;
    let vocab_size = args.vocab.or(file.vocab).unwrap_or(10_000);
    let vocab = Vocabulary::new(vocab_size).map_err(|e| CliError::Config(e.to_string()))?;
    let chunk = args.chunk.or(file.chunk).unwrap_or(MAX_BATCH);
    if chunk == 0 {
        return Err(CliError::Config("--chunk must be at least 1".into()));
    }
    let seed = args.seed.or(file.seed);
    let tokens =
        ingest_tokens(&args.file, &vocab).map_err(|e| CliError::Config(e.to_string()))?;

    let report = match seed {
        Some(s) => client_detect_chunked(
            &addr,
            &pk,
            &tokens,
            &params,
            alpha,
            chunk,
            &mut ChaCha8Rng::seed_from_u64(s),
        ),
        None => client_detect_chunked(&addr, &pk, &tokens, &params, alpha, chunk, &mut OsRng),
    }
    .map_err(map_client)?;

    let echo = DetectEcho {
        command: "detect",
        public: pk_path.display().to_string(),
        addr,
        file: args.file.display().to_string(),
        alpha,
        vocab: vocab_size,
        chunk,
        seed,
        params,
    };
    let (word, code) = match report.outcome() {
        Outcome::Watermarked => ("watermarked", EXIT_OK),
        Outcome::NotWatermarked => ("not-watermarked", EXIT_NOT_WATERMARKED),
        Outcome::Unverified => ("unverified", EXIT_UNVERIFIED),
    };
    if json {
        let doc = serde_json::json!({ "config": echo, "report": report, "outcome": word });
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).expect("reports serialize")
        );
    } else {
        #[derive(Serialize)]
        struct DetectDoc<'a> {
            outcome: &'a str,
            config: &'a DetectEcho,
            report: &'a crate::detector::DetectionReport,
        }
        print!(
            "{}",
            toml::to_string(&DetectDoc {
                outcome: word,
                config: &echo,
                report: &report,
            })
            .expect("reports serialize")
        );
    }
    let _ = std::io::stdout().flush();
    Ok(code)
}

fn map_client(err: ClientError) -> CliError {
    match err {
        ClientError::ProofRejected { transcript } => CliError::ProofRejected {
            request: hex::encode(transcript.request_hash),
            response: hex::encode(transcript.response_hash),
        },
        ClientError::BadAlpha(a) => CliError::Config(format!("alpha out of range: {a}")),
        ClientError::Detector(e @ DetectorError::InsufficientTokens { .. }) => {
            CliError::Config(format!("insufficient tokens: {e}"))
        }
        ClientError::Detector(e) => CliError::Config(e.to_string()),
        other => CliError::Transport(other.to_string()),
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Secret key file.
    #[arg(long, env = "VOW_KEY")]
    key: Option<PathBuf>,
    /// Unwatermarked texts to score.
    #[arg(long, env = "VOW_SAMPLES")]
    samples: Option<usize>,
    /// Tokens per text.
    #[arg(long, env = "VOW_LENGTH")]
    length: Option<usize>,
    /// Vocabulary the null texts draw from.
    #[arg(long, env = "VOW_VOCAB")]
    vocab: Option<u32>,
    /// FPR levels; repeat or comma-separate.
    #[arg(long = "alpha", env = "VOW_ALPHA", value_delimiter = ',', num_args = 1..)]
    alphas: Vec<f64>,
    /// Context length in tokens.
    #[arg(long, env = "VOW_H")]
    h: Option<u16>,
    /// Green fraction as NUM/DEN or a terminating decimal.
    #[arg(long, env = "VOW_GAMMA", value_parser = parse_gamma)]
    gamma: Option<GreenRatio>,
    /// Leading PRF bits the color comparison reads.
    #[arg(long, env = "VOW_INT_WIDTH")]
    int_width: Option<u32>,
    #[arg(long, env = "VOW_SEED")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct CalibrateEcho {
    command: &'static str,
    key: String,
    samples: usize,
    length: usize,
    vocab: u32,
    alphas: Vec<f64>,
    seed: u64,
    params: WatermarkParams,
}

fn cmd_calibrate(args: CalibrateArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let key = args
        .key
        .or_else(|| file.key.clone())
        .unwrap_or_else(|| PathBuf::from("vow.sk"));
    let sk = load_secret(&key)?;
    let defaults = WatermarkParams::default();
    let gamma = match (args.gamma, file.gamma.as_deref()) {
        (Some(g), _) => g,
        (None, Some(s)) => parse_gamma(s).map_err(CliError::Config)?,
        (None, None) => defaults.gamma,
    };
    // Null texts are unwatermarked, so delta is not a knob here.
    let params = WatermarkParams::new(
        args.h.or(file.h).unwrap_or(defaults.h),
        gamma,
        0.0,
        args.int_width.or(file.int_width).unwrap_or(defaults.int_width),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let base = CalibrationConfig::default();
    let config = CalibrationConfig {
        samples: args.samples.or(file.samples).unwrap_or(base.samples),
        text_len: args.length.or(file.length).unwrap_or(base.text_len),
        vocab_size: args.vocab.or(file.vocab).unwrap_or(base.vocab_size),
        alphas: if args.alphas.is_empty() {
            file.alphas.clone().unwrap_or(base.alphas)
        } else {
            args.alphas.clone()
        },
        seed: args.seed.or(file.seed).unwrap_or(base.seed),
    };
    if config.samples == 0 {
        return Err(CliError::Config("--samples must be at least 1".into()));
    }
    if config.text_len <= params.h as usize {
        return Err(CliError::Config(format!(
            "--length must exceed h = {}",
            params.h
        )));
    }
    for &alpha in &config.alphas {
        if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Config(format!("alpha out of range: {alpha}")));
        }
    }
    let report = calibrate(&sk, &params, &config);
    let echo = CalibrateEcho {
        command: "calibrate",
        key: key.display().to_string(),
        samples: config.samples,
        length: config.text_len,
        vocab: config.vocab_size,
        alphas: config.alphas.clone(),
        seed: config.seed,
        params,
    };
    let text = report.to_text();
    emit(json, &echo, &report, &text);
    Ok(EXIT_OK)
}

#[derive(Args)]
struct AttackCostArgs {
    /// Target forged-text length.
    #[arg(long = "L", env = "VOW_L")]
    length: Option<u64>,
    /// Detection level the forgery must beat.
    #[arg(long, env = "VOW_ALPHA")]
    alpha: Option<f64>,
    /// Green fraction as NUM/DEN or a terminating decimal.
    #[arg(long, env = "VOW_GAMMA", value_parser = parse_gamma)]
    gamma: Option<GreenRatio>,
    /// Zipf exponent of the n-gram frequency law.
    #[arg(long, env = "VOW_ZIPF_EXPONENT")]
    zipf_exponent: Option<f64>,
    /// Distinct n-grams in the language.
    #[arg(long, env = "VOW_TOTAL_NGRAMS")]
    total_ngrams: Option<f64>,
    /// Storage cost per cache entry.
    #[arg(long, env = "VOW_BYTES_PER_ENTRY")]
    bytes_per_entry: Option<f64>,
}

#[derive(Serialize)]
struct AttackCostEcho {
    command: &'static str,
    params: AttackCostParams,
}

fn cmd_attack_cost(args: AttackCostArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let d = AttackCostParams::default();
    let gamma = match (args.gamma, file.gamma.as_deref()) {
        (Some(g), _) => g,
        (None, Some(s)) => parse_gamma(s).map_err(CliError::Config)?,
        (None, None) => d.gamma,
    };
    let params = AttackCostParams {
        length: args.length.or(file.big_l).unwrap_or(d.length),
        alpha: args.alpha.or(file.alpha).unwrap_or(d.alpha),
        gamma,
        zipf_exponent: args
            .zipf_exponent
            .or(file.zipf_exponent)
            .unwrap_or(d.zipf_exponent),
        total_ngrams: args
            .total_ngrams
            .or(file.total_ngrams)
            .unwrap_or(d.total_ngrams),
        bytes_per_entry: args
            .bytes_per_entry
            .or(file.bytes_per_entry)
            .unwrap_or(d.bytes_per_entry),
    };
    let report = attack_cost(&params).map_err(|e| CliError::Config(e.to_string()))?;
    let echo = AttackCostEcho {
        command: "attack-cost",
        params,
    };
    let text = report.to_text();
    emit(json, &echo, &report, &text);
    Ok(EXIT_OK)
}

#[derive(Args)]
struct ForgeArgs {
    /// Secret key file; the honest side of the experiment.
    #[arg(long, env = "VOW_KEY")]
    key: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Watermarked documents the attacker observes.
    #[arg(long, env = "VOW_CORPUS_DOCS")]
    corpus_docs: Option<usize>,
    /// Tokens per observed document.
    #[arg(long, env = "VOW_DOC_LEN")]
    doc_len: Option<usize>,
    /// Attacker's logit boost on cached green tokens.
    #[arg(long = "delta-prime", env = "VOW_DELTA_PRIME")]
    delta_prime: Option<f64>,
    /// Tokens per forged text.
    #[arg(long, env = "VOW_LENGTH")]
    length: Option<usize>,
    /// Level the forgery is judged at.
    #[arg(long, env = "VOW_ALPHA")]
    alpha: Option<f64>,
    /// Forgery attempts.
    #[arg(long, env = "VOW_TRIALS")]
    trials: Option<usize>,
    #[arg(long, env = "VOW_SEED")]
    seed: Option<u64>,
    /// Write the built cache here for reuse.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    /// Skip corpus observation and load a saved cache.
    #[arg(long)]
    load_cache: Option<PathBuf>,
}

#[derive(Serialize)]
struct ForgeEcho {
    command: &'static str,
    key: String,
    corpus_docs: usize,
    doc_len: usize,
    vocab: u32,
    zipf: f64,
    noise: f64,
    seed: u64,
    params: WatermarkParams,
    forgery: ForgeConfig,
}

#[derive(Serialize)]
struct ForgeDoc {
    cache_contexts: usize,
    cache_green_pairs: u64,
    cache_observed_pairs: u64,
    forgery: crate::attack::ForgeReport,
}

fn cmd_forge(args: ForgeArgs, file: &FileConfig, json: bool) -> Result<i32, CliError> {
    let key = args
        .key
        .or_else(|| file.key.clone())
        .unwrap_or_else(|| PathBuf::from("vow.sk"));
    let sk = load_secret(&key)?;
    let params = args.params.resolve(file)?;
    let (vocab, zipf, noise) = args.model.resolve(file, 2_000)?;
    let corpus_docs = args.corpus_docs.or(file.corpus_docs).unwrap_or(64);
    let doc_len = args.doc_len.or(file.doc_len).unwrap_or(255);
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let forgery = ForgeConfig {
        delta_prime: args.delta_prime.or(file.delta_prime).unwrap_or(4.0),
        length: args.length.or(file.length).unwrap_or(150),
        alpha: args.alpha.or(file.alpha).unwrap_or(1e-2),
        trials: args.trials.or(file.trials).unwrap_or(200),
    };
    if forgery.length <= params.h as usize {
        return Err(CliError::Config(format!(
            "--length must exceed h = {}",
            params.h
        )));
    }
    if doc_len <= params.h as usize {
        return Err(CliError::Config(format!(
            "--doc-len must exceed h = {}",
            params.h
        )));
    }
    let model = SyntheticModel::new(seed, vocab, zipf, noise)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let cache = match &args.load_cache {
        Some(path) => {
            let cache = GreenCache::load(path).map_err(|e| CliError::Config(e.to_string()))?;
            if cache.h() != params.h {
                return Err(CliError::Config(format!(
                    "cache {} was built for h = {}, run wants h = {}",
                    path.display(),
                    cache.h(),
                    params.h
                )));
            }
            cache
        }
        None => {
            let corpus: Result<Vec<Vec<u32>>, _> = (0..corpus_docs)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
                    );
                    model
                        .generate(
                            &sk,
                            &params,
                            Strategy::Multinomial { temperature: None },
                            doc_len,
                            &[],
                            &mut rng,
                        )
                        .map(|(tokens, _)| tokens)
                })
                .collect();
            let corpus = corpus.map_err(|e| CliError::Config(e.to_string()))?;
            build_cache(&corpus, params.h, |context, token| {
                is_green_local(&sk, &params, context, token)
                    .expect("cache windows match h")
                    .is_green
            })
        }
    };
    if let Some(path) = &args.save_cache {
        cache
            .save(path)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }

    let detect = |tokens: &[u32]| -> f64 {
        let records = dedup_ngrams(tokens, params.h).expect("forged texts are longer than h");
        let n = records.len() as u64;
        let g = records
            .iter()
            .filter(|r| {
                is_green_local(&sk, &params, &r.context, r.token)
                    .expect("records match h")
                    .is_green
            })
            .count() as u64;
        binom_sf_exact(g, n, params.gamma).expect("dedup yields at least one window")
    };
    // Different stride than the corpus seeds so attacker trials never
    // replay an observed document's randomness.
    let report = forge(&model, &cache, &forgery, detect, seed ^ 0xd1b54a32d192ed03)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let echo = ForgeEcho {
        command: "forge",
        key: key.display().to_string(),
        corpus_docs,
        doc_len,
        vocab: vocab.size(),
        zipf,
        noise,
        seed,
        params,
        forgery,
    };
    let doc = ForgeDoc {
        cache_contexts: cache.contexts(),
        cache_green_pairs: cache.unique_pairs(),
        cache_observed_pairs: cache.observed_pairs(),
        forgery: report.clone(),
    };
    let text = format!(
        "cache: {} contexts, {} green pairs ({} observations)\n{}",
        doc.cache_contexts,
        doc.cache_green_pairs,
        doc.cache_observed_pairs,
        report.to_text()
    );
    emit(json, &echo, &doc, &text);
    Ok(EXIT_OK)
}
