//! The interactive detection protocol over a binary wire format.
//!
//! One round trip per batch: the client blinds its deduplicated n-grams and
//! sends them; the server evaluates the whole batch under its key and
//! returns the results with a single 64-byte proof; the client verifies,
//! unblinds, colors, and runs the exact binomial test. The server sees only
//! uniformly random group elements and the batch size; the client never
//! sees the key. A failed proof aborts with transcript evidence instead of
//! producing a verdict.
//!
//! Transport is length-prefixed frames over TCP. The 4-byte prefix is
//! framing, not protocol payload, and is excluded from overhead accounting.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{binom_sf_exact, dedup_ngrams, DetectionReport, DetectorError};
use crate::voprf::{
    blind, blind_evaluate_batch, finalize, verify_batch, BlindingState, DleqProof, GroupElement,
    KeyPair, VoprfError, DLEQ_PROOF_LEN,
};
use crate::watermark::{color_from_output, WatermarkParams};

pub const WIRE_VERSION: u8 = 1;
pub const MAGIC_DATA: [u8; 4] = *b"VOWD";
pub const MAGIC_ERROR: [u8; 4] = *b"VOWE";
/// Header shared by every protocol message: magic, version, 4-byte count.
pub const HEADER_LEN: usize = 9;
/// Default cap on elements per request; clients chunk above it.
pub const MAX_BATCH: usize = 1 << 16;
/// Transport sanity bound, comfortably above a full batched response.
const MAX_FRAME: usize = HEADER_LEN + 32 * MAX_BATCH + DLEQ_PROOF_LEN + 1024;

const IO_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("message shorter than the fixed header")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("element count {0} not allowed")]
    BadCount(u32),
    #[error("batch of {n} exceeds the server cap of {cap}")]
    OversizedBatch { n: usize, cap: usize },
    #[error("message length {got} does not match count (expected {want})")]
    LengthMismatch { want: usize, got: usize },
    #[error("element {0} is not a canonical non-identity encoding")]
    InvalidElement(usize),
    #[error("proof bytes are not canonical scalars")]
    BadProof,
}

/// Error codes carried by a `VOWE` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCode {
    MalformedRequest,
    OversizedBatch,
    InvalidElement,
    Internal,
}

impl ErrorCode {
    fn to_u32(self) -> u32 {
        match self {
            ErrorCode::MalformedRequest => 1,
            ErrorCode::OversizedBatch => 2,
            ErrorCode::InvalidElement => 3,
            ErrorCode::Internal => 4,
        }
    }

    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::MalformedRequest,
            2 => ErrorCode::OversizedBatch,
            3 => ErrorCode::InvalidElement,
            4 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

/// Blinded inputs on their way to the server. Wire layout: magic, version,
/// big-endian count, then 32 bytes per element; 9 + 32n bytes total.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectRequest {
    pub blinded: Vec<GroupElement>,
}

impl DetectRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 32 * self.blinded.len());
        out.extend_from_slice(&MAGIC_DATA);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&(self.blinded.len() as u32).to_be_bytes());
        for el in &self.blinded {
            out.extend_from_slice(&el.to_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        Self::decode_with_cap(bytes, MAX_BATCH)
    }

    /// Validation order matters for the error the server reports: header
    /// first, then the cap (before touching any element), then elements.
    pub fn decode_with_cap(bytes: &[u8], cap: usize) -> Result<Self, WireError> {
        let count = parse_header(bytes, &MAGIC_DATA)?;
        if count == 0 {
            return Err(WireError::BadCount(0));
        }
        let n = count as usize;
        if n > cap {
            return Err(WireError::OversizedBatch { n, cap });
        }
        let want = HEADER_LEN + 32 * n;
        if bytes.len() != want {
            return Err(WireError::LengthMismatch {
                want,
                got: bytes.len(),
            });
        }
        let mut blinded = Vec::with_capacity(n);
        for i in 0..n {
            let start = HEADER_LEN + 32 * i;
            let el = GroupElement::from_bytes(bytes[start..start + 32].try_into().unwrap())
                .map_err(|_| WireError::InvalidElement(i))?;
            if el.is_identity() {
                return Err(WireError::InvalidElement(i));
            }
            blinded.push(el);
        }
        Ok(DetectRequest { blinded })
    }
}

/// Evaluated elements plus one batch proof. Wire layout: header as above,
/// 32 bytes per element, 64 proof bytes; 9 + 32n + 64 bytes total.
#[derive(Clone, Debug)]
pub struct DetectResponse {
    pub evaluated: Vec<GroupElement>,
    pub proof: DleqProof,
}

impl DetectResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_LEN + 32 * self.evaluated.len() + DLEQ_PROOF_LEN);
        out.extend_from_slice(&MAGIC_DATA);
        out.push(WIRE_VERSION);
        out.extend_from_slice(&(self.evaluated.len() as u32).to_be_bytes());
        for el in &self.evaluated {
            out.extend_from_slice(&el.to_bytes());
        }
        out.extend_from_slice(&self.proof.to_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let count = parse_header(bytes, &MAGIC_DATA)?;
        if count == 0 {
            return Err(WireError::BadCount(0));
        }
        let n = count as usize;
        let want = HEADER_LEN + 32 * n + DLEQ_PROOF_LEN;
        if bytes.len() != want {
            return Err(WireError::LengthMismatch {
                want,
                got: bytes.len(),
            });
        }
        let mut evaluated = Vec::with_capacity(n);
        for i in 0..n {
            let start = HEADER_LEN + 32 * i;
            let el = GroupElement::from_bytes(bytes[start..start + 32].try_into().unwrap())
                .map_err(|_| WireError::InvalidElement(i))?;
            if el.is_identity() {
                return Err(WireError::InvalidElement(i));
            }
            evaluated.push(el);
        }
        let proof = DleqProof::from_bytes(bytes[want - DLEQ_PROOF_LEN..].try_into().unwrap())
            .map_err(|_| WireError::BadProof)?;
        Ok(DetectResponse { evaluated, proof })
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 4]) -> Result<u32, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated);
    }
    if &bytes[..4] != magic {
        return Err(WireError::BadMagic);
    }
    if bytes[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    Ok(u32::from_be_bytes(bytes[5..9].try_into().unwrap()))
}

fn encode_error(code: ErrorCode) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[..4].copy_from_slice(&MAGIC_ERROR);
    out[4] = WIRE_VERSION;
    out[5..9].copy_from_slice(&code.to_u32().to_be_bytes());
    out
}

/// Audit record binding one request/response exchange to exact wire bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionTranscript {
    pub request_hash: [u8; 32],
    pub response_hash: [u8; 32],
    pub pk: [u8; 32],
    pub timestamp: u64,
    pub verified: bool,
}

impl SessionTranscript {
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"VOW-v1-Transcript");
        h.update(self.request_hash);
        h.update(self.response_hash);
        h.update(self.pk);
        h.update(self.timestamp.to_be_bytes());
        h.update([self.verified as u8]);
        h.finalize().into()
    }
}

/// Session hash over all chunks of one detection run, hex-encoded for the
/// report file.
pub fn session_hash(transcripts: &[SessionTranscript]) -> String {
    let mut h = Sha256::new();
    h.update(b"VOW-v1-Session");
    for t in transcripts {
        h.update(t.digest());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    MalformedResponse(WireError),
    #[error("server answered {got} elements to a request of {sent}")]
    CountMismatch { sent: usize, got: usize },
    #[error("server rejected the request: {0:?}")]
    ServerError(ErrorCode),
    #[error("proof verification failed; the response is not a valid evaluation under the advertised key")]
    ProofRejected { transcript: Box<SessionTranscript> },
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Voprf(#[from] VoprfError),
}

/// Oblivious PRF evaluation of raw inputs against a remote server:
/// blind, send (chunked at `chunk` elements), verify each chunk's proof,
/// finalize. Returns outputs in input order plus one transcript per chunk.
///
/// Any tampering on the wire surfaces as `ProofRejected` carrying the
/// transcript of the offending chunk; no outputs are released for it.
pub fn client_evaluate<R: RngCore + CryptoRng>(
    endpoint: &str,
    pk: &GroupElement,
    inputs: &[Vec<u8>],
    chunk: usize,
    rng: &mut R,
) -> Result<(Vec<crate::voprf::PrfOutput>, Vec<SessionTranscript>), ClientError> {
    assert!(chunk >= 1, "chunk size must be at least 1");
    let chunk = chunk.min(MAX_BATCH);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut transcripts = Vec::new();
    if inputs.is_empty() {
        return Ok((outputs, transcripts));
    }

    // One connection for the whole run; chunks ride it back to back.
    let mut stream = TcpStream::connect(endpoint)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;

    for batch in inputs.chunks(chunk) {
        let states: Vec<BlindingState> = batch.iter().map(|x| blind(x, rng)).collect();
        let request = DetectRequest {
            blinded: states.iter().map(|s| s.blinded()).collect(),
        };
        let request_bytes = request.encode();
        write_frame(&mut stream, &request_bytes)?;
        let response_bytes = read_frame(&mut stream)?;

        if response_bytes.len() >= 4 && response_bytes[..4] == MAGIC_ERROR {
            let code = parse_header(&response_bytes, &MAGIC_ERROR)
                .ok()
                .and_then(ErrorCode::from_u32)
                .unwrap_or(ErrorCode::Internal);
            return Err(ClientError::ServerError(code));
        }
        let response =
            DetectResponse::decode(&response_bytes).map_err(ClientError::MalformedResponse)?;
        if response.evaluated.len() != batch.len() {
            return Err(ClientError::CountMismatch {
                sent: batch.len(),
                got: response.evaluated.len(),
            });
        }

        let verified = verify_batch(
            pk,
            &request.blinded,
            &response.evaluated,
            &response.proof,
        )
        .is_ok();
        let transcript = SessionTranscript {
            request_hash: Sha256::digest(&request_bytes).into(),
            response_hash: Sha256::digest(&response_bytes).into(),
            pk: pk.to_bytes(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("clock after epoch")
                .as_secs(),
            verified,
        };
        if !verified {
            return Err(ClientError::ProofRejected {
                transcript: Box::new(transcript),
            });
        }
        for (state, evaluated) in states.iter().zip(&response.evaluated) {
            outputs.push(finalize(state, evaluated)?);
        }
        transcripts.push(transcript);
    }
    Ok((outputs, transcripts))
}

/// Full client side of the detection protocol: deduplicate, evaluate
/// obliviously, color, test. The returned report is always `verified`;
/// proof failure is an error, not a verdict.
pub fn client_detect<R: RngCore + CryptoRng>(
    endpoint: &str,
    pk: &GroupElement,
    tokens: &[u32],
    params: &WatermarkParams,
    alpha: f64,
    rng: &mut R,
) -> Result<DetectionReport, ClientError> {
    client_detect_chunked(endpoint, pk, tokens, params, alpha, MAX_BATCH, rng)
}

pub fn client_detect_chunked<R: RngCore + CryptoRng>(
    endpoint: &str,
    pk: &GroupElement,
    tokens: &[u32],
    params: &WatermarkParams,
    alpha: f64,
    chunk: usize,
    rng: &mut R,
) -> Result<DetectionReport, ClientError> {
    if !(alpha.is_finite() && alpha > 0.0 && alpha < 1.0) {
        return Err(ClientError::BadAlpha(alpha));
    }
    let records = dedup_ngrams(tokens, params.h)?;
    let inputs: Vec<Vec<u8>> = records.iter().map(|r| r.encoded.clone()).collect();
    let (outputs, transcripts) = client_evaluate(endpoint, pk, &inputs, chunk, rng)?;

    let n = outputs.len() as u64;
    let g = outputs
        .iter()
        .filter(|out| color_from_output(out, params).is_green)
        .count() as u64;
    let p_value = binom_sf_exact(g, n, params.gamma)?;
    Ok(DetectionReport {
        n_unique: n,
        g_green: g,
        p_value,
        threshold_alpha: alpha,
        verified: true,
        transcript_hash: session_hash(&transcripts),
        params: *params,
    })
}

/// Deliberate misbehavior for falsification tests: every mode must be
/// caught by the client's proof check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FaultMode {
    #[default]
    None,
    /// Replace the first evaluated element with a valid but wrong point.
    FlipElement,
    /// Evaluate (and prove) under a key other than the advertised one.
    WrongKey,
    /// Zero out the proof bytes.
    DropProof,
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub max_batch: usize,
    pub fault: FaultMode,
    /// Log batch size and service time per request to stderr. Element
    /// values and token data are never logged.
    pub verbose: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_batch: MAX_BATCH,
            fault: FaultMode::None,
            verbose: false,
        }
    }
}

/// Running server; dropping (or calling `shutdown`) stops the accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_accept_loop();
    }

    /// Blocks until the accept loop exits (i.e. until another thread or a
    /// signal tears the process down). For foreground serving.
    pub fn wait(mut self) {
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }

    fn stop_accept_loop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop_accept_loop();
        }
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves detection
/// requests until shut down. Each connection gets its own thread and may
/// carry any number of request/response exchanges; the key is shared
/// read-only. Evaluation is constant-time in the element values.
pub fn serve(keypair: KeyPair, addr: &str, config: ServerConfig) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let shared = Arc::new(ServerState {
        keypair,
        wrong_key: match config.fault {
            FaultMode::WrongKey => Some(KeyPair::generate(&mut rand::rngs::OsRng)),
            _ => None,
        },
        config,
    });

    let stop_accept = Arc::clone(&stop);
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(_) => continue,
            };
            let state = Arc::clone(&shared);
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &state);
            });
        }
    });

    Ok(ServerHandle {
        addr: local,
        stop,
        join: Some(join),
    })
}

struct ServerState {
    keypair: KeyPair,
    wrong_key: Option<KeyPair>,
    config: ServerConfig,
}

fn handle_connection(mut stream: TcpStream, state: &ServerState) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    loop {
        let request_bytes = match read_frame(&mut stream) {
            Ok(b) => b,
            Err(_) => return Ok(()),
        };
        let started = Instant::now();
        let reply = match DetectRequest::decode_with_cap(&request_bytes, state.config.max_batch) {
            Ok(request) => {
                let n = request.blinded.len();
                let response = evaluate_request(&request, state);
                if state.config.verbose {
                    eprintln!(
                        "served n={} in {}us",
                        n,
                        started.elapsed().as_micros()
                    );
                }
                response
            }
            Err(e) => {
                let code = match e {
                    WireError::OversizedBatch { .. } => ErrorCode::OversizedBatch,
                    WireError::InvalidElement(_) => ErrorCode::InvalidElement,
                    _ => ErrorCode::MalformedRequest,
                };
                encode_error(code).to_vec()
            }
        };
        write_frame(&mut stream, &reply)?;
    }
}

fn evaluate_request(request: &DetectRequest, state: &ServerState) -> Vec<u8> {
    let keypair = match state.config.fault {
        FaultMode::WrongKey => state.wrong_key.as_ref().expect("created at startup"),
        _ => &state.keypair,
    };
    let (mut evaluated, proof) =
        match blind_evaluate_batch(&keypair.secret, &request.blinded, &mut rand::rngs::OsRng) {
            Ok(pair) => pair,
            Err(_) => return encode_error(ErrorCode::Internal).to_vec(),
        };
    let mut response_proof = proof;
    match state.config.fault {
        FaultMode::FlipElement => {
            // The generator is a valid encoding that cannot equal an honest
            // evaluation of a blinded input, so only the proof check can
            // notice the substitution.
            evaluated[0] = GroupElement::generator();
        }
        FaultMode::DropProof => {
            response_proof = DleqProof::from_bytes(&[0u8; DLEQ_PROOF_LEN])
                .expect("zero scalars are canonical");
        }
        _ => {}
    }
    DetectResponse {
        evaluated,
        proof: response_proof,
    }
    .encode()
}

/// Protocol bytes and expansion ratio for a batch of n elements, under the
/// stated text-size model (plain source text at `bytes_per_token` per
/// token). Transport framing is excluded: it belongs to the carrier, not
/// the protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverheadReport {
    pub n: u64,
    pub request_bytes: u64,
    pub response_bytes: u64,
    pub total_bytes: u64,
    pub expansion_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProofMode {
    /// One 64-byte proof per batch, whatever its size.
    Batched,
    /// One 64-byte proof per element; kept for overhead comparison.
    PerInput,
}

pub fn measure_overhead(n: u64, bytes_per_token: f64, mode: ProofMode) -> OverheadReport {
    assert!(n >= 1, "overhead is defined for at least one element");
    assert!(
        bytes_per_token.is_finite() && bytes_per_token > 0.0,
        "bytes per token must be positive"
    );
    let request_bytes = HEADER_LEN as u64 + 32 * n;
    let proof_bytes = match mode {
        ProofMode::Batched => DLEQ_PROOF_LEN as u64,
        ProofMode::PerInput => DLEQ_PROOF_LEN as u64 * n,
    };
    let response_bytes = HEADER_LEN as u64 + 32 * n + proof_bytes;
    let total_bytes = request_bytes + response_bytes;
    OverheadReport {
        n,
        request_bytes,
        response_bytes,
        total_bytes,
        expansion_ratio: total_bytes as f64 / (n as f64 * bytes_per_token),
    }
}

fn write_frame(stream: &mut TcpStream, payload: &[u8]) -> std::io::Result<()> {
    stream.write_all(&(payload.len() as u32).to_be_bytes())?;
    stream.write_all(payload)?;
    stream.flush()
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len == 0 || len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame length {len} out of bounds"),
        ));
    }
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok(payload)
}
