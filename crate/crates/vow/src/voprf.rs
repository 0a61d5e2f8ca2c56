//! Verifiable oblivious PRF over ristretto255.
//!
//! This is the 2HashDH construction: the PRF value of an input `x` under a
//! secret key `sk` is `H2(x, sk * H1(x))`, where `H1` hashes into the group
//! and `H2` is a 256-bit output hash. A client that wants the PRF value of
//! `x` without revealing it sends the blinded element `r * H1(x)`; the
//! server multiplies by `sk` and returns the result together with a
//! Chaum-Pedersen proof that the same `sk` was used for the whole batch and
//! matches the published `pk = sk * G`. The client unblinds with `r^-1` and
//! finishes the hash locally.
//!
//! Batches of any size are covered by a single 64-byte proof: the prover and
//! verifier both collapse the batch into one composite pair by a
//! random-linear combination with per-index weights derived from the
//! transcript, so a proof over the composites binds every element.
//!
//! All encodings on the wire are the canonical 32-byte ristretto255
//! encodings; decoding rejects anything non-canonical.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::{Identity, VartimeMultiscalarMul};
use rand_core::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};
use zeroize::Zeroize;

/// Domain separation tag for hashing inputs into the group.
pub const DST_HASH_TO_GROUP: &[u8] = b"VOW-v1-H1";
/// Domain separation tag for the output hash.
pub const DST_FINALIZE: &[u8] = b"VOW-v1-H2";
/// Domain separation tag for batch composite weights.
pub const DST_COMPOSITE: &[u8] = b"VOW-v1-Composite";
/// Domain separation tag for the proof challenge.
pub const DST_CHALLENGE: &[u8] = b"VOW-v1-Challenge";

/// Magic header for key files, secret and public alike.
pub const KEY_FILE_MAGIC: &[u8; 8] = b"VOWKEY01";

/// PRF output: 256 bits.
pub type PrfOutput = [u8; 32];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VoprfError {
    #[error("non-canonical group element encoding")]
    InvalidElement,
    #[error("non-canonical scalar encoding")]
    InvalidScalar,
    #[error("identity element where a nonzero element is required")]
    IdentityElement,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("blinded and evaluated batches have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("DLEQ proof rejected")]
    ProofRejected,
    #[error("key file: bad magic header")]
    BadKeyMagic,
    #[error("key file: wrong length")]
    BadKeyLength,
    #[error("key file: {0}")]
    KeyIo(String),
}

/// An element of the prime-order group, canonically encodable in 32 bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupElement(pub(crate) RistrettoPoint);

impl GroupElement {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.compress().to_bytes()
    }

    /// Decodes a canonical encoding. The identity decodes successfully;
    /// callers that forbid it must check [`GroupElement::is_identity`].
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, VoprfError> {
        CompressedRistretto(*bytes)
            .decompress()
            .map(GroupElement)
            .ok_or(VoprfError::InvalidElement)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == RistrettoPoint::identity()
    }

    /// The fixed group generator.
    pub fn generator() -> Self {
        GroupElement(RISTRETTO_BASEPOINT_POINT)
    }
}

/// Hash an arbitrary byte string to a group element (the `H1` of 2HashDH).
pub fn hash_to_group(input: &[u8]) -> GroupElement {
    let hash = Sha512::new()
        .chain_update(DST_HASH_TO_GROUP)
        .chain_update(input);
    GroupElement(RistrettoPoint::from_hash(hash))
}

fn hash_to_scalar(hash: Sha512) -> Scalar {
    let digest: [u8; 64] = hash.finalize().into();
    Scalar::from_bytes_mod_order_wide(&digest)
}

/// The output hash of 2HashDH. Layout: `len(x) as u64 BE || x || element ||
/// tag`, hashed with SHA-256. The length prefix keeps the input and the
/// element encoding from running together.
fn finalize_hash(input: &[u8], unblinded: &GroupElement) -> PrfOutput {
    let digest = Sha256::new()
        .chain_update((input.len() as u64).to_be_bytes())
        .chain_update(input)
        .chain_update(unblinded.to_bytes())
        .chain_update(DST_FINALIZE)
        .finalize();
    digest.into()
}

/// Server-side secret key. Zeroed on drop; clones zeroize independently.
pub struct SecretKey(pub(crate) Scalar);

impl Clone for SecretKey {
    fn clone(&self) -> Self {
        SecretKey(self.0)
    }
}

impl Drop for SecretKey {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

impl SecretKey {
    /// A uniformly random nonzero scalar.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = Scalar::random(rng);
            if s != Scalar::ZERO {
                return SecretKey(s);
            }
        }
    }

    pub fn public_key(&self) -> GroupElement {
        GroupElement(RISTRETTO_BASEPOINT_TABLE * &self.0)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// Rejects non-canonical encodings and the zero scalar.
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, VoprfError> {
        let s = Option::<Scalar>::from(Scalar::from_canonical_bytes(*bytes))
            .ok_or(VoprfError::InvalidScalar)?;
        if s == Scalar::ZERO {
            return Err(VoprfError::InvalidScalar);
        }
        Ok(SecretKey(s))
    }

}

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// A key pair for the evaluation server.
#[derive(Clone, Debug)]
pub struct KeyPair {
    pub secret: SecretKey,
    pub public: GroupElement,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = SecretKey::generate(rng);
        let public = secret.public_key();
        KeyPair { secret, public }
    }
}

/// Direct PRF evaluation, for the key holder only:
/// `H2(x, sk * H1(x))`.
pub fn evaluate(sk: &SecretKey, input: &[u8]) -> PrfOutput {
    let point = hash_to_group(input).0 * sk.0;
    finalize_hash(input, &GroupElement(point))
}

/// Client-side state for one blinded input: the input itself, the blinding
/// scalar and the blinded element that goes on the wire.
pub struct BlindingState {
    input: Vec<u8>,
    blind: Scalar,
    blinded: GroupElement,
}

impl BlindingState {
    pub fn blinded(&self) -> GroupElement {
        self.blinded
    }

    pub fn input(&self) -> &[u8] {
        &self.input
    }
}

/// Blinds an input: picks a random nonzero `r` and returns `r * H1(x)`
/// together with the state needed to finish.
pub fn blind<R: RngCore + CryptoRng>(input: &[u8], rng: &mut R) -> BlindingState {
    let blind = loop {
        let r = Scalar::random(rng);
        if r != Scalar::ZERO {
            break r;
        }
    };
    let blinded = GroupElement(hash_to_group(input).0 * blind);
    BlindingState {
        input: input.to_vec(),
        blind,
        blinded,
    }
}

/// Batched Chaum-Pedersen proof that every evaluated element in a batch was
/// produced by the same secret key that matches `pk`. 64 bytes for any
/// batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DleqProof {
    pub(crate) c: Scalar,
    pub(crate) s: Scalar,
}

/// Exact serialized size of a [`DleqProof`].
pub const DLEQ_PROOF_LEN: usize = 64;

impl DleqProof {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.c.to_bytes());
        out[32..].copy_from_slice(&self.s.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; 64]) -> Result<Self, VoprfError> {
        let mut c = [0u8; 32];
        let mut s = [0u8; 32];
        c.copy_from_slice(&bytes[..32]);
        s.copy_from_slice(&bytes[32..]);
        let c = Option::<Scalar>::from(Scalar::from_canonical_bytes(c))
            .ok_or(VoprfError::InvalidScalar)?;
        let s = Option::<Scalar>::from(Scalar::from_canonical_bytes(s))
            .ok_or(VoprfError::InvalidScalar)?;
        Ok(DleqProof { c, s })
    }
}

/// Per-index composite weight: `d_i = H(tag, pk, i, blinded_i, evaluated_i)`
/// reduced to a scalar. Binding the index makes any reordering of the batch
/// change the weights, so a proof only verifies against the exact transcript
/// it was produced for.
fn composite_weight(pk: &GroupElement, index: u32, blinded: &GroupElement, evaluated: &GroupElement) -> Scalar {
    hash_to_scalar(
        Sha512::new()
            .chain_update(DST_COMPOSITE)
            .chain_update(pk.to_bytes())
            .chain_update(index.to_be_bytes())
            .chain_update(blinded.to_bytes())
            .chain_update(evaluated.to_bytes()),
    )
}

/// Collapses the batch into the composite pair `(M, Z)` with
/// `M = sum d_i * blinded_i`, `Z = sum d_i * evaluated_i`. Variable time;
/// only public transcript data is touched.
fn composites(
    pk: &GroupElement,
    blinded: &[GroupElement],
    evaluated: &[GroupElement],
) -> (RistrettoPoint, RistrettoPoint) {
    let weights: Vec<Scalar> = (0..blinded.len())
        .map(|i| composite_weight(pk, i as u32, &blinded[i], &evaluated[i]))
        .collect();
    let m = RistrettoPoint::vartime_multiscalar_mul(weights.iter(), blinded.iter().map(|b| b.0));
    let z = RistrettoPoint::vartime_multiscalar_mul(weights.iter(), evaluated.iter().map(|e| e.0));
    (m, z)
}

fn challenge(
    pk: &GroupElement,
    m: &RistrettoPoint,
    z: &RistrettoPoint,
    a1: &RistrettoPoint,
    a2: &RistrettoPoint,
) -> Scalar {
    hash_to_scalar(
        Sha512::new()
            .chain_update(DST_CHALLENGE)
            .chain_update(GroupElement::generator().to_bytes())
            .chain_update(pk.to_bytes())
            .chain_update(m.compress().to_bytes())
            .chain_update(z.compress().to_bytes())
            .chain_update(a1.compress().to_bytes())
            .chain_update(a2.compress().to_bytes()),
    )
}

fn check_batch(blinded: &[GroupElement], evaluated: &[GroupElement]) -> Result<(), VoprfError> {
    if blinded.is_empty() || evaluated.is_empty() {
        return Err(VoprfError::EmptyBatch);
    }
    if blinded.len() != evaluated.len() {
        return Err(VoprfError::LengthMismatch(blinded.len(), evaluated.len()));
    }
    if blinded.iter().chain(evaluated.iter()).any(GroupElement::is_identity) {
        return Err(VoprfError::IdentityElement);
    }
    Ok(())
}

/// Server side of one round: multiplies every blinded element by `sk` and
/// proves the whole batch with a single [`DleqProof`].
pub fn blind_evaluate_batch<R: RngCore + CryptoRng>(
    sk: &SecretKey,
    blinded: &[GroupElement],
    rng: &mut R,
) -> Result<(Vec<GroupElement>, DleqProof), VoprfError> {
    if blinded.is_empty() {
        return Err(VoprfError::EmptyBatch);
    }
    if blinded.iter().any(GroupElement::is_identity) {
        return Err(VoprfError::IdentityElement);
    }
    let evaluated: Vec<GroupElement> = blinded.iter().map(|b| GroupElement(b.0 * sk.0)).collect();
    let proof = prove_batch(sk, blinded, &evaluated, rng);
    Ok((evaluated, proof))
}

fn prove_batch<R: RngCore + CryptoRng>(
    sk: &SecretKey,
    blinded: &[GroupElement],
    evaluated: &[GroupElement],
    rng: &mut R,
) -> DleqProof {
    let pk = sk.public_key();
    let (m, z) = composites(&pk, blinded, evaluated);
    let t = Scalar::random(rng);
    let a1 = RISTRETTO_BASEPOINT_TABLE * &t;
    let a2 = m * t;
    let c = challenge(&pk, &m, &z, &a1, &a2);
    let s = t - c * sk.0;
    DleqProof { c, s }
}

/// Verifies a batch transcript against `pk`. Accepts iff every evaluated
/// element equals `sk * blinded` for the `sk` behind `pk`.
pub fn verify_batch(
    pk: &GroupElement,
    blinded: &[GroupElement],
    evaluated: &[GroupElement],
    proof: &DleqProof,
) -> Result<(), VoprfError> {
    check_batch(blinded, evaluated)?;
    let (m, z) = composites(pk, blinded, evaluated);
    // s = t - c*sk implies s*G + c*pk = t*G and s*M + c*Z = t*M when
    // Z = sk*M, so the challenge recomputes to c exactly.
    let a1 = RistrettoPoint::vartime_double_scalar_mul_basepoint(&proof.c, &pk.0, &proof.s);
    let a2 = RistrettoPoint::vartime_multiscalar_mul([&proof.s, &proof.c], [&m, &z]);
    if challenge(pk, &m, &z, &a1, &a2) == proof.c {
        Ok(())
    } else {
        Err(VoprfError::ProofRejected)
    }
}

/// Per-input proofs instead of one batched proof. Same transcript language,
/// each input proven as a batch of one; costs one proof per element.
pub fn blind_evaluate_each<R: RngCore + CryptoRng>(
    sk: &SecretKey,
    blinded: &[GroupElement],
    rng: &mut R,
) -> Result<(Vec<GroupElement>, Vec<DleqProof>), VoprfError> {
    blinded
        .iter()
        .map(|b| {
            let (ev, proof) = blind_evaluate_batch(sk, std::slice::from_ref(b), rng)?;
            Ok((ev[0], proof))
        })
        .collect()
}

/// Client side of one round for one input: unblinds and applies the output
/// hash. The caller is expected to have verified the batch proof first.
pub fn finalize(state: &BlindingState, evaluated: &GroupElement) -> Result<PrfOutput, VoprfError> {
    if evaluated.is_identity() {
        return Err(VoprfError::IdentityElement);
    }
    let unblinded = GroupElement(evaluated.0 * state.blind.invert());
    Ok(finalize_hash(&state.input, &unblinded))
}

fn read_key_file(path: &std::path::Path) -> Result<[u8; 32], VoprfError> {
    let bytes = std::fs::read(path).map_err(|e| VoprfError::KeyIo(e.to_string()))?;
    if bytes.len() != 40 {
        return Err(VoprfError::BadKeyLength);
    }
    if &bytes[..8] != KEY_FILE_MAGIC {
        return Err(VoprfError::BadKeyMagic);
    }
    let mut key = [0u8; 32];
    key.copy_from_slice(&bytes[8..]);
    Ok(key)
}

fn write_key_file(path: &std::path::Path, key: &[u8; 32], secret: bool) -> Result<(), VoprfError> {
    let mut bytes = Vec::with_capacity(40);
    bytes.extend_from_slice(KEY_FILE_MAGIC);
    bytes.extend_from_slice(key);
    std::fs::write(path, &bytes).map_err(|e| VoprfError::KeyIo(e.to_string()))?;
    if secret {
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))
                .map_err(|e| VoprfError::KeyIo(e.to_string()))?;
        }
    }
    Ok(())
}

/// Writes `sk` as an 8-byte magic plus the raw 32-byte scalar, file mode
/// 0600.
pub fn write_secret_key(path: &std::path::Path, sk: &SecretKey) -> Result<(), VoprfError> {
    write_key_file(path, &sk.to_bytes(), true)
}

pub fn write_public_key(path: &std::path::Path, pk: &GroupElement) -> Result<(), VoprfError> {
    write_key_file(path, &pk.to_bytes(), false)
}

pub fn read_secret_key(path: &std::path::Path) -> Result<SecretKey, VoprfError> {
    SecretKey::from_bytes(&read_key_file(path)?)
}

pub fn read_public_key(path: &std::path::Path) -> Result<GroupElement, VoprfError> {
    let element = GroupElement::from_bytes(&read_key_file(path)?)?;
    if element.is_identity() {
        return Err(VoprfError::IdentityElement);
    }
    Ok(element)
}
