//! Deterministic synthetic token source.
//!
//! Insertion and detection need an autoregressive model; this one is a
//! seeded stand-in whose logits follow a Zipf backbone plus context-keyed
//! noise. It produces no language, but it drives the samplers, the PRF,
//! and the protocol exactly the way a real model would, and every sequence
//! is reproducible from (model seed, key, params, rng seed, prompt, length).

use std::cell::Cell;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use serde::Serialize;
use thiserror::Error;

use crate::detector::dedup_ngrams;
use crate::sampler::{
    sample_multinomial_rejection, sample_topk, LogitVector, SamplerError,
};
use crate::voprf::SecretKey;
use crate::watermark::{bos_token, is_green_local, WatermarkParams};

/// Desk-scale default; large enough that n-gram collisions are rare, small
/// enough that a full brute-force color scan stays testable.
pub const DEFAULT_VOCAB_SIZE: u32 = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("vocabulary size must be at least 2, got {0}")]
    BadVocabSize(u32),
    #[error("zipf exponent must be finite and non-negative, got {0}")]
    BadZipfExponent(f64),
    #[error("noise scale must be finite and non-negative, got {0}")]
    BadNoiseScale(f64),
    #[error("generation length must be at least 1")]
    BadLength,
    #[error("token {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("token file {path}: {reason}")]
    TokenFile { path: String, reason: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Token IDs 0..size-1 are real; `size` itself is the reserved BOS marker
/// used to left-pad contexts at the start of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self, ModelError> {
        if size < 2 || size == u32::MAX {
            return Err(ModelError::BadVocabSize(size));
        }
        Ok(Vocabulary { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn bos(&self) -> u32 {
        bos_token(self.size)
    }
}

/// Logits are `-s * ln(j + 1)` plus pseudorandom noise of scale `sigma`
/// keyed by (seed, context). With both knobs at zero the model is uniform,
/// which is the regime where the green-mass law has a closed form.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticModel {
    seed: u64,
    vocab: Vocabulary,
    zipf_exponent: f64,
    noise_scale: f64,
}

/// Decoding strategy for `generate`.
#[derive(Clone, Copy, Debug)]
pub enum Strategy {
    Multinomial {
        temperature: Option<f64>,
    },
    TopK {
        k: usize,
        top_p: Option<f64>,
        temperature: Option<f64>,
    },
}

/// Per-sequence accounting from one `generate` call.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GenStats {
    /// Proposal draws per emitted token (1.0 exactly for top-k decoding).
    pub mean_trials: f64,
    /// Color-oracle evaluations per emitted token, counted at the PRF seam.
    pub mean_calls: f64,
    /// Green fraction over the deduplicated n-grams of the emitted
    /// sequence; `None` when the sequence is shorter than h + 1.
    pub green_fraction: Option<f64>,
}

impl SyntheticModel {
    pub fn new(
        seed: u64,
        vocab: Vocabulary,
        zipf_exponent: f64,
        noise_scale: f64,
    ) -> Result<Self, ModelError> {
        if !(zipf_exponent.is_finite() && zipf_exponent >= 0.0) {
            return Err(ModelError::BadZipfExponent(zipf_exponent));
        }
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(ModelError::BadNoiseScale(noise_scale));
        }
        Ok(SyntheticModel {
            seed,
            vocab,
            zipf_exponent,
            noise_scale,
        })
    }

    /// All-tokens-equal model: zipf exponent and noise both zero.
    pub fn uniform(seed: u64, vocab: Vocabulary) -> Self {
        SyntheticModel::new(seed, vocab, 0.0, 0.0).expect("zeros are valid")
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    /// Deterministic logits for one decoding step.
    pub fn logits(&self, context: &[u32]) -> LogitVector {
        let n = self.vocab.size as usize;
        let mut scores = vec![0.0f64; n];
        if self.zipf_exponent > 0.0 {
            for (j, s) in scores.iter_mut().enumerate() {
                *s = -self.zipf_exponent * ((j + 1) as f64).ln();
            }
        }
        if self.noise_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(context_key(self.seed, context));
            for s in scores.iter_mut() {
                *s += self.noise_scale * gaussian(&mut rng);
            }
        }
        LogitVector::new(scores).expect("construction yields finite logits")
    }

    /// Autoregressive watermarked generation. Contexts are the last h
    /// tokens of prompt-plus-output, BOS-padded at the start; colors come
    /// from the PRF under `sk`. Returns the emitted tokens (prompt not
    /// included) and per-sequence statistics.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        sk: &SecretKey,
        params: &WatermarkParams,
        strategy: Strategy,
        length: usize,
        prompt: &[u32],
        rng: &mut R,
    ) -> Result<(Vec<u32>, GenStats), ModelError> {
        if length == 0 {
            return Err(ModelError::BadLength);
        }
        for &id in prompt {
            if id >= self.vocab.size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.vocab.size,
                });
            }
        }
        let h = params.h as usize;
        let bos = self.vocab.bos();
        let mut history: Vec<u32> = prompt.to_vec();
        let mut out = Vec::with_capacity(length);
        let calls = Cell::new(0u64);
        let mut total_trials = 0u64;

        for _ in 0..length {
            let ctx = context_window(&history, h, bos);
            let logits = self.logits(&ctx);
            let oracle = |t: u32| {
                calls.set(calls.get() + 1);
                is_green_local(sk, params, &ctx, t)
                    .expect("context length matches params")
                    .is_green
            };
            let token = match strategy {
                Strategy::Multinomial { temperature } => {
                    let logits = match temperature {
                        Some(t) => logits.with_temperature(t)?,
                        None => logits,
                    };
                    let (token, trials) =
                        sample_multinomial_rejection(&logits, params, oracle, rng);
                    total_trials += trials;
                    token
                }
                Strategy::TopK {
                    k,
                    top_p,
                    temperature,
                } => {
                    let (token, _) =
                        sample_topk(&logits, k, top_p, temperature, params, oracle, rng)?;
                    total_trials += 1;
                    token
                }
            };
            history.push(token);
            out.push(token);
        }

        let green_fraction = match dedup_ngrams(&out, params.h) {
            Ok(records) => {
                let greens = records
                    .iter()
                    .filter(|r| {
                        is_green_local(sk, params, &r.context, r.token)
                            .expect("record context matches params")
                            .is_green
                    })
                    .count();
                Some(greens as f64 / records.len() as f64)
            }
            Err(_) => None,
        };

        let stats = GenStats {
            mean_trials: total_trials as f64 / length as f64,
            mean_calls: calls.get() as f64 / length as f64,
            green_fraction,
        };
        Ok((out, stats))
    }
}

/// Non-cryptographic 64-bit key for the per-context noise stream: FNV-1a
/// over seed and token bytes, finished with a splitmix64 mix.
/// The last `h` tokens of `history`, BOS-padded on the left when the
/// history is still shorter than the window.
pub fn context_window(history: &[u32], h: usize, bos: u32) -> Vec<u32> {
    let mut ctx = Vec::with_capacity(h);
    if history.len() < h {
        ctx.resize(h - history.len(), bos);
        ctx.extend_from_slice(history);
    } else {
        ctx.extend_from_slice(&history[history.len() - h..]);
    }
    ctx
}

fn context_key(seed: u64, context: &[u32]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    for &t in context {
        for b in t.to_be_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Reads a line-delimited file of integer arrays (one document per file,
/// arrays concatenated in order) and validates every ID against the
/// vocabulary. An empty file is legal but suspicious, so it warns.
pub fn ingest_tokens(path: &Path, vocab: &Vocabulary) -> Result<Vec<u32>, ModelError> {
    let file = std::fs::File::open(path).map_err(|e| ModelError::TokenFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut tokens = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::TokenFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ids: Vec<u32> =
            serde_json::from_str(&line).map_err(|e| ModelError::TokenFile {
                path: path.display().to_string(),
                reason: format!("line {}: {}", lineno + 1, e),
            })?;
        for &id in &ids {
            if id >= vocab.size() {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: vocab.size(),
                });
            }
        }
        tokens.extend_from_slice(&ids);
    }
    if tokens.is_empty() {
        eprintln!("warning: token file {} is empty", path.display());
    }
    Ok(tokens)
}

/// Writes tokens in the format `ingest_tokens` reads, chunked into lines
/// of at most 1000 IDs.
pub fn write_tokens(path: &Path, tokens: &[u32]) -> Result<(), ModelError> {
    let mut file = std::fs::File::create(path).map_err(|e| ModelError::TokenFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    for chunk in tokens.chunks(1000) {
        let line = serde_json::to_string(chunk).expect("integer arrays serialize");
        writeln!(file, "{line}").map_err(|e| ModelError::TokenFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::binom_sf_exact;
    use crate::voprf::KeyPair;
    use crate::watermark::GreenRatio;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: u32) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    #[test]
    fn vocabulary_bounds() {
        assert_eq!(
            Vocabulary::new(1).unwrap_err(),
            ModelError::BadVocabSize(1)
        );
        assert_eq!(
            Vocabulary::new(u32::MAX).unwrap_err(),
            ModelError::BadVocabSize(u32::MAX)
        );
        let v = vocab(100);
        assert_eq!(v.size(), 100);
        assert_eq!(v.bos(), 100);
    }

    #[test]
    fn uniform_model_emits_flat_logits() {
        let m = SyntheticModel::uniform(3, vocab(50));
        let l = m.logits(&[1, 2, 3, 4]);
        assert!(l.scores().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn logits_are_deterministic_per_context() {
        let m = SyntheticModel::new(42, vocab(200), 1.0, 2.0).unwrap();
        let a = m.logits(&[5, 6, 7, 8]);
        let b = m.logits(&[5, 6, 7, 8]);
        assert_eq!(a.scores(), b.scores());
        let c = m.logits(&[5, 6, 7, 9]);
        assert_ne!(a.scores(), c.scores());
    }

    #[test]
    fn zipf_backbone_matches_closed_form_softmax() {
        let n = 100u32;
        let m = SyntheticModel::new(0, vocab(n), 1.0, 0.0).unwrap();
        let l = m.logits(&[0, 0, 0, 0]);
        let weights: Vec<f64> = l.scores().iter().map(|&s| s.exp()).collect();
        let z: f64 = weights.iter().sum();
        let harmonic: f64 = (1..=n as usize).map(|r| 1.0 / r as f64).sum();
        for (j, w) in weights.iter().enumerate() {
            let want = (1.0 / (j + 1) as f64) / harmonic;
            assert!(
                (w / z - want).abs() < 1e-12,
                "rank {j}: {} vs {want}",
                w / z
            );
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let kp = KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(1));
        let m = SyntheticModel::new(7, vocab(500), 1.0, 1.5).unwrap();
        let params = WatermarkParams::default();
        let strategy = Strategy::TopK {
            k: 20,
            top_p: Some(0.95),
            temperature: Some(0.9),
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.generate(&kp.secret, &params, strategy, 40, &[3, 1, 4], &mut rng)
                .unwrap()
                .0
        };
        assert_eq!(run(99), run(99));
        assert_ne!(run(99), run(100));
    }

    #[test]
    fn zero_delta_green_fraction_stays_at_gamma() {
        let kp = KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(2));
        let m = SyntheticModel::uniform(11, vocab(DEFAULT_VOCAB_SIZE));
        let params = WatermarkParams {
            delta: 0.0,
            ..WatermarkParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (tokens, stats) = m
            .generate(
                &kp.secret,
                &params,
                Strategy::Multinomial { temperature: None },
                2000,
                &[],
                &mut rng,
            )
            .unwrap();
        assert_eq!(tokens.len(), 2000);
        assert_eq!(stats.mean_trials, 1.0);
        assert_eq!(stats.mean_calls, 0.0);
        let n = (2000 - params.h as usize) as f64;
        let sigma = (0.5 * 0.5 / n).sqrt();
        let got = stats.green_fraction.unwrap();
        assert!(
            (got - 0.5).abs() < 3.0 * sigma,
            "green fraction {got} strays from gamma"
        );
    }

    #[test]
    fn green_mass_law_for_uniform_model() {
        let kp = KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(4));
        let m = SyntheticModel::uniform(13, vocab(DEFAULT_VOCAB_SIZE));
        let params = WatermarkParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, stats) = m
            .generate(
                &kp.secret,
                &params,
                Strategy::Multinomial { temperature: None },
                10_000,
                &[],
                &mut rng,
            )
            .unwrap();
        let d = params.delta.exp();
        let want = 0.5 * d / (0.5 * d + 0.5);
        let got = stats.green_fraction.unwrap();
        assert!(
            (got - want).abs() < 0.01,
            "green fraction {got}, closed form {want}"
        );
        let expected_trials = d / (1.0 + (d - 1.0) * 0.5);
        assert!(
            (stats.mean_trials - expected_trials).abs() / expected_trials < 0.05,
            "mean trials {} vs {expected_trials}",
            stats.mean_trials
        );
    }

    #[test]
    fn generated_text_is_detectable_locally() {
        let kp = KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(6));
        let m = SyntheticModel::new(17, vocab(DEFAULT_VOCAB_SIZE), 1.0, 2.0).unwrap();
        let params = WatermarkParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (tokens, _) = m
            .generate(
                &kp.secret,
                &params,
                Strategy::TopK {
                    k: 50,
                    top_p: None,
                    temperature: None,
                },
                150,
                &[],
                &mut rng,
            )
            .unwrap();
        let records = dedup_ngrams(&tokens, params.h).unwrap();
        let g = records
            .iter()
            .filter(|r| {
                is_green_local(&kp.secret, &params, &r.context, r.token)
                    .unwrap()
                    .is_green
            })
            .count() as u64;
        let p = binom_sf_exact(g, records.len() as u64, GreenRatio::HALF).unwrap();
        assert!(p < 1e-5, "p = {p} with g = {g} of {}", records.len());
    }

    #[test]
    fn prompt_and_length_are_validated() {
        let kp = KeyPair::generate(&mut ChaCha8Rng::seed_from_u64(8));
        let m = SyntheticModel::uniform(19, vocab(100));
        let params = WatermarkParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let strategy = Strategy::Multinomial { temperature: None };
        assert_eq!(
            m.generate(&kp.secret, &params, strategy, 0, &[], &mut rng)
                .unwrap_err(),
            ModelError::BadLength
        );
        assert_eq!(
            m.generate(&kp.secret, &params, strategy, 5, &[100], &mut rng)
                .unwrap_err(),
            ModelError::TokenOutOfRange { id: 100, vocab: 100 }
        );
        assert!(matches!(
            m.generate(
                &kp.secret,
                &params,
                Strategy::TopK {
                    k: 101,
                    top_p: None,
                    temperature: None
                },
                5,
                &[],
                &mut rng,
            )
            .unwrap_err(),
            ModelError::Sampler(SamplerError::KOutOfRange { k: 101, n: 100 })
        ));
    }

    #[test]
    fn token_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.tokens");
        let v = vocab(DEFAULT_VOCAB_SIZE);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tokens: Vec<u32> = (0..2500).map(|_| rng.gen_range(0..v.size())).collect();
        write_tokens(&path, &tokens).unwrap();
        assert_eq!(ingest_tokens(&path, &v).unwrap(), tokens);

        std::fs::write(&path, "[1,2,3]\n").unwrap();
        assert_eq!(ingest_tokens(&path, &v).unwrap(), vec![1, 2, 3]);

        std::fs::write(&path, "").unwrap();
        assert_eq!(ingest_tokens(&path, &v).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn token_files_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.tokens");
        let v = vocab(100);
        std::fs::write(&path, "[1,2,100]\n").unwrap();
        assert_eq!(
            ingest_tokens(&path, &v).unwrap_err(),
            ModelError::TokenOutOfRange { id: 100, vocab: 100 }
        );
        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(
            ingest_tokens(&path, &v).unwrap_err(),
            ModelError::TokenFile { .. }
        ));
        assert!(matches!(
            ingest_tokens(dir.path().join("missing").as_path(), &v).unwrap_err(),
            ModelError::TokenFile { .. }
        ));
    }
}
