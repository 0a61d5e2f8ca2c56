//! Security economics of the scheme: what a cache-based learning attack
//! costs, and how far a logit-boost forgery gets in practice.
//!
//! The cost side is closed-form: a forger who cannot query the key needs a
//! cache hit rate p_hit to push the green fraction of an L-token text past
//! the detection threshold, and under a Zipf law over n-gram frequencies
//! that hit rate prices out to a concrete number of cache entries and
//! bytes. The empirical side builds such a cache from watermarked text and
//! runs the forgery against the honest detector.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::detector::binom_sf_exact;
use crate::model::{context_window, SyntheticModel};
use crate::voprf::SecretKey;
use crate::watermark::{is_green_local, GreenRatio, WatermarkParams};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("zipf exponent must satisfy 0 < s < 1, got {0}")]
    BadZipfExponent(f64),
    #[error("total n-gram count must be at least 1, got {0}")]
    BadTotal(f64),
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("hit rate must lie in (0, 1], got {0}")]
    BadHitRate(f64),
    #[error("text length must be at least 1")]
    BadLength,
    #[error("boost must be finite and non-negative, got {0}")]
    BadBoost(f64),
    #[error("trial count must be at least 1")]
    BadTrials,
    #[error("cache file: {0}")]
    CacheFile(String),
}

/// Upper-tail standard-normal quantile Z_alpha: the z with
/// Pr(Z >= z) = alpha. Thin alias over the stats implementation, under
/// the name the cost formulas use.
pub fn z_alpha(alpha: f64) -> f64 {
    crate::stats::normal_upper_quantile(alpha)
}

/// Cache hit rate a forger needs before an L-token text clears detection
/// at level alpha: (p_required - gamma) / (1 - gamma) = Z_a sqrt(gamma / (L (1 - gamma))).
pub fn required_hit_rate(length: u64, alpha: f64, gamma: GreenRatio) -> f64 {
    assert!(length >= 1, "length must be at least 1");
    let g = gamma.as_f64();
    z_alpha(alpha) * (g / (length as f64 * (1.0 - g))).sqrt()
}

/// Green fraction the detector demands of an L-token text, normal
/// approximation: gamma + Z_a sqrt(gamma (1 - gamma) / L).
pub fn required_green_rate(length: u64, alpha: f64, gamma: GreenRatio) -> f64 {
    assert!(length >= 1, "length must be at least 1");
    let g = gamma.as_f64();
    g + z_alpha(alpha) * (g * (1.0 - g) / length as f64).sqrt()
}

/// The same threshold computed against the exact binomial tail instead of
/// the normal approximation: the smallest g/n with a p-value below alpha.
/// None when even an all-green text would not reach alpha.
pub fn exact_required_green_rate(length: u64, alpha: f64, gamma: GreenRatio) -> Option<f64> {
    assert!(length >= 1, "length must be at least 1");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    for g in 0..=length {
        let p = binom_sf_exact(g, length, gamma).expect("g <= n by construction");
        if p < alpha {
            return Some(g as f64 / length as f64);
        }
    }
    None
}

/// Green fraction achieved by a forger with cache hit rate p_hit: hits are
/// green by construction, misses fall back to the base rate gamma.
pub fn p_attack(p_hit: f64, gamma: GreenRatio) -> f64 {
    let g = gamma.as_f64();
    p_hit + (1.0 - p_hit) * g
}

/// Generalized harmonic number H_{n,s} by integral approximation:
/// (n^(1-s) - 1) / (1 - s).
pub fn harmonic_approx(n: f64, s: f64) -> f64 {
    assert!(s > 0.0 && s < 1.0, "exponent must satisfy 0 < s < 1");
    (n.powf(1.0 - s) - 1.0) / (1.0 - s)
}

/// Cache entries needed for hit rate p_hit when n-gram frequencies follow
/// a Zipf law with exponent s over M distinct n-grams. Derived by solving
/// H_{m,s} = p_hit H_{M,s} with the integral approximation:
/// m = (p_hit (M^(1-s) - 1) + 1)^(1/(1-s)).
pub fn zipf_cache_size(p_hit: f64, s: f64, m_total: f64) -> f64 {
    assert!(p_hit > 0.0 && p_hit <= 1.0, "hit rate must lie in (0, 1]");
    assert!(s > 0.0 && s < 1.0, "exponent must satisfy 0 < s < 1");
    assert!(m_total >= 1.0, "total n-gram count must be at least 1");
    (p_hit * (m_total.powf(1.0 - s) - 1.0) + 1.0).powf(1.0 / (1.0 - s))
}

/// The common simplification of [`zipf_cache_size`] for M^(1-s) >> 1:
/// m = p_hit^(1/(1-s)) M.
pub fn zipf_cache_size_simplified(p_hit: f64, s: f64, m_total: f64) -> f64 {
    assert!(p_hit > 0.0 && p_hit <= 1.0, "hit rate must lie in (0, 1]");
    assert!(s > 0.0 && s < 1.0, "exponent must satisfy 0 < s < 1");
    p_hit.powf(1.0 / (1.0 - s)) * m_total
}

pub fn storage_bound(entries: f64, bytes_per_entry: f64) -> f64 {
    assert!(entries >= 0.0 && bytes_per_entry >= 0.0);
    entries * bytes_per_entry
}

/// Decimal units, matching how storage is usually quoted.
pub fn format_bytes(bytes: f64) -> String {
    const UNITS: [&str; 6] = ["B", "KB", "MB", "GB", "TB", "PB"];
    let mut value = bytes;
    let mut unit = 0;
    while value >= 1000.0 && unit + 1 < UNITS.len() {
        value /= 1000.0;
        unit += 1;
    }
    if unit == 0 {
        format!("{value:.0} {}", UNITS[unit])
    } else {
        format!("{value:.2} {}", UNITS[unit])
    }
}

/// Inputs to the learning-attack cost analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttackCostParams {
    /// Target forged-text length L.
    pub length: u64,
    /// Detection significance level the forgery must beat.
    pub alpha: f64,
    pub gamma: GreenRatio,
    /// Zipf exponent of the n-gram frequency law.
    pub zipf_exponent: f64,
    /// Distinct n-grams in the language, M.
    pub total_ngrams: f64,
    /// Conservative storage cost per cache entry.
    pub bytes_per_entry: f64,
}

impl Default for AttackCostParams {
    fn default() -> Self {
        AttackCostParams {
            length: 300,
            alpha: 1e-5,
            gamma: GreenRatio::HALF,
            zipf_exponent: 0.4,
            total_ngrams: 1e12,
            bytes_per_entry: 20.0,
        }
    }
}

impl AttackCostParams {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.length == 0 {
            return Err(AttackError::BadLength);
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AttackError::BadAlpha(self.alpha));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent < 1.0) {
            return Err(AttackError::BadZipfExponent(self.zipf_exponent));
        }
        if !(self.total_ngrams.is_finite() && self.total_ngrams >= 1.0) {
            return Err(AttackError::BadTotal(self.total_ngrams));
        }
        Ok(())
    }
}

/// The analysis chain, one figure per link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AttackCostReport {
    pub params: AttackCostParams,
    pub z_alpha: f64,
    /// Normal-approximation green-rate threshold.
    pub required_green_rate: f64,
    /// Exact-binomial counterpart, for comparison only.
    pub exact_green_rate: Option<f64>,
    pub required_hit_rate: f64,
    pub cache_entries: f64,
    pub cache_entries_simplified: f64,
    pub storage_bytes: f64,
}

pub fn attack_cost(params: &AttackCostParams) -> Result<AttackCostReport, AttackError> {
    params.validate()?;
    let p_hit = required_hit_rate(params.length, params.alpha, params.gamma);
    let entries = zipf_cache_size(p_hit, params.zipf_exponent, params.total_ngrams);
    Ok(AttackCostReport {
        params: *params,
        z_alpha: z_alpha(params.alpha),
        required_green_rate: required_green_rate(params.length, params.alpha, params.gamma),
        exact_green_rate: exact_required_green_rate(params.length, params.alpha, params.gamma),
        required_hit_rate: p_hit,
        cache_entries: entries,
        cache_entries_simplified: zipf_cache_size_simplified(
            p_hit,
            params.zipf_exponent,
            params.total_ngrams,
        ),
        storage_bytes: storage_bound(entries, params.bytes_per_entry),
    })
}

impl AttackCostReport {
    pub fn to_text(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        out.push_str(&format!(
            "attack cost for L = {}, alpha = {:.3e}, gamma = {}/{}\n",
            p.length,
            p.alpha,
            p.gamma.num(),
            p.gamma.den()
        ));
        out.push_str(&format!("  z_alpha                  {:.6}\n", self.z_alpha));
        out.push_str(&format!(
            "  required green rate      {:.4} (normal approx)\n",
            self.required_green_rate
        ));
        match self.exact_green_rate {
            Some(r) => out.push_str(&format!(
                "  required green rate      {r:.4} (exact binomial)\n"
            )),
            None => out.push_str("  required green rate      unreachable (exact binomial)\n"),
        }
        out.push_str(&format!(
            "  required cache hit rate  {:.4} ({:.2}%)\n",
            self.required_hit_rate,
            100.0 * self.required_hit_rate
        ));
        out.push_str(&format!(
            "  cache entries            {:.4e} (zipf s = {}, M = {:.2e})\n",
            self.cache_entries, p.zipf_exponent, p.total_ngrams
        ));
        out.push_str(&format!(
            "  cache entries            {:.4e} (simplified form)\n",
            self.cache_entries_simplified
        ));
        out.push_str(&format!(
            "  storage at {} B/entry    {}\n",
            p.bytes_per_entry,
            format_bytes(self.storage_bytes)
        ));
        out
    }
}

/// Green (context, token) pairs harvested from watermarked text, keyed by
/// context. Token lists stay sorted and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreenCache {
    h: u16,
    map: HashMap<Vec<u32>, Vec<u32>>,
    observed: u64,
}

impl GreenCache {
    pub fn new(h: u16) -> Self {
        GreenCache {
            h,
            map: HashMap::new(),
            observed: 0,
        }
    }

    pub fn h(&self) -> u16 {
        self.h
    }

    /// Records `count` observations of a verified-green pair.
    fn insert(&mut self, context: &[u32], token: u32, count: u64) {
        assert_eq!(context.len(), self.h as usize, "context length mismatch");
        self.observed += count;
        let tokens = self.map.entry(context.to_vec()).or_default();
        if let Err(pos) = tokens.binary_search(&token) {
            tokens.insert(pos, token);
        }
    }

    pub fn green_tokens(&self, context: &[u32]) -> &[u32] {
        self.map.get(context).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, context: &[u32]) -> bool {
        self.map.contains_key(context)
    }

    pub fn contexts(&self) -> usize {
        self.map.len()
    }

    /// Distinct green pairs stored.
    pub fn unique_pairs(&self) -> u64 {
        self.map.values().map(|v| v.len() as u64).sum()
    }

    /// Green pair observations in the corpus, duplicates included.
    pub fn observed_pairs(&self) -> u64 {
        self.observed
    }

    pub fn merge(mut self, other: GreenCache) -> GreenCache {
        assert_eq!(self.h, other.h, "caches for different context lengths");
        self.observed += other.observed;
        for (context, tokens) in other.map {
            match self.map.entry(context) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(tokens);
                }
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let merged = e.get_mut();
                    for t in tokens {
                        if let Err(pos) = merged.binary_search(&t) {
                            merged.insert(pos, t);
                        }
                    }
                }
            }
        }
        self
    }

    /// Writes the cache as a sorted flat file: a fixed header, then one
    /// record per context in ascending context order. Byte-for-byte
    /// reproducible for a given cache content.
    pub fn save(&self, path: &Path) -> Result<(), AttackError> {
        let file = File::create(path).map_err(|e| AttackError::CacheFile(e.to_string()))?;
        let mut w = BufWriter::new(file);
        let mut contexts: Vec<&Vec<u32>> = self.map.keys().collect();
        contexts.sort();
        (|| -> std::io::Result<()> {
            w.write_all(b"VOWC")?;
            w.write_all(&[1u8])?;
            w.write_all(&self.h.to_be_bytes())?;
            w.write_all(&(contexts.len() as u64).to_be_bytes())?;
            w.write_all(&self.observed.to_be_bytes())?;
            for context in contexts {
                for id in context {
                    w.write_all(&id.to_be_bytes())?;
                }
                let tokens = &self.map[context];
                w.write_all(&(tokens.len() as u32).to_be_bytes())?;
                for t in tokens {
                    w.write_all(&t.to_be_bytes())?;
                }
            }
            w.flush()
        })()
        .map_err(|e| AttackError::CacheFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<GreenCache, AttackError> {
        let file = File::open(path).map_err(|e| AttackError::CacheFile(e.to_string()))?;
        let mut r = BufReader::new(file);
        let bad = |what: &str| AttackError::CacheFile(format!("bad cache file: {what}"));

        let mut header = [0u8; 23];
        r.read_exact(&mut header)
            .map_err(|e| AttackError::CacheFile(e.to_string()))?;
        if &header[..4] != b"VOWC" {
            return Err(bad("magic"));
        }
        if header[4] != 1 {
            return Err(bad("version"));
        }
        let h = u16::from_be_bytes(header[5..7].try_into().unwrap());
        let n_contexts = u64::from_be_bytes(header[7..15].try_into().unwrap());
        let observed = u64::from_be_bytes(header[15..23].try_into().unwrap());

        let read_u32 = |r: &mut BufReader<File>| -> Result<u32, AttackError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| AttackError::CacheFile(e.to_string()))?;
            Ok(u32::from_be_bytes(b))
        };
        let mut map = HashMap::with_capacity(n_contexts as usize);
        for _ in 0..n_contexts {
            let mut context = Vec::with_capacity(h as usize);
            for _ in 0..h {
                context.push(read_u32(&mut r)?);
            }
            let count = read_u32(&mut r)? as usize;
            let mut tokens = Vec::with_capacity(count);
            for _ in 0..count {
                tokens.push(read_u32(&mut r)?);
            }
            if tokens.windows(2).any(|w| w[0] >= w[1]) {
                return Err(bad("token list not strictly sorted"));
            }
            if map.insert(context, tokens).is_some() {
                return Err(bad("duplicate context"));
            }
        }
        let mut trailer = [0u8; 1];
        if r.read(&mut trailer)
            .map_err(|e| AttackError::CacheFile(e.to_string()))?
            != 0
        {
            return Err(bad("trailing bytes"));
        }
        Ok(GreenCache { h, map, observed })
    }
}

/// Harvests every green (context, token) pair occurring in the corpus.
/// The oracle answers color queries; with key access that is
/// [`is_green_local`], without it a detection-protocol round per pair.
/// Documents are processed in parallel and merged.
pub fn build_cache<F>(corpus: &[Vec<u32>], h: u16, oracle: F) -> GreenCache
where
    F: Fn(&[u32], u32) -> bool + Sync,
{
    corpus
        .par_iter()
        .map(|doc| {
            let mut local = GreenCache::new(h);
            if doc.len() < h as usize + 1 {
                return local;
            }
            let mut occurrences: HashMap<(&[u32], u32), u64> = HashMap::new();
            for window in doc.windows(h as usize + 1) {
                let context = &window[..h as usize];
                let token = window[h as usize];
                *occurrences.entry((context, token)).or_insert(0) += 1;
            }
            for ((context, token), count) in occurrences {
                if oracle(context, token) {
                    local.insert(context, token, count);
                }
            }
            local
        })
        .reduce(|| GreenCache::new(h), GreenCache::merge)
}

/// What the forger consults for green tokens at each step. The honest
/// threat model is a [`GreenCache`]; [`FullKnowledge`] is the cheating
/// upper bound with direct key access.
pub trait GreenSource: Sync {
    /// Context length the source answers for.
    fn context_len(&self) -> u16;
    /// Green token IDs believed green for this context; empty when the
    /// source knows nothing about it.
    fn green_tokens(&self, context: &[u32]) -> Vec<u32>;
    /// Whether the source has information for this context.
    fn knows(&self, context: &[u32]) -> bool;
}

impl GreenSource for GreenCache {
    fn context_len(&self) -> u16 {
        self.h
    }

    fn green_tokens(&self, context: &[u32]) -> Vec<u32> {
        GreenCache::green_tokens(self, context).to_vec()
    }

    fn knows(&self, context: &[u32]) -> bool {
        self.contains(context)
    }
}

/// Sanity ceiling for the forgery: colors every token with the real key.
pub struct FullKnowledge<'a> {
    pub sk: &'a SecretKey,
    pub params: &'a WatermarkParams,
    pub vocab_size: u32,
}

impl GreenSource for FullKnowledge<'_> {
    fn context_len(&self) -> u16 {
        self.params.h
    }

    fn green_tokens(&self, context: &[u32]) -> Vec<u32> {
        (0..self.vocab_size)
            .filter(|&t| {
                is_green_local(self.sk, self.params, context, t)
                    .expect("context length fixed by caller")
                    .is_green
            })
            .collect()
    }

    fn knows(&self, _context: &[u32]) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ForgeConfig {
    /// Logit boost applied to cached green tokens.
    pub delta_prime: f64,
    /// Tokens per forged text.
    pub length: usize,
    /// Level the forgery is judged at; attack evaluations usually relax
    /// this to 1e-2 to give the attacker every advantage.
    pub alpha: f64,
    pub trials: usize,
}

impl ForgeConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if !(self.delta_prime.is_finite() && self.delta_prime >= 0.0) {
            return Err(AttackError::BadBoost(self.delta_prime));
        }
        if self.length == 0 {
            return Err(AttackError::BadLength);
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AttackError::BadAlpha(self.alpha));
        }
        if self.trials == 0 {
            return Err(AttackError::BadTrials);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForgeReport {
    pub trials: usize,
    pub successes: usize,
    /// Attack success rate: fraction of forgeries with p < alpha.
    pub asr: f64,
    /// 25th, 50th and 75th percentile of the p-value distribution.
    pub p_quartiles: [f64; 3],
    /// Mean fraction of generation steps whose context the source knew.
    pub mean_hit_rate: f64,
}

impl ForgeReport {
    pub fn to_text(&self) -> String {
        format!(
            "forgery: {}/{} trials passed (ASR {:.3}), p quartiles {:.4} / {:.4} / {:.4}, cache hit rate {:.4}\n",
            self.successes,
            self.trials,
            self.asr,
            self.p_quartiles[0],
            self.p_quartiles[1],
            self.p_quartiles[2],
            self.mean_hit_rate
        )
    }
}

/// Runs the logit-boost forgery: sample from the model with every token
/// the source calls green boosted by delta_prime, then submit each forged
/// text to the honest detector. `detect` maps a token sequence to its
/// p-value; it holds no attacker secrets. Trials run in parallel,
/// deterministically in `seed`.
pub fn forge<S, F>(
    model: &SyntheticModel,
    source: &S,
    config: &ForgeConfig,
    detect: F,
    seed: u64,
) -> Result<ForgeReport, AttackError>
where
    S: GreenSource,
    F: Fn(&[u32]) -> f64 + Sync,
{
    config.validate()?;
    let h = source.context_len() as usize;
    let bos = model.vocab().bos();

    let results: Vec<(f64, f64)> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (trial as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15));
            let mut tokens: Vec<u32> = Vec::with_capacity(config.length);
            let mut hits = 0u64;
            for _ in 0..config.length {
                let ctx = context_window(&tokens, h, bos);
                let mut scores = model.logits(&ctx).scores().to_vec();
                if source.knows(&ctx) {
                    hits += 1;
                    for t in source.green_tokens(&ctx) {
                        if let Some(s) = scores.get_mut(t as usize) {
                            *s += config.delta_prime;
                        }
                    }
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|l| (l - max).exp()).collect();
                let dist = WeightedIndex::new(&weights).expect("finite logits");
                tokens.push(dist.sample(&mut rng) as u32);
            }
            let p = detect(&tokens);
            (p, hits as f64 / config.length as f64)
        })
        .collect();

    let successes = results.iter().filter(|(p, _)| *p < config.alpha).count();
    let mut p_values: Vec<f64> = results.iter().map(|(p, _)| *p).collect();
    p_values.sort_by(|a, b| a.partial_cmp(b).expect("p-values are finite"));
    Ok(ForgeReport {
        trials: config.trials,
        successes,
        asr: successes as f64 / config.trials as f64,
        p_quartiles: [
            percentile(&p_values, 0.25),
            percentile(&p_values, 0.50),
            percentile(&p_values, 0.75),
        ],
        mean_hit_rate: results.iter().map(|(_, h)| h).sum::<f64>() / config.trials as f64,
    })
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
