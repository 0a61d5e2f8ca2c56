//! Green counting over deduplicated n-grams and the exact one-sided
//! binomial test.
//!
//! Detection never approximates: the p-value is the exact binomial tail
//! Pr(X >= g) under the null, computed through the regularized incomplete
//! beta function. Normal approximations drift by orders of magnitude at the
//! operating points that matter (alpha near 1e-5), which is why they are
//! deliberately absent here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;
use crate::watermark::{encode_ngram, GreenRatio, NGramRecord, WatermarkParams};

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("need at least {needed} tokens for h = {h}, got {got}")]
    InsufficientTokens { needed: usize, got: usize, h: u16 },
    #[error("green count {g} exceeds unique n-gram count {n}")]
    GreenExceedsTotal { g: u64, n: u64 },
    #[error("the test needs at least one unique n-gram")]
    EmptyTest,
    #[error("malformed report file: {0}")]
    ReportFile(String),
}

/// Final verdict of one detection run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Watermarked,
    NotWatermarked,
    /// Proof verification failed; no statistical claim is made either way.
    Unverified,
}

/// `watermarked` requires both a verified transcript and a p-value under
/// the threshold. A failed proof always yields `Unverified`, whatever the
/// green count says: an unproven transcript supports no conclusion.
pub fn decide(verified: bool, p_value: f64, alpha: f64) -> Outcome {
    if !verified {
        Outcome::Unverified
    } else if p_value < alpha {
        Outcome::Watermarked
    } else {
        Outcome::NotWatermarked
    }
}

/// Slide an (h+1)-token window over the sequence and keep the first
/// occurrence of each distinct n-gram, keyed on the exact byte encoding.
/// Order of first appearance is preserved.
pub fn dedup_ngrams(tokens: &[u32], h: u16) -> Result<Vec<NGramRecord>, DetectorError> {
    let needed = h as usize + 1;
    if tokens.len() < needed {
        return Err(DetectorError::InsufficientTokens {
            needed,
            got: tokens.len(),
            h,
        });
    }
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::new();
    for window in tokens.windows(needed) {
        let (context, token) = (&window[..h as usize], window[h as usize]);
        let encoded = encode_ngram(context, token, h).expect("window length matches h");
        if seen.insert(encoded.clone()) {
            records.push(NGramRecord {
                context: context.to_vec(),
                token,
                encoded,
            });
        }
    }
    Ok(records)
}

/// Pr(X >= g) for X ~ Binomial(n, gamma), the exact p-value of observing
/// g green among n unique n-grams under the null hypothesis that the text
/// is not watermarked.
///
/// The logs of gamma and 1-gamma are taken from the integer ratio rather
/// than the rounded float, so the tail stays accurate for skewed ratios.
pub fn binom_sf_exact(g: u64, n: u64, gamma: GreenRatio) -> Result<f64, DetectorError> {
    if n == 0 {
        return Err(DetectorError::EmptyTest);
    }
    if g > n {
        return Err(DetectorError::GreenExceedsTotal { g, n });
    }
    let p = gamma.as_f64();
    let ln_p = (gamma.num() as f64).ln() - (gamma.den() as f64).ln();
    let ln_1mp = ((gamma.den() - gamma.num()) as f64).ln() - (gamma.den() as f64).ln();
    Ok(stats::binom_sf_ln(g, n, p, ln_p, ln_1mp))
}

/// Everything a third party needs to audit one detection run: the counts,
/// the exact p-value, the parameters in force, whether the server's proof
/// checked out, and the hash binding this report to a protocol transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n_unique: u64,
    pub g_green: u64,
    pub p_value: f64,
    #[serde(rename = "alpha")]
    pub threshold_alpha: f64,
    pub verified: bool,
    /// Hex SHA-256 over the request and response frames of the session
    /// that produced the colors.
    pub transcript_hash: String,
    pub params: WatermarkParams,
}

impl DetectionReport {
    pub fn outcome(&self) -> Outcome {
        decide(self.verified, self.p_value, self.threshold_alpha)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, DetectorError> {
        let report: DetectionReport =
            toml::from_str(text).map_err(|e| DetectorError::ReportFile(e.to_string()))?;
        if report.g_green > report.n_unique {
            return Err(DetectorError::ReportFile(format!(
                "g_green = {} exceeds n_unique = {}",
                report.g_green, report.n_unique
            )));
        }
        Ok(report)
    }
}
