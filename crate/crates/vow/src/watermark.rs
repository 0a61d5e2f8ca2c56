//! The green/red vocabulary partition.
//!
//! A token `t` after context `c` is *green* when the integer formed by the
//! leading `int_width` bits of the PRF output on the encoded n-gram falls
//! below `floor(gamma * 2^int_width)`. The key holder evaluates the PRF
//! directly; a detecting client reaches the same verdict through the
//! oblivious protocol and [`color_from_output`], so both sides agree on
//! every (context, token) pair.

use crate::voprf::{evaluate, PrfOutput, SecretKey};
use serde::{Deserialize, Serialize};

/// Leading bytes of every encoded n-gram.
pub const NGRAM_MAGIC: &[u8; 7] = b"VOW-NG1";

/// Reserved token ID used to left-pad contexts shorter than `h`. One past
/// the last real vocabulary ID.
pub fn bos_token(vocab_size: u32) -> u32 {
    vocab_size
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WatermarkError {
    #[error("gamma must satisfy 0 < num/den < 1, got {0}/{1}")]
    GammaOutOfRange(u64, u64),
    #[error("gamma does not parse as NUM/DEN: {0}")]
    GammaParse(String),
    #[error("delta must be finite and >= 0, got {0}")]
    BadDelta(f64),
    #[error("context length h must be >= 1")]
    BadContextLength,
    #[error("int_width must be in 1..=64, got {0}")]
    BadIntWidth(u32),
    #[error("context has {0} tokens, params say h = {1}")]
    WrongContextLength(usize, u16),
    #[error("params file: {0}")]
    ParamsFile(String),
}

/// The green-list fraction as an exact ratio of integers. Floats here would
/// make the green/red boundary platform-dependent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GreenRatio {
    num: u64,
    den: u64,
}

impl GreenRatio {
    pub const HALF: GreenRatio = GreenRatio { num: 1, den: 2 };

    pub fn new(num: u64, den: u64) -> Result<Self, WatermarkError> {
        if den == 0 || num == 0 || num >= den {
            return Err(WatermarkError::GammaOutOfRange(num, den));
        }
        Ok(GreenRatio { num, den })
    }

    /// Boundary ratios (0 and 1) for exercising degenerate configurations.
    #[cfg(test)]
    pub(crate) fn new_unchecked(num: u64, den: u64) -> Self {
        GreenRatio { num, den }
    }

    /// Parses `"NUM/DEN"`.
    pub fn parse(s: &str) -> Result<Self, WatermarkError> {
        let (num, den) = s
            .split_once('/')
            .ok_or_else(|| WatermarkError::GammaParse(s.to_string()))?;
        let num: u64 = num
            .trim()
            .parse()
            .map_err(|_| WatermarkError::GammaParse(s.to_string()))?;
        let den: u64 = den
            .trim()
            .parse()
            .map_err(|_| WatermarkError::GammaParse(s.to_string()))?;
        GreenRatio::new(num, den)
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(gamma * 2^width)`. Exact: the product fits u128 for any u64
    /// ratio and width <= 64.
    pub fn threshold(&self, width: u32) -> u128 {
        debug_assert!((1..=64).contains(&width));
        ((self.num as u128) << width) / self.den as u128
    }
}

impl std::fmt::Display for GreenRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl TryFrom<String> for GreenRatio {
    type Error = WatermarkError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        GreenRatio::parse(&s)
    }
}

impl From<GreenRatio> for String {
    fn from(g: GreenRatio) -> String {
        g.to_string()
    }
}

/// Watermarking parameters shared by insertion and detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkParams {
    /// Context length in tokens.
    pub h: u16,
    /// Green-list fraction.
    pub gamma: GreenRatio,
    /// Logit bias added to green tokens. Zero means no watermark; useful
    /// for null runs and calibration.
    pub delta: f64,
    /// How many leading bits of the PRF output the color comparison reads.
    pub int_width: u32,
}

impl Default for WatermarkParams {
    fn default() -> Self {
        WatermarkParams {
            h: 4,
            gamma: GreenRatio::HALF,
            delta: 2.5,
            int_width: 64,
        }
    }
}

impl WatermarkParams {
    pub fn new(h: u16, gamma: GreenRatio, delta: f64, int_width: u32) -> Result<Self, WatermarkError> {
        if h == 0 {
            return Err(WatermarkError::BadContextLength);
        }
        if !delta.is_finite() || delta < 0.0 {
            return Err(WatermarkError::BadDelta(delta));
        }
        if !(1..=64).contains(&int_width) {
            return Err(WatermarkError::BadIntWidth(int_width));
        }
        Ok(WatermarkParams {
            h,
            gamma,
            delta,
            int_width,
        })
    }

    /// Key-value text rendering, embedded in detection reports.
    pub fn to_text(&self) -> String {
        format!(
            "h = {}\ngamma = \"{}\"\ndelta = {}\nint_width = {}\n",
            self.h, self.gamma, self.delta, self.int_width
        )
    }

    pub fn from_text(text: &str) -> Result<Self, WatermarkError> {
        #[derive(Deserialize)]
        struct Raw {
            h: u16,
            gamma: GreenRatio,
            delta: f64,
            int_width: u32,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| WatermarkError::ParamsFile(e.to_string()))?;
        WatermarkParams::new(raw.h, raw.gamma, raw.delta, raw.int_width)
    }
}

/// One (context, token) pair with its wire encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramRecord {
    pub context: Vec<u32>,
    pub token: u32,
    pub encoded: Vec<u8>,
}

/// Exact length of an encoded n-gram for a given context length.
pub fn encoded_len(h: u16) -> usize {
    NGRAM_MAGIC.len() + 2 + 4 * (h as usize + 1)
}

/// Byte layout of `context || token`:
/// ASCII "VOW-NG1", then `h` as 2-byte big-endian, then each token ID as
/// 4-byte big-endian, context first, candidate last. Injective because
/// every field is fixed-width and `h` pins the context length.
pub fn encode_ngram(context: &[u32], token: u32, h: u16) -> Result<Vec<u8>, WatermarkError> {
    if context.len() != h as usize {
        return Err(WatermarkError::WrongContextLength(context.len(), h));
    }
    let mut out = Vec::with_capacity(encoded_len(h));
    out.extend_from_slice(NGRAM_MAGIC);
    out.extend_from_slice(&h.to_be_bytes());
    for id in context {
        out.extend_from_slice(&id.to_be_bytes());
    }
    out.extend_from_slice(&token.to_be_bytes());
    Ok(out)
}

pub fn ngram_record(context: &[u32], token: u32, h: u16) -> Result<NGramRecord, WatermarkError> {
    Ok(NGramRecord {
        context: context.to_vec(),
        token,
        encoded: encode_ngram(context, token, h)?,
    })
}

/// A color decision together with the PRF prefix it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColorVerdict {
    pub prf_prefix: u64,
    pub is_green: bool,
}

/// Turns a PRF output into a color: read the first `int_width` bits
/// big-endian as an integer and compare against the exact threshold. Used
/// by the key holder and by detecting clients alike.
pub fn color_from_output(output: &PrfOutput, params: &WatermarkParams) -> ColorVerdict {
    let word = u64::from_be_bytes(output[..8].try_into().unwrap());
    let prf_prefix = word >> (64 - params.int_width);
    ColorVerdict {
        prf_prefix,
        is_green: (prf_prefix as u128) < params.gamma.threshold(params.int_width),
    }
}

/// Local (key-holder) color evaluation of one n-gram.
pub fn is_green_local(
    sk: &SecretKey,
    params: &WatermarkParams,
    context: &[u32],
    token: u32,
) -> Result<ColorVerdict, WatermarkError> {
    let encoded = encode_ngram(context, token, params.h)?;
    Ok(color_from_output(&evaluate(sk, &encoded), params))
}

/// `l~_i = l_i + delta` for green `i`, other entries unchanged. The input
/// is not mutated.
pub fn apply_bias(logits: &[f64], greens: &std::collections::HashSet<u32>, delta: f64) -> Vec<f64> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if greens.contains(&(i as u32)) {
                l + delta
            } else {
                l
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voprf::KeyPair;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    #[test]
    fn encode_matches_spec_layout() {
        let bytes = encode_ngram(&[0], 0, 1).unwrap();
        assert_eq!(
            bytes,
            [
                0x56, 0x4f, 0x57, 0x2d, 0x4e, 0x47, 0x31, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00,
                0x00, 0x00, 0x00, 0x00
            ]
        );
    }

    #[test]
    fn encode_length_is_fixed() {
        let bytes = encode_ngram(&[1, 2, 3, 4], 5, 4).unwrap();
        assert_eq!(bytes.len(), 29);
        assert_eq!(encoded_len(4), 29);
    }

    #[test]
    fn encode_rejects_wrong_context_length() {
        assert_eq!(
            encode_ngram(&[1, 2], 9, 4).unwrap_err(),
            WatermarkError::WrongContextLength(2, 4)
        );
    }

    #[test]
    fn encodings_are_injective() {
        let mut rng = StdRng::seed_from_u64(31);
        let mut seen = HashSet::with_capacity(1_000_000);
        let mut pairs = HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000u32 {
            let context = [rng.gen::<u32>(), rng.gen::<u32>()];
            let token = rng.gen::<u32>();
            let fresh_pair = pairs.insert((context, token));
            let fresh_encoding = seen.insert(encode_ngram(&context, token, 2).unwrap());
            assert_eq!(fresh_pair, fresh_encoding);
        }
    }

    #[test]
    fn gamma_validation_and_parse() {
        assert!(GreenRatio::new(1, 2).is_ok());
        assert!(GreenRatio::new(0, 2).is_err());
        assert!(GreenRatio::new(2, 2).is_err());
        assert!(GreenRatio::new(3, 2).is_err());
        assert!(GreenRatio::new(1, 0).is_err());
        assert_eq!(GreenRatio::parse("1/4").unwrap(), GreenRatio::new(1, 4).unwrap());
        assert!(GreenRatio::parse("0.5").is_err());
        assert_eq!(GreenRatio::parse("1/2").unwrap().to_string(), "1/2");
    }

    #[test]
    fn threshold_is_exact() {
        assert_eq!(GreenRatio::HALF.threshold(64), 1u128 << 63);
        assert_eq!(GreenRatio::new(1, 4).unwrap().threshold(64), 1u128 << 62);
        assert_eq!(GreenRatio::new(1, 3).unwrap().threshold(2), 1);
        assert_eq!(GreenRatio::new(1, 2).unwrap().threshold(1), 1);
        // Boundaries used by the tests below.
        assert_eq!(GreenRatio::new_unchecked(0, 1).threshold(64), 0);
        assert_eq!(GreenRatio::new_unchecked(1, 1).threshold(64), 1u128 << 64);
    }

    #[test]
    fn params_validation() {
        let gamma = GreenRatio::HALF;
        assert!(WatermarkParams::new(4, gamma, 2.5, 64).is_ok());
        assert!(WatermarkParams::new(4, gamma, 0.0, 64).is_ok());
        assert!(WatermarkParams::new(0, gamma, 2.5, 64).is_err());
        assert!(WatermarkParams::new(4, gamma, -1.0, 64).is_err());
        assert!(WatermarkParams::new(4, gamma, f64::NAN, 64).is_err());
        assert!(WatermarkParams::new(4, gamma, 2.5, 0).is_err());
        assert!(WatermarkParams::new(4, gamma, 2.5, 65).is_err());
    }

    #[test]
    fn params_text_roundtrip() {
        let params = WatermarkParams::new(4, GreenRatio::new(1, 4).unwrap(), 1.5, 48).unwrap();
        let text = params.to_text();
        assert_eq!(WatermarkParams::from_text(&text).unwrap(), params);
    }

    #[test]
    fn boundary_gammas() {
        let mut rng = StdRng::seed_from_u64(32);
        let kp = KeyPair::generate(&mut rng);
        let mut always = WatermarkParams::default();
        always.gamma = GreenRatio::new_unchecked(1, 1);
        let mut never = WatermarkParams::default();
        never.gamma = GreenRatio::new_unchecked(0, 1);
        for token in 0..256u32 {
            let context = [1, 2, 3, 4];
            assert!(is_green_local(&kp.secret, &always, &context, token).unwrap().is_green);
            assert!(!is_green_local(&kp.secret, &never, &context, token).unwrap().is_green);
        }
    }

    #[test]
    fn green_fraction_concentrates_at_gamma() {
        // 10^6 random n-grams at gamma = 1/2: fraction within 3 sigma,
        // sigma = 0.0005.
        let mut rng = StdRng::seed_from_u64(33);
        let kp = KeyPair::generate(&mut rng);
        let params = WatermarkParams::default();
        let mut greens = 0u64;
        let total = 1_000_000u64;
        for i in 0..total {
            let context = [(i >> 32) as u32, i as u32, 77, 78];
            let verdict = is_green_local(&kp.secret, &params, &context, 5).unwrap();
            if verdict.is_green {
                greens += 1;
            }
        }
        let fraction = greens as f64 / total as f64;
        assert!(
            (fraction - 0.5).abs() < 3.0 * 0.0005,
            "green fraction {fraction} strays from 1/2"
        );
    }

    #[test]
    fn is_green_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(34);
        let kp = KeyPair::generate(&mut rng);
        let params = WatermarkParams::default();
        let a = is_green_local(&kp.secret, &params, &[9, 8, 7, 6], 123).unwrap();
        let b = is_green_local(&kp.secret, &params, &[9, 8, 7, 6], 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn narrower_int_width_reads_prefix() {
        let mut rng = StdRng::seed_from_u64(35);
        let kp = KeyPair::generate(&mut rng);
        let narrow = WatermarkParams::new(4, GreenRatio::HALF, 2.5, 8).unwrap();
        let wide = WatermarkParams::default();
        for token in 0..64u32 {
            let context = [4, 3, 2, 1];
            let n = is_green_local(&kp.secret, &narrow, &context, token).unwrap();
            let w = is_green_local(&kp.secret, &wide, &context, token).unwrap();
            assert_eq!(n.prf_prefix, w.prf_prefix >> 56);
            // At gamma = 1/2 both verdicts reduce to the top bit.
            assert_eq!(n.is_green, w.is_green);
        }
    }

    #[test]
    fn apply_bias_spec_example() {
        let greens: HashSet<u32> = [0].into_iter().collect();
        assert_eq!(apply_bias(&[1.0, 2.0], &greens, 2.5), vec![3.5, 2.0]);
        assert_eq!(apply_bias(&[1.0, 2.0], &greens, 0.0), vec![1.0, 2.0]);
        assert_eq!(apply_bias(&[1.0, 2.0], &HashSet::new(), 2.5), vec![1.0, 2.0]);
    }

    #[test]
    fn bos_is_reserved_and_encodable() {
        let bos = bos_token(10_000);
        assert_eq!(bos, 10_000);
        let mut rng = StdRng::seed_from_u64(36);
        let kp = KeyPair::generate(&mut rng);
        let params = WatermarkParams::default();
        is_green_local(&kp.secret, &params, &[bos, bos, bos, 1], 2).unwrap();
    }
}
