//! Watermarked sampling without full-vocabulary PRF scans.
//!
//! Two strategies, one per decoding mode. Multinomial decoding uses
//! rejection sampling with the unwatermarked distribution as proposal:
//! accept green tokens always, red ones with probability exp(-delta), which
//! lands exactly on the biased softmax without ever touching tokens that
//! were not drawn. Top-k decoding runs an adaptive sieve: only tokens whose
//! raw logit clears `l_kth - delta` can possibly enter the biased top-k, and
//! a min-heap plus early exit keeps the number of color evaluations near 2k
//! instead of N.
//!
//! The color oracle is a closure over token IDs with the context already
//! bound by the caller, so the same samplers serve local generation with
//! the secret key and cache-backed forgery experiments.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::watermark::WatermarkParams;

/// Proposal draws before the sampler declares the configuration broken.
/// Expected trials are bounded by exp(delta), so hitting this means delta
/// or the oracle is badly wrong, not bad luck.
const TRIAL_CAP: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("logit at index {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("empty logit vector")]
    EmptyLogits,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("k = {k} out of range for vocabulary of {n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("top-p must lie in (0, 1], got {0}")]
    BadTopP(f64),
}

/// Raw model logits for one decoding step.
///
/// Bias is always added to the raw scores; the optional temperature only
/// enters when scores are turned into probabilities. That order matches the
/// definition of the watermarked distribution and keeps the top-k set
/// independent of temperature.
#[derive(Debug, Clone)]
pub struct LogitVector {
    scores: Vec<f64>,
    temperature: Option<f64>,
}

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self, SamplerError> {
        if scores.is_empty() {
            return Err(SamplerError::EmptyLogits);
        }
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(SamplerError::NonFiniteLogit(i));
            }
        }
        Ok(Self {
            scores,
            temperature: None,
        })
    }

    pub fn with_temperature(mut self, t: f64) -> Result<Self, SamplerError> {
        if !(t.is_finite() && t > 0.0) {
            return Err(SamplerError::BadTemperature(t));
        }
        self.temperature = Some(t);
        Ok(self)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// The one preference order used everywhere a top-k set is formed: higher
/// value first, ties broken by ascending token ID. Returns `Less` when
/// `(va, ia)` is preferred, so sorting with this puts the best entry first.
fn cmp_desc(va: f64, ia: u32, vb: f64, ib: u32) -> Ordering {
    vb.partial_cmp(&va)
        .expect("logits are validated finite")
        .then(ia.cmp(&ib))
}

/// All token IDs ordered best-first under the shared preference order.
/// Exposed so that any reference implementation (tests, the brute-force
/// oracle) resolves ties exactly like the sieve does.
pub fn tie_break_topk(logits: &LogitVector) -> Vec<u32> {
    let scores = logits.scores();
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_unstable_by(|&a, &b| cmp_desc(scores[a as usize], a, scores[b as usize], b));
    ids
}

/// Min-heap entry; `Ord` is "worse first" so `BinaryHeap::peek` surfaces
/// the weakest of the kept k.
struct HeapEntry {
    value: f64,
    id: u32,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_desc(self.value, self.id, other.value, other.id)
    }
}

/// Sample from q(t) proportional to p(t) * exp(delta * 1[t green]) by
/// rejection against the unwatermarked proposal p. Returns the token and
/// the number of proposal draws it took.
///
/// With a temperature T the target is the biased softmax at temperature T,
/// so the red acceptance probability becomes exp(-delta / T).
pub fn sample_multinomial_rejection<O, R>(
    logits: &LogitVector,
    params: &WatermarkParams,
    mut color_oracle: O,
    rng: &mut R,
) -> (u32, u64)
where
    O: FnMut(u32) -> bool,
    R: Rng + ?Sized,
{
    let t = logits.temperature().unwrap_or(1.0);
    let weights = proposal_weights(logits.scores(), t);
    let proposal = WeightedIndex::new(&weights).expect("validated logits give usable weights");
    if params.delta == 0.0 {
        return (proposal.sample(rng) as u32, 1);
    }
    let keep_red = (-params.delta / t).exp();
    for trial in 1..=TRIAL_CAP {
        let candidate = proposal.sample(rng) as u32;
        if color_oracle(candidate) || rng.gen::<f64>() < keep_red {
            return (candidate, trial);
        }
    }
    panic!(
        "rejection sampler exceeded {TRIAL_CAP} trials; delta = {} is far outside \
         the intended operating range",
        params.delta
    );
}

/// The biased top-k set, identical to brute force (bias all N logits, take
/// the k best under the shared preference order) but with close to 2k color
/// evaluations instead of N. Returns pairs of (token ID, biased logit),
/// best first, plus the number of oracle calls made.
pub fn select_topk_watermarked<O>(
    logits: &LogitVector,
    k: usize,
    params: &WatermarkParams,
    mut color_oracle: O,
) -> Result<(Vec<(u32, f64)>, u64), SamplerError>
where
    O: FnMut(u32) -> bool,
{
    let scores = logits.scores();
    let n = scores.len();
    if k == 0 || k > n {
        return Err(SamplerError::KOutOfRange { k, n });
    }
    if params.delta == 0.0 {
        return Ok((top_k_unbiased(scores, k), 0));
    }

    let mut idx: Vec<u32> = (0..n as u32).collect();
    let (_, kth, _) = idx.select_nth_unstable_by(k - 1, |&a, &b| {
        cmp_desc(scores[a as usize], a, scores[b as usize], b)
    });
    let l_kth = scores[*kth as usize];
    let cutoff = l_kth - params.delta;

    // Anything below the cutoff cannot reach the biased top-k even if it is
    // green: the k raw leaders already have biased logits >= l_kth. Sorting
    // the survivors best-first makes the early exit below sound.
    let mut candidates: Vec<u32> = (0..n as u32)
        .filter(|&j| scores[j as usize] >= cutoff)
        .collect();
    candidates.sort_unstable_by(|&a, &b| cmp_desc(scores[a as usize], a, scores[b as usize], b));

    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    let mut calls: u64 = 0;
    for &j in &candidates {
        let raw = scores[j as usize];
        if heap.len() == k {
            let worst = heap.peek().expect("heap holds k entries");
            // Best case for this candidate is green. If even that does not
            // displace the current k-th entry, no later candidate can: the
            // list is sorted, so their best cases are weaker still.
            if cmp_desc(raw + params.delta, j, worst.value, worst.id) != Ordering::Less {
                break;
            }
        }
        calls += 1;
        let biased = if color_oracle(j) {
            raw + params.delta
        } else {
            raw
        };
        if heap.len() < k {
            heap.push(HeapEntry { value: biased, id: j });
        } else {
            let displaces = {
                let worst = heap.peek().expect("heap holds k entries");
                cmp_desc(biased, j, worst.value, worst.id) == Ordering::Less
            };
            if displaces {
                heap.pop();
                heap.push(HeapEntry { value: biased, id: j });
            }
        }
    }

    let mut out: Vec<(u32, f64)> = heap.into_iter().map(|e| (e.id, e.value)).collect();
    out.sort_unstable_by(|a, b| cmp_desc(a.1, a.0, b.1, b.0));
    Ok((out, calls))
}

fn top_k_unbiased(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            cmp_desc(scores[a as usize], a, scores[b as usize], b)
        });
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| cmp_desc(scores[a as usize], a, scores[b as usize], b));
    idx.into_iter().map(|j| (j, scores[j as usize])).collect()
}

/// Full top-k decoding step: biased top-k via the sieve, softmax with
/// temperature over that set, optional nucleus truncation, multinomial
/// draw. Returns the token and the sieve's oracle call count.
///
/// An explicit `temperature` overrides the one carried by `logits`; with
/// neither, 1 is used.
pub fn sample_topk<O, R>(
    logits: &LogitVector,
    k: usize,
    top_p: Option<f64>,
    temperature: Option<f64>,
    params: &WatermarkParams,
    color_oracle: O,
    rng: &mut R,
) -> Result<(u32, u64), SamplerError>
where
    O: FnMut(u32) -> bool,
    R: Rng + ?Sized,
{
    if let Some(p) = top_p {
        if !(p.is_finite() && p > 0.0 && p <= 1.0) {
            return Err(SamplerError::BadTopP(p));
        }
    }
    let t = match temperature.or_else(|| logits.temperature()) {
        Some(t) if t.is_finite() && t > 0.0 => t,
        Some(t) => return Err(SamplerError::BadTemperature(t)),
        None => 1.0,
    };
    let (top, calls) = select_topk_watermarked(logits, k, params, color_oracle)?;

    // `top` is best-first, which is also descending probability order, so
    // nucleus truncation is a prefix cut.
    let max = top[0].1;
    let mut probs: Vec<f64> = top.iter().map(|&(_, v)| ((v - max) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    let mut keep = top.len();
    if let Some(p_star) = top_p {
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if acc >= p_star {
                keep = i + 1;
                break;
            }
        }
    }
    let dist = WeightedIndex::new(&probs[..keep]).expect("nucleus keeps at least one token");
    Ok((top[dist.sample(rng)].0, calls))
}

fn proposal_weights(scores: &[f64], t: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|&l| ((l - max) / t).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::watermark::WatermarkParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Keyed half/half token coloring (splitmix64 finalizer); stands in for
    /// the PRF so tests control the green set without curve arithmetic.
    fn test_green(seed: u64, id: u32) -> bool {
        let mut z = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        (z ^ (z >> 31)) & 1 == 0
    }

    fn normalish_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn params_with_delta(delta: f64) -> WatermarkParams {
        WatermarkParams {
            delta,
            ..WatermarkParams::default()
        }
    }

    /// Bias every logit, then take the k best under the shared order.
    fn brute_force_topk(scores: &[f64], k: usize, delta: f64, seed: u64) -> Vec<(u32, f64)> {
        let biased: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if test_green(seed, i as u32) {
                    l + delta
                } else {
                    l
                }
            })
            .collect();
        let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
        ids.sort_unstable_by(|&a, &b| cmp_desc(biased[a as usize], a, biased[b as usize], b));
        ids.truncate(k);
        ids.into_iter().map(|j| (j, biased[j as usize])).collect()
    }

    #[test]
    fn logit_vector_validation() {
        assert_eq!(LogitVector::new(vec![]).unwrap_err(), SamplerError::EmptyLogits);
        assert_eq!(
            LogitVector::new(vec![0.0, f64::NAN]).unwrap_err(),
            SamplerError::NonFiniteLogit(1)
        );
        assert_eq!(
            LogitVector::new(vec![f64::INFINITY]).unwrap_err(),
            SamplerError::NonFiniteLogit(0)
        );
        let v = LogitVector::new(vec![1.0, 2.0]).unwrap();
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                v.clone().with_temperature(bad),
                Err(SamplerError::BadTemperature(_))
            ));
        }
        let v = v.with_temperature(0.7).unwrap();
        assert_eq!(v.temperature(), Some(0.7));
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn zero_delta_accepts_first_draw_without_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = LogitVector::new(normalish_logits(&mut rng, 50, 1.0)).unwrap();
        let params = params_with_delta(0.0);
        for _ in 0..1000 {
            let (_, trials) = sample_multinomial_rejection(
                &logits,
                &params,
                |_| panic!("oracle must not be consulted when delta = 0"),
                &mut rng,
            );
            assert_eq!(trials, 1);
        }
    }

    #[test]
    fn rejection_matches_exact_target_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100usize;
        let scores = normalish_logits(&mut rng, n, 1.0);
        let logits = LogitVector::new(scores.clone()).unwrap();
        let params = params_with_delta(2.5);
        let seed = 7u64;

        // Exact q, computed exhaustively over all 100 tokens.
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p: Vec<f64> = {
            let w: Vec<f64> = scores.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        };
        let q: Vec<f64> = {
            let w: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    if test_green(seed, i as u32) {
                        pi * params.delta.exp()
                    } else {
                        pi
                    }
                })
                .collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        };
        let green_mass: f64 = p
            .iter()
            .enumerate()
            .filter(|(i, _)| test_green(seed, *i as u32))
            .map(|(_, &pi)| pi)
            .sum();

        let draws = 1_000_000u64;
        let mut counts = vec![0u64; n];
        let mut total_trials = 0u64;
        for _ in 0..draws {
            let (tok, trials) =
                sample_multinomial_rejection(&logits, &params, |t| test_green(seed, t), &mut rng);
            counts[tok as usize] += 1;
            total_trials += trials;
        }

        let tv: f64 = counts
            .iter()
            .zip(&q)
            .map(|(&c, &qi)| (c as f64 / draws as f64 - qi).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.005, "TV distance to exact target = {tv}");

        let expected_trials =
            params.delta.exp() / (1.0 + (params.delta.exp() - 1.0) * green_mass);
        let mean_trials = total_trials as f64 / draws as f64;
        assert!(
            (mean_trials - expected_trials).abs() / expected_trials < 0.02,
            "mean trials {mean_trials} vs expected {expected_trials}"
        );
    }

    #[test]
    fn rejection_targets_temperature_adjusted_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20usize;
        let scores = normalish_logits(&mut rng, n, 2.0);
        let t = 0.7;
        let logits = LogitVector::new(scores.clone())
            .unwrap()
            .with_temperature(t)
            .unwrap();
        let params = params_with_delta(2.5);
        let seed = 13u64;

        // Target is softmax((l + delta * green) / T).
        let biased: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if test_green(seed, i as u32) {
                    (l + params.delta) / t
                } else {
                    l / t
                }
            })
            .collect();
        let max = biased.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = biased.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let q: Vec<f64> = w.into_iter().map(|x| x / z).collect();

        let draws = 200_000u64;
        let mut counts = vec![0u64; n];
        for _ in 0..draws {
            let (tok, _) =
                sample_multinomial_rejection(&logits, &params, |tk| test_green(seed, tk), &mut rng);
            counts[tok as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&q)
            .map(|(&c, &qi)| (c as f64 / draws as f64 - qi).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "TV distance at T = {t} is {tv}");
    }

    #[test]
    fn sieve_equals_brute_force_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for &k in &[1usize, 10, 50] {
            for &delta in &[0.5f64, 1.0, 2.5, 4.0] {
                for trial in 0..25 {
                    let mut scores = normalish_logits(&mut rng, 4096, 3.0);
                    if trial % 2 == 1 {
                        // Coarse quantization forces plenty of exact ties.
                        for s in &mut scores {
                            *s = (*s * 2.0).round() / 2.0;
                        }
                    }
                    let seed = rng.gen::<u64>();
                    let logits = LogitVector::new(scores.clone()).unwrap();
                    let params = params_with_delta(delta);
                    let (got, calls) =
                        select_topk_watermarked(&logits, k, &params, |t| test_green(seed, t))
                            .unwrap();
                    let want = brute_force_topk(&scores, k, delta, seed);
                    assert_eq!(got, want, "k={k} delta={delta} trial={trial}");

                    // Completeness: the winners all sit at or above the
                    // cutoff, and the sieve never called outside it.
                    let mut sorted = scores.clone();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    let cutoff = sorted[k - 1] - delta;
                    for &(id, _) in &want {
                        assert!(scores[id as usize] >= cutoff);
                    }
                    let n_candidates =
                        scores.iter().filter(|&&s| s >= cutoff).count() as u64;
                    assert!(calls <= n_candidates);
                }
            }
        }
    }

    #[test]
    fn sieve_zero_delta_needs_no_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = normalish_logits(&mut rng, 1000, 1.0);
        let logits = LogitVector::new(scores.clone()).unwrap();
        let params = params_with_delta(0.0);
        let (got, calls) = select_topk_watermarked(&logits, 10, &params, |_| {
            panic!("oracle must not be consulted when delta = 0")
        })
        .unwrap();
        assert_eq!(calls, 0);
        let want = brute_force_topk(&scores, 10, 0.0, 0);
        assert_eq!(got, want);
    }

    #[test]
    fn ties_resolve_by_ascending_id() {
        // Three equal logits, k = 2: IDs 0 and 1 win.
        let logits = LogitVector::new(vec![5.0, 5.0, 5.0]).unwrap();
        let (got, _) =
            select_topk_watermarked(&logits, 2, &params_with_delta(0.0), |_| false).unwrap();
        assert_eq!(got, vec![(0, 5.0), (1, 5.0)]);

        // Same with every token green: the bias shifts all three equally.
        let params = params_with_delta(2.5);
        let (got, _) = select_topk_watermarked(&logits, 2, &params, |_| true).unwrap();
        assert_eq!(got, vec![(0, 7.5), (1, 7.5)]);

        // A red token at 5 + delta ties a green token at 5 after biasing;
        // the smaller ID wins.
        let delta = 1.25;
        let logits = LogitVector::new(vec![5.0 + delta, 5.0]).unwrap();
        let (got, _) =
            select_topk_watermarked(&logits, 1, &params_with_delta(delta), |t| t == 1).unwrap();
        assert_eq!(got, vec![(0, 5.0 + delta)]);
    }

    #[test]
    fn sieve_handles_massive_duplication() {
        // 10 distinct values, 10 copies each, shuffled deterministically.
        let mut scores = Vec::with_capacity(100);
        for v in 0..10 {
            for _ in 0..10 {
                scores.push(v as f64 * 0.5);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            for i in (1..scores.len()).rev() {
                let j = rng.gen_range(0..=i);
                scores.swap(i, j);
            }
            let seed = rng.gen::<u64>();
            let logits = LogitVector::new(scores.clone()).unwrap();
            let (got, _) =
                select_topk_watermarked(&logits, 7, &params_with_delta(1.5), |t| {
                    test_green(seed, t)
                })
                .unwrap();
            assert_eq!(got, brute_force_topk(&scores, 7, 1.5, seed));
        }
    }

    #[test]
    fn tie_break_topk_orders_all_ids() {
        let logits = LogitVector::new(vec![1.0, 3.0, 3.0, -2.0, 3.0]).unwrap();
        assert_eq!(tie_break_topk(&logits), vec![1, 2, 4, 0, 3]);
    }

    #[test]
    fn sieve_calls_track_twice_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(31415);
        let params = params_with_delta(2.5);
        for &k in &[10usize, 50] {
            let mut total_calls = 0u64;
            let trials = 30;
            for _ in 0..trials {
                let scores = normalish_logits(&mut rng, 10_000, 3.0);
                let seed = rng.gen::<u64>();
                let logits = LogitVector::new(scores).unwrap();
                let (_, calls) =
                    select_topk_watermarked(&logits, k, &params, |t| test_green(seed, t)).unwrap();
                total_calls += calls;
            }
            let ratio = total_calls as f64 / trials as f64 / k as f64;
            assert!(
                (1.5..=2.6).contains(&ratio),
                "mean calls / k = {ratio} for k = {k}"
            );
        }
    }

    #[test]
    fn k_bounds_and_top_p_validated() {
        let logits = LogitVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let params = params_with_delta(1.0);
        assert_eq!(
            select_topk_watermarked(&logits, 0, &params, |_| true).unwrap_err(),
            SamplerError::KOutOfRange { k: 0, n: 3 }
        );
        assert_eq!(
            select_topk_watermarked(&logits, 4, &params, |_| true).unwrap_err(),
            SamplerError::KOutOfRange { k: 4, n: 3 }
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                sample_topk(&logits, 2, Some(bad), None, &params, |_| true, &mut rng),
                Err(SamplerError::BadTopP(_))
            ));
        }
    }

    #[test]
    fn topk_with_k_one_is_biased_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores = normalish_logits(&mut rng, 200, 2.0);
        let seed = 3u64;
        let logits = LogitVector::new(scores.clone()).unwrap();
        let params = params_with_delta(2.5);
        let want = brute_force_topk(&scores, 1, 2.5, seed)[0].0;
        for _ in 0..100 {
            let (tok, _) = sample_topk(
                &logits,
                1,
                None,
                None,
                &params,
                |t| test_green(seed, t),
                &mut rng,
            )
            .unwrap();
            assert_eq!(tok, want);
        }
    }

    #[test]
    fn top_p_of_one_equals_plain_topk() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scores = normalish_logits(&mut rng, 500, 2.0);
        let seed = 17u64;
        let logits = LogitVector::new(scores).unwrap();
        let params = params_with_delta(2.0);
        let mut rng_a = ChaCha8Rng::seed_from_u64(1234);
        let mut rng_b = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let (a, _) = sample_topk(
                &logits,
                40,
                None,
                None,
                &params,
                |t| test_green(seed, t),
                &mut rng_a,
            )
            .unwrap();
            let (b, _) = sample_topk(
                &logits,
                40,
                Some(1.0),
                None,
                &params,
                |t| test_green(seed, t),
                &mut rng_b,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nucleus_sampling_matches_analytic_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(60601);
        let n = 1000usize;
        let scores = normalish_logits(&mut rng, n, 2.0);
        let seed = 29u64;
        let (k, top_p, t, delta) = (50usize, 0.9f64, 0.8f64, 2.5f64);
        let params = params_with_delta(delta);

        // Analytic distribution over the nucleus, replicating the sampler's
        // arithmetic on top of the brute-force top-k oracle.
        let top = brute_force_topk(&scores, k, delta, seed);
        let max = top[0].1;
        let mut probs: Vec<f64> = top.iter().map(|&(_, v)| ((v - max) / t).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        let mut keep = top.len();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if acc >= top_p {
                keep = i + 1;
                break;
            }
        }
        let z_kept: f64 = probs[..keep].iter().sum();
        let analytic: Vec<f64> = probs[..keep].iter().map(|p| p / z_kept).collect();

        let logits = LogitVector::new(scores).unwrap();
        let draws = 100_000u64;
        let mut counts = vec![0u64; keep];
        for _ in 0..draws {
            let (tok, _) = sample_topk(
                &logits,
                k,
                Some(top_p),
                Some(t),
                &params,
                |tk| test_green(seed, tk),
                &mut rng,
            )
            .unwrap();
            let pos = top[..keep]
                .iter()
                .position(|&(id, _)| id == tok)
                .expect("sampled token must lie inside the nucleus");
            counts[pos] += 1;
        }

        // Chi-squared against the analytic law; bins with tiny expectation
        // are pooled so the asymptotics hold.
        let mut x2 = 0.0;
        let mut buckets = 0usize;
        let (mut tail_obs, mut tail_exp) = (0.0f64, 0.0f64);
        for (i, &qi) in analytic.iter().enumerate() {
            let expected = qi * draws as f64;
            let observed = counts[i] as f64;
            if expected >= 5.0 {
                x2 += (observed - expected).powi(2) / expected;
                buckets += 1;
            } else {
                tail_obs += observed;
                tail_exp += expected;
            }
        }
        if tail_exp > 0.0 {
            x2 += (tail_obs - tail_exp).powi(2) / tail_exp;
            buckets += 1;
        }
        let p_value = crate::stats::chi2_sf(x2, (buckets - 1) as f64);
        assert!(
            p_value > 0.001,
            "chi-squared p = {p_value} (x2 = {x2}, buckets = {buckets})"
        );
    }

    proptest! {
        #[test]
        fn sieve_always_equals_brute_force(
            raw in proptest::collection::vec(-4i32..=4, 2..200),
            k_frac in 0.0f64..1.0,
            delta_idx in 0usize..4,
            seed in any::<u64>(),
        ) {
            // Small integer grid of logits forces heavy tie traffic.
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 * 0.75).collect();
            let k = 1 + (k_frac * (scores.len() - 1) as f64) as usize;
            let delta = [0.0, 0.75, 2.5, 4.0][delta_idx];
            let logits = LogitVector::new(scores.clone()).unwrap();
            let params = params_with_delta(delta);
            let (got, calls) =
                select_topk_watermarked(&logits, k, &params, |t| test_green(seed, t)).unwrap();
            let want = brute_force_topk(&scores, k, delta, seed);
            prop_assert_eq!(got, want);

            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let cutoff = sorted[k - 1] - delta;
            let n_candidates = scores.iter().filter(|&&s| s >= cutoff).count() as u64;
            prop_assert!(calls <= n_candidates);
        }
    }
}
