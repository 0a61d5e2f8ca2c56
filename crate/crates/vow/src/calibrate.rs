//! Statistical calibration harnesses: empirical false-positive rates of
//! the detector over unwatermarked text, and a direct pseudorandomness
//! check of the color predicate.
//!
//! The detector's p-value is discrete, so naive comparisons against the
//! continuous uniform fail at the atoms no matter how correct the test
//! is. Everything here therefore measures distance on the lattice of
//! attainable values: the empirical law of the green count against its
//! exact binomial null, and a randomized PIT when a genuinely continuous
//! uniform check is wanted on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::detector::{binom_sf_exact, dedup_ngrams};
use crate::stats::{binom_equal_tail_interval, chi2_sf, chi2_sf_1df, ks_critical};
use crate::voprf::SecretKey;
use crate::watermark::{is_green_local, GreenRatio, WatermarkParams};

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationConfig {
    /// Unwatermarked texts to score.
    pub samples: usize,
    /// Tokens per text; windows per text is this minus h.
    pub text_len: usize,
    pub vocab_size: u32,
    /// Levels for the FPR table.
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples: 100_000,
            text_len: 255,
            vocab_size: 10_000,
            alphas: vec![1e-2, 1e-3],
            seed: 1,
        }
    }
}

/// One row of the FPR table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaRow {
    pub alpha: f64,
    /// The false-positive rate actually attainable at this level: the
    /// exact tail mass of the smallest rejectable green count. Discreteness
    /// keeps it at or below alpha.
    pub attained_fpr: f64,
    /// Texts rejected at this level.
    pub hits: u64,
    pub expected: f64,
    /// Central 99% interval for `hits` under the attained rate.
    pub ci: (u64, u64),
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationReport {
    pub samples: usize,
    /// Windows per text (all texts, bar vanishing-probability collisions).
    pub windows: u64,
    pub rows: Vec<AlphaRow>,
    /// KS distance between the empirical green-count law and the exact
    /// binomial null, measured on the lattice.
    pub ks_lattice: f64,
    /// KS distance of randomized-PIT p-values against continuous uniform.
    pub ks_uniform: f64,
    /// 1% critical value both statistics are held to.
    pub ks_critical: f64,
    pub ks_pass: bool,
    /// Pearson chi-squared p-value of the green-count histogram against
    /// the binomial null.
    pub green_chi2_p: f64,
    pub mean_p: f64,
    /// Empirical CDF of the p-values at a fixed grid of levels, for the
    /// diagonal plot: entries are (t, fraction of p-values <= t).
    pub ecdf: Vec<(f64, f64)>,
}

impl CalibrationReport {
    pub fn pass(&self) -> bool {
        self.ks_pass && self.rows.iter().all(|r| r.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "calibration over {} texts ({} windows each)\n",
            self.samples, self.windows
        ));
        out.push_str("  alpha      attained    hits   expected   99% CI          pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "  {:<9.1e} {:<11.4e} {:<6} {:<10.1} [{}, {}]  {}\n",
                r.alpha,
                r.attained_fpr,
                r.hits,
                r.expected,
                r.ci.0,
                r.ci.1,
                if r.pass { "yes" } else { "NO" }
            ));
        }
        out.push_str(&format!(
            "  KS lattice {:.5}, randomized-PIT {:.5}, critical {:.5} -> {}\n",
            self.ks_lattice,
            self.ks_uniform,
            self.ks_critical,
            if self.ks_pass { "pass" } else { "FAIL" }
        ));
        out.push_str(&format!(
            "  green-count chi2 p = {:.4}, mean p-value = {:.4}\n",
            self.green_chi2_p, self.mean_p
        ));
        out.push_str("  p-value ECDF (t, fraction <= t):\n");
        for (t, f) in &self.ecdf {
            out.push_str(&format!("    {t:<6.3} {f:.5}\n"));
        }
        out
    }
}

/// Scores `samples` freshly drawn uniform-random texts with the real
/// color predicate under `sk` and reports how the p-values behave under
/// the null. Deterministic in the config seed; texts are scored in
/// parallel.
pub fn calibrate(
    sk: &SecretKey,
    params: &WatermarkParams,
    config: &CalibrationConfig,
) -> CalibrationReport {
    let h = params.h as usize;
    assert!(
        config.text_len > h,
        "texts must be longer than the context window"
    );
    assert!(config.samples >= 1);
    let n = (config.text_len - h) as u64;

    let per_text: Vec<(u64, u64)> = (0..config.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
            );
            let tokens: Vec<u32> = (0..config.text_len)
                .map(|_| rng.gen_range(0..config.vocab_size))
                .collect();
            let records = dedup_ngrams(&tokens, params.h).expect("text_len > h");
            let g = records
                .iter()
                .filter(|r| {
                    is_green_local(sk, params, &r.context, r.token)
                        .expect("window length matches h")
                        .is_green
                })
                .count() as u64;
            (records.len() as u64, g)
        })
        .collect();

    // A repeated window inside one text is a ~2^-60 event at these
    // parameters; the lattice statistics assume the modal window count
    // and simply skip the stray text if one ever occurs.
    let mut hist = vec![0u64; n as usize + 1];
    let mut lattice_samples = 0u64;
    for &(n_i, g_i) in &per_text {
        if n_i == n {
            hist[g_i as usize] += 1;
            lattice_samples += 1;
        }
    }

    let gamma = params.gamma;
    let p_values: Vec<f64> = per_text
        .iter()
        .map(|&(n_i, g_i)| binom_sf_exact(g_i, n_i, gamma).expect("g <= n"))
        .collect();

    let rows: Vec<AlphaRow> = config
        .alphas
        .iter()
        .map(|&alpha| {
            let attained = attained_fpr(n, gamma, alpha);
            let hits = p_values.iter().filter(|&&p| p < alpha).count() as u64;
            let ci = binom_equal_tail_interval(config.samples as u64, attained, 0.005);
            AlphaRow {
                alpha,
                attained_fpr: attained,
                hits,
                expected: attained * config.samples as f64,
                ci,
                pass: ci.0 <= hits && hits <= ci.1,
            }
        })
        .collect();

    let ks_lattice = lattice_ks(&hist, lattice_samples, n, gamma);
    let ks_uniform = randomized_pit_ks(&hist, lattice_samples, n, gamma, config.seed ^ 0x5eed);
    let crit = ks_critical(0.01, lattice_samples as usize);

    const ECDF_GRID: [f64; 13] = [
        0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
    ];
    let ecdf = ECDF_GRID
        .iter()
        .map(|&t| {
            let frac = p_values.iter().filter(|&&p| p <= t).count() as f64
                / p_values.len() as f64;
            (t, frac)
        })
        .collect();

    CalibrationReport {
        samples: config.samples,
        windows: n,
        rows,
        ks_lattice,
        ks_uniform,
        ks_critical: crit,
        ks_pass: ks_lattice < crit && ks_uniform < crit,
        green_chi2_p: green_histogram_chi2(&hist, lattice_samples, n, gamma),
        mean_p: p_values.iter().sum::<f64>() / p_values.len() as f64,
        ecdf,
    }
}

/// Exact tail mass of the rejection region {p < alpha} for an n-window
/// text: sf at the smallest green count whose p-value clears alpha.
pub fn attained_fpr(n: u64, gamma: GreenRatio, alpha: f64) -> f64 {
    for g in 0..=n {
        let p = binom_sf_exact(g, n, gamma).expect("g <= n");
        if p < alpha {
            return p;
        }
    }
    0.0
}

fn binom_pmf(g: u64, n: u64, gamma: GreenRatio) -> f64 {
    let upper = binom_sf_exact(g, n, gamma).expect("g <= n");
    let above = if g == n {
        0.0
    } else {
        binom_sf_exact(g + 1, n, gamma).expect("g <= n")
    };
    (upper - above).max(0.0)
}

/// KS distance between an empirical green-count histogram and the exact
/// Binomial(n, gamma) null. Both CDFs live on the integer lattice, so the
/// supremum is over survival values at every count.
fn lattice_ks(hist: &[u64], samples: u64, n: u64, gamma: GreenRatio) -> f64 {
    assert_eq!(hist.len() as u64, n + 1);
    assert!(samples > 0);
    let mut worst = 0.0f64;
    let mut at_or_above = samples;
    for g in 0..=n {
        let emp = at_or_above as f64 / samples as f64;
        let null = binom_sf_exact(g, n, gamma).expect("g <= n");
        worst = worst.max((emp - null).abs());
        at_or_above -= hist[g as usize];
    }
    worst
}

/// Randomized probability integral transform: smear each discrete p-value
/// uniformly over its own atom, then run the classical continuous KS.
/// Under the null the transformed values are exactly U(0, 1).
fn randomized_pit_ks(hist: &[u64], samples: u64, n: u64, gamma: GreenRatio, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = Vec::with_capacity(samples as usize);
    for g in 0..=n {
        let above = if g == n {
            0.0
        } else {
            binom_sf_exact(g + 1, n, gamma).expect("g <= n")
        };
        let width = binom_pmf(g, n, gamma);
        for _ in 0..hist[g as usize] {
            u.push(above + width * rng.gen::<f64>());
        }
    }
    u.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = u.len() as f64;
    let mut worst = 0.0f64;
    for (i, &x) in u.iter().enumerate() {
        worst = worst.max(((i + 1) as f64 / m - x).abs());
        worst = worst.max((x - i as f64 / m).abs());
    }
    worst
}

/// Pearson chi-squared p-value of the green-count histogram against the
/// binomial null, with tail bins merged until every expected count is at
/// least five.
fn green_histogram_chi2(hist: &[u64], samples: u64, n: u64, gamma: GreenRatio) -> f64 {
    let expected: Vec<f64> = (0..=n)
        .map(|g| samples as f64 * binom_pmf(g, n, gamma))
        .collect();

    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0f64, 0.0f64);
    for g in 0..=n as usize {
        acc.0 += expected[g];
        acc.1 += hist[g] as f64;
        if acc.0 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => bins.push(acc),
        }
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let x2: f64 = bins
        .iter()
        .map(|&(exp, obs)| {
            let d = obs - exp;
            d * d / exp
        })
        .sum();
    chi2_sf(x2, (bins.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct PseudorandomnessReport {
    pub trials: usize,
    pub tokens_per_trial: u32,
    pub mean_green_fraction: f64,
    /// Lattice KS of the per-trial chi-squared p-values against their
    /// exact null law.
    pub chi2_p_ks: f64,
    /// Lattice KS of the raw green counts against Binomial(m, gamma).
    pub green_count_ks: f64,
    pub ks_critical: f64,
    pub pass: bool,
}

impl PseudorandomnessReport {
    pub fn to_text(&self) -> String {
        format!(
            "pseudorandomness: {} trials x {} tokens, green fraction {:.5}; KS chi2-p {:.5}, green-count {:.5}, critical {:.5} -> {}\n",
            self.trials,
            self.tokens_per_trial,
            self.mean_green_fraction,
            self.chi2_p_ks,
            self.green_count_ks,
            self.ks_critical,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Colors `tokens_per_trial` fixed candidates under a fresh key and a
/// random context per trial, then checks that the green counts and their
/// Pearson chi-squared p-values follow the laws a truly random predicate
/// would give.
pub fn pseudorandomness_harness(
    trials: usize,
    tokens_per_trial: u32,
    gamma: GreenRatio,
    seed: u64,
) -> PseudorandomnessReport {
    assert!(trials >= 1);
    assert!(tokens_per_trial >= 1);
    let params = WatermarkParams::new(4, gamma, 0.0, 64).expect("fixed harness params");
    let m = tokens_per_trial;

    let counts: Vec<u64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
            );
            let sk = SecretKey::generate(&mut rng);
            let context: Vec<u32> = (0..4).map(|_| rng.gen::<u32>()).collect();
            (0..m)
                .filter(|&t| {
                    is_green_local(&sk, &params, &context, t)
                        .expect("context length is 4")
                        .is_green
                })
                .count() as u64
        })
        .collect();

    let mut hist = vec![0u64; m as usize + 1];
    for &g in &counts {
        hist[g as usize] += 1;
    }
    let total_green: u64 = counts.iter().sum();

    let green_count_ks = lattice_ks(&hist, trials as u64, m as u64, gamma);
    let chi2_p_ks = chi2_p_lattice_ks(&hist, trials as u64, m as u64, gamma);
    let crit = ks_critical(0.01, trials);

    PseudorandomnessReport {
        trials,
        tokens_per_trial: m,
        mean_green_fraction: total_green as f64 / (trials as u64 * m as u64) as f64,
        chi2_p_ks,
        green_count_ks,
        ks_critical: crit,
        pass: chi2_p_ks < crit && green_count_ks < crit,
    }
}

/// KS distance for the derived statistic p = chi2_sf_1df(X2(g)). Several
/// green counts can share one p atom (symmetric counts do), so atoms are
/// grouped by exact p value before comparing CDFs.
fn chi2_p_lattice_ks(hist: &[u64], samples: u64, m: u64, gamma: GreenRatio) -> f64 {
    let gf = gamma.as_f64();
    let variance = m as f64 * gf * (1.0 - gf);
    let mut atoms: Vec<(f64, f64, u64)> = (0..=m)
        .map(|g| {
            let d = g as f64 - m as f64 * gf;
            let p = chi2_sf_1df(d * d / variance);
            (p, binom_pmf(g, m, gamma), hist[g as usize])
        })
        .collect();
    atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite p"));

    let mut worst = 0.0f64;
    let mut cum_null = 0.0f64;
    let mut cum_emp = 0u64;
    let mut i = 0;
    while i < atoms.len() {
        let p = atoms[i].0;
        while i < atoms.len() && atoms[i].0 == p {
            cum_null += atoms[i].1;
            cum_emp += atoms[i].2;
            i += 1;
        }
        worst = worst.max((cum_emp as f64 / samples as f64 - cum_null).abs());
    }
    worst
}
