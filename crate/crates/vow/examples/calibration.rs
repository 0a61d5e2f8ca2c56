//! A desk-scale calibration run: score a few thousand unwatermarked
//! texts, compare attained false-positive rates against the exact
//! binomial tail at each level, and check the p-value law on its lattice.
//! The full-size version of this run is the `calibrate` subcommand.

use rand::rngs::OsRng;
use vow::calibrate::{calibrate, pseudorandomness_harness, CalibrationConfig};
use vow::voprf::SecretKey;
use vow::watermark::{GreenRatio, WatermarkParams};

fn main() {
    let sk = SecretKey::generate(&mut OsRng);
    let params = WatermarkParams::new(4, GreenRatio::HALF, 0.0, 64).unwrap();
    let config = CalibrationConfig {
        samples: 4_000,
        text_len: 63,
        vocab_size: 1_000,
        alphas: vec![5e-2, 1e-2],
        seed: 11,
    };

    println!(
        "scoring {} null texts of {} tokens...",
        config.samples, config.text_len
    );
    let report = calibrate(&sk, &params, &config);
    print!("{}", report.to_text());

    println!();
    println!("color predicate pseudorandomness, fresh key per trial:");
    let pr = pseudorandomness_harness(2_000, 32, GreenRatio::HALF, 23);
    print!("{}", pr.to_text());
}
