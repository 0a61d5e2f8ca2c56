//! The whole pipeline on one machine: a key pair, a watermarked document
//! from the synthetic model, a detection server on a loopback port, and
//! a client that learns the verdict without the server ever seeing a
//! token. An unwatermarked document goes through the same round for
//! contrast.

use rand::rngs::OsRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vow::model::{Strategy, SyntheticModel, Vocabulary};
use vow::protocol::{client_detect, serve, ServerConfig};
use vow::voprf::KeyPair;
use vow::watermark::{GreenRatio, WatermarkParams};

fn main() {
    let keypair = KeyPair::generate(&mut OsRng);
    let params = WatermarkParams::new(4, GreenRatio::HALF, 2.5, 64).unwrap();
    let alpha = 1e-5;

    let vocab = Vocabulary::new(10_000).unwrap();
    let model = SyntheticModel::new(42, vocab, 1.1, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (text, stats) = model
        .generate(
            &keypair.secret,
            &params,
            Strategy::Multinomial { temperature: None },
            150,
            &[],
            &mut rng,
        )
        .unwrap();
    println!(
        "generated {} tokens, {:.3} proposal draws per token, green fraction {:.4}",
        text.len(),
        stats.mean_trials,
        stats.green_fraction.unwrap()
    );

    let server = serve(keypair.clone(), "127.0.0.1:0", ServerConfig::default()).unwrap();
    let endpoint = server.addr().to_string();
    println!("detection server on {endpoint}");

    let report = client_detect(
        &endpoint,
        &keypair.public,
        &text,
        &params,
        alpha,
        &mut OsRng,
    )
    .unwrap();
    println!(
        "watermarked:   g = {}/{} unique n-grams, p = {:.3e}, verified = {}, outcome = {:?}",
        report.g_green, report.n_unique, report.p_value, report.verified, report.outcome()
    );

    let null: Vec<u32> = (0..150).map(|_| rng.gen_range(0..10_000)).collect();
    let report = client_detect(
        &endpoint,
        &keypair.public,
        &null,
        &params,
        alpha,
        &mut OsRng,
    )
    .unwrap();
    println!(
        "unwatermarked: g = {}/{} unique n-grams, p = {:.3e}, verified = {}, outcome = {:?}",
        report.g_green, report.n_unique, report.p_value, report.verified, report.outcome()
    );

    server.shutdown();
}
