//! Both halves of the attack story. The closed-form half prices the
//! cache a forger needs to pass detection without the key. The empirical
//! half actually builds such a cache from observed watermarked text and
//! runs the logit-boost forgery against the honest detector, next to the
//! full-knowledge upper bound.

use rand::rngs::OsRng;
use rand::SeedableRng;
use vow::attack::{
    attack_cost, build_cache, forge, AttackCostParams, ForgeConfig, FullKnowledge,
};
use vow::detector::{binom_sf_exact, dedup_ngrams};
use vow::model::{Strategy, SyntheticModel, Vocabulary};
use vow::voprf::SecretKey;
use vow::watermark::{is_green_local, GreenRatio, WatermarkParams};

fn main() {
    let report = attack_cost(&AttackCostParams::default()).unwrap();
    print!("{}", report.to_text());
    println!();

    // Desk-scale forgery: small vocabulary so observed contexts recur.
    let sk = SecretKey::generate(&mut OsRng);
    let params = WatermarkParams::new(2, GreenRatio::HALF, 2.5, 64).unwrap();
    let vocab = Vocabulary::new(200).unwrap();
    let model = SyntheticModel::new(5, vocab, 1.1, 1.0).unwrap();
    let seed = 17;

    let corpus: Vec<Vec<u32>> = (0..48)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                seed ^ (i as u64 + 1).wrapping_mul(0x9e3779b97f4a7c15),
            );
            model
                .generate(
                    &sk,
                    &params,
                    Strategy::Multinomial { temperature: None },
                    200,
                    &[],
                    &mut rng,
                )
                .unwrap()
                .0
        })
        .collect();
    let cache = build_cache(&corpus, params.h, |context, token| {
        is_green_local(&sk, &params, context, token)
            .unwrap()
            .is_green
    });
    println!(
        "attacker observed {} documents: {} contexts, {} green pairs",
        corpus.len(),
        cache.contexts(),
        cache.unique_pairs()
    );

    let config = ForgeConfig {
        delta_prime: 4.0,
        length: 80,
        alpha: 1e-2,
        trials: 150,
    };
    let detect = |tokens: &[u32]| {
        let records = dedup_ngrams(tokens, params.h).unwrap();
        let g = records
            .iter()
            .filter(|r| {
                is_green_local(&sk, &params, &r.context, r.token)
                    .unwrap()
                    .is_green
            })
            .count() as u64;
        binom_sf_exact(g, records.len() as u64, params.gamma).unwrap()
    };

    let cached = forge(&model, &cache, &config, detect, seed ^ 0xd1b54a32d192ed03).unwrap();
    print!("48-doc cache  {}", cached.to_text());

    // The same attacker on a fraction of the observations: coverage is
    // the whole game.
    let starved = build_cache(&corpus[..3], params.h, |context, token| {
        is_green_local(&sk, &params, context, token)
            .unwrap()
            .is_green
    });
    let weak = forge(&model, &starved, &config, detect, seed ^ 0xd1b54a32d192ed03).unwrap();
    print!("3-doc cache   {}", weak.to_text());

    let oracle = FullKnowledge {
        sk: &sk,
        params: &params,
        vocab_size: 200,
    };
    let upper = forge(&model, &oracle, &config, detect, seed ^ 0xd1b54a32d192ed03).unwrap();
    print!("full key      {}", upper.to_text());
}
