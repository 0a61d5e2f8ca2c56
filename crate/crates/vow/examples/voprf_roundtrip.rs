//! One blind evaluation, start to finish: the client hides its inputs,
//! the server batch-evaluates under its committed key and proves it, and
//! the finalized outputs match what the key holder computes directly.
//! Then one byte of the response is flipped to show the proof refusing.

use rand::rngs::OsRng;
use vow::voprf::{blind, blind_evaluate_batch, evaluate, finalize, verify_batch, KeyPair};

fn main() {
    let keypair = KeyPair::generate(&mut OsRng);
    println!(
        "server key committed as pk = {}",
        hex::encode(keypair.public.to_bytes())
    );

    let inputs: Vec<Vec<u8>> = (0..5u8).map(|i| vec![b'x', i]).collect();

    // Client side: blind each input. The server sees only random-looking
    // group elements.
    let states: Vec<_> = inputs.iter().map(|x| blind(x, &mut OsRng)).collect();
    let blinded: Vec<_> = states.iter().map(|s| s.blinded()).collect();

    // Server side: one scalar multiplication per element, one 64-byte
    // proof for the whole batch.
    let (evaluated, proof) =
        blind_evaluate_batch(&keypair.secret, &blinded, &mut OsRng).unwrap();

    verify_batch(&keypair.public, &blinded, &evaluated, &proof).unwrap();
    println!("batch of {} verified against pk", blinded.len());

    for (state, element) in states.iter().zip(&evaluated) {
        let output = finalize(state, element).unwrap();
        let direct = evaluate(&keypair.secret, state.input());
        assert_eq!(output, direct);
        println!(
            "  input {} -> {}",
            hex::encode(state.input()),
            hex::encode(output)
        );
    }
    println!("all finalized outputs match the key holder's direct evaluation");

    // A tampered transcript: swap two evaluated elements and try again.
    let mut tampered = evaluated.clone();
    tampered.swap(0, 1);
    match verify_batch(&keypair.public, &blinded, &tampered, &proof) {
        Err(err) => println!("tampered response rejected: {err}"),
        Ok(()) => unreachable!("a forged transcript must not verify"),
    }
}
