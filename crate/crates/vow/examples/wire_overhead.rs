//! What the protocol costs on the wire. A batch of n elements is
//! 9 + 32n bytes out and 9 + 32n + 64 bytes back: the proof is 64 bytes
//! whether the batch holds one element or sixty-five thousand. Per-input
//! proofs are priced next to it to show what batching saves.

use vow::protocol::{measure_overhead, ProofMode};

fn main() {
    // 4.7 bytes/token of plaintext: the accounting the expansion ratios
    // in the reports use, one UTF-8 English token of average length.
    let bytes_per_token = 4.7;

    println!("batched proof (the protocol as shipped):");
    println!("  n      request    response   total      vs plaintext");
    for n in [1u64, 10, 100, 500, 1_000, 10_000] {
        let r = measure_overhead(n, bytes_per_token, ProofMode::Batched);
        println!(
            "  {:<6} {:<10} {:<10} {:<10} {:.2}x",
            r.n, r.request_bytes, r.response_bytes, r.total_bytes, r.expansion_ratio
        );
    }

    println!();
    println!("per-input proofs (rejected design), same batch sizes:");
    println!("  n      request    response   total      vs plaintext");
    for n in [1u64, 10, 100, 500, 1_000, 10_000] {
        let r = measure_overhead(n, bytes_per_token, ProofMode::PerInput);
        println!(
            "  {:<6} {:<10} {:<10} {:<10} {:.2}x",
            r.n, r.request_bytes, r.response_bytes, r.total_bytes, r.expansion_ratio
        );
    }

    let batched = measure_overhead(500, bytes_per_token, ProofMode::Batched);
    let per_input = measure_overhead(500, bytes_per_token, ProofMode::PerInput);
    println!();
    println!(
        "at n = 500 the batched proof saves {} bytes per session",
        per_input.total_bytes - batched.total_bytes
    );
}
