//! Green-red watermarking with oblivious, verifiable detection.
//!
//! The color of a token is the output of a verifiable oblivious PRF
//! ([`voprf`]) on the n-gram preceding it ([`watermark`]). Generation
//! holds the key and tilts sampling toward green tokens by rejection
//! against the unwatermarked distribution ([`sampler`]), which samples
//! the watermarked distribution exactly. Detection never holds the key
//! and never shows the server its text: it blinds its n-grams, has them
//! evaluated in one batch under a single 64-byte DLEQ proof
//! ([`protocol`]), then colors locally and runs an exact binomial tail
//! test ([`detector`]).
//!
//! The remaining modules are the measurement bench: a synthetic Zipf
//! model to generate from ([`model`]), false-positive calibration under
//! the null ([`calibrate`]), the cache-forgery cost model and simulation
//! ([`attack`]), shared numerics ([`stats`]), and the `vow` binary's
//! command surface ([`cli`]).
//!
//! The runnable programs in `examples/` walk each capability end to end
//! and are the intended starting point.

pub mod attack;
pub mod calibrate;
pub mod cli;
pub mod detector;
pub mod model;
pub mod protocol;
pub mod sampler;
pub mod stats;
pub mod voprf;
pub mod watermark;
