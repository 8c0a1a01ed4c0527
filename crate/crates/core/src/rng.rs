//! Deterministic named random streams.
//!
//! Every stochastic component (weight init, artificial masking, dropout,
//! synthetic data) draws from its own counter-based ChaCha stream derived
//! from the run seed. Streams are independent: draws on one never shift the
//! values produced by another, so the same seed reproduces the same run
//! regardless of how components interleave their draws.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The named random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    /// Parameter initialization.
    Init,
    /// Artificial training/validation masks.
    Masking,
    /// Attention dropout.
    Dropout,
    /// Synthetic data generation and corruption patterns.
    Data,
    /// The fixed validation mask, sampled once per fit.
    ValMask,
}

impl StreamKind {
    fn tag(self) -> u64 {
        match self {
            StreamKind::Init => 1,
            StreamKind::Masking => 2,
            StreamKind::Dropout => 3,
            StreamKind::Data => 4,
            StreamKind::ValMask => 5,
        }
    }
}

const INSTANCE_BITS: u32 = 56;

/// A seeded random stream addressed by `(seed, kind, instance)`.
///
/// `instance` distinguishes repeated uses of the same kind, e.g. the masking
/// stream of epoch 3 / batch 7 versus epoch 3 / batch 8.
pub fn stream(seed: u64, kind: StreamKind, instance: u64) -> ChaCha8Rng {
    debug_assert!(instance < (1 << INSTANCE_BITS));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind.tag() << INSTANCE_BITS) | (instance & ((1 << INSTANCE_BITS) - 1)));
    rng
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal draw.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
