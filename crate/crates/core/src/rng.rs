//! Seed derivation for replay-exact randomness.
//!
//! Every random decision in the framework draws from a `ChaCha8Rng` whose
//! seed is a stable mix of (base seed, domain, student, epoch, batch,
//! utterance). Streams for different purposes never overlap, so enabling or
//! disabling one stochastic technique cannot shift the draws of another, and
//! work scheduled across any number of workers reproduces the single-worker
//! run exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness domains. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Parameter initialization.
    Init = 1,
    /// Per-epoch shuffling of the training corpus (shared by all students).
    Shuffle = 2,
    /// Dropout masks inside a recorded forward pass.
    Dropout = 3,
    /// Scheduled-sampling token replacement decisions.
    Sample = 4,
    /// SpecAugment mask placement.
    Augment = 5,
    /// Synthetic-task prototype vectors.
    DataProto = 6,
    /// Synthetic-task utterance content (one sub-stream per split).
    DataSplit = 7,
}

/// splitmix64 finalizer; a fixed, platform-independent 64-bit mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `word` into `acc`, order-sensitively.
#[inline]
pub fn mix_into(acc: u64, word: u64) -> u64 {
    mix64(acc ^ mix64(word))
}

/// Seed for a (domain, student-seed, epoch, batch, utterance) stream.
pub fn stream_seed(base: u64, domain: Domain, epoch: u64, batch: u64, utterance: u64) -> u64 {
    let mut s = mix_into(base, domain as u64);
    s = mix_into(s, epoch);
    s = mix_into(s, batch);
    mix_into(s, utterance)
}

/// Generator for a fully qualified stream.
pub fn stream(base: u64, domain: Domain, epoch: u64, batch: u64, utterance: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(base, domain, epoch, batch, utterance))
}

/// Generator for a per-run stream that has no step structure (e.g. init).
pub fn simple_stream(base: u64, domain: Domain) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_into(base, domain as u64))
}

/// Default per-student seed when the caller does not pin one explicitly.
pub fn default_student_seed(global_seed: u64, student: usize) -> u64 {
    mix_into(mix_into(global_seed, 0x5374_7564), student as u64)
}

/// Standard normal via Box-Muller; consumes two uniforms per pair of calls.
pub fn gaussian<R: rand::Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
