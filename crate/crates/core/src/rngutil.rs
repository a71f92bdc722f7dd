//! Seed derivation.
//!
//! All randomness in a run is drawn from ChaCha8 streams keyed by
//! `(run seed, stream, task index)` through a fixed splitmix-style mix, so
//! the streams are mutually independent and none depends on how much another
//! was consumed. In particular the phase-2 shuffle stream is shared with
//! plain CL training, which is what makes an FL run with `alpha_p = 0` and
//! `E2 = E_CL` replay the CL trajectory bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic benchmark generation (when not pinned in the config).
    TaskGen,
    /// Model init and new-class / new-module parameter init.
    Init,
    /// Epoch shuffles in FL phase 1.
    ShufflePhase1,
    /// Epoch shuffles in FL phase 2 and in plain CL training.
    ShufflePhase2,
    /// Memory-batch draws in FL phase 1.
    MemoryPhase1,
    /// Memory-batch draws in FL phase 2 and in plain CL training.
    MemoryPhase2,
    /// Reservoir insertion at task end.
    Reservoir,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::TaskGen => 1,
            Stream::Init => 2,
            Stream::ShufflePhase1 => 3,
            Stream::ShufflePhase2 => 4,
            Stream::MemoryPhase1 => 5,
            Stream::MemoryPhase2 => 6,
            Stream::Reservoir => 7,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for a (stream, task) pair of a run.
pub fn subseed(run_seed: u64, stream: Stream, task: usize) -> u64 {
    splitmix(splitmix(run_seed ^ stream.tag().wrapping_mul(0xa076_1d64_78bd_642f)) ^ task as u64)
}

/// Salted derivation for sub-purposes of one seed (module init, classifier
/// widening) so they draw from unrelated streams.
pub fn derive(seed: u64, salt: u64) -> u64 {
    splitmix(seed ^ splitmix(salt.wrapping_mul(0x9fb2_1c65_1e98_df25)))
}

/// Per-epoch shuffle seed within a (stream, task) pair.
pub fn epoch_seed(run_seed: u64, stream: Stream, task: usize, epoch: usize) -> u64 {
    splitmix(subseed(run_seed, stream, task) ^ (epoch as u64).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// ChaCha8 generator for a (stream, task) pair. ChaCha8 is reproducible
/// across platforms, unlike `StdRng`.
pub fn stream_rng(run_seed: u64, stream: Stream, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(run_seed, stream, task))
}
