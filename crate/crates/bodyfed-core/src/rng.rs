//! Named, seeded RNG substreams.
//!
//! Every stochastic site draws from its own substream derived from the
//! scenario master seed and a label path, so independent work can run in any
//! order (or in parallel) without changing a single draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Substream domain labels. One label per stochastic site.
pub mod stream {
    pub const POSTURE: u64 = 1;
    pub const LOSS: u64 = 2;
    pub const LINK_FLAG: u64 = 3;
    pub const TRANSMIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const POLICY: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const SKETCH: u64 = 8;
    pub const INIT: u64 = 9;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 substream from the master seed and a label path,
/// e.g. `substream(seed, &[stream::LOSS, round, client])`.
pub fn substream(master: u64, labels: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(master);
    for &label in labels {
        state = splitmix64(state ^ splitmix64(label));
    }
    let mut seed = [0u8; 32];
    let mut s = state;
    for chunk in seed.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// One standard-normal draw via Box-Muller. Consumes two uniforms;
/// u1 is mapped into (0, 1] so the log never sees zero.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
