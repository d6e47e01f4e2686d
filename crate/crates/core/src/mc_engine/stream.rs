//! Per-path random streams.
//!
//! Every path draws from its own ChaCha8 stream. The stream for path `k` of a
//! job with master seed `s` and purpose tag `t` is
//!
//! ```text
//! ChaCha8Rng::seed_from_u64(splitmix64(s ^ splitmix64(t))) with stream id k
//! ```
//!
//! so results depend only on `(seed, tag, k)`, never on how paths are spread
//! over worker threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep the streams of independent sub-estimators disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Primary = 1,
    Inner = 2,
    Reference = 3,
    Complement = 4,
    Census = 5,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The random stream of path `index` under `(seed, tag)`.
pub fn path_rng(seed: u64, tag: StreamTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(tag as u64)));
    rng.set_stream(index);
    rng
}
