//! Deterministic RNG streams derived from one master seed.
//!
//! Every piece of randomness in the crate (cohort generation, splits,
//! shuffles, dropout masks, initialisation) draws from a named substream so
//! that runs are reproducible and independent work units never share
//! state. Streams are ChaCha12 seeded by a stable 64-bit mix of the master
//! seed and the stream tags.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over a byte string; stable across platforms.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finaliser; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One component of a stream name: a label or an index.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Label(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(s: &'a str) -> Self {
        Tag::Label(s)
    }
}

impl From<u64> for Tag<'_> {
    fn from(i: u64) -> Self {
        Tag::Index(i)
    }
}

impl From<usize> for Tag<'_> {
    fn from(i: usize) -> Self {
        Tag::Index(i as u64)
    }
}

/// Derive the 64-bit seed for a named substream.
pub fn stream_seed(master: u64, tags: &[Tag]) -> u64 {
    let mut h = mix(master);
    for tag in tags {
        let t = match tag {
            Tag::Label(s) => fnv1a(s.as_bytes()),
            Tag::Index(i) => mix(*i ^ 0xa076_1d64_78bd_642f),
        };
        h = mix(h ^ t);
    }
    h
}

/// Seeded ChaCha12 stream for `(master, tags)`.
pub fn stream(master: u64, tags: &[Tag]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream_seed(master, tags))
}
