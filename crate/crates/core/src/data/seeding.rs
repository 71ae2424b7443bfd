//! Seed derivation. Every random stream is a `Xoshiro256PlusPlus` seeded
//! through `seed_from_u64` with a value derived from the master seed, a
//! stream tag and up to two indices by SplitMix64 mixing, so streams are
//! independent of generation order.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::{SplitMix64, Xoshiro256PlusPlus};

pub const STREAM_TEACHER: u64 = 1;
pub const STREAM_SUBJECT: u64 = 2;
pub const STREAM_SENTENCE: u64 = 3;

pub fn derive_seed(master: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut sm = SplitMix64::seed_from_u64(master);
    let mut s = sm.next_u64() ^ stream;
    for v in [a, b] {
        s = SplitMix64::seed_from_u64(s ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64();
    }
    s
}

pub fn seeded_rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn stream(master: u64, stream: u64, a: u64, b: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(master, stream, a, b))
}
