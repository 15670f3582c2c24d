//! Stable seed derivation. Every generator in the crate draws from a
//! ChaCha stream keyed by a tuple of labels so outputs depend only on
//! those labels, never on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One component of a seed key.
#[derive(Clone, Copy, Debug)]
pub enum Part<'a> {
    Int(u64),
    Str(&'a str),
}

impl From<u64> for Part<'_> {
    fn from(v: u64) -> Self {
        Part::Int(v)
    }
}

impl From<usize> for Part<'_> {
    fn from(v: usize) -> Self {
        Part::Int(v as u64)
    }
}

impl From<u32> for Part<'_> {
    fn from(v: u32) -> Self {
        Part::Int(v as u64)
    }
}

impl<'a> From<&'a str> for Part<'a> {
    fn from(v: &'a str) -> Self {
        Part::Str(v)
    }
}

impl<'a> From<&'a String> for Part<'a> {
    fn from(v: &'a String) -> Self {
        Part::Str(v.as_str())
    }
}

pub fn derive(parts: &[Part<'_>]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    for part in parts {
        match part {
            Part::Int(v) => {
                feed(&[0x01]);
                feed(&v.to_le_bytes());
            }
            Part::Str(s) => {
                feed(&[0x02]);
                feed(&(s.len() as u64).to_le_bytes());
                feed(s.as_bytes());
            }
        }
    }
    splitmix(h)
}

pub fn rng(parts: &[Part<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

#[macro_export]
#[doc(hidden)]
macro_rules! seeded {
    ($($p:expr),+ $(,)?) => {
        $crate::seed::rng(&[$($crate::seed::Part::from($p)),+])
    };
}
