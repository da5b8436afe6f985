//! Counter-based pseudo-random streams used by the toy denoiser.
//!
//! A stream is identified by a key folded from integer parts:
//! `k₀ = 0`, `kᵢ₊₁ = splitmix64(kᵢ ^ partᵢ)`. Sample `n` of the stream is
//! `splitmix64(key ^ (n · 0xD1B54A32D192ED03))`, mapped to `[-1, 1)` through
//! its top 53 bits. Strings enter keys through 64-bit FNV-1a.

const SAMPLE_MIX: u64 = 0xD1B5_4A32_D192_ED03;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(parts: &[u64]) -> Self {
        let key = parts.iter().fold(0u64, |k, &p| splitmix64(k ^ p));
        Stream { key }
    }

    #[inline]
    pub fn bits(&self, n: u64) -> u64 {
        splitmix64(self.key ^ n.wrapping_mul(SAMPLE_MIX))
    }

    /// Uniform sample in `[-1, 1)`.
    #[inline]
    pub fn uniform(&self, n: u64) -> f64 {
        let unit = (self.bits(n) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * unit - 1.0
    }

    /// Uniform integer in `0..bound`.
    #[inline]
    pub fn below(&self, n: u64, bound: u64) -> u64 {
        self.bits(n) % bound
    }
}
