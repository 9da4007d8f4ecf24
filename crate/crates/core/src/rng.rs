//! Counter-based deterministic random streams.
//!
//! All randomness in the crate flows through these functions so that runs
//! are bitwise reproducible across platforms. There is no mutable RNG
//! state anywhere in the numerical core; every draw is a pure function of
//! integer coordinates (seed, stream, counter, ...).

use statrs::function::erf::erf_inv;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Good avalanche, cheap, stable across platforms.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a sequence of integer coordinates into one u64.
pub fn hash_fields(fields: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3; // pi fraction, arbitrary nonzero start
    for &f in fields {
        acc = mix(acc ^ f);
        acc = acc.wrapping_mul(0x100_0000_01B3) ^ (acc >> 29);
    }
    mix(acc)
}

/// Uniform double in the open interval (0, 1) from a u64.
#[inline]
pub fn u64_to_open_unit(h: u64) -> f64 {
    ((h >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Standard normal via the inverse-CDF transform (deterministic, no
/// rejection state).
#[inline]
pub fn u64_to_standard_normal(h: u64) -> f64 {
    let u = u64_to_open_unit(h);
    std::f64::consts::SQRT_2 * erf_inv(2.0 * u - 1.0)
}

/// A small sequential stream for dataset generation and shuffling.
/// Deterministic function of (seed, stream); counter advances per draw.
pub struct Stream {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Stream {
            seed,
            stream,
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let h = hash_fields(&[self.seed, self.stream, self.counter]);
        self.counter += 1;
        h
    }

    /// Uniform in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        u64_to_open_unit(self.next_u64())
    }

    /// Uniform in (lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        u64_to_standard_normal(self.next_u64())
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<f64> = {
            let mut s = Stream::new(7, 3);
            (0..16).map(|_| s.uniform()).collect()
        };
        let b: Vec<f64> = {
            let mut s = Stream::new(7, 3);
            (0..16).map(|_| s.uniform()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut s = Stream::new(1, 0);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = s.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn distinct_streams_decorrelate() {
        let mut a = Stream::new(5, 0);
        let mut b = Stream::new(5, 1);
        let n = 50_000;
        let mut dot = 0.0;
        for _ in 0..n {
            dot += a.normal() * b.normal();
        }
        assert!((dot / n as f64).abs() < 0.02);
    }
}
