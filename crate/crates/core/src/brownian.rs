//! Seed-reproducible Brownian motion on the depth horizon [0, 1].
//!
//! The path is defined through its values at dyadic times, built by
//! midpoint displacement: B(1) is a root draw, and the value at the
//! midpoint of any tree node is the endpoint average plus a Brownian
//! bridge perturbation, with all noise keyed by (seed, path_id, tree
//! node, component). Nothing is stored: any interval's increment is
//! recomputable on demand, which is what lets the adjoint pass replay the
//! exact noise of the forward pass.
//!
//! Path values are carried in fixed point (integer multiples of 2^-44),
//! so increments are differences of exact integers and additivity across
//! any telescoping set of query points holds *bitwise*, no matter how
//! the sum is regrouped. The quantization perturbs each Gaussian draw by
//! at most 2^-45, far below every statistical tolerance in play.
//!
//! Query times are snapped to the dyadic grid at resolution 2^-32. Dyadic
//! times (every fixed-step grid with a power-of-two step count, and every
//! adaptive halving) are represented exactly; other grids are off by at
//! most 2^-33.
//!
//! ```
//! use sdebnn::brownian::{BrownianPath, SeedKey};
//!
//! let path = BrownianPath::new(SeedKey { seed: 42, path_id: 0 }, 3);
//! let whole = path.increment(0.0, 1.0).unwrap();
//! let left = path.increment(0.0, 0.5).unwrap();
//! let right = path.increment(0.5, 1.0).unwrap();
//! for j in 0..3 {
//!     assert_eq!(whole[j], left[j] + right[j]);
//! }
//! ```

use crate::error::{Error, Result};
use crate::rng::{hash_fields, u64_to_standard_normal};

/// Resolution of the dyadic time grid: times are multiples of 2^-32.
const RESOLUTION: u32 = 32;

/// Fixed-point scale for path values: multiples of 2^-44. Brownian
/// values stay below ~30 in magnitude, so every value and difference is
/// an exactly representable f64 and telescoping sums are exact.
const QUANT_BITS: u32 = 44;

fn quantize(x: f64) -> i64 {
    (x * (1u64 << QUANT_BITS) as f64).round() as i64
}

fn dequantize(q: i64) -> f64 {
    q as f64 / (1u64 << QUANT_BITS) as f64
}

/// Integer average rounded toward negative infinity (deterministic for
/// either sign).
fn midpoint(a: i64, b: i64) -> i64 {
    (a + b).div_euclid(2)
}

/// Noise-kind tags keeping root draws and bridge draws in distinct streams.
const KIND_ROOT: u64 = 0;
const KIND_BRIDGE: u64 = 1;

/// Identifies one independent Brownian path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedKey {
    pub seed: u64,
    /// Distinguishes independent paths, e.g. one per Monte Carlo sample.
    pub path_id: u64,
}

/// An m-dimensional Brownian path over [0, 1], immutable and pure:
/// identical keys give bitwise-identical increments everywhere.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    key: SeedKey,
    dimension: usize,
}

impl BrownianPath {
    pub fn new(key: SeedKey, dimension: usize) -> Self {
        assert!(dimension > 0, "Brownian dimension must be positive");
        BrownianPath { key, dimension }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn key(&self) -> SeedKey {
        self.key
    }

    /// Wiener increment B(t1) - B(t0).
    pub fn increment(&self, t0: f64, t1: f64) -> Result<Vec<f64>> {
        let a = self.to_grid(t0)?;
        let b = self.to_grid(t1)?;
        if a > b {
            return Err(Error::Domain(format!(
                "increment requires t0 <= t1, got t0 = {t0}, t1 = {t1}"
            )));
        }
        Ok((0..self.dimension)
            .map(|j| dequantize(self.prefix(b, j as u64) - self.prefix(a, j as u64)))
            .collect())
    }

    /// Brownian-bridge subdivision: B(t_mid) - B(t0), consistent with the
    /// already-determined increment over [t0, t1].
    pub fn subdivide(&self, t0: f64, t1: f64, t_mid: f64) -> Result<Vec<f64>> {
        let a = self.to_grid(t0)?;
        let b = self.to_grid(t1)?;
        let m = self.to_grid(t_mid)?;
        if !(a < m && m < b) {
            return Err(Error::Domain(format!(
                "subdivide requires t0 < t_mid < t1, got ({t0}, {t_mid}, {t1})"
            )));
        }
        Ok((0..self.dimension)
            .map(|j| dequantize(self.prefix(m, j as u64) - self.prefix(a, j as u64)))
            .collect())
    }

    /// Snap a time in [0, 1] to the dyadic grid.
    fn to_grid(&self, t: f64) -> Result<u64> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::Domain(format!(
                "time {t} outside the horizon [0, 1]"
            )));
        }
        Ok((t * (1u64 << RESOLUTION) as f64).round() as u64)
    }

    /// Fixed-point path value P(t) = B(t) / 2^-44 at a grid time, found
    /// by descending the subdivision tree with midpoint displacement:
    /// the value at the midpoint of node (depth, k) is the endpoint
    /// average plus a bridge draw of standard deviation sqrt(len)/2.
    fn prefix(&self, t: u64, component: u64) -> i64 {
        if t == 0 {
            return 0;
        }
        let mut lo = 0u64;
        let mut hi = 1u64 << RESOLUTION;
        let mut p_lo = 0i64;
        let mut p_hi = quantize(self.gauss(1, component, KIND_ROOT));
        let mut depth = 0u32;
        let mut k = 0u64;
        loop {
            if t == hi {
                return p_hi;
            }
            if t == lo {
                return p_lo;
            }
            let mid = lo + (hi - lo) / 2;
            let len = (hi - lo) as f64 / (1u64 << RESOLUTION) as f64;
            let half_sd = len.sqrt() / 2.0;
            let node = (1u64 << depth) + k;
            let z = self.gauss(node, component, KIND_BRIDGE);
            let p_mid = midpoint(p_lo, p_hi) + quantize(half_sd * z);
            if t < mid {
                hi = mid;
                p_hi = p_mid;
                k *= 2;
            } else {
                lo = mid;
                p_lo = p_mid;
                k = 2 * k + 1;
            }
            depth += 1;
        }
    }

    #[inline]
    fn gauss(&self, node: u64, component: u64, kind: u64) -> f64 {
        u64_to_standard_normal(hash_fields(&[
            self.key.seed,
            self.key.path_id,
            node,
            component,
            kind,
        ]))
    }
}
