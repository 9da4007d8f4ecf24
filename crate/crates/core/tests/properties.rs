//! Property-based invariants over randomized inputs.

use proptest::prelude::*;

use sdebnn::brownian::{BrownianPath, SeedKey};
use sdebnn::likelihood::calibration;
use sdebnn::nets::{pack, unpack, Activation, LayerSpec};
use sdebnn::rng::Stream;
use sdebnn::tensor::Tensor;

proptest! {
    /// Increments telescope bitwise over any dyadic split point.
    #[test]
    fn brownian_additivity_is_exact(
        seed in any::<u64>(),
        path_id in 0u64..1000,
        // dyadic grid points a < m < b at resolution 2^-10
        a in 0u64..1022,
        gap1 in 1u64..512,
        gap2 in 1u64..512,
    ) {
        let m = (a + gap1).min(1023);
        let b = (m + gap2).min(1024);
        prop_assume!(a < m && m < b);
        let to_t = |g: u64| g as f64 / 1024.0;
        let p = BrownianPath::new(SeedKey { seed, path_id }, 2);
        let whole = p.increment(to_t(a), to_t(b)).unwrap();
        let left = p.increment(to_t(a), to_t(m)).unwrap();
        let right = p.increment(to_t(m), to_t(b)).unwrap();
        for j in 0..2 {
            prop_assert_eq!(whole[j], left[j] + right[j]);
        }
    }

    /// Subdivision agrees with the direct increment query.
    #[test]
    fn brownian_subdivision_matches_increment(
        seed in any::<u64>(),
        a in 0u64..254,
        gap in 2u64..64,
    ) {
        let b = (a + gap).min(256);
        let m = a + (b - a) / 2;
        prop_assume!(a < m && m < b);
        let to_t = |g: u64| g as f64 / 256.0;
        let p = BrownianPath::new(SeedKey { seed, path_id: 1 }, 1);
        let sub = p.subdivide(to_t(a), to_t(b), to_t(m)).unwrap();
        let inc = p.increment(to_t(a), to_t(m)).unwrap();
        prop_assert_eq!(sub, inc);
    }

    /// unpack(pack(parts)) reproduces every weight and bias exactly.
    #[test]
    fn pack_unpack_roundtrip(
        dims in proptest::collection::vec(1usize..5, 2..5),
        seed in any::<u64>(),
    ) {
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .map(|p| LayerSpec::new(p[0], p[1], Activation::Tanh, false))
            .collect();
        let mut rng = Stream::new(seed, 1);
        let parts: Vec<(Tensor, Tensor)> = layers
            .iter()
            .map(|l| {
                let w = Tensor::matrix(
                    l.input_dim,
                    l.output_dim,
                    (0..l.input_dim * l.output_dim).map(|_| rng.normal()).collect(),
                );
                let b = Tensor::vector((0..l.output_dim).map(|_| rng.normal()).collect());
                (w, b)
            })
            .collect();
        let flat = pack(&layers, &parts);
        let back = unpack(&layers, &flat);
        prop_assert_eq!(parts, back);
    }

    /// Permuting example order leaves the calibration report unchanged.
    #[test]
    fn calibration_is_permutation_invariant(
        n in 2usize..40,
        seed in any::<u64>(),
    ) {
        let mut rng = Stream::new(seed, 2);
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let p = rng.uniform();
            rows.push([p, 1.0 - p]);
            labels.push(rng.index(2));
        }
        let probs = Tensor::matrix(n, 2, rows.iter().flatten().copied().collect());
        let base = calibration(&probs, &labels);

        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let probs_p = Tensor::matrix(
            n,
            2,
            order.iter().flat_map(|&i| rows[i]).collect(),
        );
        let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let perm = calibration(&probs_p, &labels_p);

        prop_assert_eq!(base.accuracy, perm.accuracy);
        prop_assert!((base.nll - perm.nll).abs() < 1e-12);
        prop_assert!((base.ece - perm.ece).abs() < 1e-12);
        prop_assert!((base.brier - perm.brier).abs() < 1e-12);
    }
}
