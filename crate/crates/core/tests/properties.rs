//! Invariants of the finite-sample sandwich loss on random linear datasets.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sandreg::sandwich::sandwich_loss;
use sandreg::{ClusterData, ClusterDataset, CovarianceStructure, DispersionParams, GlmFamily, ScaleMode, TargetContrast};

fn dataset(seed: u64, clusters: usize) -> ClusterDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..clusters)
        .map(|_| {
            let n = rng.random_range(2..=6);
            let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            let u: f64 = rng.sample(StandardNormal);
            let y = DVector::from_fn(n, |k, _| x[(k, 1)] + u + (1.0 + x[(k, 1)].abs()) * rng.sample::<f64, _>(StandardNormal));
            ClusterData::new(y, x).unwrap()
        })
        .collect();
    ClusterDataset::new(data).unwrap()
}

fn loss(ds: &ClusterDataset, rho: f64, phi: f64) -> f64 {
    let s = CovarianceStructure::exchangeable(ScaleMode::Free);
    let c = TargetContrast::coordinate(2, 1).unwrap();
    sandwich_loss(ds, &GlmFamily::gaussian(), &s, &DispersionParams::from_slice(&[rho, phi]), &c).unwrap().value
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_nonnegative_and_ignores_cluster_order(seed in 0u64..10_000, clusters in 6usize..20, rho in -0.1f64..0.9) {
        let ds = dataset(seed, clusters);
        let mut rev: Vec<ClusterData> = ds.clusters().to_vec();
        rev.reverse();
        let a = loss(&ds, rho, 1.0);
        let b = loss(&ClusterDataset::new(rev).unwrap(), rho, 1.0);
        prop_assert!(a >= 0.0);
        prop_assert!(close(a, b, 1e-10), "{a} vs {b}");
    }

    #[test]
    fn loss_does_not_depend_on_scale(seed in 0u64..10_000, rho in -0.1f64..0.9, phi in 0.05f64..20.0) {
        let ds = dataset(seed, 10);
        prop_assert!(close(loss(&ds, rho, 1.0), loss(&ds, rho, phi), 1e-9));
    }

    #[test]
    fn loss_scales_with_response_squared(seed in 0u64..10_000, rho in -0.1f64..0.9, s in 0.1f64..10.0) {
        let ds = dataset(seed, 10);
        prop_assert!(close(loss(&ds.scale_response(s), rho, 1.0), s * s * loss(&ds, rho, 1.0), 1e-9));
    }
}
