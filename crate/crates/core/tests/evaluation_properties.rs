mod common;

use fematch::sampler::simulate;
use fematch::{kl_divergence_2d, ReferenceLandscape};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian_cloud(n: usize, shift: f64, seed: u64) -> DMatrix<f64> {
    let s = common::normals(2 * n, seed);
    DMatrix::from_fn(n, 2, |t, k| s[2 * t + k] + if k == 0 { shift } else { 0.0 })
}

#[test]
fn kl_does_not_grow_with_smoothing() {
    let truth = gaussian_cloud(20_000, 0.0, 61);
    let model = gaussian_cloud(20_000, 0.7, 62);
    let kl: Vec<f64> = [0.0, 0.01, 0.1, 0.5, 1.0, 5.0, 50.0]
        .iter()
        .map(|&e| kl_divergence_2d(&truth, &model, 40, 40, e).unwrap().kl_nats)
        .collect();
    for w in kl.windows(2) {
        assert!(w[1] <= w[0], "{kl:?}");
    }
}

#[test]
fn a_model_trapped_in_one_basin_is_detected() {
    let l = ReferenceLandscape::from_name("double_well_2d").unwrap();
    let starts = vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]];
    let truth = simulate(&l, &common::langevin(starts, 2_000_000, 1e-3, 100, 63)).unwrap();
    let truth_y = DMatrix::from_rows(
        &truth
            .chains
            .iter()
            .flat_map(|c| c.trajectory.frames().row_iter().map(|r| r.into_owned()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    );
    // Keep only the right basin for the model ensemble.
    let trapped: Vec<_> = truth_y.row_iter().filter(|r| r[0] > 0.0).map(|r| r.into_owned()).collect();
    let model_y = DMatrix::from_rows(&trapped);
    let kl = kl_divergence_2d(&truth_y, &model_y, 50, 50, 0.5).unwrap().kl_nats;
    assert!(kl >= std::f64::consts::LN_2 - 0.1, "{kl}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_non_negative_and_zero_on_identity(seed in any::<u64>(), shift in -2.0f64..2.0, bins in 2usize..30) {
        let a = gaussian_cloud(500, 0.0, seed);
        let b = gaussian_cloud(500, shift, seed.wrapping_add(1));
        let r = kl_divergence_2d(&a, &b, bins, bins, 0.5).unwrap();
        prop_assert!(r.kl_nats >= 0.0);
        prop_assert!(r.marginal_kl.iter().all(|&k| k >= 0.0));
        prop_assert_eq!(kl_divergence_2d(&a, &a, bins, bins, 0.5).unwrap().kl_nats, 0.0);
    }
}
