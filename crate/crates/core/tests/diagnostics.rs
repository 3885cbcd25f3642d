use approx::assert_relative_eq;
use mhla_core::attention::AttentionConfig;
use mhla_core::diagnostics::{
    collapse_report, materialize_attention, mean_row_entropy, numerical_rank, read_reports_csv,
    write_reports_csv, Mechanism, TolPolicy,
};
use mhla_core::mixing::locality_init;
use mhla_core::partition::BlockPartition;
use mhla_core::svd::singular_values;
use mhla_core::tensor::{apply_feature_map, gemm, DenseMatrix, FeatureMap};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let na = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut s: Vec<f64> = na.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn jacobi_matches_reference_svd(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DenseMatrix::gaussian(&mut rng, rows, cols);
        let ours = singular_values(&m).unwrap();
        let theirs = reference_singular_values(&m);
        prop_assert_eq!(ours.len(), rows.min(cols));
        for (a, b) in ours.iter().zip(&theirs) {
            prop_assert!((a - b).abs() <= 1e-8 * theirs[0].max(f64::MIN_POSITIVE));
        }
    }
}

#[test]
fn low_rank_product_has_at_most_d_values_above_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let qf = apply_feature_map(
        &DenseMatrix::gaussian(&mut rng, 256, 16),
        FeatureMap::EluPlusOne,
    );
    let kf = apply_feature_map(
        &DenseMatrix::gaussian(&mut rng, 256, 16),
        FeatureMap::EluPlusOne,
    );
    let scores = gemm(&qf, &kf, false, true).unwrap();
    let s = singular_values(&scores).unwrap();
    let tau = 256.0 * f64::EPSILON * s[0];
    assert!(s.iter().filter(|&&x| x > tau).count() <= 16);
    assert!(numerical_rank(&scores, TolPolicy::Auto).unwrap() <= 16);
}

#[test]
fn materialized_maps_reproduce_the_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d, m) = (64, 8, 16);
    let q = DenseMatrix::gaussian(&mut rng, n, d);
    let k = DenseMatrix::gaussian(&mut rng, n, d);
    let v = DenseMatrix::gaussian(&mut rng, n, d);
    let p = BlockPartition::square_grid(8, 4).unwrap();
    assert_eq!(p.num_blocks(), m);
    let cfg =
        AttentionConfig::mhla(FeatureMap::EluPlusOne, true, p.clone(), locality_init(&p)).unwrap();
    let global = AttentionConfig::global(FeatureMap::EluPlusOne, true).unwrap();
    let cases = [
        (
            Mechanism::Softmax,
            mhla_core::softmax_attention(&q, &k, &v).unwrap(),
        ),
        (
            Mechanism::Linear,
            mhla_core::linear_attention(&q, &k, &v, &global).unwrap(),
        ),
        (
            Mechanism::Mhla,
            mhla_core::mhla_forward(&q, &k, &v, &cfg).unwrap(),
        ),
    ];
    for (mech, y) in cases {
        let a = materialize_attention(&q, &k, &cfg, mech).unwrap();
        let av = gemm(&a, &v, false, false).unwrap();
        assert!(av.max_abs_diff(&y).unwrap() <= 1e-10, "{mech}");
        let h = mean_row_entropy(&a).unwrap();
        assert!(h <= (n as f64).ln() + 1e-12);
    }
}

#[test]
fn linear_rank_never_exceeds_head_dim_and_mhla_respects_its_bound() {
    for seed in 0..20 {
        let [softmax, linear, mhla] = collapse_report(seed, 256, 16, 16).unwrap();
        assert_eq!(softmax.mechanism, Mechanism::Softmax);
        assert!(
            linear.numerical_rank <= 16,
            "seed {seed}: linear rank {}",
            linear.numerical_rank
        );
        assert!(mhla.numerical_rank <= mhla.rank_bound);
        assert!(
            mhla.numerical_rank > 16,
            "seed {seed}: mhla rank {}",
            mhla.numerical_rank
        );
        for r in [&softmax, &linear, &mhla] {
            assert!(r.mean_row_entropy.unwrap() <= (256f64).ln() + 1e-12);
        }
    }
}

#[test]
fn uniform_rows_hit_the_entropy_ceiling() {
    let n = 10;
    let a = DenseMatrix::filled(n, n, 1.0 / n as f64);
    assert_relative_eq!(
        mean_row_entropy(&a).unwrap(),
        (n as f64).ln(),
        max_relative = 1e-14
    );
}

#[test]
fn report_csv_parses_back() {
    let reports: Vec<_> = (0..3)
        .flat_map(|s| collapse_report(s, 64, 8, 16).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &reports, &["protocol line".to_string()]).unwrap();
    let back = read_reports_csv(buf.as_slice()).unwrap();
    assert_eq!(back, reports);
}
