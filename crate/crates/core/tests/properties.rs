use proptest::prelude::*;

use stress_bd::autodiff::{relative_error, Tensor};
use stress_bd::cli::config::grid_with_levels;
use stress_bd::clustering::{kmeans_fit, nearest_center, squared_distance, KmeansInit};
use stress_bd::dataset::{Dataset, GenerateOptions};
use stress_bd::evaluation::{build_comparison, fit_trend, ssd_error, MeanStd};
use stress_bd::networks::{load_checkpoint, save_checkpoint, BdNet, Topology};
use stress_bd::trainers::{CheckpointRecord, LossTerms, TrainConfig, TrainReport, Variant};
use stress_bd::Error;

fn small_dataset(seed: u64) -> Dataset {
    Dataset::generate(&GenerateOptions {
        grid: grid_with_levels(2).unwrap(),
        n_train: 36,
        seed,
        ..GenerateOptions::default()
    })
    .unwrap()
}

#[test]
fn dataset_file_round_trips_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("deep/dir/d.sbd");
    let ds = small_dataset(5);
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn any_flipped_payload_bit_is_detected() {
    let bytes = small_dataset(5).to_bytes().unwrap();
    for pos in [bytes.len() / 2, bytes.len() - 1, 20] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(Dataset::from_bytes(&bad).is_err(), "flip at {pos}");
    }
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&magic), Err(Error::Checksum { .. } | Error::Format(_))));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("w.weights");
    let net = BdNet::init(Topology::tiny(4), 9).unwrap();
    save_checkpoint(&path, &net, "dc_bd", 120, 9).unwrap();
    let (header, back) = load_checkpoint(&path).unwrap();
    assert_eq!((header.label.as_str(), header.iteration, header.seed), ("dc_bd", 120, 9));
    let params = Tensor::new(vec![2, 5], vec![0.1, 0.9, 0.3, 0.5, 0.0, 1.0, 0.2, 0.7, 0.4, 1.0]).unwrap();
    assert_eq!(net.predict(&params).unwrap(), back.predict(&params).unwrap());
}

fn report(variant: Variant, seed: u64, test: f64, train: f64) -> TrainReport {
    let record = |iteration, test_ssd, train_ssd| CheckpointRecord {
        iteration,
        train_ssd: (variant != Variant::AeKnn).then_some(train_ssd),
        test_ssd,
        recon_ssd: None,
        train_loss: LossTerms::default(),
        batch_loss: None,
    };
    TrainReport {
        variant,
        seed,
        config: TrainConfig {
            variant,
            seed,
            ..TrainConfig::default()
        },
        kmeans_calls: 0,
        checkpoints: vec![record(0, 1.0, 1.0), record(5000, test, train)],
        timing: Default::default(),
    }
}

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn image_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| (prop::collection::vec(-2.0f64..2.0, n), prop::collection::vec(-2.0f64..2.0, n)))
}

proptest! {
    #[test]
    fn ssd_is_a_symmetric_nonnegative_discrepancy((a, b) in image_pair()) {
        let ab = ssd_error(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ssd_error(&b, &a).unwrap());
        prop_assert_eq!(ssd_error(&a, &a).unwrap(), 0.0);
        let manual: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        prop_assert!((ab - manual).abs() <= 1e-12 * manual.max(1.0));
    }

    #[test]
    fn trend_residuals_are_orthogonal_to_the_design(
        points in prop::collection::vec((0.0f64..5000.0, -1.0f64..1.0), 2..40)
    ) {
        prop_assume!(points.iter().any(|p| (p.0 - points[0].0).abs() > 1.0));
        let (slope, intercept) = fit_trend(&points).unwrap();
        let residual: Vec<f64> = points.iter().map(|(x, y)| y - (slope * x + intercept)).collect();
        let scale: f64 = points.iter().map(|p| p.0.abs() * p.1.abs().max(1.0)).sum::<f64>() + 1.0;
        prop_assert!(residual.iter().sum::<f64>().abs() <= 1e-9 * scale);
        let dot: f64 = points.iter().zip(&residual).map(|(p, r)| p.0 * r).sum();
        prop_assert!(dot.abs() <= 1e-9 * scale * 5000.0);
    }

    #[test]
    fn comparison_ignores_report_order(
        runs in prop::collection::vec((variant_strategy(), 0u64..4, 0.0f64..1.0, 0.0f64..1.0), 1..12),
        rotation in 0usize..12,
    ) {
        let reports: Vec<TrainReport> = runs.iter().map(|&(v, s, te, tr)| report(v, s, te, tr)).collect();
        let mut shuffled = reports.clone();
        shuffled.reverse();
        let k = rotation % shuffled.len();
        shuffled.rotate_left(k);
        let a = build_comparison(&reports, &[]).unwrap();
        let b = build_comparison(&shuffled, &[]).unwrap();
        prop_assert_eq!(a.to_csv(false), b.to_csv(false));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.rows.iter().map(|r| r.runs).sum::<usize>(), reports.len());
        for row in &a.rows {
            prop_assert_eq!(row.train.is_none(), row.variant == Variant::AeKnn);
            prop_assert!(row.test.std >= 0.0);
        }
    }

    #[test]
    fn mean_std_bounds(values in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let m = MeanStd::of(&values).unwrap();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.mean >= lo - 1e-9 && m.mean <= hi + 1e-9);
        prop_assert!(m.std >= 0.0 && m.std <= (hi - lo) + 1e-9);
        if values.len() == 1 {
            prop_assert_eq!(m.std, 0.0);
        }
    }

    #[test]
    fn relative_error_is_symmetric_and_bounded(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        let r = relative_error(a, b);
        prop_assert_eq!(r, relative_error(b, a));
        prop_assert!((0.0..=2.0).contains(&r));
        prop_assert_eq!(relative_error(a, a), 0.0);
    }

    #[test]
    fn kmeans_assigns_every_point_to_its_nearest_center(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 3..30),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        prop_assume!(k <= rows.len());
        let points = Tensor::from_rows(&rows).unwrap();
        let fit = kmeans_fit(&points, k, &KmeansInit::Seed(seed), 25).unwrap();
        prop_assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(fit.model.k(), k);
        let mut objective = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let (center, idx) = nearest_center(row, &fit.model).unwrap();
            prop_assert_eq!(idx, fit.model.assignments[i]);
            objective += squared_distance(row, center);
        }
        prop_assert!((objective - fit.model.objective).abs() <= 1e-9 * objective.max(1.0));
    }

    #[test]
    fn regeneration_is_deterministic_per_seed(seed in 0u64..1_000_000) {
        let a = small_dataset(seed);
        let b = small_dataset(seed);
        prop_assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        prop_assert_eq!(a.train_indices().len(), 36);
        prop_assert_eq!(a.test_indices().len(), 12);
    }
}
