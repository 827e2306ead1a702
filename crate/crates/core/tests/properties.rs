use proptest::prelude::*;

use cmtssl::config::RunConfig;
use cmtssl::curriculum::CurriculumSchedule;
use cmtssl::data::{self, DataCube};
use cmtssl::difficulty::{self, Aggregation};
use cmtssl::evaluation::{aggregate_runs, metrics, ConfusionMatrix};
use cmtssl::pretext::{self, MaskingConfig, SpatialJigsawConfig, SpectralJigsawConfig};
use cmtssl::report::{self, MetricRow};
use cmtssl::seed;

fn cube_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = DataCube> {
    prop::collection::vec(-10.0f64..10.0, h * w * c).prop_map(move |v| DataCube::new(h, w, c, v).unwrap())
}

fn transpose(cube: &DataCube) -> DataCube {
    DataCube::from_fn(cube.width, cube.height, cube.bands, |r, c, b| cube.get(c, r, b))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn difficulty_is_nonnegative_and_transpose_invariant(cube in cube_strategy(6, 6, 3)) {
        for agg in [Aggregation::Average, Aggregation::Maximum, Aggregation::Std] {
            let a = difficulty::difficulty(&cube, agg).unwrap();
            let b = difficulty::difficulty(&transpose(&cube), agg).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sorted_order_is_ascending_permutation(scores in prop::collection::vec(-1e3f64..1e3, 0..50)) {
        let order = difficulty::sort_by_difficulty(&scores);
        prop_assert!(pretext::is_permutation(&order));
        prop_assert!(order.windows(2).all(|w| scores[w[0]] <= scores[w[1]]));
    }

    #[test]
    fn schedule_stages_are_nested_and_complete(
        n in 5usize..5000,
        s in 1usize..6,
        k in 1usize..50,
        f_tenths in 5u32..30,
    ) {
        let sched = CurriculumSchedule::new(n, s.min(n), k, f_tenths as f64 / 10.0).unwrap();
        let b = sched.batches();
        prop_assert!(b.windows(2).all(|w| w[0].size <= w[1].size));
        prop_assert_eq!(b.last().unwrap().size, n);
        prop_assert!(b.iter().all(|x| x.epochs >= 1));
        let steps: usize = b.iter().map(|x| x.epochs * x.size.div_ceil(7)).sum();
        prop_assert_eq!(sched.match_budget(7), steps);
    }

    #[test]
    fn spatial_restore_inverts_any_permutation(
        cube in cube_strategy(8, 8, 2),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cfg = SpatialJigsawConfig { patch_height: 4, patch_width: 4 };
        let s = pretext::apply_spatial_permutation(&cube, &cfg, &perm).unwrap();
        let back = pretext::restore_spatial(&s.shuffled, &cfg, &perm).unwrap();
        prop_assert_eq!(back.values, cube.values);
        prop_assert_eq!(pretext::decode_permutation(&s.target).unwrap(), perm);
    }

    #[test]
    fn spectral_restore_inverts_any_permutation(
        cube in cube_strategy(3, 3, 6),
        perm in Just((0..3).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let cfg = SpectralJigsawConfig { blocks: 3 };
        let s = pretext::apply_spectral_permutation(&cube, &cfg, &perm).unwrap();
        let back = pretext::restore_spectral(&s.shuffled, &cfg, &perm).unwrap();
        prop_assert_eq!(back.values, cube.values);
    }

    #[test]
    fn masking_count_matches_ratio(ratio in 0.05f64..0.95, seed_value in any::<u64>()) {
        let cube = DataCube::from_fn(8, 8, 4, |r, c, b| (r * 31 + c * 7 + b) as f64);
        let cfg = MaskingConfig { patch_height: 4, patch_width: 4, band_groups: 2, ratio };
        let mut rng = seed::rng(seed_value, &[]);
        let m = pretext::mask_cube(&cube, &cfg, &mut rng).unwrap();
        let expect = pretext::masked_patch_count(8, ratio).unwrap();
        prop_assert_eq!(m.masked_patches.len(), expect);
        prop_assert_eq!(m.masked_voxels(), expect * 4 * 4 * 2);
        prop_assert_eq!(m.reassemble(), cube.values);
    }

    #[test]
    fn metric_bounds(rows in prop::collection::vec(prop::collection::vec(0u64..100, 4), 4)) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let m = metrics(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.oa));
        prop_assert!((0.0..=1.0).contains(&m.aa));
        prop_assert!(m.kappa <= m.oa);
        prop_assert!(m.kappa >= -1.0);
    }

    #[test]
    fn confusion_merge_is_additive(
        a in prop::collection::vec((0i32..3, 0usize..3), 1..40),
        b in prop::collection::vec((0i32..3, 0usize..3), 1..40),
    ) {
        let split = |v: &[(i32, usize)]| -> (Vec<usize>, Vec<i32>) {
            (v.iter().map(|x| x.1).collect(), v.iter().map(|x| x.0).collect())
        };
        let (pa, ta) = split(&a);
        let (pb, tb) = split(&b);
        let mut merged = cmtssl::evaluation::confusion(&pa, &ta, 3, None).unwrap();
        merged.merge(&cmtssl::evaluation::confusion(&pb, &tb, 3, None).unwrap()).unwrap();
        let joint = cmtssl::evaluation::confusion(
            &[pa, pb].concat(),
            &[ta, tb].concat(),
            3,
            None,
        ).unwrap();
        prop_assert_eq!(merged, joint);
    }

    #[test]
    fn normalization_round_trips(cube in cube_strategy(4, 4, 3)) {
        let stats = data::fit_normalizer(std::slice::from_ref(&cube)).unwrap();
        let back = data::denormalize(&data::normalize(&cube, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.values.iter().zip(&cube.values) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn metric_rows_round_trip_through_csv(vals in prop::collection::vec(0.0f64..1.0, 6)) {
        let base = metrics(&ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap()).unwrap();
        let a = cmtssl::evaluation::MetricReport { oa: vals[0], aa: vals[1], kappa: vals[2], ..base.clone() };
        let b = cmtssl::evaluation::MetricReport { oa: vals[3], aa: vals[4], kappa: vals[5], ..base };
        let agg = aggregate_runs(&[a, b]).unwrap();
        let row = MetricRow::new("cmtssl", &agg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        report::write_csv(&path, std::slice::from_ref(&row)).unwrap();
        let read: Vec<MetricRow> = csv::Reader::from_path(&path)
            .unwrap()
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        prop_assert_eq!(read, vec![row]);
    }
}

#[test]
fn config_snapshot_round_trips() {
    let cfg = RunConfig::resolve(None, &["curriculum.K=7".into(), "loss.mim=2.5".into()]).unwrap();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
}
