mod common;

use layerlight_core::dataset::{generate_dataset, DatasetConfig, Manifest, Split};
use layerlight_core::image::srgb_oetf;
use layerlight_core::pngio::{quantize_u8, read_srgb_png};
use layerlight_core::scene::{render_relit, render_uniform, sample_scene, LightSpec, NUM_DIRECTIONS};
use proptest::prelude::*;

#[test]
fn same_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::tiny_dataset(a.path(), 5);
    common::tiny_dataset(b.path(), 5);
    let (sa, sb) = (common::snapshot(a.path()), common::snapshot(b.path()));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
}

#[test]
fn different_seed_changes_scenes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = common::tiny_dataset(a.path(), 1);
    let mb = common::tiny_dataset(b.path(), 2);
    let ra = ma.load_record(&ma.rows[0]).unwrap();
    let rb = mb.load_record(&mb.rows[0]).unwrap();
    assert_ne!(ra.scene, rb.scene);
}

#[test]
fn stored_pngs_match_analytic_renders_within_one_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::tiny_dataset(dir.path(), 3);
    for row in m.rows.iter().take(4) {
        let rec = m.load_record(row).unwrap();
        let check = |file: &str, analytic: &layerlight_core::image::LinearImage| {
            let stored = read_srgb_png(&m.root.join(file)).unwrap();
            for (s, a) in stored.data().iter().zip(analytic.data()) {
                let sb = (s * 255.0).round() as i32;
                let ab = i32::from(quantize_u8(srgb_oetf(*a)));
                assert!((sb - ab).abs() <= 1, "{file}: stored {sb}, analytic {ab}");
            }
        };
        check(&row.paths.uniform, &render_uniform(&rec.scene, rec.uniform_level).unwrap());
        for d in 0..NUM_DIRECTIONS {
            check(&row.paths.relit[d], &render_relit(&rec.scene, &rec.light(d)).unwrap());
        }
    }
}

#[test]
fn manifest_reload_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let m = common::tiny_dataset(dir.path(), 4);
    let again = Manifest::load(dir.path()).unwrap();
    assert_eq!(m, again);
    let test: Vec<_> = m.split(Split::Test).collect();
    let train: Vec<_> = m.split(Split::Train).collect();
    assert!(!test.is_empty() && !train.is_empty());
    assert_eq!(test.len() + train.len(), 13);
    let sample = m.load_sample(test[0]).unwrap();
    assert_eq!(sample.relit_images.len(), NUM_DIRECTIONS);
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    common::tiny_dataset(dir.path(), 0);
    let cfg = DatasetConfig { num_scenes: 13, size: 32, ..DatasetConfig::default() };
    let err = generate_dataset(&cfg, dir.path(), false).unwrap_err();
    assert_eq!(err.kind(), "exists");
}

#[test]
fn ground_truth_renders_classify_as_themselves() {
    let (hits, total) = common::oracle_self_consistency(5, 9);
    assert_eq!(hits, total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn renders_stay_in_unit_range(seed in any::<u64>(), cat in 0usize..8, d in 0usize..NUM_DIRECTIONS) {
        let scene = sample_scene(seed, 32, cat).unwrap();
        let img = render_relit(&scene, &LightSpec::new(d)).unwrap();
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let flat = render_uniform(&scene, 0.9).unwrap();
        prop_assert!(flat.data().iter().all(|v| (0.0..=0.9).contains(v)));
    }
}
