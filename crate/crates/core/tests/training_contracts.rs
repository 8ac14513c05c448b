mod common;

use layerlight_core::checkpoint::{load_adapter, load_denoiser, save_adapter, save_denoiser};
use layerlight_core::diffusion::{
    cfg_predict, train_adapter, train_denoiser, Adapter, AdapterTrainConfig, ConditionSpec, Denoiser, DenoiserTrainConfig,
    DiffusionSchedule, GuidanceMode, NoisePredictor, Scorer,
};
use layerlight_core::distill::sds::randn;
use layerlight_core::scene::NUM_DIRECTIONS;
use layerlight_nn::{Shape, Tensor};

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::cosine(1000).unwrap()
}

fn probe(seed: u64) -> (Tensor, Tensor, Vec<usize>, Vec<ConditionSpec>) {
    let mut rng = layerlight_core::seed::rng(seed);
    let x = randn(Shape::new(3, 2, 32, 32), &mut rng);
    let ci = randn(Shape::new(3, 2, 32, 32), &mut rng).map(|v| v.abs().min(1.0));
    (x, ci, vec![120, 870], vec![ConditionSpec::new(3, 1), ConditionSpec::new(9, 6)])
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn fresh_adapter_leaves_trained_denoiser_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let d = common::tiny_denoiser(&set, 2);
    let a = Adapter::for_denoiser(common::tiny_adapter_config(), &d, 3);
    let (x, ci, t, c) = probe(4);
    let plain = d.predict_noise(&x, &t, &c, None);
    let with = Scorer::new(&d, Some(&a)).predict_noise(&x, &t, &c, Some(&ci));
    assert_eq!(bits(&plain), bits(&with));
}

#[test]
fn adapter_training_leaves_denoiser_bytes_alone_and_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let d = common::tiny_denoiser(&set, 2);
    let before = d.store.checksum();
    let mut a = Adapter::for_denoiser(common::tiny_adapter_config(), &d, 3);
    let cfg = AdapterTrainConfig { iters: 20, batch: 4, log_every: 10, ..AdapterTrainConfig::default() };
    let report = train_adapter(&mut a, &d, &set, &schedule(), &cfg).unwrap();
    assert_eq!(report.loss_curve.len(), 2);
    assert_eq!(d.store.checksum(), before);
    let (x, ci, t, c) = probe(4);
    let plain = d.predict_noise(&x, &t, &c, None);
    let with = Scorer::new(&d, Some(&a)).predict_noise(&x, &t, &c, Some(&ci));
    assert!(plain.max_abs_diff(&with) > 0.0);
}

#[test]
fn guidance_scales_zero_and_one_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let d = common::tiny_denoiser(&set, 2);
    let mut a = Adapter::for_denoiser(common::tiny_adapter_config(), &d, 3);
    let cfg = AdapterTrainConfig { iters: 10, batch: 4, ..AdapterTrainConfig::default() };
    train_adapter(&mut a, &d, &set, &schedule(), &cfg).unwrap();
    let s = Scorer::new(&d, Some(&a));
    let (x, ci, t, c) = probe(5);
    let nulls = vec![ConditionSpec::null(); 2];
    for mode in [GuidanceMode::NullTokens, GuidanceMode::DropAdapter] {
        let u_img = if mode == GuidanceMode::NullTokens { Some(&ci) } else { None };
        let uncond = s.predict_noise(&x, &t, &nulls, u_img);
        let cond = s.predict_noise(&x, &t, &c, Some(&ci));
        assert_eq!(bits(&cfg_predict(&s, &x, &t, &c, Some(&ci), 0.0, mode)), bits(&uncond));
        assert_eq!(bits(&cfg_predict(&s, &x, &t, &c, Some(&ci), 1.0, mode)), bits(&cond));
    }
}

#[test]
fn null_embeddings_untouched_without_dropout() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let mut d = Denoiser::new(common::tiny_denoiser_config(), 7);
    let [dir_table, cat_table] = d.embedding_tables();
    let null_rows = |d: &Denoiser| {
        let dt = d.store.get(dir_table);
        let ct = d.store.get(cat_table);
        let n = ct.shape().c - 1;
        (dt.plane(NUM_DIRECTIONS, 0).to_vec(), ct.plane(n, 0).to_vec(), dt.plane(0, 0).to_vec())
    };
    let (dn0, cn0, d00) = null_rows(&d);
    let cfg = DenoiserTrainConfig { epochs: 1, batch: 16, cond_dropout: 0.0, ..DenoiserTrainConfig::default() };
    train_denoiser(&mut d, &set, &schedule(), &cfg).unwrap();
    let (dn1, cn1, d01) = null_rows(&d);
    assert_eq!(dn0, dn1);
    assert_eq!(cn0, cn1);
    assert_ne!(d00, d01, "a used token should move");
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let run = || {
        let mut d = Denoiser::new(common::tiny_denoiser_config(), 11);
        let cfg = DenoiserTrainConfig { epochs: 3, batch: 16, seed: 11, ..DenoiserTrainConfig::default() };
        let r = train_denoiser(&mut d, &set, &schedule(), &cfg).unwrap();
        (d.store.checksum(), r.loss_curve)
    };
    let (ca, la) = run();
    let (cb, lb) = run();
    assert_eq!(ca, cb);
    assert_eq!(la, lb);
    assert!(la.last().unwrap() < la.first().unwrap(), "{la:?}");
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, set) = common::tiny_training_set(dir.path(), 1);
    let d = common::tiny_denoiser(&set, 2);
    let mut a = Adapter::for_denoiser(common::tiny_adapter_config(), &d, 3);
    train_adapter(&mut a, &d, &set, &schedule(), &AdapterTrainConfig { iters: 3, batch: 2, ..AdapterTrainConfig::default() })
        .unwrap();
    let dp = dir.path().join("d.ckpt");
    let ap = dir.path().join("a.ckpt");
    save_denoiser(&dp, &d, serde_json::json!({}), &schedule(), 2).unwrap();
    save_adapter(&ap, &a, serde_json::json!({}), &schedule(), 3).unwrap();
    let (d2, hd) = load_denoiser(&dp).unwrap();
    let (a2, _) = load_adapter(&ap).unwrap();
    assert_eq!(hd.trained_steps, d.trained_steps);
    assert_eq!(d2.store.checksum(), d.store.checksum());
    assert_eq!(a2.store.checksum(), a.store.checksum());
    let (x, ci, t, c) = probe(8);
    let p1 = Scorer::new(&d, Some(&a)).predict_noise(&x, &t, &c, Some(&ci));
    let p2 = Scorer::new(&d2, Some(&a2)).predict_noise(&x, &t, &c, Some(&ci));
    assert_eq!(bits(&p1), bits(&p2));
    assert!(load_adapter(&dp).is_err(), "a denoiser file must not load as an adapter");
}
