mod common;

use layerlight_core::diffusion::{add_noise, DiffusionSchedule};
use layerlight_core::image::LinearImage;
use proptest::prelude::*;

#[test]
fn identities_and_boundaries() {
    for n in [10, 250, 1000] {
        let r = common::schedule_check(n);
        assert!(r.max_identity_dev <= 1e-6, "{n}: {}", r.max_identity_dev);
        assert!(r.bounds_hold && r.errors_on_out_of_range, "{n}");
    }
    let r = common::schedule_check(1000);
    assert!(r.start.0 < 0.01 && r.start.1 < 0.05, "{:?}", r.start);
    assert!(r.end.0 < 0.01 && r.end.1 < 0.05, "{:?}", r.end);
}

#[test]
fn signal_decays_monotonically() {
    let s = DiffusionSchedule::cosine(1000).unwrap();
    assert!(s.alpha.windows(2).all(|w| w[1] <= w[0]));
    assert!(s.weight.iter().all(|&w| w == 1.0));
}

fn img(v: Vec<f64>) -> LinearImage {
    LinearImage::new(2, 2, v).unwrap()
}

proptest! {
    #[test]
    fn add_noise_is_affine(
        x in prop::collection::vec(0.0f64..=1.0, 12),
        y in prop::collection::vec(0.0f64..=1.0, 12),
        e in prop::collection::vec(-3.0f64..3.0, 12),
        f in prop::collection::vec(-3.0f64..3.0, 12),
        t in 0usize..1000,
    ) {
        let s = DiffusionSchedule::cosine(1000).unwrap();
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
        let emid: Vec<f64> = e.iter().zip(&f).map(|(a, b)| 0.5 * (a + b)).collect();
        let a = add_noise(&s, &img(x), t, &e).unwrap();
        let b = add_noise(&s, &img(y), t, &f).unwrap();
        let m = add_noise(&s, &img(mid), t, &emid).unwrap();
        for i in 0..12 {
            prop_assert!((m[i] - 0.5 * (a[i] + b[i])).abs() <= 1e-12);
        }
    }
}
