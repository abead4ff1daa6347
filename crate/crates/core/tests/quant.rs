use proptest::prelude::*;
use qlip_core::numerics::{Checkpoint, Tensor};
use qlip_core::quant::{
    calibrate_range, make_quantizer, quantize_weights_symmetric, ActivationRanges, BitMenu,
    CalibrationSet, QuantStore,
};
use qlip_core::rng::StreamKey;
use qlip_core::Error;

#[test]
fn uniform_samples_calibrate_near_percentiles() {
    let mut rng = StreamKey::new(5, "uniform").rng();
    let s: Vec<f64> = (0..100_000).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let (lo, hi) = calibrate_range(&s).unwrap();
    assert!((lo + 0.99).abs() < 0.02, "{lo}");
    assert!((hi - 0.99).abs() < 0.02, "{hi}");
    assert_eq!(calibrate_range(&[-5.0, 0.0, 5.0]).unwrap(), (-5.0, 5.0));
    assert!(calibrate_range(&[]).is_err());
    assert!(matches!(
        calibrate_range(&[1.0, f64::NAN]),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn empty_bucket_is_reported() {
    let mut set = CalibrationSet::new(2, 3);
    for l in 0..2 {
        for g in 0..3 {
            if (l, g) != (1, 2) {
                set.extend(l, g, &[0.0, 1.0]);
            }
        }
    }
    assert!(matches!(
        set.ranges(),
        Err(Error::EmptyCalibration { layer: 1, group: 2 })
    ));
    set.extend(1, 2, &[3.0]);
    assert_eq!(
        set.ranges().unwrap().range(1, 2).unwrap(),
        (3.0 - 1e-6, 3.0 + 1e-6)
    );
}

#[test]
fn ranges_round_trip_through_checkpoint() {
    let ranges = ActivationRanges::from_ranges(vec![
        vec![(0.0, 1.5), (-0.25, 3.0)],
        vec![(0.0, 0.125), (1e-3, 7.0)],
    ]);
    let menu = BitMenu::new(6, 8, 10, 8).unwrap();
    for m in [None, Some(&menu)] {
        let mut ck = Checkpoint::new();
        ranges.to_checkpoint(&mut ck, m).unwrap();
        let back =
            ActivationRanges::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back, ranges);
    }
    let mut ck = Checkpoint::new();
    ranges.to_checkpoint(&mut ck, Some(&menu)).unwrap();
    let scales = ck.f64s("quant/1/1/scale").unwrap();
    assert_eq!(scales.len(), 3);
    assert_eq!(scales[0], make_quantizer((1e-3, 7.0), 6).unwrap().scale);
}

#[test]
fn store_serves_every_menu_width() {
    let ranges = ActivationRanges::from_ranges(vec![vec![(0.0, 4.0)]; 3]);
    let menu = BitMenu::new(4, 6, 8, 8).unwrap();
    let store = QuantStore::build(&ranges, menu).unwrap();
    assert_eq!((store.layers(), store.groups()), (3, 1));
    for b in menu.bits() {
        assert_eq!(store.spec_for_bits(2, 0, b).unwrap().bits, b);
    }
    assert!(store.spec_for_bits(0, 0, 5).is_err());
    assert!(store.specs(3, 0).is_err());
}

#[test]
fn identity_menu_is_passthrough() {
    let ranges = ActivationRanges::from_ranges(vec![vec![(0.0, 1.0)]]);
    let store = QuantStore::build(&ranges, BitMenu::new(32, 32, 32, 32).unwrap()).unwrap();
    for s in store.specs(0, 0).unwrap() {
        assert!(s.is_identity());
        assert_eq!(s.apply(123.456), 123.456);
    }
    let w = Tensor::matrix(1, 3, vec![0.1, -0.7, 2.5]).unwrap();
    assert_eq!(quantize_weights_symmetric(&w, 32).unwrap(), w);
}

#[test]
fn menus_are_validated() {
    assert!(BitMenu::new(8, 6, 10, 8).is_err());
    assert!(BitMenu::new(6, 6, 10, 8).is_err());
    assert!(BitMenu::new(1, 6, 10, 8).is_err());
    assert!(BitMenu::new(6, 8, 25, 8).is_err());
    assert!(BitMenu::new(32, 32, 10, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn quantizer_laws(
        lo in -10.0f64..5.0,
        width in 1e-3f64..20.0,
        bits in 2u32..=16,
        x in -40.0f64..40.0,
        y in -40.0f64..40.0,
    ) {
        let spec = make_quantizer((lo, lo + width), bits).unwrap();
        let q = spec.apply(x);
        prop_assert_eq!(spec.apply(q).to_bits(), q.to_bits());
        if spec.passes(x) {
            prop_assert!((q - x).abs() <= spec.scale / 2.0 + 1e-12);
        }
        let (a, b) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(spec.apply(a) <= spec.apply(b));
        prop_assert!(spec.clip_min <= 0.0 && spec.clip_max >= 0.0);
        prop_assert_eq!(spec.apply(0.0), 0.0);
    }

    #[test]
    fn symmetric_weights_error_is_half_step(
        vals in prop::collection::vec(-3.0f64..3.0, 1..40),
        bits in 2u32..=12,
    ) {
        let w = Tensor::matrix(1, vals.len(), vals.clone()).unwrap();
        let q = quantize_weights_symmetric(&w, bits).unwrap();
        let absmax = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let step = absmax / ((1u64 << (bits - 1)) - 1) as f64;
        for (a, b) in vals.iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-12);
        }
        prop_assert_eq!(quantize_weights_symmetric(&q, bits).unwrap(), q);
    }
}
