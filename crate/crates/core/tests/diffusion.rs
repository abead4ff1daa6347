mod common;

use common::{menu_6_8_10, rig, small_shape};
use proptest::prelude::*;
use qlip_core::diffusion::{
    forward_noise, reverse_step, sample_batch, train_denoiser, Denoiser, DenoiserTraining,
    DiffusionSchedule, SampleJob, StepGroups,
};
use qlip_core::numerics::Checkpoint;
use qlip_core::par::Parallelism;
use qlip_core::qlip::BitPlan;
use qlip_core::quant::BitMenu;
use qlip_core::rng::StreamKey;
use qlip_core::synth::generate_dataset;

#[test]
fn schedule_is_monotone() {
    let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
    assert_eq!(s.steps(), 100);
    assert_eq!(s.beta(1), 1e-4);
    assert!((s.beta(100) - 0.02).abs() < 1e-15);
    for t in 2..=100 {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.alpha_bar(t) > 0.0);
        assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-15);
    }
    assert!(s.check_level(0).is_err() && s.check_level(101).is_err());
    assert!(DiffusionSchedule::linear(1, 1e-4, 0.02).is_err());
    assert!(DiffusionSchedule::linear(10, 0.1, 0.01).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.01).is_err());
}

#[test]
fn forward_noise_moments() {
    let s = DiffusionSchedule::linear(50, 1e-3, 0.1).unwrap();
    let x0 = [2.0, -1.0];
    let t = 30;
    let n = 20_000;
    let mut rng = StreamKey::new(3, "fwd").rng();
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|_| forward_noise(&s, &x0, t, &rng.normals(2)).unwrap())
        .collect();
    let ab = s.alpha_bar(t);
    for d in 0..2 {
        let mean = draws.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = (1.0 - ab).sqrt();
        assert!((mean - ab.sqrt() * x0[d]).abs() < 4.0 * sd / (n as f64).sqrt());
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    }
    assert!(forward_noise(&s, &x0, 0, &[0.0, 0.0]).is_err());
    assert!(forward_noise(&s, &x0, 1, &[0.0]).is_err());
}

#[test]
fn step_groups_index_reverse_order() {
    let g = StepGroups::new(100, 20).unwrap();
    assert_eq!(g.groups(), 5);
    assert_eq!((g.level_of(0), g.group_of(0)), (100, 0));
    assert_eq!((g.level_of(99), g.group_of(99)), (1, 4));
    assert_eq!(g.step_of(g.level_of(37)), 37);
    assert_eq!(StepGroups::new(10, 3).unwrap().groups(), 4);
    assert!(StepGroups::new(10, 0).is_err());
}

proptest! {
    #[test]
    fn oracle_noise_prediction_recovers_x0(
        x0 in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed in 0u64..1000,
    ) {
        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let mut rng = StreamKey::new(seed, "eps").rng();
        let eps = rng.normals(x0.len());
        let x1 = forward_noise(&s, &x0, 1, &eps).unwrap();
        let noise = rng.normals(x0.len());
        let back = reverse_step(&s, &x1, 1, &eps, &noise).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

fn jobs<'a>(zs: &'a [Vec<f64>], plan: Option<&'a BitPlan>) -> Vec<SampleJob<'a>> {
    zs.iter()
        .enumerate()
        .map(|(i, z)| SampleJob {
            z,
            key: StreamKey::new(21, "sample").child(i as u64),
            plan,
        })
        .collect()
}

#[test]
fn identity_menu_matches_full_precision_bitwise() {
    let menu = BitMenu::new(32, 32, 32, 32).unwrap();
    let r = rig(4, small_shape(), 12, 3, menu);
    let data = generate_dataset(&r.world, 10, StreamKey::new(4, "z")).unwrap();
    let zs: Vec<Vec<f64>> = data.iter().map(|(p, _)| p.z.clone()).collect();
    let plan = BitPlan::filled(4, 12, 32);
    let full = sample_batch(
        &r.model,
        None,
        &r.schedule,
        r.groups,
        &jobs(&zs, None),
        Parallelism::Sequential,
    )
    .unwrap();
    let quant = sample_batch(
        &r.model,
        Some(&r.quantized),
        &r.schedule,
        r.groups,
        &jobs(&zs, Some(&plan)),
        Parallelism::Sequential,
    )
    .unwrap();
    for (a, b) in full.iter().zip(&quant) {
        let (a, b): (Vec<u64>, Vec<u64>) = (
            a.x0.iter().map(|v| v.to_bits()).collect(),
            b.x0.iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(a, b);
    }
}

#[test]
fn sampling_ignores_batching_and_threads() {
    let r = rig(5, small_shape(), 10, 2, menu_6_8_10());
    let data = generate_dataset(&r.world, 70, StreamKey::new(5, "z")).unwrap();
    let zs: Vec<Vec<f64>> = data.iter().map(|(p, _)| p.z.clone()).collect();
    let mut plan = BitPlan::filled(4, 10, 8);
    plan.set(1, 3, 6);
    plan.set(2, 7, 10);
    for p in [None, Some(&plan)] {
        let q = p.map(|_| &r.quantized);
        let all = jobs(&zs, p);
        let seq = sample_batch(
            &r.model,
            q,
            &r.schedule,
            r.groups,
            &all,
            Parallelism::Sequential,
        )
        .unwrap();
        let par = sample_batch(
            &r.model,
            q,
            &r.schedule,
            r.groups,
            &all,
            Parallelism::default(),
        )
        .unwrap();
        assert_eq!(seq, par);
        for i in [0, 31, 32, 69] {
            let one = sample_batch(
                &r.model,
                q,
                &r.schedule,
                r.groups,
                &all[i..=i],
                Parallelism::Sequential,
            )
            .unwrap();
            assert_eq!(one[0], seq[i]);
        }
        if let Some(p) = p {
            assert_eq!(seq[0].plan.as_ref(), Some(p));
        }
    }
}

#[test]
fn quantized_sampling_validates_plans() {
    let r = rig(6, small_shape(), 10, 2, menu_6_8_10());
    let z = vec![0.0; 16];
    let bad = BitPlan::filled(3, 10, 8);
    let q = Some(&r.quantized);
    let run = |p| {
        sample_batch(
            &r.model,
            q,
            &r.schedule,
            r.groups,
            &jobs(std::slice::from_ref(&z), p),
            Parallelism::Sequential,
        )
    };
    assert!(run(None).is_err());
    assert!(run(Some(&bad)).is_err());
    let other = StepGroups::new(10, 5).unwrap();
    let plan = BitPlan::filled(4, 10, 8);
    let j = jobs(std::slice::from_ref(&z), Some(&plan));
    assert!(sample_batch(&r.model, q, &r.schedule, other, &j, Parallelism::Sequential).is_err());
}

#[test]
fn training_lowers_loss_and_round_trips() {
    let r = rig(7, small_shape(), 20, 4, menu_6_8_10());
    let data = generate_dataset(&r.world, 400, StreamKey::new(7, "train")).unwrap();
    let z: Vec<Vec<f64>> = data.iter().map(|(p, _)| p.z.clone()).collect();
    let x0: Vec<Vec<f64>> = data.iter().map(|(_, x)| x.clone()).collect();
    let mut model = r.model.clone();
    let cfg = DenoiserTraining {
        iterations: 400,
        batch_size: 64,
        lr: 3e-3,
    };
    let losses = train_denoiser(
        &mut model,
        &x0,
        &z,
        &r.schedule,
        &cfg,
        StreamKey::new(7, "fit"),
    )
    .unwrap();
    let head = losses[..40].iter().sum::<f64>() / 40.0;
    let tail = losses[360..].iter().sum::<f64>() / 40.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    let again = {
        let mut m = r.model.clone();
        train_denoiser(&mut m, &x0, &z, &r.schedule, &cfg, StreamKey::new(7, "fit")).unwrap();
        m
    };
    assert_eq!(again, model);

    let mut ck = Checkpoint::new();
    model.to_checkpoint(&mut ck).unwrap();
    let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back, model);
    assert!(train_denoiser(
        &mut model,
        &[],
        &[],
        &r.schedule,
        &cfg,
        StreamKey::new(7, "fit")
    )
    .is_err());
}
