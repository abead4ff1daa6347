#![allow(dead_code)]

use qlip_core::diffusion::{
    collect_calibration, Denoiser, DenoiserShape, DiffusionSchedule, QuantizedDenoiser, SampleJob,
    StepGroups,
};
use qlip_core::numerics::{finite_difference_gradient, relative_error, Tensor};
use qlip_core::par::Parallelism;
use qlip_core::qlip::{
    draw_batch, loss_scale, qlip_objective, ObjectiveMode, Q2BData, Q2BParams, Variant,
};
use qlip_core::quant::{BitMenu, QuantStore};
use qlip_core::rng::StreamKey;
use qlip_core::synth::{generate_dataset, ToyShape, ToyWorld};

/// Small untrained model with calibrated quantizers.
pub struct Rig {
    pub world: ToyWorld,
    pub model: Denoiser,
    pub quantized: QuantizedDenoiser,
    pub schedule: DiffusionSchedule,
    pub groups: StepGroups,
    pub menu: BitMenu,
}

pub fn small_shape() -> DenoiserShape {
    DenoiserShape {
        data_dim: 4,
        cond_dim: 16,
        time_dim: 8,
        hidden: 24,
        quant_layers: 4,
    }
}

pub fn rig(seed: u64, shape: DenoiserShape, steps: usize, group_size: usize, menu: BitMenu) -> Rig {
    let toy = ToyShape {
        cond_dim: shape.cond_dim,
        ..ToyShape::default()
    };
    let world = ToyWorld::new(toy, StreamKey::new(seed, "world")).unwrap();
    let model = Denoiser::new(shape, &mut StreamKey::new(seed, "init").rng()).unwrap();
    let schedule = DiffusionSchedule::linear(steps, 1e-3, 0.2).unwrap();
    let groups = StepGroups::new(steps, group_size).unwrap();
    let prompts = generate_dataset(&world, 8, StreamKey::new(seed, "cal")).unwrap();
    let jobs: Vec<SampleJob<'_>> = prompts
        .iter()
        .enumerate()
        .map(|(i, (p, _))| SampleJob {
            z: &p.z,
            key: StreamKey::new(seed, "cal-sample").child(i as u64),
            plan: None,
        })
        .collect();
    let cal =
        collect_calibration(&model, &schedule, groups, &jobs, Parallelism::Sequential).unwrap();
    let store = QuantStore::build(&cal.ranges().unwrap(), menu).unwrap();
    let quantized = QuantizedDenoiser::new(&model, store).unwrap();
    Rig {
        world,
        model,
        quantized,
        schedule,
        groups,
        menu,
    }
}

pub fn menu_6_8_10() -> BitMenu {
    BitMenu::new(6, 8, 10, 8).unwrap()
}

fn flatten(p: &Q2BParams) -> Vec<f64> {
    let mut v = p.s.clone();
    v.extend(&p.o);
    v.extend(p.u_m.data());
    v.extend(p.u_h.data());
    v
}

fn unflatten(p: &Q2BParams, theta: &[f64]) -> Q2BParams {
    let k = p.layers();
    let gk = p.u_m.len();
    let mut out = p.clone();
    out.s = theta[..k].to_vec();
    out.o = theta[k..2 * k].to_vec();
    out.u_m
        .data_mut()
        .copy_from_slice(&theta[2 * k..2 * k + gk]);
    out.u_h
        .data_mut()
        .copy_from_slice(&theta[2 * k + gk..2 * k + 2 * gk]);
    out
}

/// Largest relative error between the tape gradient of the relaxed
/// objective and central differences, over `{s, o, u_m, u_h}` and every
/// denoiser input entry. Entries smaller than `1e-3·max|g|` are compared
/// against that floor.
pub fn gradient_check(seed: u64) -> f64 {
    let steps = 20;
    let r = rig(seed, small_shape(), steps, 4, menu_6_8_10());
    let mut rng = StreamKey::new(seed, "gradcheck").rng();
    let variant = [
        Variant::Full,
        Variant::QOnly,
        Variant::QPlusH,
        Variant::QPlusM,
    ][rng.below(4)];
    let mut params =
        Q2BParams::new(r.model.shape().quant_layers, r.groups, 2, r.menu, variant).unwrap();
    for v in params.s.iter_mut().chain(params.o.iter_mut()) {
        *v = 2.0 * rng.normal();
    }
    for v in params
        .u_m
        .data_mut()
        .iter_mut()
        .chain(params.u_h.data_mut().iter_mut())
    {
        *v = 1.5 * rng.normal();
    }
    let data = generate_dataset(&r.world, 6, StreamKey::new(seed, "data")).unwrap();
    let z: Vec<Vec<f64>> = data.iter().map(|(p, _)| p.z.clone()).collect();
    let x0: Vec<Vec<f64>> = data.iter().map(|(_, x)| x.clone()).collect();
    let qualities: Vec<f64> = (0..data.len()).map(|_| rng.uniform()).collect();
    let batch = draw_batch(
        Q2BData { z: &z, x0: &x0 },
        &qualities,
        &r.model,
        &r.schedule,
        3,
        StreamKey::new(seed, "batch"),
    )
    .unwrap();
    let groups: Vec<usize> = batch
        .steps
        .iter()
        .map(|&t| r.groups.group_of(t - 1))
        .collect();
    let scale = loss_scale(&r.quantized, &batch, &groups).unwrap();
    let lambda = 0.1 + 2.0 * rng.uniform();

    let at = qlip_objective(
        &params,
        &r.quantized,
        &batch,
        lambda,
        scale,
        ObjectiveMode::Relaxed,
    )
    .unwrap();
    let frozen = at.candidates.clone();
    let mode = ObjectiveMode::Frozen(&frozen);
    let surrogate = qlip_objective(&params, &r.quantized, &batch, lambda, scale, mode).unwrap();
    assert!((surrogate.loss - at.loss).abs() <= 1e-12 * at.loss.abs().max(1.0));

    let mut analytic: Vec<f64> = at.grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let theta = flatten(&params);
    let h = 1e-6;
    let mut numeric = finite_difference_gradient(
        |th| {
            qlip_objective(
                &unflatten(&params, th),
                &r.quantized,
                &batch,
                lambda,
                scale,
                mode,
            )
            .unwrap()
            .loss
        },
        &theta,
        h,
    )
    .unwrap();
    analytic.extend(at.input_grad.data());
    let shape = batch.input.shape().to_vec();
    numeric.extend(
        finite_difference_gradient(
            |x| {
                let mut b = batch.clone();
                b.input = Tensor::new(shape.clone(), x.to_vec()).unwrap();
                qlip_objective(&params, &r.quantized, &b, lambda, scale, mode)
                    .unwrap()
                    .loss
            },
            batch.input.data(),
            h,
        )
        .unwrap(),
    );
    let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

/// A full pipeline configuration that runs end to end in a few seconds.
pub fn tiny_config() -> qlip_core::config::RunConfig {
    let mut c = qlip_core::config::RunConfig::default();
    c.schedule.steps = 20;
    c.model = DenoiserShape {
        data_dim: 4,
        cond_dim: 16,
        time_dim: 8,
        hidden: 24,
        quant_layers: 3,
    };
    c.data.train_size = 400;
    c.data.reference_size = 300;
    c.data.gmm_components = 4;
    c.denoiser.iterations = 200;
    c.denoiser.batch_size = 32;
    c.calibration.prompts = 8;
    c.t2q.hidden = 8;
    c.t2q.dataset_size = 40;
    c.t2q.epochs = 2;
    c.q2b.iterations = 20;
    c.q2b.prompts = 16;
    c.sample.count = 24;
    c.sample.batch_sweep = vec![1, 4];
    c
}
