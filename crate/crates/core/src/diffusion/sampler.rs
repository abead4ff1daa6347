use super::denoiser::{Denoiser, QuantizedDenoiser};
use super::schedule::{reverse_step, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par::{self, Parallelism};
use crate::qlip::plan::BitPlan;
use crate::quant::CalibrationSet;
use crate::rng::{Stream, StreamKey};

/// Reverse steps split into groups of `group_size` consecutive steps.
///
/// Reverse steps are counted 0-based from the start of sampling, so step 0
/// runs at noise level `T` and step `T − 1` at level 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepGroups {
    steps: usize,
    group_size: usize,
}

impl StepGroups {
    pub fn new(steps: usize, group_size: usize) -> Result<Self> {
        if steps == 0 || group_size == 0 {
            return Err(Error::Config(format!(
                "invalid step grouping: T = {steps}, M = {group_size}"
            )));
        }
        Ok(StepGroups { steps, group_size })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// `⌈T / M⌉`.
    pub fn groups(&self) -> usize {
        self.steps.div_ceil(self.group_size)
    }

    pub fn group_of(&self, step: usize) -> usize {
        step / self.group_size
    }

    pub fn level_of(&self, step: usize) -> usize {
        self.steps - step
    }

    pub fn step_of(&self, level: usize) -> usize {
        self.steps - level
    }
}

/// One generation request.
#[derive(Debug, Clone, Copy)]
pub struct SampleJob<'a> {
    pub z: &'a [f64],
    pub key: StreamKey,
    /// Required when sampling with a quantized model.
    pub plan: Option<&'a BitPlan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub x0: Vec<f64>,
    /// Bits actually used, per layer and reverse step.
    pub plan: Option<BitPlan>,
}

pub const CHUNK: usize = 32;

struct Ctx<'a> {
    model: &'a Denoiser,
    quantized: Option<&'a QuantizedDenoiser>,
    schedule: &'a DiffusionSchedule,
    groups: StepGroups,
}

/// Ancestral sampling for every job. `x_T` and the per-step noise come from
/// each job's own stream, so output does not depend on batching or
/// parallelism.
pub fn sample_batch(
    model: &Denoiser,
    quantized: Option<&QuantizedDenoiser>,
    schedule: &DiffusionSchedule,
    groups: StepGroups,
    jobs: &[SampleJob<'_>],
    par: Parallelism,
) -> Result<Vec<SamplerOutput>> {
    if groups.steps() != schedule.steps() {
        return Err(Error::contract("step grouping and schedule disagree on T"));
    }
    let k = model.shape().quant_layers;
    if let Some(q) = quantized {
        if q.store().groups() != groups.groups() {
            return Err(Error::contract(format!(
                "calibration has {} timestep groups, sampler expects {}",
                q.store().groups(),
                groups.groups()
            )));
        }
        for (i, j) in jobs.iter().enumerate() {
            let plan = j
                .plan
                .ok_or_else(|| Error::contract(format!("job {i} has no bit plan")))?;
            if plan.layers() != k || plan.steps() != schedule.steps() {
                return Err(Error::contract(format!(
                    "job {i}: plan is {}x{}, expected {k}x{}",
                    plan.layers(),
                    plan.steps(),
                    schedule.steps()
                )));
            }
        }
    }
    let ctx = Ctx {
        model,
        quantized,
        schedule,
        groups,
    };
    let results = par::map_chunks(par, jobs.len(), CHUNK, |s, e| {
        vec![run_chunk(&ctx, &jobs[s..e], None)]
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Runs the full-precision sampler and records every hooked activation
/// into `(layer, group)` buckets.
pub fn collect_calibration(
    model: &Denoiser,
    schedule: &DiffusionSchedule,
    groups: StepGroups,
    jobs: &[SampleJob<'_>],
    par: Parallelism,
) -> Result<CalibrationSet> {
    let ctx = Ctx {
        model,
        quantized: None,
        schedule,
        groups,
    };
    let k = model.shape().quant_layers;
    let parts = par::map_chunks(par, jobs.len(), CHUNK, |s, e| {
        let mut set = CalibrationSet::new(k, groups.groups());
        vec![run_chunk(&ctx, &jobs[s..e], Some(&mut set)).map(|_| set)]
    });
    let mut all = CalibrationSet::new(k, groups.groups());
    for p in parts {
        let p = p?;
        for l in 0..k {
            for g in 0..groups.groups() {
                all.extend(l, g, p.samples(l, g));
            }
        }
    }
    Ok(all)
}

fn run_chunk(
    ctx: &Ctx<'_>,
    jobs: &[SampleJob<'_>],
    mut record: Option<&mut CalibrationSet>,
) -> Result<Vec<SamplerOutput>> {
    let rows = jobs.len();
    let d = ctx.model.shape().data_dim;
    let mut streams: Vec<Stream> = jobs.iter().map(|j| j.key.rng()).collect();
    let mut x: Vec<f64> = streams.iter_mut().flat_map(|s| s.normals(d)).collect();
    let z_rows: Vec<Vec<f64>> = jobs.iter().map(|j| j.z.to_vec()).collect();
    let z = Tensor::from_rows(&z_rows)?;
    let steps = ctx.schedule.steps();
    for step in 0..steps {
        let level = ctx.groups.level_of(step);
        let group = ctx.groups.group_of(step);
        let xt = Tensor::matrix(rows, d, x.clone())?;
        let input = ctx.model.build_input(&xt, &vec![level; rows], &z)?;
        let eps = match ctx.quantized {
            Some(q) => {
                let bits: Vec<Vec<u32>> = jobs
                    .iter()
                    .map(|j| j.plan.expect("validated").column(step))
                    .collect();
                q.forward(&input, &bits, &vec![group; rows])?
            }
            None => match record.as_deref_mut() {
                Some(set) => ctx.model.forward_with(&input, &mut |k, a| {
                    set.extend(k, group, a.data());
                    Ok(())
                })?,
                None => ctx.model.forward(&input)?,
            },
        };
        let mut next = Vec::with_capacity(rows * d);
        for (r, stream) in streams.iter_mut().enumerate() {
            let noise = stream.normals(d);
            next.extend(reverse_step(
                ctx.schedule,
                &x[r * d..(r + 1) * d],
                level,
                eps.row(r),
                &noise,
            )?);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "sampler diverged at noise level {level}"
            )));
        }
        x = next;
    }
    Ok(jobs
        .iter()
        .enumerate()
        .map(|(r, j)| SamplerOutput {
            x0: x[r * d..(r + 1) * d].to_vec(),
            plan: ctx.quantized.map(|_| j.plan.expect("validated").clone()),
        })
        .collect())
}
