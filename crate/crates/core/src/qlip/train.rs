//! QLIP objective and allocator training.
//!
//! ```text
//! L = mean((ε_full − ε_quant)²) + λ·(b_high·Σ_k p_high(k) + b_med·Σ_k p_med(k))
//! ```
//!
//! The bit term is averaged over the rows of a batch. Only `{s, o, u_m,
//! u_h}` receive updates; both denoisers stay frozen.
//!
//! Training can divide each term by a fixed [`LossScale`]: the MSE by how
//! far uniform-low and uniform-high predictions sit apart on a reference
//! batch, the bit term by `K·b_high`. With `LossScale::RAW` the objective is
//! exactly the expression above.

use serde::{Deserialize, Serialize};

use super::q2b::{select_index, BitProbabilities, Q2BParams};
use super::t2q::T2QModel;
use crate::diffusion::{forward_noise, Denoiser, DiffusionSchedule, QuantizedDenoiser};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tape, Tensor, Var};
use crate::quant::{ste_mixture_quantize, BitMenu, QuantizerSpec};
use crate::rng::StreamKey;

/// Plain-value objective for one sample.
pub fn qlip_loss(
    eps_full: &Tensor,
    eps_quant: &Tensor,
    probs: &BitProbabilities,
    menu: &BitMenu,
    lambda_bit: f64,
) -> Result<f64> {
    if eps_full.shape() != eps_quant.shape() || eps_full.is_empty() {
        return Err(Error::contract(format!(
            "ε shapes differ: {:?} vs {:?}",
            eps_full.shape(),
            eps_quant.shape()
        )));
    }
    if probs.med.len() != probs.high.len() {
        return Err(Error::contract("probability vectors differ in length"));
    }
    let mse = eps_full
        .data()
        .iter()
        .zip(eps_quant.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps_full.len() as f64;
    Ok(mse + lambda_bit * bit_penalty(&probs.med, &probs.high, menu))
}

fn bit_penalty(med: &[f64], high: &[f64], menu: &BitMenu) -> f64 {
    menu.high as f64 * high.iter().sum::<f64>() + menu.med as f64 * med.iter().sum::<f64>()
}

/// Divisors applied to the two objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScale {
    pub mse: f64,
    pub penalty: f64,
}

impl LossScale {
    pub const RAW: LossScale = LossScale {
        mse: 1.0,
        penalty: 1.0,
    };

    fn check(&self) -> Result<()> {
        if self.mse > 0.0 && self.penalty > 0.0 && self.mse.is_finite() && self.penalty.is_finite()
        {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "loss scale must be positive and finite: {self:?}"
            )))
        }
    }
}

/// Objective on a tape. `med` and `high` are `[rows, K]`; the bit term is
/// the row average. Returns `(loss, mse, penalty)` with the last two
/// unscaled.
#[allow(clippy::too_many_arguments)]
pub fn qlip_loss_tape(
    tape: &mut Tape,
    eps_full: Var,
    eps_quant: Var,
    med: Var,
    high: Var,
    menu: &BitMenu,
    lambda_bit: f64,
    scale: LossScale,
) -> Result<(Var, Var, Var)> {
    scale.check()?;
    let rows = tape.value(med).rows();
    let mse = tape.squared_error(eps_quant, eps_full)?;
    let h = tape.scalar_affine(high, menu.high as f64, 0.0)?;
    let m = tape.scalar_affine(med, menu.med as f64, 0.0)?;
    let both = tape.add(h, m)?;
    let total = tape.sum(both)?;
    let penalty = tape.scalar_affine(total, 1.0 / rows as f64, 0.0)?;
    let weighted = tape.scalar_affine(penalty, lambda_bit / scale.penalty, 0.0)?;
    let fit = tape.scalar_affine(mse, 1.0 / scale.mse, 0.0)?;
    let loss = tape.add(fit, weighted)?;
    Ok((loss, mse, penalty))
}

/// One batch of the objective: denoiser input rows, the full-precision
/// prediction for them, and the quality and reverse step of each row.
#[derive(Debug, Clone)]
pub struct Q2BBatch {
    pub input: Tensor,
    pub eps_full: Tensor,
    pub qualities: Vec<f64>,
    /// Reverse steps, 1-based.
    pub steps: Vec<usize>,
}

/// Quantized candidates and clip masks seen at one activation, per menu
/// entry.
#[derive(Debug, Clone)]
pub struct LayerCandidates {
    pub residual: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub mask: Vec<Tensor>,
}

/// How the activation mixture is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum ObjectiveMode<'a> {
    /// Forward uses the argmax width (as at inference).
    Hard,
    /// Forward uses `Σ_i p_i·Q_i(a)`.
    Relaxed,
    /// Relaxed forward with rounding frozen: inside the clip range
    /// `Q_i(a) = a + r_i`, outside it the recorded clipped value. Its exact
    /// gradient is the straight-through gradient at the recording point.
    Frozen(&'a [LayerCandidates]),
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub mse: f64,
    pub penalty: f64,
    /// Gradients for `s`, `o`, `u_m`, `u_h` (`s` and `o` as `[1, K]`).
    pub grads: [Tensor; 4],
    pub input_grad: Tensor,
    /// Width chosen per row and layer.
    pub selected: Vec<Vec<u32>>,
    pub candidates: Vec<LayerCandidates>,
}

/// Evaluates the objective and its gradient for one batch.
pub fn qlip_objective(
    params: &Q2BParams,
    quantized: &QuantizedDenoiser,
    batch: &Q2BBatch,
    lambda_bit: f64,
    scale: LossScale,
    mode: ObjectiveMode<'_>,
) -> Result<ObjectiveEval> {
    let rows = batch.input.rows();
    if batch.qualities.len() != rows || batch.steps.len() != rows {
        return Err(Error::contract("one quality and step per batch row"));
    }
    if batch.eps_full.rows() != rows {
        return Err(Error::contract("ε_full rows differ from input rows"));
    }
    let store = quantized.store();
    let k = params.layers();
    if store.layers() != k {
        return Err(Error::contract(
            "allocator and quantizer disagree on layer count",
        ));
    }
    let menu = params.menu;
    let groups: Vec<usize> = batch
        .steps
        .iter()
        .map(|&t| params.groups.group_of(t - 1))
        .collect();

    let mut tape = Tape::new();
    let vars = params.push(&mut tape);
    let [low, med, high] = params.probs_tape(&mut tape, &vars, &batch.qualities, &batch.steps)?;
    let mut cols = Vec::with_capacity(k);
    let mut selected = vec![vec![0u32; k]; rows];
    let bits = menu.bits();
    #[allow(clippy::needless_range_loop)]
    for l in 0..k {
        let c = [
            tape.slice(low, l, l + 1)?,
            tape.slice(med, l, l + 1)?,
            tape.slice(high, l, l + 1)?,
        ];
        let idx: Vec<usize> = (0..rows)
            .map(|r| {
                let v = |p: Var| tape.value(p).data()[r];
                select_index(v(c[0]), v(c[1]), v(c[2]))
            })
            .collect();
        for (r, &i) in idx.iter().enumerate() {
            selected[r][l] = bits[i];
        }
        cols.push((c, idx));
    }

    let mut specs = Vec::with_capacity(k);
    for l in 0..k {
        let per_row = groups
            .iter()
            .map(|&g| store.specs(l, g).map(|s| s.to_vec()))
            .collect::<Result<Vec<Vec<QuantizerSpec>>>>()?;
        specs.push(per_row);
    }

    let model = quantized.model();
    let mvars = model.push(&mut tape, false);
    let input = tape.param(batch.input.clone());
    let mut recorded = Vec::with_capacity(k);
    let eps_quant = model.forward_tape(&mut tape, &mvars, input, &mut |tape, l, a| {
        let (probs, idx) = &cols[l];
        recorded.push(record_candidates(tape.value(a), &specs[l])?);
        match mode {
            ObjectiveMode::Hard => ste_mixture_quantize(tape, a, probs, &specs[l], Some(idx)),
            ObjectiveMode::Relaxed => ste_mixture_quantize(tape, a, probs, &specs[l], None),
            ObjectiveMode::Frozen(frozen) => {
                let f = frozen
                    .get(l)
                    .ok_or_else(|| Error::contract("frozen candidates missing a layer"))?;
                let x = tape.value(a).clone();
                let cands = (0..probs.len())
                    .map(|i| {
                        let mut c = f.value[i].clone();
                        for (j, v) in c.data_mut().iter_mut().enumerate() {
                            if f.mask[i].data()[j] != 0.0 {
                                *v = x.data()[j] + f.residual[i].data()[j];
                            }
                        }
                        c
                    })
                    .collect();
                tape.mixture(
                    a,
                    probs,
                    cands,
                    f.mask.clone(),
                    crate::numerics::MixtureForward::Relaxed,
                )
            }
        }
    })?;
    let target = tape.constant(batch.eps_full.clone());
    let (loss, mse, penalty) = qlip_loss_tape(
        &mut tape, target, eps_quant, med, high, &menu, lambda_bit, scale,
    )?;
    tape.backward(loss)?;
    Ok(ObjectiveEval {
        loss: tape.value(loss).item(),
        mse: tape.value(mse).item(),
        penalty: tape.value(penalty).item(),
        grads: params.gradients(&tape, &vars)?,
        input_grad: tape
            .grad(input)
            .cloned()
            .ok_or_else(|| Error::Internal("missing input gradient".into()))?,
        selected,
        candidates: recorded,
    })
}

fn record_candidates(a: &Tensor, specs: &[Vec<QuantizerSpec>]) -> Result<LayerCandidates> {
    let n = specs.first().map_or(0, Vec::len);
    let cols = a.cols();
    let mut out = LayerCandidates {
        residual: Vec::with_capacity(n),
        value: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut value = a.clone();
        let mut mask = a.clone();
        for (r, row) in specs.iter().enumerate() {
            let s = &row[i];
            for c in 0..cols {
                let x = a.row(r)[c];
                value.data_mut()[r * cols + c] = s.apply(x);
                mask.data_mut()[r * cols + c] = if s.passes(x) { 1.0 } else { 0.0 };
            }
        }
        let residual = Tensor::new(
            a.shape().to_vec(),
            value
                .data()
                .iter()
                .zip(a.data())
                .map(|(q, x)| q - x)
                .collect(),
        )?;
        out.residual.push(residual);
        out.value.push(value);
        out.mask.push(mask);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Q2BTraining {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_bit: f64,
    /// Train on the scaled objective (see [`loss_scale`]).
    pub normalize: bool,
}

impl Default for Q2BTraining {
    fn default() -> Self {
        Q2BTraining {
            iterations: 5000,
            batch_size: 16,
            lr: 1e-2,
            lambda_bit: 1.0,
            normalize: true,
        }
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Q2BLogRow {
    pub iteration: usize,
    pub loss: f64,
    pub mse: f64,
    pub penalty: f64,
    pub mean_bits: f64,
}

/// Calibration prompts for allocator training: embeddings and the
/// full-precision samples generated from them.
#[derive(Debug, Clone, Copy)]
pub struct Q2BData<'a> {
    pub z: &'a [Vec<f64>],
    pub x0: &'a [Vec<f64>],
}

/// Builds the batch of iteration `it`: prompt `i`, reverse step `t`
/// uniform on `[1, T]`, `x_t` from the forward process, and the
/// full-precision prediction for it.
pub fn draw_batch(
    data: Q2BData<'_>,
    qualities: &[f64],
    full: &Denoiser,
    schedule: &DiffusionSchedule,
    batch_size: usize,
    key: StreamKey,
) -> Result<Q2BBatch> {
    let mut rng = key.rng();
    let d = full.shape().data_dim;
    let t_max = schedule.steps();
    let mut xs = Vec::with_capacity(batch_size * d);
    let mut zs = Vec::with_capacity(batch_size);
    let mut levels = Vec::with_capacity(batch_size);
    let mut steps = Vec::with_capacity(batch_size);
    let mut qs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.below(data.z.len());
        let t = 1 + rng.below(t_max);
        let level = t_max + 1 - t;
        let eps = rng.normals(d);
        xs.extend(forward_noise(schedule, &data.x0[i], level, &eps)?);
        zs.push(data.z[i].clone());
        levels.push(level);
        steps.push(t);
        qs.push(qualities[i]);
    }
    let xt = Tensor::matrix(batch_size, d, xs)?;
    let input = full.build_input(&xt, &levels, &Tensor::from_rows(&zs)?)?;
    let eps_full = full.forward(&input)?;
    Ok(Q2BBatch {
        input,
        eps_full,
        qualities: qs,
        steps,
    })
}

/// Rows in the batch that fixes the MSE divisor.
pub const SCALE_ROWS: usize = 256;

/// Divisors for the scaled objective. The MSE divisor is the mean squared
/// gap between uniform-low and uniform-high predictions on `batch`; when
/// the menu widths quantize identically it falls back to 1.
pub fn loss_scale(
    quantized: &QuantizedDenoiser,
    batch: &Q2BBatch,
    groups: &[usize],
) -> Result<LossScale> {
    let store = quantized.store();
    let menu = *store.menu();
    let k = store.layers();
    let rows = batch.input.rows();
    let low = quantized.forward(&batch.input, &vec![vec![menu.low; k]; rows], groups)?;
    let high = quantized.forward(&batch.input, &vec![vec![menu.high; k]; rows], groups)?;
    let gap = low
        .data()
        .iter()
        .zip(high.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / low.len() as f64;
    if !gap.is_finite() {
        return Err(Error::Numeric("non-finite MSE scale".into()));
    }
    Ok(LossScale {
        mse: if gap > 0.0 { gap } else { 1.0 },
        penalty: (k as u32 * menu.high) as f64,
    })
}

/// Trains `{s, o, u_m, u_h}` with Adam on the QLIP objective (hard
/// forward, straight-through backward). On a non-finite loss or gradient
/// the error is returned and `params` keeps the last good values.
#[allow(clippy::too_many_arguments)]
pub fn train_q2b(
    params: &mut Q2BParams,
    data: Q2BData<'_>,
    t2q: &T2QModel,
    full: &Denoiser,
    quantized: &QuantizedDenoiser,
    schedule: &DiffusionSchedule,
    cfg: &Q2BTraining,
    key: StreamKey,
) -> Result<Vec<Q2BLogRow>> {
    if data.z.is_empty() || data.z.len() != data.x0.len() {
        return Err(Error::contract(
            "allocator data must be non-empty with one x0 per prompt",
        ));
    }
    if schedule.steps() != params.steps() {
        return Err(Error::contract("schedule length differs from allocator T"));
    }
    if cfg.batch_size == 0 || !(cfg.lambda_bit >= 0.0) {
        return Err(Error::Config(
            "q2b: batch_size ≥ 1 and lambda_bit ≥ 0 required".into(),
        ));
    }
    let qualities = t2q.forward_batch(&Tensor::from_rows(data.z)?)?;
    let k = params.layers();
    let g = params.groups.groups();
    let mut adam = AdamState::new(
        &[("s", k), ("o", k), ("u_m", g * k), ("u_h", g * k)],
        cfg.lr,
    )?;
    let scale = if cfg.normalize {
        let b = draw_batch(
            data,
            &qualities,
            full,
            schedule,
            SCALE_ROWS,
            key.named("scale"),
        )?;
        let groups: Vec<usize> = b
            .steps
            .iter()
            .map(|&t| params.groups.group_of(t - 1))
            .collect();
        loss_scale(quantized, &b, &groups)?
    } else {
        LossScale::RAW
    };
    log::debug!(
        "q2b loss scale: mse {:.3e}, penalty {}",
        scale.mse,
        scale.penalty
    );
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw_batch(
            data,
            &qualities,
            full,
            schedule,
            cfg.batch_size,
            key.child(it as u64),
        )?;
        let eval = qlip_objective(
            params,
            quantized,
            &batch,
            cfg.lambda_bit,
            scale,
            ObjectiveMode::Hard,
        )
        .map_err(|e| at_iteration(e, it))?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {it}")));
        }
        let mut s = Tensor::matrix(1, k, params.s.clone())?;
        let mut o = Tensor::matrix(1, k, params.o.clone())?;
        let mut u_m = params.u_m.clone();
        let mut u_h = params.u_h.clone();
        let refs: Vec<&Tensor> = eval.grads.iter().collect();
        adam.step(&mut [&mut s, &mut o, &mut u_m, &mut u_h], &refs)
            .map_err(|e| at_iteration(e, it))?;
        params.s = s.into_data();
        params.o = o.into_data();
        params.u_m = u_m;
        params.u_h = u_h;
        let mean_bits = eval
            .selected
            .iter()
            .flatten()
            .map(|&b| b as f64)
            .sum::<f64>()
            / (eval.selected.len() * k) as f64;
        log.push(Q2BLogRow {
            iteration: it,
            loss: eval.loss,
            mse: eval.mse,
            penalty: eval.penalty,
            mean_bits,
        });
        if it % 500 == 0 {
            log::debug!(
                "q2b iter {it}: loss {:.5} mse {:.5} penalty {:.3} bits {mean_bits:.2}",
                eval.loss,
                eval.mse,
                eval.penalty
            );
        }
    }
    Ok(log)
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (iteration {it})")),
        other => other,
    }
}
