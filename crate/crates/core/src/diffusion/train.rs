use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{forward_noise, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tape, Tensor};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTraining {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        DenoiserTraining {
            iterations: 20000,
            batch_size: 128,
            lr: 2e-3,
        }
    }
}

/// Standard ε-prediction training: random level, random noise, squared
/// error against the injected noise. The learning rate follows a cosine
/// decay to 5% of its initial value. Returns the per-iteration loss.
pub fn train_denoiser(
    model: &mut Denoiser,
    x0: &[Vec<f64>],
    z: &[Vec<f64>],
    schedule: &DiffusionSchedule,
    cfg: &DenoiserTraining,
    key: StreamKey,
) -> Result<Vec<f64>> {
    if x0.is_empty() || x0.len() != z.len() {
        return Err(Error::contract(
            "training data must be non-empty with one z per x0",
        ));
    }
    let d = model.shape().data_dim;
    let sizes: Vec<(String, usize)> = model
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("layer{i}.weight"), l.weight.len()),
                (format!("layer{i}.bias"), l.bias.len()),
            ]
        })
        .collect();
    let named: Vec<(&str, usize)> = sizes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
    let mut adam = AdamState::new(&named, cfg.lr)?;
    let t_max = schedule.steps();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rng = key.child(it as u64).rng();
        let mut xs = Vec::with_capacity(cfg.batch_size * d);
        let mut eps = Vec::with_capacity(cfg.batch_size * d);
        let mut zs = Vec::with_capacity(cfg.batch_size);
        let mut levels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.below(x0.len());
            let t = 1 + rng.below(t_max);
            let e = rng.normals(d);
            xs.extend(forward_noise(schedule, &x0[i], t, &e)?);
            eps.extend(e);
            zs.push(z[i].clone());
            levels.push(t);
        }
        let xt = Tensor::matrix(cfg.batch_size, d, xs)?;
        let input = model.build_input(&xt, &levels, &Tensor::from_rows(&zs)?)?;
        let mut tape = Tape::new();
        let vars = model.push(&mut tape, true);
        let inp = tape.constant(input);
        let pred = model.forward_tape(&mut tape, &vars, inp, &mut |_, _, a| Ok(a))?;
        let target = tape.constant(Tensor::matrix(cfg.batch_size, d, eps)?);
        let loss = tape.squared_error(pred, target)?;
        tape.backward(loss)?;
        losses.push(tape.value(loss).item());

        let progress = it as f64 / cfg.iterations.max(1) as f64;
        adam.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let grads: Vec<Tensor> = vars
            .layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|v| {
                tape.grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Internal("missing grad".into()))
            })
            .collect::<Result<_>>()?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> = model
            .layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        adam.step(&mut params, &grad_refs)?;
    }
    Ok(losses)
}
