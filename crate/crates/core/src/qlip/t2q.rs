//! Text-to-quality predictor: `q = σ(W₃·relu(W₂·relu(W₁·z)))` with the
//! first layer frozen.

use serde::{Deserialize, Serialize};

use crate::diffusion::Linear;
use crate::error::{Error, Result};
use crate::eval::rank_correlation;
use crate::numerics::tensor::sigmoid;
use crate::numerics::{AdamState, Checkpoint, Tape, Tensor};
use crate::rng::{Stream, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct T2QModel {
    /// `[frozen C×C, C×H, H×1]`.
    pub layers: [Linear; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct T2QTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for T2QTraining {
    fn default() -> Self {
        T2QTraining {
            epochs: 3,
            lr: 1e-3,
            batch_size: 8,
            val_fraction: 0.2,
        }
    }
}

/// Losses and held-out agreement of a training run. Correlations are
/// `None` when the split is too small or a side has zero variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2QFit {
    pub train_loss: f64,
    pub val_loss: f64,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub val_indices: Vec<usize>,
}

impl T2QModel {
    pub fn new(cond_dim: usize, hidden: usize, rng: &mut Stream) -> Result<Self> {
        if cond_dim == 0 || hidden == 0 {
            return Err(Error::Config("T2Q dimensions must be positive".into()));
        }
        let gain = 2f64.sqrt();
        Ok(T2QModel {
            layers: [
                Linear::init(rng, cond_dim, cond_dim, gain),
                Linear::init(rng, cond_dim, hidden, gain),
                Linear::init(rng, hidden, 1, 1.0),
            ],
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layers[1].weight.cols()
    }

    /// MACs of one prediction.
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.weight.len() as u64).sum()
    }

    /// Quality for every row of `z: [n, C]`.
    pub fn forward_batch(&self, z: &Tensor) -> Result<Vec<f64>> {
        if z.cols() != self.cond_dim() {
            return Err(Error::contract(format!(
                "embedding has {} dims, predictor expects {}",
                z.cols(),
                self.cond_dim()
            )));
        }
        let h = relu(self.layers[0].forward(z)?);
        let h = relu(self.layers[1].forward(&h)?);
        Ok(self.layers[2]
            .forward(&h)?
            .data()
            .iter()
            .map(|&v| sigmoid(v))
            .collect())
    }

    pub fn forward(&self, z: &[f64]) -> Result<f64> {
        Ok(self.forward_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?[0])
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            ck.put_tensor(format!("t2q/{i}/weight"), &l.weight)?;
            ck.put_tensor(format!("t2q/{i}/bias"), &l.bias)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let layer = |i: usize| -> Result<Linear> {
            Ok(Linear {
                weight: ck.tensor(&format!("t2q/{i}/weight"))?,
                bias: ck.tensor(&format!("t2q/{i}/bias"))?,
            })
        };
        let m = T2QModel {
            layers: [layer(0)?, layer(1)?, layer(2)?],
        };
        let c = m.cond_dim();
        let h = m.hidden();
        if m.layers[0].weight.shape() != [c, c]
            || m.layers[1].weight.rows() != c
            || m.layers[2].weight.shape() != [h, 1]
        {
            return Err(Error::contract("inconsistent T2Q layer shapes"));
        }
        Ok(m)
    }
}

fn relu(t: Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// Fits layers 2 and 3 to `labels` by mean squared error with Adam. A
/// seeded `val_fraction` of the data is held out for evaluation.
pub fn train_t2q(
    model: &mut T2QModel,
    z: &[Vec<f64>],
    labels: &[f64],
    cfg: &T2QTraining,
    key: StreamKey,
) -> Result<T2QFit> {
    if z.is_empty() || z.len() != labels.len() {
        return Err(Error::contract(
            "T2Q dataset must be non-empty with one label per prompt",
        ));
    }
    if labels.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::contract("T2Q labels must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.batch_size == 0 {
        return Err(Error::Config(
            "t2q: val_fraction ∈ [0, 1) and batch_size ≥ 1".into(),
        ));
    }
    let n = z.len();
    let mut order: Vec<usize> = (0..n).collect();
    key.named("split").rng().shuffle(&mut order);
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    // The frozen first layer is applied once up front.
    let features = relu(model.layers[0].forward(&Tensor::from_rows(z)?)?);
    let c = features.cols();
    let rows_of = |idx: &[usize]| -> Result<Tensor> {
        let mut d = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            d.extend_from_slice(features.row(i));
        }
        Tensor::matrix(idx.len(), c, d)
    };

    let [_, l2, l3] = &mut model.layers;
    let mut adam = AdamState::new(
        &[
            ("layer2.weight", l2.weight.len()),
            ("layer2.bias", l2.bias.len()),
            ("layer3.weight", l3.weight.len()),
            ("layer3.bias", l3.bias.len()),
        ],
        cfg.lr,
    )?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        key.named("epoch")
            .child(epoch as u64)
            .rng()
            .shuffle(&mut train_idx);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let x = rows_of(batch)?;
            let y = Tensor::matrix(batch.len(), 1, batch.iter().map(|&i| labels[i]).collect())?;
            let mut tape = Tape::new();
            let w2 = tape.param(l2.weight.clone());
            let b2 = tape.param(l2.bias.clone());
            let w3 = tape.param(l3.weight.clone());
            let b3 = tape.param(l3.bias.clone());
            let x = tape.constant(x);
            let h = tape.matmul(x, w2)?;
            let h = tape.add(h, b2)?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, w3)?;
            let o = tape.add(o, b3)?;
            let q = tape.sigmoid(o)?;
            let y = tape.constant(y);
            let loss = tape.squared_error(q, y)?;
            tape.backward(loss)?;
            total += tape.value(loss).item() * batch.len() as f64;
            let grads: Vec<Tensor> = [w2, b2, w3, b3]
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .cloned()
                        .ok_or_else(|| Error::Internal("missing grad".into()))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(
                &mut [&mut l2.weight, &mut l2.bias, &mut l3.weight, &mut l3.bias],
                &refs,
            )?;
        }
        let mean = total / train_idx.len() as f64;
        log::debug!("t2q epoch {epoch}: train mse {mean:.6}");
        epoch_losses.push(mean);
    }

    let predict = |idx: &[usize]| -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        model.forward_batch(&Tensor::from_rows(&rows)?)
    };
    let label_of = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let train_pred = predict(&train_idx)?;
    let val_pred = predict(&val_idx)?;
    let val_true = label_of(&val_idx);
    let (srocc, plcc) = match rank_correlation(&val_pred, &val_true) {
        Ok((s, p)) => (Some(s), Some(p)),
        Err(_) => (None, None),
    };
    Ok(T2QFit {
        train_loss: mse(&train_pred, &label_of(&train_idx)),
        val_loss: mse(&val_pred, &val_true),
        srocc,
        plcc,
        epoch_losses,
        val_indices: val_idx,
    })
}
