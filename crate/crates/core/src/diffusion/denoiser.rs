//! MLP noise predictor with per-layer activation hooks.
//!
//! Layout: an input projection (full precision), `K` quantizable hidden
//! layers, and an output projection (full precision). The activation of
//! quantizable layer `k` is the tensor entering its matmul; that is where
//! hooks fire and where activation quantization is applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{add_row_inplace, concat_cols, matmul};
use crate::numerics::{Checkpoint, Tape, Tensor, Var};
use crate::quant::{quantize_weights_symmetric, QuantStore};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserShape {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub quant_layers: usize,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        DenoiserShape {
            data_dim: 4,
            cond_dim: 64,
            time_dim: 16,
            hidden: 64,
            quant_layers: 6,
        }
    }
}

impl DenoiserShape {
    pub fn validate(&self) -> Result<()> {
        if self.quant_layers < 3 {
            return Err(Error::Config(format!(
                "need at least 3 quantizable layers, got {}",
                self.quant_layers
            )));
        }
        if self.data_dim == 0 || self.cond_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "time embedding width must be even and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// Multiply-accumulates of each quantizable layer.
    pub fn quant_layer_macs(&self) -> Vec<u64> {
        vec![(self.hidden * self.hidden) as u64; self.quant_layers]
    }
}

/// Dense layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Gaussian weights with std `gain / √fan_in`, zero bias.
    pub fn init(rng: &mut Stream, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng
            .normals(fan_in * fan_out)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        add_row_inplace(&mut y, self.bias.data());
        Ok(y)
    }
}

/// Sinusoidal embedding of a noise level.
pub fn time_embedding(level: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = level as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out.push((t * freq).cos());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    shape: DenoiserShape,
    layers: Vec<Linear>,
}

/// Tape handles for every weight and bias of a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct DenoiserVars {
    pub layers: Vec<(Var, Var)>,
}

impl Denoiser {
    pub fn new(shape: DenoiserShape, rng: &mut Stream) -> Result<Self> {
        shape.validate()?;
        let mut layers = Vec::with_capacity(shape.quant_layers + 2);
        layers.push(Linear::init(
            rng,
            shape.input_dim(),
            shape.hidden,
            2f64.sqrt(),
        ));
        for _ in 0..shape.quant_layers {
            layers.push(Linear::init(rng, shape.hidden, shape.hidden, 2f64.sqrt()));
        }
        layers.push(Linear::init(rng, shape.hidden, shape.data_dim, 1.0));
        Ok(Denoiser { shape, layers })
    }

    pub fn from_layers(shape: DenoiserShape, layers: Vec<Linear>) -> Result<Self> {
        shape.validate()?;
        if layers.len() != shape.quant_layers + 2 {
            return Err(Error::contract("layer count does not match shape"));
        }
        Ok(Denoiser { shape, layers })
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    /// `concat(x_t, time embedding, z)` per row.
    pub fn build_input(&self, x: &Tensor, levels: &[usize], z: &Tensor) -> Result<Tensor> {
        let rows = x.rows();
        if levels.len() != rows || z.rows() != rows {
            return Err(Error::contract(
                "x, levels and z must have the same row count",
            ));
        }
        if x.cols() != self.shape.data_dim || z.cols() != self.shape.cond_dim {
            return Err(Error::contract(format!(
                "expected x width {} and z width {}, got {} and {}",
                self.shape.data_dim,
                self.shape.cond_dim,
                x.cols(),
                z.cols()
            )));
        }
        let temb: Vec<f64> = levels
            .iter()
            .flat_map(|&l| time_embedding(l, self.shape.time_dim))
            .collect();
        let temb = Tensor::matrix(rows, self.shape.time_dim, temb)?;
        concat_cols(&[x, &temb, z])
    }

    /// Plain forward. `hook(k, a)` sees (and may rewrite) the activation
    /// entering quantizable layer `k`.
    pub fn forward_with(
        &self,
        input: &Tensor,
        hook: &mut dyn FnMut(usize, &mut Tensor) -> Result<()>,
    ) -> Result<Tensor> {
        let k_max = self.shape.quant_layers;
        let mut h = relu(self.layers[0].forward(input)?);
        for k in 0..k_max {
            hook(k, &mut h)?;
            h = relu(self.layers[k + 1].forward(&h)?);
        }
        self.layers[k_max + 1].forward(&h)
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, &mut |_, _| Ok(()))
    }

    /// Records every weight on `tape`, as parameters or as constants.
    pub fn push(&self, tape: &mut Tape, trainable: bool) -> DenoiserVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                }
            })
            .collect();
        DenoiserVars { layers }
    }

    /// Differentiable forward; `hook(tape, k, a)` may replace the
    /// activation of quantizable layer `k`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &DenoiserVars,
        input: Var,
        hook: &mut dyn FnMut(&mut Tape, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let k_max = self.shape.quant_layers;
        let dense = |tape: &mut Tape, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.matmul(x, w)?;
            tape.add(y, b)
        };
        let y = dense(tape, input, vars.layers[0])?;
        let mut h = tape.relu(y)?;
        for k in 0..k_max {
            h = hook(tape, k, h)?;
            let y = dense(tape, h, vars.layers[k + 1])?;
            h = tape.relu(y)?;
        }
        dense(tape, h, vars.layers[k_max + 1])
    }

    /// Copy with every quantizable layer's weights fake-quantized
    /// (per-layer symmetric). Input and output projections stay in full
    /// precision.
    pub fn with_quantized_weights(&self, bits: u32) -> Result<Denoiser> {
        let mut out = self.clone();
        for l in &mut out.layers[1..=self.shape.quant_layers] {
            l.weight = quantize_weights_symmetric(&l.weight, bits)?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        let s = &self.shape;
        ck.put_i32s(
            "denoiser/shape",
            &[s.data_dim, s.cond_dim, s.time_dim, s.hidden, s.quant_layers].map(|v| v as i32),
        )?;
        for (i, l) in self.layers.iter().enumerate() {
            ck.put_tensor(format!("denoiser/{i}/weight"), &l.weight)?;
            ck.put_tensor(format!("denoiser/{i}/bias"), &l.bias)?;
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let s = ck.i32s("denoiser/shape")?;
        if s.len() != 5 {
            return Err(Error::contract("denoiser/shape must hold 5 values"));
        }
        let shape = DenoiserShape {
            data_dim: s[0] as usize,
            cond_dim: s[1] as usize,
            time_dim: s[2] as usize,
            hidden: s[3] as usize,
            quant_layers: s[4] as usize,
        };
        let layers = (0..shape.quant_layers + 2)
            .map(|i| {
                Ok(Linear {
                    weight: ck.tensor(&format!("denoiser/{i}/weight"))?,
                    bias: ck.tensor(&format!("denoiser/{i}/bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Denoiser::from_layers(shape, layers)
    }
}

fn relu(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
    t
}

/// Weight-quantized denoiser plus its calibrated activation quantizers.
#[derive(Debug, Clone)]
pub struct QuantizedDenoiser {
    model: Denoiser,
    store: QuantStore,
}

impl QuantizedDenoiser {
    pub fn new(full: &Denoiser, store: QuantStore) -> Result<Self> {
        if store.layers() != full.shape().quant_layers {
            return Err(Error::contract(format!(
                "calibration covers {} layers, model has {}",
                store.layers(),
                full.shape().quant_layers
            )));
        }
        let model = full.with_quantized_weights(store.menu().weight_bits)?;
        Ok(QuantizedDenoiser { model, store })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn store(&self) -> &QuantStore {
        &self.store
    }

    /// Forward with activations of layer `k` in row `r` quantized to
    /// `bits[r][k]` using the quantizer of timestep group `groups[r]`.
    pub fn forward(&self, input: &Tensor, bits: &[Vec<u32>], groups: &[usize]) -> Result<Tensor> {
        let rows = input.rows();
        if bits.len() != rows || groups.len() != rows {
            return Err(Error::contract("one bit row and group per input row"));
        }
        self.model.forward_with(input, &mut |k, a| {
            let cols = a.cols();
            for (r, chunk) in a.data_mut().chunks_mut(cols).enumerate() {
                let spec = self.store.spec_for_bits(k, groups[r], bits[r][k])?;
                crate::quant::fake_quantize_inplace(chunk, &spec);
            }
            Ok(())
        })
    }
}
