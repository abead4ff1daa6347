//! Uniform affine fake quantization, range calibration, and the
//! straight-through mixture used to train bit allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, MixtureForward, Tape, Tensor, Var};

/// Bit-width that means "leave the value alone".
pub const IDENTITY_BITS: u32 = 32;

/// Largest finite bit-width accepted; wider requests must use 32.
const MAX_BITS: u32 = 24;

pub fn validate_bits(bits: u32) -> Result<()> {
    if bits == IDENTITY_BITS || (2..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "unsupported bit-width {bits} (need 2..={MAX_BITS} or {IDENTITY_BITS})"
        )))
    }
}

/// Activation bit options plus the fixed weight bit-width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitMenu {
    pub low: u32,
    pub med: u32,
    pub high: u32,
    pub weight_bits: u32,
}

impl Default for BitMenu {
    fn default() -> Self {
        BitMenu {
            low: 6,
            med: 8,
            high: 10,
            weight_bits: 4,
        }
    }
}

impl BitMenu {
    /// A menu must be strictly increasing. The all-32 menu is also accepted
    /// and turns every quantizer into the identity.
    pub fn new(low: u32, med: u32, high: u32, weight_bits: u32) -> Result<Self> {
        let m = BitMenu {
            low,
            med,
            high,
            weight_bits,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.low, self.med, self.high, self.weight_bits] {
            validate_bits(b)?;
        }
        let all_identity = [self.low, self.med, self.high] == [IDENTITY_BITS; 3];
        if !(all_identity || (self.low < self.med && self.med < self.high)) {
            return Err(Error::Config(format!(
                "bit menu must satisfy low < med < high, got {{{}, {}, {}}}",
                self.low, self.med, self.high
            )));
        }
        Ok(())
    }

    /// `[low, med, high]`.
    pub fn bits(&self) -> [u32; 3] {
        [self.low, self.med, self.high]
    }

    pub fn contains(&self, bits: u32) -> bool {
        self.bits().contains(&bits)
    }
}

/// Affine quantizer for one bit-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl QuantizerSpec {
    pub fn identity() -> Self {
        QuantizerSpec {
            bits: IDENTITY_BITS,
            scale: 1.0,
            zero_point: 0,
            clip_min: f64::NEG_INFINITY,
            clip_max: f64::INFINITY,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.bits == IDENTITY_BITS
    }

    fn qmax(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Quantize-dequantize one value.
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if self.is_identity() {
            return x;
        }
        let zp = self.zero_point as f64;
        let q = ((x / self.scale).round() + zp).clamp(0.0, self.qmax());
        (q - zp) * self.scale
    }

    /// Whether `x` lies inside the representable range, i.e. where the
    /// straight-through gradient is passed.
    #[inline]
    pub fn passes(&self, x: f64) -> bool {
        if self.is_identity() {
            return true;
        }
        let zp = self.zero_point as f64;
        let lo = -zp * self.scale;
        let hi = (self.qmax() - zp) * self.scale;
        x >= lo && x <= hi
    }
}

/// `(clip_min, clip_max)` from pooled activation samples: the 0.5th and
/// 99.5th percentiles (lower rank floored, upper rank ceiled), widened by
/// ±1e-6 when they coincide.
pub fn calibrate_range(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::contract("calibrate_range needs at least one sample"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite calibration sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let last = (s.len() - 1) as f64;
    let lo = s[(0.005 * last).floor() as usize];
    let hi = s[(0.995 * last).ceil() as usize];
    if lo == hi {
        Ok((lo - 1e-6, hi + 1e-6))
    } else {
        Ok((lo, hi))
    }
}

/// Affine quantizer over `range`. The range is first extended to contain
/// zero so the zero point is always representable.
pub fn make_quantizer(range: (f64, f64), bits: u32) -> Result<QuantizerSpec> {
    if bits < 2 {
        return Err(Error::contract(format!("bits must be >= 2, got {bits}")));
    }
    validate_bits(bits)?;
    if bits == IDENTITY_BITS {
        return Ok(QuantizerSpec::identity());
    }
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::contract(format!("invalid clip range ({lo}, {hi})")));
    }
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let qmax = ((1u64 << bits) - 1) as f64;
    let scale = (hi - lo) / qmax;
    let zero_point = (-lo / scale).round().clamp(0.0, qmax) as i64;
    Ok(QuantizerSpec {
        bits,
        scale,
        zero_point,
        clip_min: lo,
        clip_max: hi,
    })
}

pub fn fake_quantize(x: &Tensor, spec: &QuantizerSpec) -> Tensor {
    if spec.is_identity() {
        return x.clone();
    }
    x.map(|v| spec.apply(v))
}

pub fn fake_quantize_inplace(x: &mut [f64], spec: &QuantizerSpec) {
    if spec.is_identity() {
        return;
    }
    for v in x {
        *v = spec.apply(*v);
    }
}

/// Per-layer symmetric weight quantization at `bits` (identity for 32).
pub fn quantize_weights_symmetric(w: &Tensor, bits: u32) -> Result<Tensor> {
    validate_bits(bits)?;
    if bits == IDENTITY_BITS {
        return Ok(w.clone());
    }
    let absmax = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok(w.clone());
    }
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let scale = absmax / qmax;
    Ok(w.map(|v| (v / scale).round().clamp(-qmax, qmax) * scale))
}

/// Straight-through mixture quantization (forward picks one bit-width per
/// row, backward is the probability-weighted sum over all of them).
///
/// * `probs[i]`: `[rows, 1]` probability of menu entry `i`.
/// * `row_specs[r][i]`: quantizer for row `r` and menu entry `i`; a single
///   row of specs is broadcast to every row.
/// * `selected`: menu index per row for the hard forward, or `None` for the
///   relaxed forward `Σ p_i Q_i(a)`.
pub fn ste_mixture_quantize(
    tape: &mut Tape,
    a: Var,
    probs: &[Var],
    row_specs: &[Vec<QuantizerSpec>],
    selected: Option<&[usize]>,
) -> Result<Var> {
    let x = tape.value(a).clone();
    let (rows, cols) = (x.rows(), x.cols());
    if row_specs.len() != rows && row_specs.len() != 1 {
        return Err(Error::contract(
            "one spec row per activation row (or one shared)",
        ));
    }
    let n_bits = probs.len();
    for r in 0..rows {
        let total: f64 = probs.iter().map(|&p| tape.value(p).data()[r]).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "bit probabilities of row {r} sum to {total}, not 1"
            )));
        }
    }
    let mut candidates = vec![vec![0.0; rows * cols]; n_bits];
    let mut masks = vec![vec![0.0; rows * cols]; n_bits];
    for r in 0..rows {
        let specs = &row_specs[if row_specs.len() == 1 { 0 } else { r }];
        if specs.len() != n_bits {
            return Err(Error::contract("spec count differs from probability count"));
        }
        for (i, spec) in specs.iter().enumerate() {
            for (c, &v) in x.row(r).iter().enumerate() {
                candidates[i][r * cols + c] = spec.apply(v);
                masks[i][r * cols + c] = if spec.passes(v) { 1.0 } else { 0.0 };
            }
        }
    }
    let shape = x.shape().to_vec();
    let candidates = candidates
        .into_iter()
        .map(|d| Tensor::new(shape.clone(), d))
        .collect::<Result<Vec<_>>>()?;
    let masks = masks
        .into_iter()
        .map(|d| Tensor::new(shape.clone(), d))
        .collect::<Result<Vec<_>>>()?;
    let forward = match selected {
        Some(s) => MixtureForward::Hard(s.to_vec()),
        None => MixtureForward::Relaxed,
    };
    tape.mixture(a, probs, candidates, masks, forward)
}

/// Activation samples per `(layer, group)`, taken from the full-precision
/// model.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    samples: Vec<Vec<Vec<f64>>>,
}

impl CalibrationSet {
    pub fn new(layers: usize, groups: usize) -> Self {
        CalibrationSet {
            samples: vec![vec![Vec::new(); groups]; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.samples.len()
    }

    pub fn groups(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn extend(&mut self, layer: usize, group: usize, values: &[f64]) {
        self.samples[layer][group].extend_from_slice(values);
    }

    pub fn samples(&self, layer: usize, group: usize) -> &[f64] {
        &self.samples[layer][group]
    }

    /// Clip ranges for every `(layer, group)`.
    pub fn ranges(&self) -> Result<ActivationRanges> {
        let mut ranges = Vec::with_capacity(self.layers());
        for (layer, per_group) in self.samples.iter().enumerate() {
            let mut row = Vec::with_capacity(per_group.len());
            for (group, s) in per_group.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::EmptyCalibration { layer, group });
                }
                row.push(calibrate_range(s)?);
            }
            ranges.push(row);
        }
        Ok(ActivationRanges { ranges })
    }
}

/// Calibrated clip ranges, shared by every bit-width of the menu.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRanges {
    ranges: Vec<Vec<(f64, f64)>>,
}

impl ActivationRanges {
    pub fn from_ranges(ranges: Vec<Vec<(f64, f64)>>) -> Self {
        ActivationRanges { ranges }
    }

    pub fn layers(&self) -> usize {
        self.ranges.len()
    }

    pub fn groups(&self) -> usize {
        self.ranges.first().map_or(0, Vec::len)
    }

    pub fn range(&self, layer: usize, group: usize) -> Result<(f64, f64)> {
        self.ranges
            .get(layer)
            .and_then(|r| r.get(group))
            .copied()
            .ok_or(Error::EmptyCalibration { layer, group })
    }

    /// Writes clip ranges; with a menu, also the derived scale and zero
    /// point of every menu width.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint, menu: Option<&BitMenu>) -> Result<()> {
        ck.put_i32s("quant/shape", &[self.layers() as i32, self.groups() as i32])?;
        if let Some(menu) = menu {
            ck.put_i32s("quant/menu", &menu.bits().map(|b| b as i32))?;
        }
        for (l, per_group) in self.ranges.iter().enumerate() {
            for (g, &(lo, hi)) in per_group.iter().enumerate() {
                ck.put_f64s(format!("quant/{l}/{g}/clip_min"), &[lo])?;
                ck.put_f64s(format!("quant/{l}/{g}/clip_max"), &[hi])?;
                let Some(menu) = menu else { continue };
                let mut scales = Vec::new();
                let mut zps = Vec::new();
                for b in menu.bits() {
                    let s = make_quantizer((lo, hi), b)?;
                    scales.push(s.scale);
                    zps.push(s.zero_point as i32);
                }
                ck.put_f64s(format!("quant/{l}/{g}/scale"), &scales)?;
                ck.put_i32s(format!("quant/{l}/{g}/zero_point"), &zps)?;
            }
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let shape = ck.i32s("quant/shape")?;
        let (layers, groups) = (shape[0] as usize, shape[1] as usize);
        let mut ranges = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut row = Vec::with_capacity(groups);
            for g in 0..groups {
                let lo = ck.f64s(&format!("quant/{l}/{g}/clip_min"))?[0];
                let hi = ck.f64s(&format!("quant/{l}/{g}/clip_max"))?[0];
                row.push((lo, hi));
            }
            ranges.push(row);
        }
        Ok(ActivationRanges { ranges })
    }
}

/// Ready-to-use quantizers: `[layer][group][menu index]`.
#[derive(Debug, Clone)]
pub struct QuantStore {
    specs: Vec<Vec<[QuantizerSpec; 3]>>,
    menu: BitMenu,
}

impl QuantStore {
    pub fn build(ranges: &ActivationRanges, menu: BitMenu) -> Result<Self> {
        menu.validate()?;
        let mut specs = Vec::with_capacity(ranges.layers());
        for l in 0..ranges.layers() {
            let mut row = Vec::with_capacity(ranges.groups());
            for g in 0..ranges.groups() {
                let r = ranges.range(l, g)?;
                row.push([
                    make_quantizer(r, menu.low)?,
                    make_quantizer(r, menu.med)?,
                    make_quantizer(r, menu.high)?,
                ]);
            }
            specs.push(row);
        }
        Ok(QuantStore { specs, menu })
    }

    pub fn menu(&self) -> &BitMenu {
        &self.menu
    }

    pub fn layers(&self) -> usize {
        self.specs.len()
    }

    pub fn groups(&self) -> usize {
        self.specs.first().map_or(0, Vec::len)
    }

    pub fn specs(&self, layer: usize, group: usize) -> Result<&[QuantizerSpec; 3]> {
        self.specs
            .get(layer)
            .and_then(|r| r.get(group))
            .ok_or(Error::EmptyCalibration { layer, group })
    }

    /// Quantizer for an explicit bit-width (which must be on the menu).
    pub fn spec_for_bits(&self, layer: usize, group: usize, bits: u32) -> Result<QuantizerSpec> {
        let specs = self.specs(layer, group)?;
        let i = self
            .menu
            .bits()
            .iter()
            .position(|&b| b == bits)
            .ok_or_else(|| Error::contract(format!("{bits} bits is not on the menu")))?;
        Ok(specs[i])
    }
}
