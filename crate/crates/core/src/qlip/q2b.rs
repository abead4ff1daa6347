//! Quality-to-bit allocation.
//!
//! For layer `k`, reverse step `t` (1-based, `t = 1` is the first and
//! noisiest step) and predicted quality `q`:
//!
//! ```text
//! p_q = σ((q − 0.5)·s + o)          (forced to 1 for t ≤ m)
//! p_m = σ(u_m[g(t)]),  p_h = σ(u_h[g(t)])
//! p_low  = (1 − p_q)(1 − p_m)
//! p_med  = (1 − p_q)·p_m + p_q·(1 − p_h)
//! p_high = p_q·p_h
//! ```
//!
//! with `g(t)` the group of `M` consecutive steps that share parameters.
//! The selected bit-width is the argmax, ties going to the lower width.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::plan::BitPlan;
use crate::diffusion::StepGroups;
use crate::error::{Error, Result};
use crate::numerics::tensor::sigmoid;
use crate::numerics::{Checkpoint, Tape, Tensor, Var};
use crate::quant::BitMenu;

/// Which probability terms the allocator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `p_q`, `p_m` and `p_h`.
    Full,
    /// `p_q` only: two reachable widths, low and high.
    QOnly,
    /// `p_q` and `p_h`; the low probability comes from `p_q` alone.
    QPlusH,
    /// `p_q` and `p_m`; the high probability comes from `p_q` alone.
    QPlusM,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::QOnly,
        Variant::QPlusH,
        Variant::QPlusM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::QOnly => "q_only",
            Variant::QPlusH => "q_plus_h",
            Variant::QPlusM => "q_plus_m",
        }
    }

    fn code(self) -> i32 {
        match self {
            Variant::Full => 0,
            Variant::QOnly => 1,
            Variant::QPlusH => 2,
            Variant::QPlusM => 3,
        }
    }

    fn from_code(c: i32) -> Result<Self> {
        Ok(match c {
            0 => Variant::Full,
            1 => Variant::QOnly,
            2 => Variant::QPlusH,
            3 => Variant::QPlusM,
            _ => return Err(Error::contract(format!("unknown variant code {c}"))),
        })
    }

    /// Constant replacement for `p_m`, if the variant drops it.
    fn fixed_pm(self) -> Option<f64> {
        match self {
            Variant::QOnly | Variant::QPlusH => Some(0.0),
            _ => None,
        }
    }

    /// Constant replacement for `p_h`, if the variant drops it.
    fn fixed_ph(self) -> Option<f64> {
        match self {
            Variant::QOnly | Variant::QPlusM => Some(1.0),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown q2b variant `{s}`")))
    }
}

/// Learnable allocator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Q2BParams {
    /// Quality slope per layer.
    pub s: Vec<f64>,
    /// Quality offset per layer.
    pub o: Vec<f64>,
    /// `[groups, layers]`: one row of medium-bit logits per step group.
    pub u_m: Tensor,
    /// `[groups, layers]`: one row of high-bit logits per step group.
    pub u_h: Tensor,
    pub groups: StepGroups,
    /// Number of leading reverse steps forced away from the low width.
    pub forced_steps: usize,
    pub menu: BitMenu,
    pub variant: Variant,
}

/// Selection probabilities of one reverse step, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BitProbabilities {
    pub low: Vec<f64>,
    pub med: Vec<f64>,
    pub high: Vec<f64>,
}

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

impl Q2BParams {
    /// `s = 4`, `o = 0`, `u_m = u_h = 0`.
    pub fn new(
        layers: usize,
        groups: StepGroups,
        forced_steps: usize,
        menu: BitMenu,
        variant: Variant,
    ) -> Result<Self> {
        menu.validate()?;
        if layers == 0 {
            return Err(Error::Config("allocator needs at least one layer".into()));
        }
        if forced_steps > groups.steps() {
            return Err(Error::Config(format!(
                "forced window m = {forced_steps} exceeds T = {}",
                groups.steps()
            )));
        }
        let g = groups.groups();
        Ok(Q2BParams {
            s: vec![4.0; layers],
            o: vec![0.0; layers],
            u_m: Tensor::zeros(&[g, layers]),
            u_h: Tensor::zeros(&[g, layers]),
            groups,
            forced_steps,
            menu,
            variant,
        })
    }

    pub fn layers(&self) -> usize {
        self.s.len()
    }

    pub fn steps(&self) -> usize {
        self.groups.steps()
    }

    /// `2K + 2K·⌈T/M⌉`.
    pub fn parameter_count(&self) -> usize {
        self.s.len() + self.o.len() + self.u_m.len() + self.u_h.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "reverse step {t} outside [1, {}]",
                self.steps()
            )))
        }
    }

    pub fn is_forced(&self, t: usize) -> bool {
        t <= self.forced_steps
    }

    /// Probabilities at quality `q` and reverse step `t ∈ [1, T]`.
    pub fn probs(&self, q: f64, t: usize) -> Result<BitProbabilities> {
        self.check_step(t)?;
        let q = clamp_quality(q);
        let g = self.groups.group_of(t - 1);
        let k = self.layers();
        let mut out = BitProbabilities {
            low: Vec::with_capacity(k),
            med: Vec::with_capacity(k),
            high: Vec::with_capacity(k),
        };
        let forced = self.is_forced(t);
        for l in 0..k {
            let pq = if forced {
                1.0
            } else {
                sigmoid((q - 0.5) * self.s[l] + self.o[l])
            };
            let pm = self
                .variant
                .fixed_pm()
                .unwrap_or_else(|| sigmoid(self.u_m.row(g)[l]));
            let ph = self
                .variant
                .fixed_ph()
                .unwrap_or_else(|| sigmoid(self.u_h.row(g)[l]));
            out.low.push((1.0 - pq) * (1.0 - pm));
            out.med.push((1.0 - pq) * pm + pq * (1.0 - ph));
            out.high.push(pq * ph);
        }
        Ok(out)
    }

    /// Full `K × T` plan for quality `q`.
    pub fn plan(&self, q: f64) -> Result<BitPlan> {
        let mut plan = BitPlan::filled(self.layers(), self.steps(), self.menu.med);
        for t in 1..=self.steps() {
            let p = self.probs(q, t)?;
            plan.set_column(t - 1, &select_bits(&p, &self.menu));
        }
        Ok(plan)
    }

    /// Records the trainable tensors on `tape`. Terms the variant drops are
    /// recorded as constants.
    pub fn push(&self, tape: &mut Tape) -> Q2BVars {
        let k = self.layers();
        let row = |v: &[f64]| Tensor::matrix(1, k, v.to_vec()).expect("shape");
        Q2BVars {
            s: tape.param(row(&self.s)),
            o: tape.param(row(&self.o)),
            u_m: tape.param(self.u_m.clone()),
            u_h: tape.param(self.u_h.clone()),
        }
    }

    /// Differentiable probabilities for a batch: row `r` uses quality
    /// `qs[r]` and reverse step `steps[r]` (1-based). Returns
    /// `[low, med, high]`, each `[rows, K]`.
    pub fn probs_tape(
        &self,
        tape: &mut Tape,
        vars: &Q2BVars,
        qs: &[f64],
        steps: &[usize],
    ) -> Result<[Var; 3]> {
        let rows = qs.len();
        if steps.len() != rows || rows == 0 {
            return Err(Error::contract("need one reverse step per quality"));
        }
        for &t in steps {
            self.check_step(t)?;
        }
        let k = self.layers();
        let g = self.groups.groups();
        let centered = tape.constant(Tensor::matrix(
            rows,
            1,
            qs.iter().map(|&q| clamp_quality(q) - 0.5).collect(),
        )?);
        let logits = tape.matmul(centered, vars.s)?;
        let logits = tape.add(logits, vars.o)?;
        let pq = tape.sigmoid(logits)?;
        let forced: Vec<f64> = steps
            .iter()
            .map(|&t| if self.is_forced(t) { 1.0 } else { 0.0 })
            .collect();
        let keep = tape.constant(Tensor::matrix(
            rows,
            1,
            forced.iter().map(|f| 1.0 - f).collect(),
        )?);
        let force = tape.constant(Tensor::matrix(rows, 1, forced)?);
        let pq = tape.mul(pq, keep)?;
        let pq = tape.add(pq, force)?;

        let mut onehot = vec![0.0; rows * g];
        for (r, &t) in steps.iter().enumerate() {
            onehot[r * g + self.groups.group_of(t - 1)] = 1.0;
        }
        let onehot = tape.constant(Tensor::matrix(rows, g, onehot)?);
        let mut group_prob = |u: Var, fixed: Option<f64>| -> Result<Var> {
            match fixed {
                Some(v) => Ok(tape.constant(Tensor::full(&[rows, k], v))),
                None => {
                    let x = tape.matmul(onehot, u)?;
                    tape.sigmoid(x)
                }
            }
        };
        let pm = group_prob(vars.u_m, self.variant.fixed_pm())?;
        let ph = group_prob(vars.u_h, self.variant.fixed_ph())?;

        let not_pq = tape.scalar_affine(pq, -1.0, 1.0)?;
        let not_pm = tape.scalar_affine(pm, -1.0, 1.0)?;
        let not_ph = tape.scalar_affine(ph, -1.0, 1.0)?;
        let low = tape.mul(not_pq, not_pm)?;
        let med_a = tape.mul(not_pq, pm)?;
        let med_b = tape.mul(pq, not_ph)?;
        let med = tape.add(med_a, med_b)?;
        let high = tape.mul(pq, ph)?;
        Ok([low, med, high])
    }

    /// Applies gradients taken from `vars` on `tape`.
    pub fn gradients(&self, tape: &Tape, vars: &Q2BVars) -> Result<[Tensor; 4]> {
        let get = |v: Var, shape: &[usize]| -> Tensor {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(shape))
        };
        let k = self.layers();
        let g = self.groups.groups();
        Ok([
            get(vars.s, &[1, k]),
            get(vars.o, &[1, k]),
            get(vars.u_m, &[g, k]),
            get(vars.u_h, &[g, k]),
        ])
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_i32s(
            "q2b/meta",
            &[
                self.layers() as i32,
                self.groups.steps() as i32,
                self.groups.group_size() as i32,
                self.forced_steps as i32,
                self.variant.code(),
            ],
        )?;
        let m = self.menu;
        ck.put_i32s(
            "q2b/menu",
            &[m.low, m.med, m.high, m.weight_bits].map(|b| b as i32),
        )?;
        ck.put_f64s("q2b/s", &self.s)?;
        ck.put_f64s("q2b/o", &self.o)?;
        ck.put_tensor("q2b/u_m", &self.u_m)?;
        ck.put_tensor("q2b/u_h", &self.u_h)?;
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck.i32s("q2b/meta")?;
        let menu = ck.i32s("q2b/menu")?;
        if meta.len() != 5 || menu.len() != 4 {
            return Err(Error::contract("malformed q2b metadata"));
        }
        let groups = StepGroups::new(meta[1] as usize, meta[2] as usize)?;
        let menu = BitMenu::new(
            menu[0] as u32,
            menu[1] as u32,
            menu[2] as u32,
            menu[3] as u32,
        )?;
        let mut p = Q2BParams::new(
            meta[0] as usize,
            groups,
            meta[3] as usize,
            menu,
            Variant::from_code(meta[4])?,
        )?;
        p.s = ck.f64s("q2b/s")?;
        p.o = ck.f64s("q2b/o")?;
        p.u_m = ck.tensor("q2b/u_m")?;
        p.u_h = ck.tensor("q2b/u_h")?;
        Ok(p)
    }
}

/// Tape handles of the allocator parameters.
#[derive(Debug, Clone, Copy)]
pub struct Q2BVars {
    pub s: Var,
    pub o: Var,
    pub u_m: Var,
    pub u_h: Var,
}

fn clamp_quality(q: f64) -> f64 {
    if (0.0..=1.0).contains(&q) {
        return q;
    }
    if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
        log::warn!("quality {q} outside [0, 1]; clamping (further occurrences not logged)");
    }
    if q.is_nan() {
        0.5
    } else {
        q.clamp(0.0, 1.0)
    }
}

/// Menu index (0 = low, 1 = med, 2 = high) with the largest probability;
/// ties resolve to the lower index.
pub fn select_index(low: f64, med: f64, high: f64) -> usize {
    let mut best = 0;
    let mut best_p = low;
    for (i, p) in [(1, med), (2, high)] {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    best
}

/// Bit-width per layer for one reverse step.
pub fn select_bits(probs: &BitProbabilities, menu: &BitMenu) -> Vec<u32> {
    let bits = menu.bits();
    (0..probs.low.len())
        .map(|k| bits[select_index(probs.low[k], probs.med[k], probs.high[k])])
        .collect()
}
