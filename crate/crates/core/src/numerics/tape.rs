//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node that only refers to nodes
//! recorded before it, so node order is a topological order and `backward`
//! is a single reverse sweep. Tensors are treated as 2-D `(rows, cols)`;
//! elementwise binary ops broadcast any extent of 1.

use super::tensor::{self, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward behaviour of the straight-through mixture node.
#[derive(Debug, Clone)]
pub enum MixtureForward {
    /// Row `r` takes `candidates[selected[r]]`.
    Hard(Vec<usize>),
    /// `Σ_i p_i · candidates[i]`, the objective whose gradient the hard
    /// node reports.
    Relaxed,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
        end: usize,
    },
    Sum(Var),
    Mean(Var),
    SquaredError(Var, Var),
    ScalarAffine {
        src: Var,
        scale: f64,
    },
    Mixture {
        input: Var,
        probs: Vec<Var>,
        candidates: Vec<Tensor>,
        masks: Vec<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let d = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((d(a.0, b.0)?, d(a.1, b.1)?))
}

fn at(t: &Tensor, (r, c): (usize, usize), i: usize, j: usize) -> f64 {
    t.data()[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]
}

/// Sums a broadcast gradient back down to `target` dims.
fn reduce_to(g: &Tensor, target: (usize, usize)) -> Tensor {
    let (r, c) = dims(g);
    if (r, c) == target {
        return g.clone();
    }
    let mut out = vec![0.0; target.0 * target.1];
    for i in 0..r {
        for j in 0..c {
            let ti = if target.0 == 1 { 0 } else { i };
            let tj = if target.1 == 1 { 0 } else { j };
            out[ti * target.1 + tj] += g.data()[i * c + j];
        }
    }
    Tensor::matrix(target.0, target.1, out).expect("reduce shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: false,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; `backward` assigns it a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable: true,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (dims(ta), dims(tb));
        let (r, c) = broadcast_dims(da, db).ok_or_else(|| {
            Error::contract(format!(
                "cannot broadcast {:?} with {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(at(ta, da, i, j), at(tb, db, i, j)));
            }
        }
        Tensor::matrix(r, c, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_cols(&ts)?;
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        let (r, c) = dims(t);
        if start >= end || end > c {
            return Err(Error::contract(format!(
                "slice {start}..{end} out of range for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let v = Tensor::matrix(r, end - start, out)?;
        self.push(v, Op::Slice { src, start, end }, &[src])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// `mean((a − b)²)` over all elements; shapes must match.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::contract(format!(
                "squared error shapes differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = ta.len() as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::SquaredError(a, b), &[a, b])
    }

    /// `scale · a + shift`.
    pub fn scalar_affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::ScalarAffine { src: a, scale }, &[a])
    }

    /// Straight-through mixture over precomputed quantized candidates.
    ///
    /// `candidates[i]` holds `Q_i(input)` and `masks[i]` is 1 where `input`
    /// lies inside the clip range of `Q_i` (0 elsewhere). Each `probs[i]` is
    /// a column `[rows, 1]`. Backward is the gradient of
    /// `Σ_i p_i · Q_i(input)` with every `Q_i` passing gradient through to
    /// `input` under its mask.
    pub fn mixture(
        &mut self,
        input: Var,
        probs: &[Var],
        candidates: Vec<Tensor>,
        masks: Vec<Tensor>,
        forward: MixtureForward,
    ) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (r, c) = dims(self.value(input));
        if probs.is_empty() || probs.len() != candidates.len() || probs.len() != masks.len() {
            return Err(Error::contract(
                "mixture needs one prob, candidate and mask per bit",
            ));
        }
        if candidates
            .iter()
            .chain(&masks)
            .any(|t| t.shape() != shape.as_slice())
        {
            return Err(Error::contract("mixture candidate shape mismatch"));
        }
        for &p in probs {
            if dims(self.value(p)) != (r, 1) {
                return Err(Error::contract(format!(
                    "mixture probability must be [{r}, 1], got {:?}",
                    self.value(p).shape()
                )));
            }
        }
        let mut out = vec![0.0; r * c];
        match &forward {
            MixtureForward::Hard(selected) => {
                if selected.len() != r || selected.iter().any(|&s| s >= candidates.len()) {
                    return Err(Error::contract("invalid hard selection"));
                }
                for (i, &s) in selected.iter().enumerate() {
                    out[i * c..(i + 1) * c].copy_from_slice(candidates[s].row(i));
                }
            }
            MixtureForward::Relaxed => {
                for (cand, &p) in candidates.iter().zip(probs) {
                    let pv = self.value(p).data();
                    for i in 0..r {
                        for j in 0..c {
                            out[i * c + j] += pv[i] * cand.data()[i * c + j];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        let mut parents = vec![input];
        parents.extend_from_slice(probs);
        self.push(
            v,
            Op::Mixture {
                input,
                probs: probs.to_vec(),
                candidates,
                masks,
            },
            &parents,
        )
    }

    /// Reverse sweep from a scalar `loss`; afterwards [`Tape::grad`] returns
    /// d loss / d leaf for every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            for p in parents(&node.op) {
                if p.0 >= idx {
                    return Err(Error::Internal(format!(
                        "tape is not topologically ordered: node {idx} has parent {}",
                        p.0
                    )));
                }
            }
            let contributions = self.local_grads(idx, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            if node.trainable {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = tensor::matmul(g, &val(*b).transpose())?;
                let gb = tensor::matmul(&val(*a).transpose(), g)?;
                vec![
                    (*a, ga.reshape(val(*a).shape().to_vec())?),
                    (*b, gb.reshape(val(*b).shape().to_vec())?),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, shaped(reduce_to(g, dims(val(*a))), val(*a))?),
                (*b, shaped(reduce_to(g, dims(val(*b))), val(*b))?),
            ],
            Op::Sub(a, b) => vec![
                (*a, shaped(reduce_to(g, dims(val(*a))), val(*a))?),
                (
                    *b,
                    shaped(reduce_to(&g.map(|x| -x), dims(val(*b))), val(*b))?,
                ),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (da, db) = (dims(ta), dims(tb));
                let (r, c) = dims(g);
                let mut ga = vec![0.0; r * c];
                let mut gb = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        ga[i * c + j] = gij * at(tb, db, i, j);
                        gb[i * c + j] = gij * at(ta, da, i, j);
                    }
                }
                let ga = Tensor::matrix(r, c, ga)?;
                let gb = Tensor::matrix(r, c, gb)?;
                vec![
                    (*a, shaped(reduce_to(&ga, da), ta)?),
                    (*b, shaped(reduce_to(&gb, db), tb)?),
                ]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                vec![(*a, Tensor::new(y.shape().to_vec(), d)?)]
            }
            Op::Concat(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = val(p).cols();
                    let mut d = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        d.extend_from_slice(&g.data()[i * total + off..i * total + off + pc]);
                    }
                    res.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    off += pc;
                }
                res
            }
            Op::Slice { src, start, end } => {
                let s = val(*src);
                let (r, c) = dims(s);
                let w = end - start;
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*src, Tensor::new(s.shape().to_vec(), d)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::SquaredError(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = 2.0 * g.item() / ta.len() as f64;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::new(ta.shape().to_vec(), da)?),
                    (*b, Tensor::new(tb.shape().to_vec(), db)?),
                ]
            }
            Op::ScalarAffine { src, scale } => vec![(*src, g.map(|x| x * scale))],
            Op::Mixture {
                input,
                probs,
                candidates,
                masks,
            } => {
                let x = val(*input);
                let (r, c) = dims(x);
                let mut gx = vec![0.0; r * c];
                let mut res = Vec::with_capacity(probs.len() + 1);
                for ((&p, cand), mask) in probs.iter().zip(candidates).zip(masks) {
                    let pv = val(p).data();
                    let mut gp = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            gp[i] += g.data()[k] * cand.data()[k];
                            gx[k] += g.data()[k] * pv[i] * mask.data()[k];
                        }
                    }
                    res.push((p, Tensor::new(val(p).shape().to_vec(), gp)?));
                }
                res.push((*input, Tensor::new(x.shape().to_vec(), gx)?));
                res
            }
        };
        Ok(out)
    }
}

fn shaped(t: Tensor, like: &Tensor) -> Result<Tensor> {
    t.reshape(like.shape().to_vec())
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::SquaredError(a, b) => vec![*a, *b],
        Op::Relu(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
        Op::Slice { src, .. } | Op::ScalarAffine { src, .. } => vec![*src],
        Op::Concat(p) => p.clone(),
        Op::Mixture { input, probs, .. } => {
            let mut v = vec![*input];
            v.extend_from_slice(probs);
            v
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Concat(_) => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SquaredError(..) => "squared_error",
        Op::ScalarAffine { .. } => "scalar_affine",
        Op::Mixture { .. } => "quantize_mixture",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let u = tape.param(Tensor::scalar(0.0));
        let l = tape.sigmoid(u).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(u).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let w = tape.param(Tensor::scalar(3.0));
        let p = tape.mul(c, w).unwrap();
        tape.backward(p).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().item(), 2.0);
    }

    #[test]
    fn broadcast_add_reduces() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.param(Tensor::zeros(&[1, 3]));
        let y = tape.add(x, b).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn mixture_hard_forward_and_relaxed_backward() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(1, 2, vec![0.2, 0.9]).unwrap());
        let p0 = tape.param(Tensor::matrix(1, 1, vec![0.25]).unwrap());
        let p1 = tape.param(Tensor::matrix(1, 1, vec![0.75]).unwrap());
        let c0 = Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap();
        let c1 = Tensor::matrix(1, 2, vec![0.25, 1.0]).unwrap();
        let m = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let y = tape
            .mixture(
                a,
                &[p0, p1],
                vec![c0, c1],
                vec![m.clone(), m],
                MixtureForward::Hard(vec![1]),
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 1.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p0).unwrap().item(), 1.0);
        assert_eq!(tape.grad(p1).unwrap().item(), 1.25);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(
            tape.scalar_affine(a, 10.0, 0.0),
            Err(Error::Numeric(_))
        ));
    }
}
