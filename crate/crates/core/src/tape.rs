//! Reverse-mode differentiation over a fixed set of tensor primitives.
//!
//! A [`Tape`] records every primitive application in execution order, so node
//! inputs always refer to earlier nodes. [`Tape::backward`] walks the nodes
//! once in reverse and returns the adjoint of every parameter leaf.
//!
//! Batched model code keeps the sample index on axis 0 of every activation;
//! the `row_*` primitives and [`Tape::batch_contract`] respect that axis.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{expm2_adjoint, expm2_raw, invert_perm, permute_unchecked, ContractPlan, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Contract { a: Var, b: Var, plan: ContractPlan },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Expm2(Var),
    Norm(Var),
    RowNorm(Var),
    RowDiv(Var, Var),
    RowMul(Var, Var),
    Sum(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { a: Var, axis: usize, start: usize },
    Stack { parts: Vec<Var>, axis: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter adjoints returned by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(alpha);
        }
    }
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    let b = *t.shape().first().ok_or_else(|| shape_err!("row op on a scalar"))?;
    Ok((b, t.numel() / b))
}

fn last_axis(t: &Tensor) -> Result<(usize, usize)> {
    let k = *t.shape().last().ok_or_else(|| shape_err!("softmax on a scalar"))?;
    Ok((t.numel() / k, k))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(Error::UnknownNode(v.0))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(Op::Param(id), value, true)
    }

    pub fn contract(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.contract_impl(a, b, pairs, false)
    }

    /// Contraction where axis 0 of both operands is a shared batch axis.
    pub fn batch_contract(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        self.contract_impl(a, b, pairs, true)
    }

    fn contract_impl(&mut self, a: Var, b: Var, pairs: &[(usize, usize)], batched: bool) -> Result<Var> {
        let (va, vb) = (self.check(a)?, self.check(b)?);
        let plan = ContractPlan::new(va.shape(), vb.shape(), pairs, batched)?;
        let value = plan.forward(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Contract { a, b, plan }, value, ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.check(a)?.zip_map(self.check(b)?, f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.check(a)?.map(f);
        let ng = self.needs(a);
        Ok(self.push(op, value, ng))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, |x| alpha * x, Op::Scale(a, alpha))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Exponential of every trailing 2×2 block.
    pub fn expm2(&mut self, a: Var) -> Result<Var> {
        let va = self.check(a)?;
        let r = va.rank();
        if r < 2 || va.shape()[r - 2..] != [2, 2] {
            return Err(shape_err!("expm2 needs trailing 2x2 axes, got {:?}", va.shape()));
        }
        let mut out = va.clone();
        for (chunk, src) in out.data_mut().chunks_mut(4).zip(va.data().chunks(4)) {
            chunk.copy_from_slice(&expm2_raw(src));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Expm2(a), out, ng))
    }

    /// Frobenius norm of the whole tensor, as a rank-0 tensor.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = crate::tensor::frobenius_norm(self.check(a)?);
        let ng = self.needs(a);
        Ok(self.push(Op::Norm(a), Tensor::scalar(n), ng))
    }

    /// Frobenius norm of each batch row: `[B, ...] -> [B]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let va = self.check(a)?;
        let (b, w) = rows(va)?;
        let norms: Vec<f64> = (0..b)
            .map(|i| va.data()[i * w..(i + 1) * w].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let ng = self.needs(a);
        Ok(self.push(Op::RowNorm(a), Tensor::new(&[b], norms)?, ng))
    }

    fn row_binary(&mut self, a: Var, n: Var, divide: bool) -> Result<Var> {
        let (va, vn) = (self.check(a)?, self.check(n)?);
        let (b, w) = rows(va)?;
        if vn.shape() != [b] {
            return Err(shape_err!("row scale {:?} for {:?}", vn.shape(), va.shape()));
        }
        let mut out = va.clone();
        for (i, chunk) in out.data_mut().chunks_mut(w).enumerate() {
            let s = if divide { 1.0 / vn.data()[i] } else { vn.data()[i] };
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.needs(a) || self.needs(n);
        let op = if divide { Op::RowDiv(a, n) } else { Op::RowMul(a, n) };
        Ok(self.push(op, out, ng))
    }

    /// `x[b, ...] / n[b]`
    pub fn row_div(&mut self, a: Var, n: Var) -> Result<Var> {
        self.row_binary(a, n, true)
    }

    /// `x[b, ...] * n[b]`
    pub fn row_mul(&mut self, a: Var, n: Var) -> Result<Var> {
        self.row_binary(a, n, false)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.sum();
        let ng = self.needs(a);
        Ok(self.push(Op::Sum(a), Tensor::scalar(s), ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.check(a)?;
        let (_, k) = last_axis(va)?;
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(k) {
            log_softmax_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::LogSoftmax(a), out, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.check(a)?;
        let (_, k) = last_axis(va)?;
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Softmax(a), out, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(a)?.reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.check(a)?.permute(perm)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Permute(a, perm.to_vec()), value, ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.check(a)?.slice_axis(axis, start, len)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Slice { a, axis, start }, value, ng))
    }

    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let value = Tensor::stack(&vals, axis)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
            value,
            ng,
        ))
    }

    /// Adjoints of `loss` with respect to every parameter leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.check(loss)?;
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, adj: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.grads.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.grads.insert(*id, g);
                    }
                },
                Op::Contract { a, b, plan } => {
                    let (ga, gb) = plan.backward(val(*a), val(*b), &g);
                    send(*a, ga, &mut adj);
                    send(*b, gb, &mut adj);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g, &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-1.0), &mut adj);
                    send(*a, g, &mut adj);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y)?, &mut adj);
                    send(*b, g.zip_map(val(*a), |x, y| x * y)?, &mut adj);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    send(*a, g.zip_map(vb, |x, y| x / y)?, &mut adj);
                    let gb = g.zip_map(va, |x, y| x * y)?.zip_map(vb, |x, y| -x / (y * y))?;
                    send(*b, gb, &mut adj);
                }
                Op::Scale(a, alpha) => send(*a, g.scale(*alpha), &mut adj),
                Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))?, &mut adj),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, e| x * e)?, &mut adj),
                Op::Ln(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)?, &mut adj),
                Op::Abs(a) => send(*a, g.zip_map(val(*a), |x, y| x * sign(y))?, &mut adj),
                Op::Expm2(a) => {
                    let va = val(*a);
                    let mut ga = va.clone();
                    for ((dst, h), gg) in ga
                        .data_mut()
                        .chunks_mut(4)
                        .zip(va.data().chunks(4))
                        .zip(g.data().chunks(4))
                    {
                        dst.copy_from_slice(&expm2_adjoint(h, gg));
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Norm(a) => {
                    let n = node.value.item();
                    let s = if n > 0.0 { g.item() / n } else { 0.0 };
                    send(*a, val(*a).scale(s), &mut adj);
                }
                Op::RowNorm(a) => {
                    let va = val(*a);
                    let (_, w) = rows(va)?;
                    let mut ga = va.clone();
                    for (i, chunk) in ga.data_mut().chunks_mut(w).enumerate() {
                        let n = node.value.data()[i];
                        let s = if n > 0.0 { g.data()[i] / n } else { 0.0 };
                        chunk.iter_mut().for_each(|x| *x *= s);
                    }
                    send(*a, ga, &mut adj);
                }
                Op::RowDiv(a, n) | Op::RowMul(a, n) => {
                    let divide = matches!(node.op, Op::RowDiv(..));
                    let (va, vn) = (val(*a), val(*n));
                    let (b, w) = rows(va)?;
                    let mut ga = g.clone();
                    let mut gn = vec![0.0; b];
                    for i in 0..b {
                        let nv = vn.data()[i];
                        let gs = &g.data()[i * w..(i + 1) * w];
                        let xs = &va.data()[i * w..(i + 1) * w];
                        let dot: f64 = gs.iter().zip(xs).map(|(p, q)| p * q).sum();
                        let s = if divide { 1.0 / nv } else { nv };
                        ga.data_mut()[i * w..(i + 1) * w].iter_mut().for_each(|x| *x *= s);
                        gn[i] = if divide { -dot / (nv * nv) } else { dot };
                    }
                    send(*a, ga, &mut adj);
                    send(*n, Tensor::new(&[b], gn)?, &mut adj);
                }
                Op::Sum(a) => {
                    send(*a, Tensor::full(val(*a).shape(), g.item()), &mut adj);
                }
                Op::LogSoftmax(a) => {
                    let (_, k) = last_axis(&node.value)?;
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let gs: f64 = grow.iter().sum();
                        for (gx, y) in grow.iter_mut().zip(yrow) {
                            // near p = 1, 1 − p comes from expm1 instead of a cancellation
                            if *y > -std::f64::consts::LN_2 {
                                *gx = (*gx - gs) - gs * y.exp_m1();
                            } else {
                                *gx -= y.exp() * gs;
                            }
                        }
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Softmax(a) => {
                    let (_, k) = last_axis(&node.value)?;
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for (gx, y) in grow.iter_mut().zip(yrow) {
                            *gx = y * (*gx - dot);
                        }
                    }
                    send(*a, ga, &mut adj);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape())?, &mut adj),
                Op::Permute(a, perm) => send(*a, permute_unchecked(&g, &invert_perm(perm)), &mut adj),
                Op::Slice { a, axis, start } => {
                    let va = val(*a);
                    let mut ga = Tensor::zeros(va.shape());
                    scatter_slice(&mut ga, &g, *axis, *start);
                    send(*a, ga, &mut adj);
                }
                Op::Stack { parts, axis } => {
                    for (i, &p) in parts.iter().enumerate() {
                        let gi = g.slice_axis(*axis, i, 1)?.reshape(val(p).shape())?;
                        send(p, gi, &mut adj);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn scatter_slice(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize) {
    let shape = dst.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = src.shape()[axis];
    let extent = shape[axis];
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        dst.data_mut()[base..base + len * inner].copy_from_slice(&src.data()[o * len * inner..(o + 1) * len * inner]);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index and value of the largest entry, plus `Σ exp(x − max)` over the others.
fn split_max(xs: &[f64]) -> (usize, f64, f64) {
    let (im, m) = xs.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, x)| if x > best.1 { (i, x) } else { best },
    );
    let rest = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != im)
        .map(|(_, x)| (x - m).exp())
        .sum();
    (im, m, rest)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let (_, m, rest) = split_max(xs);
    if !m.is_finite() {
        return m;
    }
    m + rest.ln_1p()
}

/// `x − logsumexp(x)` with the sum split as `1 + rest`, so the winning entry
/// keeps full relative precision when the others are far below it.
fn log_softmax_in_place(xs: &mut [f64]) {
    let (_, m, rest) = split_max(xs);
    if !m.is_finite() {
        xs.iter_mut().for_each(|x| *x -= m);
        return;
    }
    let tail = rest.ln_1p();
    xs.iter_mut().for_each(|x| *x = (*x - m) - tail);
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_function;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dot_with_itself() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::vector(&[1.0, 2.0]));
        let y = tape.contract(x, x, &[(0, 0)]).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::vector(&[1.0, 2.0]));
        let zero = tape.scale(x, 0.0).unwrap();
        let y = tape.sum(zero).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(tape.backward(Var(17)), Err(Error::UnknownNode(17))));
    }

    #[test]
    fn unused_param_gets_no_entry() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), Tensor::vector(&[1.0]));
        let _unused = tape.param(ParamId(1), Tensor::vector(&[1.0]));
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(ParamId(1)).is_none());
    }

    // Each primitive is checked against central differences through a random
    // linear functional of its output.
    fn check_unary(shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::random_uniform(shape, lo, hi, &mut rng);
        let err = check_function(&[x0], &mut rng, |tape, vars| f(tape, vars[0])).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn primitive_gradients() {
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.sigmoid(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.exp(x));
        check_unary(&[3, 4], 0.5, 2.0, |t, x| t.ln(x));
        check_unary(&[3, 4], 0.1, 2.0, |t, x| t.abs(x));
        check_unary(&[3, 2, 2], -2.0, 2.0, |t, x| t.expm2(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.norm(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.row_norm(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.log_softmax(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.softmax(x));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.scale(x, -1.5));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.permute(x, &[1, 0]));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.reshape(x, &[2, 6]));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| t.slice(x, 1, 1, 2));
        check_unary(&[3, 4], -2.0, 2.0, |t, x| {
            let n = t.row_norm(x)?;
            t.row_div(x, n)
        });
        check_unary(&[3, 4], -2.0, 2.0, |t, x| {
            let n = t.row_norm(x)?;
            t.row_mul(x, n)
        });
    }

    #[test]
    fn binary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::random_uniform(&[2, 3, 4], 0.5, 2.0, &mut rng);
        let b = Tensor::random_uniform(&[2, 3, 4], 0.5, 2.0, &mut rng);
        let c = Tensor::random_uniform(&[2, 4, 5], -1.0, 1.0, &mut rng);
        let ops: Vec<Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>> = vec![
            Box::new(|t, v| t.add(v[0], v[1])),
            Box::new(|t, v| t.sub(v[0], v[1])),
            Box::new(|t, v| t.mul(v[0], v[1])),
            Box::new(|t, v| t.div(v[0], v[1])),
            Box::new(|t, v| t.stack(&[v[0], v[1]], 1)),
            Box::new(|t, v| t.contract(v[0], v[1], &[(2, 2), (0, 0)])),
        ];
        for op in &ops {
            let err = check_function(&[a.clone(), b.clone()], &mut rng, |t, v| op(t, v)).unwrap();
            assert!(err < 1e-6, "relative error {err}");
        }
        let err = check_function(&[a.clone(), c], &mut rng, |t, v| {
            t.batch_contract(v[0], v[1], &[(2, 1)])
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut tape = Tape::new();
            let a = tape.param(ParamId(0), Tensor::random_normal(&[4, 4], 1.0, &mut rng));
            let b = tape.contract(a, a, &[(1, 0)]).unwrap();
            let s = tape.sigmoid(b).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn saturated_log_softmax_keeps_relative_precision() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![50.0, 36.5, 76.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        // -ln(1 + a) to second order, a = e^-26 + e^-39.5
        let a = (-26f64).exp() + (-39.5f64).exp();
        let want = -(a - a * a / 2.0);
        let got = tape.value(y).data()[2];
        assert!((got - want).abs() < 1e-14 * want.abs(), "{got:e} vs {want:e}");
    }
}
