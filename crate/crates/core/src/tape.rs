//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to tracked values. Calling
//! [`Tape::backward`] on a scalar result walks the recording in strict
//! reverse order and accumulates (`+=`) gradients into every tracked node,
//! so a value consumed by several operations receives the sum of all
//! partials.
//!
//! Operations are defined by a forward computation plus a [`Backward`]
//! rule. Most rules are the true derivative; the quantization surrogates in
//! [`crate::nn`] install redefined rules instead.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// How non-differentiable surrogate operations behave in the forward pass.
///
/// `Exact` is the real codec: rounding rounds and clipping clips.
/// `Reference` swaps each surrogate for the smooth function whose derivative
/// its backward rule uses (the identity for rounding, stochastic rounding and
/// clipping). Finite differences taken in `Reference` mode are therefore the
/// oracle for the redefined gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Exact,
    Reference,
}

/// Read access to recorded values while a backward rule runs.
pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    out: usize,
}

impl BackwardCtx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes[self.out].value
    }

    pub fn tracked(&self, v: Var) -> bool {
        self.nodes[v.idx].tracked
    }
}

/// Gradient contributions produced by a backward rule.
pub type Contributions = Vec<(Var, Vec<f64>)>;

/// Backward rule of a recorded operation.
pub trait Backward {
    fn name(&self) -> &'static str;

    /// Given the gradient w.r.t. the node's output, return the gradient
    /// contribution for each tracked input.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions;
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    tracked: bool,
    op: Option<Box<dyn Backward>>,
}

pub struct Tape {
    id: u32,
    mode: ForwardMode,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(ForwardMode::Exact)
    }

    pub fn with_mode(mode: ForwardMode) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.idx].tracked
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.idx].grad.as_deref()
    }

    /// Gradient of `v` as a tensor, zeros when backward never reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.idx].value;
        match &self.nodes[v.idx].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, tracked: bool, op: Option<Box<dyn Backward>>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op: if tracked { op } else { None },
        });
        Var { tape: self.id, idx }
    }

    /// Record an operation result. The node is tracked when any input is.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.idx].tracked);
        self.push(value, tracked, Some(op))
    }

    /// Propagate d(loss)/d(node) to every tracked node recorded before `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.nodes[loss.idx].value.shape().to_vec();
        if !self.nodes[loss.idx].value.is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        if !self.nodes[loss.idx].tracked {
            return Ok(());
        }
        // intermediate gradients are per-call; leaf gradients accumulate
        for n in &mut self.nodes[..=loss.idx] {
            if n.op.is_some() {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.idx], &[1.0]);
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].tracked || self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = {
                let ctx = BackwardCtx {
                    nodes: &self.nodes,
                    out: i,
                };
                self.nodes[i].op.as_ref().unwrap().backward(&ctx, &grad)
            };
            self.nodes[i].grad = Some(grad);
            for (v, g) in contribs {
                debug_assert!(v.idx < i, "inputs precede outputs");
                if self.nodes[v.idx].tracked {
                    accumulate(&mut self.nodes[v.idx], &g);
                }
            }
        }
        Ok(())
    }

    fn binary_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(out, &[a, b], Box::new(AddOp { a, b, sign: 1.0 })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(out, &[a, b], Box::new(AddOp { a, b, sign: -1.0 })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(out, &[a, b], Box::new(MulOp { a, b })))
    }

    /// `a * s` for a constant scalar `s`.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * s);
        Ok(self.record(out, &[a], Box::new(ScaleOp { a, s })))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x + s);
        Ok(self.record(out, &[a], Box::new(ScaleOp { a, s: 1.0 })))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::exp);
        Ok(self.record(out, &[a], Box::new(ExpOp { a })))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.record(out, &[a], Box::new(SumOp { a, factor: 1.0 })))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.value(a).len() as f64;
        let out = Tensor::scalar(self.value(a).sum() / n);
        Ok(self.record(out, &[a], Box::new(SumOp { a, factor: 1.0 / n })))
    }

    /// Sum of squared differences `Σ (a - b)²`.
    pub fn sq_err_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }

    /// Multiply each channel of a `(C, H, W)` tensor by the matching entry of
    /// the length-`C` vector `v`. Differentiable in both arguments.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check(x)?;
        self.check(v)?;
        let (c, h, w) = self.value(x).chw()?;
        if self.value(v).len() != c {
            return Err(Error::ShapeMismatch {
                op: "mul_channel",
                left: self.value(x).shape().to_vec(),
                right: self.value(v).shape().to_vec(),
            });
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let vs = self.value(v).data();
        let mut out = Vec::with_capacity(xs.len());
        for (ch, chunk) in xs.chunks(plane).enumerate() {
            out.extend(chunk.iter().map(|&e| e * vs[ch]));
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        Ok(self.record(out, &[x, v], Box::new(MulChannelOp { x, v, plane })))
    }

    /// `x[c] * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        self.check(x)?;
        let (c, h, w) = self.value(x).chw()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: vec![c, h, w],
                right: vec![scale.len(), shift.len()],
            });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for (ch, chunk) in self.value(x).data().chunks(plane).enumerate() {
            out.extend(chunk.iter().map(|&e| e * scale[ch] + shift[ch]));
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(ChannelAffineOp {
                x,
                scale: scale.to_vec(),
                plane,
            }),
        ))
    }

    /// Identity on values, but blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone();
        Ok(self.constant(value))
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

struct AddOp {
    a: Var,
    b: Var,
    sign: f64,
}

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        if self.sign > 0.0 {
            "add"
        } else {
            "sub"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let mut out = Vec::with_capacity(2);
        if ctx.tracked(self.a) {
            out.push((self.a, grad.to_vec()));
        }
        if ctx.tracked(self.b) {
            out.push((self.b, grad.iter().map(|g| g * self.sign).collect()));
        }
        out
    }
}

struct MulOp {
    a: Var,
    b: Var,
}

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let mut out = Vec::with_capacity(2);
        let av = ctx.value(self.a).data();
        let bv = ctx.value(self.b).data();
        if ctx.tracked(self.a) {
            out.push((self.a, grad.iter().zip(bv).map(|(g, b)| g * b).collect()));
        }
        if ctx.tracked(self.b) {
            out.push((self.b, grad.iter().zip(av).map(|(g, a)| g * a).collect()));
        }
        out
    }
}

struct ScaleOp {
    a: Var,
    s: f64,
}

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        vec![(self.a, grad.iter().map(|g| g * self.s).collect())]
    }
}

struct ExpOp {
    a: Var,
}

impl Backward for ExpOp {
    fn name(&self) -> &'static str {
        "exp"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let y = ctx.output().data();
        vec![(self.a, grad.iter().zip(y).map(|(g, y)| g * y).collect())]
    }
}

struct SumOp {
    a: Var,
    factor: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let n = ctx.value(self.a).len();
        vec![(self.a, vec![grad[0] * self.factor; n])]
    }
}

struct MulChannelOp {
    x: Var,
    v: Var,
    plane: usize,
}

impl Backward for MulChannelOp {
    fn name(&self) -> &'static str {
        "mul_channel"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let mut out = Vec::with_capacity(2);
        let xs = ctx.value(self.x).data();
        let vs = ctx.value(self.v).data();
        if ctx.tracked(self.x) {
            let gx = grad
                .chunks(self.plane)
                .enumerate()
                .flat_map(|(c, g)| g.iter().map(move |g| g * vs[c]))
                .collect();
            out.push((self.x, gx));
        }
        if ctx.tracked(self.v) {
            let gv = grad
                .chunks(self.plane)
                .zip(xs.chunks(self.plane))
                .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                .collect();
            out.push((self.v, gv));
        }
        out
    }
}

struct ChannelAffineOp {
    x: Var,
    scale: Vec<f64>,
    plane: usize,
}

impl Backward for ChannelAffineOp {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        let g = grad
            .chunks(self.plane)
            .enumerate()
            .flat_map(|(c, g)| g.iter().map(move |g| g * self.scale[c]))
            .collect();
        vec![(self.x, g)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn add_values() {
        let mut t = Tape::new();
        let a = t.constant(vec_t(&[1.0, 2.0]));
        let b = t.constant(vec_t(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2]));
        let b = t.constant(Tensor::zeros(&[3]));
        let err = t.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err_string(t.mul(a, b)).contains("[2]"));
    }

    fn err_string(r: Result<Var>) -> String {
        r.unwrap_err().to_string()
    }

    #[test]
    fn mean_backward_seeds_one_third() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[2.0, 4.0, 6.0]));
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item(), 4.0);
        t.backward(m).unwrap();
        for g in t.grad(x).unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mul_product_rule() {
        let mut t = Tape::new();
        let a = t.param(vec_t(&[2.0]));
        let b = t.param(vec_t(&[5.0]));
        let c = t.mul(a, b).unwrap();
        t.backward(c).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(3x) + sum(x * x)  => df/dx = 3 + 2x
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.5, -0.5]));
        let a = t.scale(x, 3.0).unwrap();
        let b = t.mul(x, x).unwrap();
        let s = t.add(a, b).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let y = other.param(vec_t(&[1.0]));
        assert!(matches!(t.backward(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn backward_is_idempotent_after_reset() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[0.3, -1.2, 2.0]));
        let e = t.exp(x).unwrap();
        let m = t.mul(e, x).unwrap();
        let l = t.mean(m).unwrap();
        t.backward(l).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(first, t.grad(x).unwrap());
        // without reset, gradients accumulate
        t.backward(l).unwrap();
        for (a, b) in t.grad(x).unwrap().iter().zip(&first) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec_t(&[1.0]));
        let c = t.constant(vec_t(&[4.0]));
        let m = t.mul(x, c).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn mul_channel_grads() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = t.param(vec_t(&[10.0, -1.0]));
        let y = t.mul_channel(x, v).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 20.0, -3.0, -4.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[10.0, 10.0, -1.0, -1.0]);
        assert_eq!(t.grad(v).unwrap(), &[3.0, 7.0]);
    }
}
