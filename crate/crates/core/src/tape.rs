//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order. [`Tape::backward`]
//! walks the record once in reverse, so every node is visited exactly once and
//! leaf gradients accumulate additively. Binary elementwise ops broadcast only
//! along leading dimensions: the smaller operand's shape must be a suffix of
//! the larger one's, or a single element.

use std::cell::{Ref, RefCell};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the upstream gradient, the node's output, its
/// inputs, and which inputs need a gradient.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product: one optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    /// Smaller operand repeats every `inner` elements.
    Suffix(usize),
}

fn broadcast_kind(big: &[usize], small: &[usize]) -> Option<Bcast> {
    if big == small {
        Some(Bcast::Same)
    } else if numel(small) == 1 {
        Some(Bcast::Scalar)
    } else if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Some(Bcast::Suffix(numel(small)))
    } else {
        None
    }
}

fn reduce_to<T>(g: &[T], kind: Bcast, n_small: usize) -> Vec<T>
where
    T: Scalar,
{
    match kind {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().copied().sum()],
        Bcast::Suffix(inner) => {
            let mut out = vec![T::zero(); n_small];
            for chunk in g.chunks(inner) {
                out.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
            }
            out
        }
    }
}

#[inline]
fn small_index(kind: Bcast, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Suffix(inner) => i % inner,
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = backward.is_some() && parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t.detached(),
            parents: vec![],
            requires_grad: t.requires_grad(),
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t.detached(),
            parents: vec![],
            requires_grad: false,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Registers a user-defined primitive whose forward value was computed by
    /// the caller.
    pub fn custom(&self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Some(backward))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: root.value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pg), true) = (pg, nodes[p].requires_grad) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ----- elementwise binary -------------------------------------------------

    fn binary(&self, op: BinOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (value, a_big, kind) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (big, small, a_big) = if ta.numel() >= tb.numel() {
                (ta, tb, true)
            } else {
                (tb, ta, false)
            };
            let kind = broadcast_kind(big.shape(), small.shape()).ok_or_else(|| Error::Shape {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
            let (bd, sd) = (big.data(), small.data());
            let f = |x: T, y: T| match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            };
            let data: Vec<T> = (0..bd.len())
                .map(|i| {
                    let s = sd[small_index(kind, i)];
                    if a_big {
                        f(bd[i], s)
                    } else {
                        f(s, bd[i])
                    }
                })
                .collect();
            (Tensor::new(big.shape().to_vec(), data)?, a_big, kind)
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            let n = ctx.grad.len();
            let at = |t: &Tensor<T>, big: bool, i: usize| {
                if big {
                    t.data()[i]
                } else {
                    t.data()[small_index(kind, i)]
                }
            };
            let (ga_full, gb_full): (Option<Vec<T>>, Option<Vec<T>>) = {
                let ga = ctx.needs[0].then(|| {
                    (0..n)
                        .map(|i| {
                            let g = ctx.grad[i];
                            match op {
                                BinOp::Add | BinOp::Sub => g,
                                BinOp::Mul => g * at(tb, !a_big, i),
                                BinOp::Div => g / at(tb, !a_big, i),
                            }
                        })
                        .collect()
                });
                let gb = ctx.needs[1].then(|| {
                    (0..n)
                        .map(|i| {
                            let g = ctx.grad[i];
                            match op {
                                BinOp::Add => g,
                                BinOp::Sub => -g,
                                BinOp::Mul => g * at(ta, a_big, i),
                                BinOp::Div => {
                                    let y = at(tb, !a_big, i);
                                    -g * at(ta, a_big, i) / (y * y)
                                }
                            }
                        })
                        .collect()
                });
                (ga, gb)
            };
            let ga = ga_full.map(|g| {
                if a_big {
                    g
                } else {
                    reduce_to(&g, kind, ta.numel())
                }
            });
            let gb = gb_full.map(|g| {
                if a_big {
                    reduce_to(&g, kind, tb.numel())
                } else {
                    g
                }
            });
            vec![ga, gb]
        });
        Ok(self.push(value, vec![a.0, b.0], Some(bw)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b, "div")
    }

    // ----- elementwise unary --------------------------------------------------

    /// Elementwise map with derivative `df(x, y)` expressed in input and output.
    fn unary(
        &self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
                .expect("unary preserves shape")
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.output.data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&g, (&xi, &yi))| g * df(xi, yi))
                    .collect(),
            )]
        });
        self.push(value, vec![a.0], Some(bw))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x + c, |_, _| T::one())
    }

    /// `c - a`.
    pub fn rsub_scalar(&self, c: T, a: Var) -> Var {
        self.unary(a, move |x| c - x, |_, _| -T::one())
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn ln_1p(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln_1p(), |x, _| T::one() / (T::one() + x))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| T::half() / y)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| T::two() * x)
    }

    pub fn powi(&self, a: Var, n: i32) -> Var {
        self.unary(
            a,
            move |x| x.powi(n),
            move |x, _| T::lit(n as f64) * x.powi(n - 1),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `ln(1 + e^x)`, stable for large `|x|`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Lower clamp only.
    pub fn clamp_min(&self, a: Var, lo: T) -> Var {
        self.clamp(a, lo, T::infinity())
    }

    // ----- reductions ---------------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let (value, n) = {
            let t = self.value(a);
            (Tensor::scalar(t.data().iter().copied().sum()), t.numel())
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]);
        self.push(value, vec![a.0], Some(bw))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n.max(1)))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let (value, inner) = {
            let t = self.value(a);
            let shape = t.shape();
            let inner = *shape.last().ok_or_else(|| invalid("sum_last on a scalar"))?;
            let data = t
                .data()
                .chunks(inner.max(1))
                .map(|c| c.iter().copied().sum())
                .collect();
            (Tensor::new(shape[..shape.len() - 1].to_vec(), data)?, inner)
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let mut g = Vec::with_capacity(ctx.grad.len() * inner);
            for &gi in ctx.grad {
                g.extend(std::iter::repeat_n(gi, inner));
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    pub fn mean_last(&self, a: Var) -> Result<Var> {
        let inner = *self
            .shape(a)
            .last()
            .ok_or_else(|| invalid("mean_last on a scalar"))?;
        let s = self.sum_last(a)?;
        Ok(self.scale(s, T::one() / T::from_usize_lossy(inner.max(1))))
    }

    // ----- shape --------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let bw: BackwardFn<T> = Box::new(|ctx| vec![Some(ctx.grad.to_vec())]);
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let t = self.value(a);
            let s = t.shape();
            if s.len() < 2 {
                return Err(invalid(format!("transpose needs rank >= 2, got {s:?}")));
            }
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let mut shape = s.to_vec();
            let k = shape.len();
            shape.swap(k - 2, k - 1);
            (Tensor::new(shape, transpose_blocks(t.data(), r, c))?, r, c)
        };
        let bw: BackwardFn<T> =
            Box::new(move |ctx| vec![Some(transpose_blocks(ctx.grad, cols, rows))]);
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of nothing"))?;
        let base = self.shape(*first);
        if axis >= base.len() {
            return Err(invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (&p, &w) in parts.iter().zip(&widths) {
                    let d = nodes[p.0].value.data();
                    data.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let mut out: Vec<Vec<T>> = widths
                .iter()
                .map(|&w| Vec::with_capacity(outer * w * inner))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &w) in widths.iter().enumerate() {
                    out[k].extend_from_slice(&ctx.grad[pos..pos + w * inner]);
                    pos += w * inner;
                }
            }
            out.into_iter().map(Some).collect()
        });
        Ok(self.push(value, parts.iter().map(|v| v.0).collect(), Some(bw)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(invalid(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let w = end - start;
        let value = {
            let t = self.value(a);
            let d = t.data();
            let mut data = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&d[base..base + w * inner]);
            }
            let mut s = shape.clone();
            s[axis] = w;
            Tensor::new(s, data)?
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let mut g = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                g[base..base + w * inner]
                    .copy_from_slice(&ctx.grad[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    /// `[B, H, W, C] -> [B, H/f, W/f, f*f*C]`, folding each `f x f` block into channels.
    pub fn space_to_depth(&self, a: Var, f: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 || f == 0 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
            return Err(invalid(format!("space_to_depth({f}) on {s:?}")));
        }
        let map = s2d_index(&s, f);
        let out_shape = vec![s[0], s[1] / f, s[2] / f, s[3] * f * f];
        let value = {
            let t = self.value(a);
            let d = t.data();
            Tensor::new(out_shape, map.iter().map(|&i| d[i]).collect())?
        };
        let n = numel(&s);
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let mut g = vec![T::zero(); n];
            for (o, &i) in map.iter().enumerate() {
                g[i] = ctx.grad[o];
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    /// Nearest-neighbour upsampling of `[B, H, W, C]` by `f`.
    pub fn upsample(&self, a: Var, f: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 || f == 0 {
            return Err(invalid(format!("upsample({f}) on {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut map = Vec::with_capacity(b * h * f * w * f * c);
        for bi in 0..b {
            for y in 0..h * f {
                for x in 0..w * f {
                    let base = ((bi * h + y / f) * w + x / f) * c;
                    map.extend(base..base + c);
                }
            }
        }
        let value = {
            let t = self.value(a);
            let d = t.data();
            Tensor::new(vec![b, h * f, w * f, c], map.iter().map(|&i| d[i]).collect())?
        };
        let n = numel(&s);
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let mut g = vec![T::zero(); n];
            for (o, &i) in map.iter().enumerate() {
                g[i] = g[i] + ctx.grad[o];
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    /// Mean over non-overlapping `f x f` windows of `[B, H, W, C]`.
    pub fn avg_pool(&self, a: Var, f: usize) -> Result<Var> {
        let folded = self.space_to_depth(a, f)?;
        let s = self.shape(folded);
        let c = s[3] / (f * f);
        // [B, h, w, f*f*C] laid out as (dy, dx, c): average the f*f groups.
        let r = self.reshape(folded, &[s[0], s[1], s[2], f * f, c])?;
        let t = self.transpose(r)?;
        let m = self.mean_last(t)?;
        Ok(m)
    }

    // ----- linear algebra -----------------------------------------------------

    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if !shared && lead_a != &sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = lead_a.iter().product();
        let value = {
            let nodes = self.nodes.borrow();
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let mut out = vec![T::zero(); batch * m * n];
            if shared {
                gemm(da, db, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm(
                        &da[bi * m * k..(bi + 1) * m * k],
                        &db[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            let mut shape = lead_a.to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, out)?
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let (da, db) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let g = ctx.grad;
            let ga = ctx.needs[0].then(|| {
                let mut ga = vec![T::zero(); da.len()];
                for bi in 0..batch {
                    let bslice = if shared {
                        db
                    } else {
                        &db[bi * k * n..(bi + 1) * k * n]
                    };
                    // dA = dC * B^T
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            let brow = &bslice[p * n..(p + 1) * n];
                            let grow = &gs[i * n..(i + 1) * n];
                            for j in 0..n {
                                acc = acc + grow[j] * brow[j];
                            }
                            out[i * k + p] = acc;
                        }
                    }
                }
                ga
            });
            let gb = ctx.needs[1].then(|| {
                let mut gb = vec![T::zero(); db.len()];
                for bi in 0..batch {
                    let asl = &da[bi * m * k..(bi + 1) * m * k];
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let out = if shared {
                        &mut gb[..]
                    } else {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    };
                    // dB += A^T * dC
                    for i in 0..m {
                        let grow = &gs[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = asl[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            let orow = &mut out[p * n..(p + 1) * n];
                            for j in 0..n {
                                orow[j] = orow[j] + av * grow[j];
                            }
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        });
        Ok(self.push(value, vec![a.0, b.0], Some(bw)))
    }

    // ----- normalization ------------------------------------------------------

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let inner = self.last_dim(a, "softmax")?;
        let value = {
            let t = self.value(a);
            let mut data = t.data().to_vec();
            data.chunks_mut(inner).for_each(softmax_in_place);
            Tensor::new(t.shape().to_vec(), data)?
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let y = ctx.output.data();
            let mut g = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(inner).zip(ctx.grad.chunks(inner)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                g.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let inner = self.last_dim(a, "log_softmax")?;
        let value = {
            let t = self.value(a);
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(inner) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                row.iter_mut().for_each(|v| *v = *v - lse);
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let y = ctx.output.data();
            let mut g = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(inner).zip(ctx.grad.chunks(inner)) {
                let s: T = gr.iter().copied().sum();
                g.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * s));
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    /// Per-row standardization over the last axis (no affine parameters).
    pub fn layer_norm(&self, a: Var, eps: T) -> Result<Var> {
        let inner = self.last_dim(a, "layer_norm")?;
        let (value, inv_std) = {
            let t = self.value(a);
            let mut data = t.data().to_vec();
            let mut inv_std = Vec::with_capacity(data.len() / inner);
            let nf = T::from_usize_lossy(inner);
            for row in data.chunks_mut(inner) {
                let mu = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                let is = T::one() / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mu) * is);
                inv_std.push(is);
            }
            (Tensor::new(t.shape().to_vec(), data)?, inv_std)
        };
        let bw: BackwardFn<T> = Box::new(move |ctx| {
            let y = ctx.output.data();
            let nf = T::from_usize_lossy(inner);
            let mut g = Vec::with_capacity(y.len());
            for ((yr, gr), &is) in y.chunks(inner).zip(ctx.grad.chunks(inner)).zip(&inv_std) {
                let mg = gr.iter().copied().sum::<T>() / nf;
                let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                g.extend(
                    yr.iter()
                        .zip(gr)
                        .map(|(&yi, &gi)| is * (gi - mg - yi * mgy)),
                );
            }
            vec![Some(g)]
        });
        Ok(self.push(value, vec![a.0], Some(bw)))
    }

    fn last_dim(&self, a: Var, op: &'static str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("{op} needs a non-empty last axis"))),
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

/// `out[m, n] = a[m, k] * b[k, n]`.
fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn transpose_blocks<T: Scalar>(d: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for (bidx, block) in d.chunks(r * c).enumerate() {
        let o = &mut out[bidx * r * c..(bidx + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                o[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}

/// Source index of every output element of `space_to_depth`.
fn s2d_index(s: &[usize], f: usize) -> Vec<usize> {
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / f, w / f);
    let mut map = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..ho {
            for x in 0..wo {
                for dy in 0..f {
                    for dx in 0..f {
                        let base = ((bi * h + y * f + dy) * w + x * f + dx) * c;
                        map.extend(base..base + c);
                    }
                }
            }
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = numel(shape);
        Tensor::param(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Builds `sum(op(inputs) * weights)` so every output element is probed.
    fn check_op(
        shapes: &[&[usize]],
        range: (f64, f64),
        op: impl Fn(&Tape<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _trial in 0..20 {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| rand_tensor(&mut rng, s, range.0, range.1))
                .collect();
            let probe: Vec<f64> = {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
                let out = op(&tape, &vars);
                let n = tape.value(out).numel();
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };
            let eval = |ins: &[Tensor<f64>]| -> f64 {
                let tape = Tape::new();
                let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
                let out = op(&tape, &vars);
                let v = tape.value(out);
                v.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
            let out = op(&tape, &vars);
            let shape = tape.shape(out);
            let w = tape.constant(Tensor::new(shape, probe.clone()).unwrap());
            let prod = tape.mul(out, w).unwrap();
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();
            for (k, v) in vars.iter().enumerate() {
                let analytic = grads.get(*v).unwrap().to_vec();
                let numeric = central_difference(
                    |x| {
                        let mut ins = inputs.clone();
                        ins[k].data_mut().copy_from_slice(x);
                        eval(&ins)
                    },
                    inputs[k].data(),
                    1e-4,
                );
                let err = max_rel_error(&analytic, &numeric);
                assert!(err < 1e-4, "input {k}: rel err {err}");
            }
        }
    }

    #[test]
    fn grad_add_sub_mul_div_with_broadcast() {
        check_op(&[&[2, 3, 4], &[3, 4]], (0.5, 2.0), |t, v| t.add(v[0], v[1]).unwrap());
        check_op(&[&[2, 3, 4], &[4]], (0.5, 2.0), |t, v| t.sub(v[1], v[0]).unwrap());
        check_op(&[&[3, 4], &[3, 4]], (0.5, 2.0), |t, v| t.mul(v[0], v[1]).unwrap());
        check_op(&[&[3, 4], &[]], (0.5, 2.0), |t, v| t.mul(v[0], v[1]).unwrap());
        check_op(&[&[5], &[2, 5]], (0.5, 2.0), |t, v| t.div(v[0], v[1]).unwrap());
    }

    #[test]
    fn grad_unary() {
        check_op(&[&[3, 5]], (-2.0, 2.0), |t, v| t.sigmoid(v[0]));
        check_op(&[&[3, 5]], (-2.0, 2.0), |t, v| t.tanh(v[0]));
        check_op(&[&[3, 5]], (-2.0, 2.0), |t, v| t.exp(v[0]));
        check_op(&[&[3, 5]], (0.3, 2.0), |t, v| t.ln(v[0]));
        check_op(&[&[3, 5]], (0.3, 2.0), |t, v| t.ln_1p(v[0]));
        check_op(&[&[3, 5]], (0.3, 2.0), |t, v| t.sqrt(v[0]));
        check_op(&[&[3, 5]], (-2.0, 2.0), |t, v| t.powi(v[0], 3));
        check_op(&[&[3, 5]], (-3.0, 3.0), |t, v| t.softplus(v[0]));
        check_op(&[&[3, 5]], (-2.0, 2.0), |t, v| t.scale(v[0], -1.7));
    }

    #[test]
    fn grad_piecewise_away_from_kinks() {
        // relu and clamp are checked on inputs bounded away from their kinks.
        check_op(&[&[4, 4]], (0.1, 2.0), |t, v| t.relu(v[0]));
        check_op(&[&[4, 4]], (-2.0, -0.1), |t, v| t.relu(v[0]));
        check_op(&[&[4, 4]], (0.2, 0.8), |t, v| t.clamp(v[0], 0.0, 1.0));
        check_op(&[&[4, 4]], (1.1, 2.0), |t, v| t.clamp(v[0], 0.0, 1.0));
    }

    #[test]
    fn grad_reductions_and_shapes() {
        check_op(&[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.sum(v[0]));
        check_op(&[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.mean(v[0]));
        check_op(&[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.mean_last(v[0]).unwrap());
        check_op(&[&[2, 3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0]).unwrap());
        check_op(&[&[2, 3, 4], &[2, 1, 4]], (-1.0, 1.0), |t, v| {
            t.concat(&[v[0], v[1]], 1).unwrap()
        });
        check_op(&[&[2, 5, 3]], (-1.0, 1.0), |t, v| t.slice(v[0], 1, 1, 4).unwrap());
        check_op(&[&[2, 4, 4, 3]], (-1.0, 1.0), |t, v| t.space_to_depth(v[0], 2).unwrap());
        check_op(&[&[1, 2, 2, 3]], (-1.0, 1.0), |t, v| t.upsample(v[0], 2).unwrap());
        check_op(&[&[2, 4, 4, 2]], (-1.0, 1.0), |t, v| t.avg_pool(v[0], 2).unwrap());
    }

    #[test]
    fn grad_matmul_and_normalizers() {
        check_op(&[&[3, 4], &[4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]).unwrap());
        check_op(&[&[2, 3, 4], &[4, 5]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1]).unwrap());
        check_op(&[&[2, 3, 4], &[2, 4, 2]], (-1.0, 1.0), |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
        check_op(&[&[3, 6]], (-2.0, 2.0), |t, v| t.softmax(v[0]).unwrap());
        check_op(&[&[3, 6]], (-2.0, 2.0), |t, v| t.log_softmax(v[0]).unwrap());
        check_op(&[&[3, 6]], (-2.0, 2.0), |t, v| t.layer_norm(v[0], 1e-5).unwrap());
    }

    #[test]
    fn softmax_of_uniform_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![7], 3.25));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data().iter() {
            let v: f64 = v;
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&mut rng, &[5, 16], -3.0, 7.0);
        let tape = Tape::new();
        let x = tape.leaf(&t);
        let y = tape.layer_norm(x, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let m: f64 = row.iter().sum::<f64>() / 16.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 4]));
        let e = tape.add(a, b).unwrap_err().to_string();
        assert!(e.contains("[2, 3]") && e.contains("[2, 4]"), "{e}");
        let e = tape.matmul(a, a).unwrap_err().to_string();
        assert!(e.contains("matmul"), "{e}");
    }

    #[test]
    fn backward_visits_each_node_once_and_accumulates_leaves() {
        use std::cell::Cell;
        use std::rc::Rc;
        let calls = Rc::new(Cell::new(0usize));
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::param(vec![], vec![3.0]).unwrap());
        let c = calls.clone();
        let v = tape.value(x).item();
        let counted = tape.custom(
            &[x],
            Tensor::scalar(v * 2.0),
            Box::new(move |ctx| {
                c.set(c.get() + 1);
                vec![Some(vec![ctx.grad[0] * 2.0])]
            }),
        );
        // x used twice: through the custom node and directly.
        let y = tape.mul(counted, x).unwrap(); // 2x^2
        let z = tape.add(y, x).unwrap(); // 2x^2 + x
        let g = tape.backward(z).unwrap();
        assert_eq!(calls.get(), 1);
        assert_eq!(g.get(x).unwrap(), &[4.0 * 3.0 + 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(!tape.requires_grad(s));
    }

    #[test]
    fn three_layer_mlp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params: Vec<Tensor<f64>> = [[4usize, 6], [6, 5], [5, 3]]
            .iter()
            .map(|s| rand_tensor(&mut rng, s, -0.8, 0.8))
            .collect();
        let x = rand_tensor(&mut rng, &[7, 4], -1.0, 1.0).detached();
        let f = |ps: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
            let tape = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
            let mut h = tape.constant(x.clone());
            for (i, &w) in vs.iter().enumerate() {
                h = tape.matmul(h, w).unwrap();
                if i < 2 {
                    h = tape.tanh(h);
                }
            }
            let sm = tape.log_softmax(h).unwrap();
            let loss = tape.neg(tape.mean(sm));
            let g = tape.backward(loss).unwrap();
            (
                tape.item(loss),
                vs.iter().map(|v| g.get(*v).unwrap().to_vec()).collect(),
            )
        };
        let (_, analytic) = f(&params);
        for k in 0..3 {
            let numeric = central_difference(
                |d| {
                    let mut ps = params.clone();
                    ps[k].data_mut().copy_from_slice(d);
                    f(&ps).0
                },
                params[k].data(),
                1e-4,
            );
            assert!(max_rel_error(&analytic[k], &numeric) < 1e-4);
        }
    }
}
