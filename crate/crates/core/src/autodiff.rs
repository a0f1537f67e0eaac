//! Reverse-mode differentiation over an append-only tape.
//!
//! Every op pushes one node holding its output value and whatever it needs
//! for the backward rule. [`Tape::backward`] walks the nodes in exact reverse
//! push order and accumulates parameter gradients into a [`ParamStore`].

use std::collections::HashMap;
use std::rc::Rc;

use crate::conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_cols, direct_backward, direct_forward, is_small, unfold, ConvGeometry,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Rc<Vec<T>>>,
    },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    /// `a` broadcast against `b`: same shape, `N×1×H×W` vs `N×C×H×W`, or scalar.
    BroadcastMul(Var, Var),
    Concat(Var, Var),
    ConcatRows(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    Log(Var),
    Pow {
        input: Var,
        exponent: f64,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Offset(Var),
    /// Scalar function with its gradient w.r.t. the input computed in forward.
    ScalarFn {
        input: Var,
        grad: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    /// Conv columns keyed by (input, kernel size, stride, padding); sibling
    /// convs over the same input share them.
    unfolded: HashMap<(Var, usize, usize, usize), Rc<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar w.r.t. every node that required them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            unfolded: HashMap::new(),
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            unfolded: HashMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Every node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshots a parameter's current value onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let dims = x.dims4()?;
        let (c_out, kc_in, kh, kw) = w.dims4()?;
        if kh != kw {
            return Err(Error::shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        if b.len() != c_out {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries for {c_out} output channels",
                b.len()
            )));
        }
        let geom = ConvGeometry::new(dims, c_out, kc_in, kh, stride, padding)?;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let needs_grad = self.grad_enabled && (needs(input) || needs(kernel) || needs(bias));
        let keep_cols = needs_grad && needs(kernel);
        let key = (input, kh, stride, padding);
        let cached = self.unfolded.get(&key).cloned();
        let (out, cols) = match cached {
            _ if is_small(&geom) => (direct_forward(&geom, x.data(), w.data(), b.data()), None),
            Some(cols) => (conv2d_forward_cols(&geom, &cols, w.data(), b.data()), Some(cols)),
            None if keep_cols || geom.batch == 1 => {
                let cols = Rc::new(unfold(&geom, x.data()));
                self.unfolded.insert(key, cols.clone());
                (conv2d_forward_cols(&geom, &cols, w.data(), b.data()), Some(cols))
            }
            None => (conv2d_forward(&geom, x.data(), w.data(), b.data(), false).0, None),
        };
        let cols = if keep_cols { cols } else { None };
        let value = Tensor::new(vec![geom.batch, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            needs_grad,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Multiplies `b` by `a`, broadcasting `a` when it is a scalar or a
    /// single-channel `N×1×H×W` map against an `N×C×H×W` tensor.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out: Vec<T> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect()
        } else if ta.len() == 1 {
            let s = ta.data()[0];
            tb.data().iter().map(|&y| s * y).collect()
        } else {
            let (na, ca, ha, wa) = ta.dims4()?;
            let (nb, cb, hb, wb) = tb.dims4()?;
            if ca != 1 || na != nb || ha != hb || wa != wb {
                return Err(Error::shape(format!(
                    "broadcast_mul: cannot broadcast {:?} against {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let plane = hb * wb;
            let mut out = Vec::with_capacity(tb.len());
            for n in 0..nb {
                let m = &ta.data()[n * plane..(n + 1) * plane];
                for c in 0..cb {
                    let src = &tb.data()[(n * cb + c) * plane..(n * cb + c + 1) * plane];
                    out.extend(src.iter().zip(m).map(|(&y, &s)| s * y));
                }
            }
            out
        };
        let value = Tensor::new(tb.shape().to_vec(), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::BroadcastMul(a, b), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(format!(
                "concat_channels: {:?} and {:?} disagree on N, H or W",
                ta.shape(),
                tb.shape()
            )));
        }
        let (sa, sb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for n in 0..na {
            data.extend_from_slice(&ta.data()[n * sa..(n + 1) * sa]);
            data.extend_from_slice(&tb.data()[n * sb..(n + 1) * sb]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat(a, b), ng))
    }

    /// Joins two tensors along their first axis; the other axes must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().is_empty() || ta.shape()[1..] != tb.shape()[1..] || tb.shape().is_empty() {
            return Err(Error::shape(format!(
                "concat_rows: {:?} and {:?} disagree past the first axis",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::new(shape, data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatRows(a, b), ng))
    }

    /// Channels `start..start + len` of an `N×C×H×W` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_channels: {start}..{} of {c} channels", start + len)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&t.data()[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let value = Tensor::new(vec![n, len, h, w], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceChannels { input: x, start }, ng))
    }

    /// Maximum over channels, `N×C×H×W → N×1×H×W`. Ties resolve to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut best = t.data()[base + p];
                let mut idx = 0u32;
                for ch in 1..c {
                    let v = t.data()[base + ch * plane + p];
                    if v > best {
                        best = v;
                        idx = ch as u32;
                    }
                }
                out.push(best);
                argmax.push(idx);
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        let ng = self.needs(x);
        if !(ng && self.grad_enabled) {
            argmax.clear();
        }
        Ok(self.push(value, Op::ChannelMax { input: x, argmax }, ng))
    }

    /// Mean over channels, `N×C×H×W → N×1×H×W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(c as f64);
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let src = &t.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::ChannelMean(x), ng))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in t.data().chunks_exact(h * w) {
            for i in 0..ho {
                let row = &plane[(i / factor) * w..(i / factor + 1) * w];
                for j in 0..wo {
                    out.push(row[j / factor]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Upsample { input: x, factor }, ng))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let ng = self.needs(x);
        self.push(value, Op::Log(x), ng)
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        let e = T::from_f64(exponent);
        let value = self.value(x).map(|v| v.powf(e));
        let ng = self.needs(x);
        self.push(value, Op::Pow { input: x, exponent }, ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the input lies outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp: lo {lo} > hi {hi}")));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let value = self.value(x).map(|v| v.max(l).min(h));
        let ng = self.needs(x);
        Ok(self.push(value, Op::Clamp { input: x, lo, hi }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        let ng = self.needs(x);
        self.push(value, Op::Scale { input: x, factor }, ng)
    }

    pub fn offset(&mut self, x: Var, delta: f64) -> Var {
        let d = T::from_f64(delta);
        let value = self.value(x).map(|v| v + d);
        let ng = self.needs(x);
        self.push(value, Op::Offset(x), ng)
    }

    /// Records a scalar `value` whose gradient w.r.t. `input` is `grad`.
    /// Used by fused loss kernels that compute both in one pass.
    pub fn scalar_fn(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape("scalar_fn: gradient length differs from input"));
        }
        let ng = self.needs(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }, ng))
    }

    /// Back-propagates from a scalar, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let w = self.value(*kernel).data();
                // Each slot is borrowed in turn; the kernels accumulate into it.
                if let Some(gb) = slot(nodes, grads, *bias) {
                    conv2d_backward(geom, g, w, &[], None, None, Some(gb));
                }
                if is_small(geom) {
                    let x = self.value(*input).data();
                    if let Some(gk) = slot(nodes, grads, *kernel) {
                        direct_backward(geom, g, w, x, None, Some(gk));
                    }
                    if let Some(gi) = slot(nodes, grads, *input) {
                        direct_backward(geom, g, w, x, Some(gi), None);
                    }
                    return;
                }
                if let Some(gk) = slot(nodes, grads, *kernel) {
                    let cols = cols.as_deref().expect("conv columns retained");
                    conv2d_backward(geom, g, w, cols, None, Some(gk), None);
                }
                if let Some(gi) = slot(nodes, grads, *input) {
                    conv2d_backward(geom, g, w, &[], Some(gi), None, None);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &y), &go) in gx.iter_mut().zip(node.value.data()).zip(g) {
                        *d += go * y * (T::one() - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d += go;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        for (d, &go) in gv.iter_mut().zip(g) {
                            *d += go;
                        }
                    }
                }
            }
            Op::BroadcastMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                if ta.shape() == tb.shape() {
                    if let Some(ga) = slot(nodes, grads, *a) {
                        for ((d, &y), &go) in ga.iter_mut().zip(tb.data()).zip(g) {
                            *d += go * y;
                        }
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for ((d, &x), &go) in gb.iter_mut().zip(ta.data()).zip(g) {
                            *d += go * x;
                        }
                    }
                } else if ta.len() == 1 {
                    let s = ta.data()[0];
                    if let Some(ga) = slot(nodes, grads, *a) {
                        ga[0] += tb.data().iter().zip(g).map(|(&y, &go)| go * y).sum::<T>();
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for (d, &go) in gb.iter_mut().zip(g) {
                            *d += go * s;
                        }
                    }
                } else {
                    let (n, c, h, w) = tb.dims4().expect("checked in forward");
                    let plane = h * w;
                    if let Some(ga) = slot(nodes, grads, *a) {
                        for b_ in 0..n {
                            for ch in 0..c {
                                let off = (b_ * c + ch) * plane;
                                let dst = &mut ga[b_ * plane..(b_ + 1) * plane];
                                for p in 0..plane {
                                    dst[p] += g[off + p] * tb.data()[off + p];
                                }
                            }
                        }
                    }
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for b_ in 0..n {
                            let m = &ta.data()[b_ * plane..(b_ + 1) * plane];
                            for ch in 0..c {
                                let off = (b_ * c + ch) * plane;
                                for p in 0..plane {
                                    gb[off + p] += g[off + p] * m[p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("4-d");
                let cb = self.value(*b).dims4().expect("4-d").1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for b_ in 0..n {
                        let src = &g[b_ * (sa + sb)..b_ * (sa + sb) + sa];
                        for (d, &s) in ga[b_ * sa..(b_ + 1) * sa].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for b_ in 0..n {
                        let src = &g[b_ * (sa + sb) + sa..(b_ + 1) * (sa + sb)];
                        for (d, &s) in gb[b_ * sb..(b_ + 1) * sb].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let la = self.value(*a).len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(&g[..la]) {
                        *d += s;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(&g[la..]) {
                        *d += s;
                    }
                }
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("4-d");
                let len = node.value.dims4().expect("4-d").1;
                let plane = h * w;
                if let Some(gx) = slot(nodes, grads, *input) {
                    for b_ in 0..n {
                        let dst = &mut gx[(b_ * c + start) * plane..(b_ * c + start + len) * plane];
                        for (d, &s) in dst.iter_mut().zip(&g[b_ * len * plane..(b_ + 1) * len * plane]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ChannelMax { input, argmax } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("4-d");
                let plane = h * w;
                if let Some(gx) = slot(nodes, grads, *input) {
                    for b_ in 0..n {
                        for p in 0..plane {
                            let ch = argmax[b_ * plane + p] as usize;
                            gx[(b_ * c + ch) * plane + p] += g[b_ * plane + p];
                        }
                    }
                }
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("4-d");
                let plane = h * w;
                let inv = T::one() / T::from_f64(c as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for b_ in 0..n {
                        for ch in 0..c {
                            let off = (b_ * c + ch) * plane;
                            for p in 0..plane {
                                gx[off + p] += g[b_ * plane + p] * inv;
                            }
                        }
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let (_, _, h, w) = self.value(*input).dims4().expect("4-d");
                let f = *factor;
                let wo = w * f;
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (pi, plane) in g.chunks_exact(h * f * wo).enumerate() {
                        let dst = &mut gx[pi * h * w..(pi + 1) * h * w];
                        for i in 0..h * f {
                            for j in 0..wo {
                                dst[(i / f) * w + j / f] += plane[i * wo + j];
                            }
                        }
                    }
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        *d += go / v;
                    }
                }
            }
            Op::Pow { input, exponent } => {
                let xv = self.value(*input).data();
                let e = T::from_f64(*exponent);
                let em1 = T::from_f64(exponent - 1.0);
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        *d += go * e * v.powf(em1);
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                let xv = self.value(*input).data();
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                if let Some(gx) = slot(nodes, grads, *input) {
                    for ((d, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        if v >= l && v <= h {
                            *d += go;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Scale { input, factor } => {
                let f = T::from_f64(*factor);
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (d, &go) in gx.iter_mut().zip(g) {
                        *d += go * f;
                    }
                }
            }
            Op::Offset(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, &go) in gx.iter_mut().zip(g) {
                        *d += go;
                    }
                }
            }
            Op::ScalarFn { input, grad } => {
                if let Some(gx) = slot(nodes, grads, *input) {
                    for (d, &lg) in gx.iter_mut().zip(grad) {
                        *d += g[0] * lg;
                    }
                }
            }
        }
    }
}
