//! Reverse-mode differentiation over tensors.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order. [`Tape::backward`] replays the record in reverse, applying each
//! operation's adjoint rule, and returns the gradient of a scalar loss with
//! respect to every parameter leaf.
//!
//! Leaves come in two flavours: [`Tape::param`] leaves receive gradients,
//! [`Tape::constant`] leaves (and anything computed only from constants) are
//! detached and never accumulate one.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{clamp_non_negative, Element, Strides, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Concat(Var, Var),
    SliceChannels {
        src: Var,
        start: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    MuLaw {
        x: Var,
        mu: f64,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
    },
    Mean(Var),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward evaluation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A detached leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A detached copy of `v`: same value, no gradient flows back through it.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Rc::new(value), op, requires_grad)
    }

    fn push_shared(&self, value: Rc<Tensor<T>>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn binary(&self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            return Tensor::new(x.shape(), data);
        }
        if y.is_scalar() {
            let q = y.data()[0];
            return Ok(x.map(|p| f(p, q)));
        }
        if x.is_scalar() {
            let p = x.data()[0];
            return Ok(y.map(|q| f(p, q)));
        }
        Err(Error::ShapeMismatch {
            op: op_name,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        })
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), self.any_grad(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), self.any_grad(&[a, b])))
    }

    pub fn scalar_mul(&self, a: Var, s: f64) -> Var {
        let k = T::from_f64_lossy(s);
        let out = self.value(a).map(|p| p * k);
        self.push(out, Op::ScalarMul(a, s), self.any_grad(&[a]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let k = T::from_f64_lossy(s);
        let out = self.value(a).map(|p| p + k);
        self.push(out, Op::AddScalar(a), self.any_grad(&[a]))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&self, a: Var) -> Var {
        let neg = self.scalar_mul(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Concatenate along the channel axis; `a` occupies the leading block.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_channels(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b), self.any_grad(&[a, b])))
    }

    pub fn slice_channels(&self, src: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(src).slice_channels(start, count)?;
        Ok(self.push(out, Op::SliceChannels { src, start }, self.any_grad(&[src])))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), self.any_grad(&[x]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), self.any_grad(&[x]))
    }

    /// Self-gating `x * sigmoid(x)`.
    pub fn swish(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Swish(x), self.any_grad(&[x]))
    }

    /// `ln(1 + mu x) / ln(1 + mu)`, with negative inputs clamped to zero.
    pub fn mu_law(&self, x: Var, mu: f64) -> Var {
        let m = T::from_f64_lossy(mu);
        let denom = m.ln_1p();
        let out = self.value(x).map(|v| (m * clamp_non_negative(v)).ln_1p() / denom);
        self.push(out, Op::MuLaw { x, mu }, self.any_grad(&[x]))
    }

    /// Same-padded, stride-1 cross-correlation with per-channel bias.
    ///
    /// `x` is `(B, Cin, H, W)`, `kernel` is `(Cout, Cin, k, k)` with odd `k`,
    /// `bias` is `(Cout)`. The output keeps the spatial size of `x`.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Var, dilation: usize) -> Result<Var> {
        let out = conv2d_forward(&self.value(x), &self.value(kernel), &self.value(bias), dilation)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dilation,
            },
            self.any_grad(&[x, kernel, bias]),
        ))
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), self.any_grad(&[x]))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("loss must be a scalar, got shape {:?}", loss_value.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads)?;
        }

        for (i, node) in nodes.iter().enumerate() {
            let is_param = matches!(node.op, Op::Leaf) && node.requires_grad;
            if is_param && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !is_param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a parameter leaf (zero when the loss does not depend on
    /// it). `None` for constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *x;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Reduce a gradient onto an operand that may have been broadcast from a scalar.
fn reduce_to<T: Element>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.sum())
    }
}

fn backprop<T: Element>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let zip = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
        Tensor::new(
            g.shape(),
            g.data().iter().zip(a.data()).map(|(&gi, &ai)| f(gi, ai)).collect(),
        )
        .unwrap()
    };
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, a, reduce_to(g.clone(), val(a).shape()));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(g.clone(), val(b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                accumulate(grads, a, reduce_to(g.clone(), val(a).shape()));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(g.map(|x| -x), val(b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let other_for = |other: &Tensor<T>| -> Tensor<T> {
                if other.shape() == g.shape() {
                    zip(other, &|gi, oi| gi * oi)
                } else {
                    let o = other.data()[0];
                    g.map(|gi| gi * o)
                }
            };
            if needs(a) {
                accumulate(grads, a, reduce_to(other_for(vb), va.shape()));
            }
            if needs(b) {
                accumulate(grads, b, reduce_to(other_for(va), vb.shape()));
            }
        }
        Op::ScalarMul(a, s) => {
            let k = T::from_f64_lossy(s);
            accumulate(grads, a, g.map(|x| x * k));
        }
        Op::AddScalar(a) => accumulate(grads, a, g.clone()),
        Op::Concat(a, b) => {
            let ca = val(a).shape()[1];
            let cb = val(b).shape()[1];
            if needs(a) {
                accumulate(grads, a, g.slice_channels(0, ca)?);
            }
            if needs(b) {
                accumulate(grads, b, g.slice_channels(ca, cb)?);
            }
        }
        Op::SliceChannels { src, start } => {
            let [b, c, h, w] = val(src).dims4()?;
            let count = g.shape()[1];
            let plane = h * w;
            let mut full = Tensor::zeros([b, c, h, w]);
            for n in 0..b {
                let dst = (n * c + start) * plane;
                let srcoff = n * count * plane;
                full.data_mut()[dst..dst + count * plane].copy_from_slice(&g.data()[srcoff..srcoff + count * plane]);
            }
            accumulate(grads, src, full);
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(grads, x, zip(y, &|gi, yi| gi * yi * (T::one() - yi)));
        }
        Op::Tanh(x) => {
            let y = &node.value;
            accumulate(grads, x, zip(y, &|gi, yi| gi * (T::one() - yi * yi)));
        }
        Op::Swish(x) => {
            accumulate(
                grads,
                x,
                zip(val(x), &|gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (T::one() - s))
                }),
            );
        }
        Op::MuLaw { x, mu } => {
            let m = T::from_f64_lossy(mu);
            let denom = m.ln_1p();
            accumulate(
                grads,
                x,
                zip(val(x), &|gi, xi| {
                    gi * m / ((T::one() + m * clamp_non_negative(xi)) * denom)
                }),
            );
        }
        Op::Conv2d {
            x,
            kernel,
            bias,
            dilation,
        } => {
            let (dx, dk, db) = conv2d_backward(val(x), val(kernel), g, dilation, needs(x), needs(kernel), needs(bias))?;
            if let Some(dx) = dx {
                accumulate(grads, x, dx);
            }
            if let Some(dk) = dk {
                accumulate(grads, kernel, dk);
            }
            if let Some(db) = db {
                accumulate(grads, bias, db);
            }
        }
        Op::Mean(x) => {
            let n = val(x).len();
            let scale = g.data()[0] / T::from_usize(n.max(1)).unwrap();
            accumulate(grads, x, Tensor::full(val(x).shape(), scale));
        }
    }
    Ok(())
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    k: usize,
    dilation: usize,
}

impl ConvGeometry {
    fn check<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, dilation: usize) -> Result<Self> {
        let [batch, in_ch, height, width] = x.dims4()?;
        let (out_ch, k_in, kh, kw) = match kernel.shape()[..] {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!("kernel must be (Cout, Cin, k, k), got {:?}", kernel.shape()),
                })
            }
        };
        if k_in != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel extent must be square and odd, got {}x{}", kh, kw),
            });
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("conv2d dilation must be positive".into()));
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            k: kh,
            dilation,
        })
    }

    fn rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    /// For each kernel tap, the row offset and the valid column range.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, isize, isize)) {
        let pad = self.pad();
        for c in 0..self.in_ch {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dy = (ky * self.dilation) as isize - pad;
                    let dx = (kx * self.dilation) as isize - pad;
                    f(row, c, dy, dx);
                }
            }
        }
    }

    /// Unfold one batch item into a `(Cin*k*k, H*W)` matrix.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let (h, w) = (self.height as isize, self.width as isize);
        let plane = self.plane();
        self.for_each_tap(|row, c, dy, dx| {
            let dst = &mut col[row * plane..(row + 1) * plane];
            let x_lo = (-dx).clamp(0, w) as usize;
            let x_hi = (w - dx).clamp(0, w) as usize;
            for y in 0..h {
                let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                let sy = y + dy;
                if sy < 0 || sy >= h || x_lo >= x_hi {
                    out_row.fill(T::zero());
                    continue;
                }
                let src = &x[c * plane + (sy * w) as usize..c * plane + ((sy + 1) * w) as usize];
                out_row[..x_lo].fill(T::zero());
                out_row[x_hi..].fill(T::zero());
                let s0 = (x_lo as isize + dx) as usize;
                out_row[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
            }
        });
    }

    /// Scatter-add a column matrix back into one batch item.
    fn col2im<T: Element>(&self, col: &[T], dx_item: &mut [T]) {
        let (h, w) = (self.height as isize, self.width as isize);
        let plane = self.plane();
        self.for_each_tap(|row, c, dy, dx| {
            let src = &col[row * plane..(row + 1) * plane];
            let x_lo = (-dx).clamp(0, w) as usize;
            let x_hi = (w - dx).clamp(0, w) as usize;
            if x_lo >= x_hi {
                return;
            }
            for y in 0..h {
                let sy = y + dy;
                if sy < 0 || sy >= h {
                    continue;
                }
                let from = &src[(y * w) as usize + x_lo..(y * w) as usize + x_hi];
                let base = c * plane + (sy * w) as usize;
                let s0 = (x_lo as isize + dx) as usize;
                for (d, &v) in dx_item[base + s0..base + s0 + (x_hi - x_lo)].iter_mut().zip(from) {
                    *d = *d + v;
                }
            }
        });
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1
    }
}

fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::check(x, kernel, dilation)?;
    if bias.len() != geo.out_ch {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let (rows, plane) = (geo.rows(), geo.plane());
    let mut out = Tensor::zeros([geo.batch, geo.out_ch, geo.height, geo.width]);
    let mut col = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for n in 0..geo.batch {
        let x_item = &x.data()[n * geo.in_ch * plane..(n + 1) * geo.in_ch * plane];
        let out_item = &mut out.data_mut()[n * geo.out_ch * plane..(n + 1) * geo.out_ch * plane];
        for (o, chunk) in out_item.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        let cols: &[T] = if geo.is_pointwise() {
            x_item
        } else {
            geo.im2col(x_item, &mut col);
            &col
        };
        T::gemm(
            geo.out_ch,
            rows,
            plane,
            kernel.data(),
            Strides::row_major(rows),
            cols,
            Strides::row_major(plane),
            T::one(),
            out_item,
            Strides::row_major(plane),
        );
    }
    Ok(out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Tensor<T>,
    dilation: usize,
    want_x: bool,
    want_kernel: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let geo = ConvGeometry::check(x, kernel, dilation)?;
    let (rows, plane) = (geo.rows(), geo.plane());
    let mut dx = want_x.then(|| Tensor::zeros(x.shape()));
    let mut dk = want_kernel.then(|| Tensor::zeros(kernel.shape()));
    let mut db = want_bias.then(|| Tensor::zeros([geo.out_ch]));
    let mut col = vec![T::zero(); if geo.is_pointwise() && !want_x { 0 } else { rows * plane }];

    for n in 0..geo.batch {
        let x_item = &x.data()[n * geo.in_ch * plane..(n + 1) * geo.in_ch * plane];
        let g_item = &g.data()[n * geo.out_ch * plane..(n + 1) * geo.out_ch * plane];

        if let Some(db) = db.as_mut() {
            for (o, chunk) in g_item.chunks(plane).enumerate() {
                let s = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                db.data_mut()[o] = db.data()[o] + s;
            }
        }

        if let Some(dk) = dk.as_mut() {
            let cols: &[T] = if geo.is_pointwise() {
                x_item
            } else {
                geo.im2col(x_item, &mut col);
                &col
            };
            // dK += dY (Cout x P) * cols^T (P x rows)
            T::gemm(
                geo.out_ch,
                plane,
                rows,
                g_item,
                Strides::row_major(plane),
                cols,
                Strides::transposed(plane),
                T::one(),
                dk.data_mut(),
                Strides::row_major(rows),
            );
        }

        if let Some(dx) = dx.as_mut() {
            let dx_item = &mut dx.data_mut()[n * geo.in_ch * plane..(n + 1) * geo.in_ch * plane];
            // dcols = K^T (rows x Cout) * dY (Cout x P)
            let target: &mut [T] = if geo.is_pointwise() { dx_item } else { &mut col };
            T::gemm(
                rows,
                geo.out_ch,
                plane,
                kernel.data(),
                Strides::transposed(rows),
                g_item,
                Strides::row_major(plane),
                T::zero(),
                target,
                Strides::row_major(plane),
            );
            if !geo.is_pointwise() {
                let dx_item = &mut dx.data_mut()[n * geo.in_ch * plane..(n + 1) * geo.in_ch * plane];
                geo.col2im(&col, dx_item);
            }
        }
    }
    Ok((dx, dk, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_one_is_bitwise_identity() {
        let tape = Tape::new();
        let x = Tensor::<f32>::from_fn([3, 5], |i| (i as f32 * 0.37).sin() * 1e-3);
        let a = tape.constant(x.clone());
        let one = tape.constant(Tensor::scalar(1.0));
        let y = tape.mul(a, one).unwrap();
        let bits: Vec<u32> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "add", .. }), "{err}");
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn detached_branch_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 1.0);
        assert!(grads.get(d).is_none());

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[5.0, 6.0, 7.0]));
        let loss = tape.mean(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn mean_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[2.0, 4.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item().unwrap(), 3.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);

        let c = tape.constant(Tensor::full([4, 4], 1.75));
        assert_eq!(tape.value(tape.mean(c)).item().unwrap(), 1.75);
    }

    #[test]
    fn concat_shapes_and_empty_identity() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 5, 4, 4]));
        assert_eq!(tape.shape(tape.concat_channels(a, b).unwrap()), vec![1, 8, 4, 4]);

        let x = Tensor::<f32>::from_fn([1, 2, 3, 3], |i| i as f32);
        let xv = tape.constant(x.clone());
        let empty = tape.constant(Tensor::zeros([1, 0, 3, 3]));
        assert_eq!(*tape.value(tape.concat_channels(xv, empty).unwrap()), x);

        let bad = tape.constant(Tensor::zeros([1, 2, 3, 4]));
        assert!(tape.concat_channels(xv, bad).is_err());
    }

    #[test]
    fn conv_pointwise_identity() {
        let tape = Tape::<f32>::new();
        let x = Tensor::<f32>::from_fn([2, 1, 5, 4], |i| (i as f32).cos());
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(xv, k, b, 1).unwrap();
        assert_eq!(*tape.value(y), x);
    }

    #[test]
    fn conv_window_sum_on_constant_image() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.value(tape.conv2d(x, k, b, 1).unwrap());
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        // corners see a 2x2 window under zero padding
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let k_wrong_in = tape.constant(Tensor::zeros([3, 1, 3, 3]));
        let k_even = tape.constant(Tensor::zeros([3, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            tape.conv2d(x, k_wrong_in, b, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(tape.conv2d(x, k_even, b, 1), Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn swish_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -1000.0]));
        let y = tape.value(tape.swish(x));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.7310585786300049).abs() < 1e-15);
        assert!(y.data()[2].is_finite());
    }
}
