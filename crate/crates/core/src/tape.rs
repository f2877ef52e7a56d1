//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! information to propagate adjoints back to its inputs. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction
//! and a single reverse sweep visits each node once.
//!
//! ```
//! use fbsd::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let s = tape.sum(sq);
//! let loss = tape.scale(s, 0.5);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0, 3.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, MatmulGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Matmul {
        a: Var,
        b: Var,
        geom: MatmulGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Gap(Var),
    StripeMean {
        x: Var,
        k: usize,
    },
    StripeScale {
        x: Var,
        s: Var,
    },
    Suppress {
        x: Var,
        argmax: Vec<usize>,
        k: usize,
        factor: T,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Discrete state of every non-smooth op on a tape: relu input signs and
/// suppression choices. Two evaluations with equal signatures lie on the same
/// smooth piece of the function.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KinkSignature {
    relu_active: Vec<bool>,
    argmax: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Index of the first maximal element.
pub fn first_argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn stripe_dims(op: &'static str, shape: &[usize], k: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![k],
        });
    }
    if k == 0 || shape[3] % k != 0 {
        return Err(Error::config(format!(
            "{op}: width {} is not divisible into {k} stripes",
            shape[3]
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn add_into<T: Scalar>(buf: &mut [T], src: &[T]) {
    buf.iter_mut().zip(src).for_each(|(b, &s)| *b = *b + s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn kink_signature(&self) -> KinkSignature {
        let mut sig = KinkSignature::default();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => sig
                    .relu_active
                    .extend(self.value(*x).data().iter().map(|&v| v > T::zero())),
                Op::Suppress { argmax, .. } => sig.argmax.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Matrix product of 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 || self.value(b).ndim() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the trailing two axes.
    /// Operands are both 2-D or both 3-D with equal batch extent.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let geom = MatmulGeom::new(self.shape(a), self.shape(b), trans_a, trans_b)?;
        let batched = self.value(a).ndim() == 3;
        let data = kernels::matmul_forward(&geom, self.value(a).data(), self.value(b).data());
        let out = Tensor::new(geom.out_shape(batched), data)?;
        Ok(self.push(out, Op::Matmul { a, b, geom }, &[a, b]))
    }

    /// 2-D cross-correlation of `x: B×C×H×W` with `w: O×C×kh×kw`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_c] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![geom.out_c],
                });
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(geom.out_shape().to_vec(), data)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }, &inputs))
    }

    /// Softmax over one axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Global average pooling over the two trailing axes.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "gap",
                lhs: shape,
                rhs: vec![],
            });
        }
        let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
        let n = T::from_usize(plane).unwrap();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(shape[..shape.len() - 2].to_vec(), data)?;
        Ok(self.push(out, Op::Gap(x), &[x]))
    }

    /// Mean of each of `k` equal width-stripes of `x: B×C×H×W`, giving `B×k`.
    pub fn stripe_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let (b, c, h, w) = stripe_dims("stripe_mean", self.shape(x), k)?;
        let sw = w / k;
        let n = T::from_usize(c * h * sw).unwrap();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * k];
        for bi in 0..b {
            for row in src[bi * c * h * w..(bi + 1) * c * h * w].chunks(w) {
                for (i, stripe) in row.chunks(sw).enumerate() {
                    out[bi * k + i] = out[bi * k + i] + stripe.iter().copied().sum::<T>();
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / n);
        let out = Tensor::new(vec![b, k], out)?;
        Ok(self.push(out, Op::StripeMean { x, k }, &[x]))
    }

    /// Scale stripe `i` of every `x[b]` by `s[b, i]`, with `s: B×k`.
    pub fn stripe_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s).to_vec();
        if ss.len() != 2 || ss[0] != self.shape(x).first().copied().unwrap_or(0) {
            return Err(Error::Dimension {
                op: "stripe_scale",
                lhs: self.shape(x).to_vec(),
                rhs: ss,
            });
        }
        let k = ss[1];
        let (b, c, h, w) = stripe_dims("stripe_scale", self.shape(x), k)?;
        let sw = w / k;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            for row in out[bi * c * h * w..(bi + 1) * c * h * w].chunks_mut(w) {
                for (i, stripe) in row.chunks_mut(sw).enumerate() {
                    let f = sv[bi * k + i];
                    stripe.iter_mut().for_each(|v| *v = *v * f);
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::StripeScale { x, s }, &[x, s]))
    }

    /// Scale the first maximal stripe (per batch element, selected from
    /// `weights: B×k`) by `factor`, leaving every other element untouched.
    ///
    /// The selection is piecewise constant in `weights`, so no gradient flows
    /// back to them.
    pub fn suppress(&mut self, x: Var, weights: Var, factor: T) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        if ws.len() != 2 || ws[0] != self.shape(x).first().copied().unwrap_or(0) {
            return Err(Error::Dimension {
                op: "suppress",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let k = ws[1];
        let (b, c, h, w) = stripe_dims("suppress", self.shape(x), k)?;
        let sw = w / k;
        let argmax: Vec<usize> = self.value(weights).data().chunks(k).map(first_argmax).collect();
        let mut out = self.value(x).data().to_vec();
        for bi in 0..b {
            let lo = argmax[bi] * sw;
            for row in out[bi * c * h * w..(bi + 1) * c * h * w].chunks_mut(w) {
                row[lo..lo + sw].iter_mut().for_each(|v| *v = *v * factor);
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::Suppress {
                x,
                argmax,
                k,
                factor,
            },
            &[x],
        ))
    }

    /// Affine map `x · wᵀ + b` with `x: B×D`, `w: N×D`, `b: N`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (batch, d, n) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * n];
        T::gemm(
            batch,
            d,
            n,
            T::one(),
            (self.value(x).data(), d as isize, 1),
            (self.value(w).data(), 1, d as isize),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, &bb)| *v = *v + bb);
        }
        let out = Tensor::new(vec![batch, n], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Batch-mean negative log-likelihood of `labels` under
    /// `softmax(logits)`, with the log-softmax fused.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let n = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::data(format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = vec![T::zero(); shape[0] * n];
        let mut total = T::zero();
        for ((row, p), &label) in self
            .value(logits)
            .data()
            .chunks(n)
            .zip(probs.chunks_mut(n))
            .zip(labels)
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - lse).exp();
            }
            total = total + (lse - row[label]);
        }
        let out = Tensor::scalar(total / T::from_usize(labels.len()).unwrap());
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Accumulate `d loss / d leaf` into every leaf that requires grad.
    /// Repeated calls add to existing gradients until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, &d)| *a = *a + d),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                send(*a, &|buf: &mut [T]| add_into(buf, g));
                send(*b, &|buf: &mut [T]| add_into(buf, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|buf| {
                    for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(vb) {
                        *d = *d + gi * y;
                    }
                });
                send(*b, &|buf| {
                    for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *d = *d + gi * x;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|buf| {
                buf.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *c)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|buf: &mut [T]| add_into(buf, g)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(*a, &|buf| {
                    for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &|buf| buf.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Matmul { a, b, geom } => {
                let (da, db) = kernels::matmul_backward(
                    geom,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    self.nodes[a.0].requires_grad,
                    self.nodes[b.0].requires_grad,
                );
                if let Some(da) = da {
                    send(*a, &|buf: &mut [T]| add_into(buf, &da));
                }
                if let Some(db) = db {
                    send(*b, &|buf: &mut [T]| add_into(buf, &db));
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                if self.nodes[x.0].requires_grad {
                    let dx = kernels::conv2d_backward_input(geom, g, self.value(*w).data());
                    send(*x, &|buf: &mut [T]| add_into(buf, &dx));
                }
                let want_w = self.nodes[w.0].requires_grad;
                let want_b = bias.is_some_and(|b| self.nodes[b.0].requires_grad);
                if want_w || want_b {
                    let (dw, db) = kernels::conv2d_backward_params(geom, g, self.value(*x).data());
                    send(*w, &|buf: &mut [T]| add_into(buf, &dw));
                    if let Some(b) = bias {
                        send(*b, &|buf: &mut [T]| add_into(buf, &db));
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                send(*x, &|buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: T = (0..len).map(|a| y[at(a)] * g[at(a)]).sum();
                            for a in 0..len {
                                buf[at(a)] = buf[at(a)] + y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gap(x) => {
                let s = self.shape(*x);
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let n = T::from_usize(plane).unwrap();
                send(*x, &|buf| {
                    for (chunk, &gi) in buf.chunks_mut(plane).zip(g) {
                        chunk.iter_mut().for_each(|d| *d = *d + gi / n);
                    }
                });
            }
            Op::StripeMean { x, k } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[1], s[2], s[3]);
                let sw = w / k;
                let n = T::from_usize(c * h * sw).unwrap();
                send(*x, &|buf| {
                    for (bi, sample) in buf.chunks_mut(c * h * w).enumerate() {
                        for row in sample.chunks_mut(w) {
                            for (i, stripe) in row.chunks_mut(sw).enumerate() {
                                let gi = g[bi * k + i] / n;
                                stripe.iter_mut().for_each(|d| *d = *d + gi);
                            }
                        }
                    }
                });
            }
            Op::StripeScale { x, s } => {
                let shape = self.shape(*x);
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let k = self.shape(*s)[1];
                let sw = w / k;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                send(*x, &|buf| {
                    for (bi, (sample, gs)) in buf
                        .chunks_mut(c * h * w)
                        .zip(g.chunks(c * h * w))
                        .enumerate()
                    {
                        for (row, grow) in sample.chunks_mut(w).zip(gs.chunks(w)) {
                            for (i, (stripe, gstripe)) in
                                row.chunks_mut(sw).zip(grow.chunks(sw)).enumerate()
                            {
                                let f = sv[bi * k + i];
                                for (d, &gi) in stripe.iter_mut().zip(gstripe) {
                                    *d = *d + gi * f;
                                }
                            }
                        }
                    }
                });
                send(*s, &|buf| {
                    for (bi, (xs, gs)) in xv.chunks(c * h * w).zip(g.chunks(c * h * w)).enumerate() {
                        for (xrow, grow) in xs.chunks(w).zip(gs.chunks(w)) {
                            for (i, (xst, gst)) in xrow.chunks(sw).zip(grow.chunks(sw)).enumerate() {
                                let dot: T = xst.iter().zip(gst).map(|(&a, &b)| a * b).sum();
                                buf[bi * k + i] = buf[bi * k + i] + dot;
                            }
                        }
                    }
                });
            }
            Op::Suppress {
                x,
                argmax,
                k,
                factor,
            } => {
                let shape = self.shape(*x);
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                let sw = w / k;
                send(*x, &|buf| {
                    for (bi, (sample, gs)) in buf
                        .chunks_mut(c * h * w)
                        .zip(g.chunks(c * h * w))
                        .enumerate()
                    {
                        let lo = argmax[bi] * sw;
                        for (row, grow) in sample.chunks_mut(w).zip(gs.chunks(w)) {
                            for (col, (d, &gi)) in row.iter_mut().zip(grow).enumerate() {
                                let f = if (lo..lo + sw).contains(&col) {
                                    *factor
                                } else {
                                    T::one()
                                };
                                *d = *d + gi * f;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (batch, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                send(*x, &|buf| {
                    T::gemm(
                        batch,
                        n,
                        d,
                        T::one(),
                        (g, n as isize, 1),
                        (wv, d as isize, 1),
                        T::one(),
                        (buf, d as isize, 1),
                    )
                });
                send(*w, &|buf| {
                    T::gemm(
                        n,
                        batch,
                        d,
                        T::one(),
                        (g, 1, n as isize),
                        (xv, d as isize, 1),
                        T::one(),
                        (buf, d as isize, 1),
                    )
                });
                send(*b, &|buf| {
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                send(*logits, &|buf| {
                    for ((row, p), &label) in buf.chunks_mut(n).zip(probs.chunks(n)).zip(labels) {
                        for (j, (d, &pj)) in row.iter_mut().zip(p).enumerate() {
                            let target = if j == label { T::one() } else { T::zero() };
                            *d = *d + scale * (pj - target);
                        }
                    }
                });
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
