//! Reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and the rule needed to
//! push gradients back to its inputs. Nodes are only ever appended, so the
//! node list is already in topological order and `backward` is a single
//! reverse sweep.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Binary(Var, Var, BinaryKind),
    Act(Var, Activation),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    MinConst(Var, T),
    Affine(Var, T),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    ScaleChannels { x: Var, s: Var },
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on `backward`.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Hash of which side of its kink every non-smooth element sits on
    /// (ReLU-type activations, `min_const`, L1). Two evaluations with the
    /// same signature lie in one smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: u8| h = (h ^ u64::from(bit)).wrapping_mul(PRIME);
        let sign = |v: T| (v > T::zero()) as u8 + (v < T::zero()) as u8 * 2;
        for node in &self.nodes {
            match &node.op {
                Op::Act(x, Activation::Relu | Activation::LeakyRelu(_)) => {
                    self.value(*x).data().iter().for_each(|&v| mix(sign(v)));
                }
                Op::MinConst(x, t) => self.value(*x).data().iter().for_each(|&v| mix(sign(v - *t))),
                Op::L1(a, b) => {
                    let (a, b) = (self.value(*a).data(), self.value(*b).data());
                    a.iter().zip(b).for_each(|(&x, &y)| mix(sign(x - y)));
                }
                _ => {}
            }
        }
        h
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, rg))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::deconv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(out, Op::Deconv { x, w, b, stride, pad }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, alloc::format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        self.same_shape("elementwise", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(a, b, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| activate(v, kind));
        let rg = self.requires_grad(x);
        self.push(out, Op::Act(x, kind), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Channel-wise concatenation in the order given.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v),
            None => return Err(Error::invalid("concat_channels", "no inputs")),
        };
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    alloc::format!("{s} does not share batch/spatial dims with {first}"),
                ));
            }
            channels += s.c;
        }
        let shape = Shape::new(first.n, channels, first.h, first.w);
        let plane = first.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().c * plane;
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    /// Per-channel spatial mean, `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let inv = T::one() / T::from_f64(s.plane() as f64);
        let data = t
            .data()
            .chunks(s.plane())
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Pointwise `min(value, threshold)`. Gradient passes where
    /// `value <= threshold`.
    pub fn min_const(&mut self, x: Var, threshold: T) -> Result<Var> {
        if !(threshold >= T::zero()) {
            return Err(Error::invalid("min_const threshold", alloc::format!("{threshold}")));
        }
        let out = self.value(x).map(|v| if v <= threshold { v } else { threshold });
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::MinConst(x, threshold), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.requires_grad(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    /// Instance normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let inv_n = T::one() / T::from_f64(plane as f64);
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(s.n * s.c);
        for chunk in t.data().chunks(plane) {
            let mean = chunk.iter().copied().sum::<T>() * inv_n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(chunk.iter().map(|&v| (v - mean) * is));
        }
        let out = Tensor::from_vec(s, data).expect("norm shape");
        let rg = self.requires_grad(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// Multiplies each `(n, c)` plane of `x` by `s[n, c]`; `s` is `(n, c, 1, 1)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xs, ss) = (self.shape(x), self.shape(s));
        if ss != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::shape(
                "scale_channels",
                alloc::format!("scale {ss} must be ({}, {}, 1, 1)", xs.n, xs.c),
            ));
        }
        let plane = xs.plane();
        let scales = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(scales)
            .flat_map(|(c, &k)| c.iter().map(move |&v| v * k))
            .collect();
        let out = Tensor::from_vec(xs, data)?;
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::from_f64(t.len() as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let total: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let m = total / T::from_f64(va.len() as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::L1(a, b), rg))
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let total: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let m = total / T::from_f64(va.len() as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// `a + b` for scalars, or any equal shapes.
    pub fn add_scaled(&mut self, acc: Var, x: Var, weight: T) -> Result<Var> {
        let scaled = self.affine(x, weight, T::zero());
        self.add(acc, scaled)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            let g = f(&self.nodes[v.0].value);
            self.accumulate(v, g);
        }
    }

    /// Back-propagates from a scalar `root`. Gradients of earlier calls are
    /// discarded. Every differentiable leaf ends up with a gradient, zero
    /// when it does not influence `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if rs.numel() != 1 {
            return Err(Error::NonScalarRoot(rs));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if self.nodes[root.0].requires_grad {
            self.nodes[root.0].grad = Some(Tensor::ones(rs));
        }
        for i in (0..=root.0).rev() {
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &gout)?;
            self.nodes[i].grad = Some(gout);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, gout: &Tensor<T>) -> Result<()> {
        // Ops are moved out temporarily so inputs can be borrowed mutably.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.apply_rule(i, &op, gout);
        self.nodes[i].op = op;
        res
    }

    fn apply_rule(&mut self, i: usize, op: &Op<T>, gout: &Tensor<T>) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    gout,
                    stride,
                    pad,
                    self.requires_grad(x),
                    self.requires_grad(w),
                )?;
                if let Some(g) = gx {
                    self.accumulate(x, g);
                }
                if let Some(g) = gw {
                    self.accumulate(w, g);
                }
                if let Some(b) = b {
                    self.accumulate_with(b, |_| kernels::bias_grad(gout));
                }
            }
            Op::Deconv { x, w, b, stride, pad } => {
                let (gx, gw) = kernels::deconv2d_backward(
                    self.value(x),
                    self.value(w),
                    gout,
                    stride,
                    pad,
                    self.requires_grad(x),
                    self.requires_grad(w),
                )?;
                if let Some(g) = gx {
                    self.accumulate(x, g);
                }
                if let Some(g) = gw {
                    self.accumulate(w, g);
                }
                if let Some(b) = b {
                    self.accumulate_with(b, |_| kernels::bias_grad(gout));
                }
            }
            Op::Binary(a, b, BinaryKind::Add) => {
                self.accumulate_with(a, |_| gout.clone());
                self.accumulate_with(b, |_| gout.clone());
            }
            Op::Binary(a, b, BinaryKind::Mul) => {
                if self.requires_grad(a) {
                    let g = zip_map(gout, self.value(b), |g, y| g * y);
                    self.accumulate(a, g);
                }
                if self.requires_grad(b) {
                    let g = zip_map(gout, self.value(a), |g, x| g * x);
                    self.accumulate(b, g);
                }
            }
            Op::Act(x, kind) => {
                if self.requires_grad(x) {
                    let g = zip_map(gout, &self.nodes[i].value, |g, y| g * activation_slope(y, kind));
                    self.accumulate(x, g);
                }
            }
            Op::Concat(ref inputs) => {
                let s = gout.shape();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v).c;
                    if self.requires_grad(v) {
                        let g = gout.slice_channels(offset, c).expect("concat slice");
                        self.accumulate(v, g);
                    }
                    offset += c;
                }
                debug_assert_eq!(offset, s.c);
            }
            Op::GlobalAvgPool(x) => {
                self.accumulate_with(x, |xv| {
                    let s = xv.shape();
                    let inv = T::one() / T::from_f64(s.plane() as f64);
                    let data = gout
                        .data()
                        .iter()
                        .flat_map(|&g| core::iter::repeat_n(g * inv, s.plane()))
                        .collect();
                    Tensor::from_vec(s, data).expect("pool grad")
                });
            }
            Op::MinConst(x, t) => {
                self.accumulate_with(x, |xv| {
                    zip_map(gout, xv, |g, v| if v <= t { g } else { T::zero() })
                });
            }
            Op::Affine(x, scale) => {
                self.accumulate_with(x, |_| gout.map(|g| g * scale));
            }
            Op::InstanceNorm { x, ref inv_std } => {
                if self.requires_grad(x) {
                    let y = &self.nodes[i].value;
                    let s = y.shape();
                    let plane = s.plane();
                    let inv_n = T::one() / T::from_f64(plane as f64);
                    let mut data = Vec::with_capacity(y.len());
                    for ((gc, yc), &is) in gout.data().chunks(plane).zip(y.data().chunks(plane)).zip(inv_std) {
                        let mg = gc.iter().copied().sum::<T>() * inv_n;
                        let mgy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<T>() * inv_n;
                        data.extend(gc.iter().zip(yc).map(|(&g, &v)| is * (g - mg - v * mgy)));
                    }
                    let g = Tensor::from_vec(s, data).expect("norm grad");
                    self.accumulate(x, g);
                }
            }
            Op::ScaleChannels { x, s } => {
                let plane = self.shape(x).plane();
                if self.requires_grad(x) {
                    let scales = self.value(s).data();
                    let data = gout
                        .data()
                        .chunks(plane)
                        .zip(scales)
                        .flat_map(|(c, &k)| c.iter().map(move |&g| g * k))
                        .collect();
                    let g = Tensor::from_vec(gout.shape(), data).expect("scale grad");
                    self.accumulate(x, g);
                }
                if self.requires_grad(s) {
                    let data = gout
                        .data()
                        .chunks(plane)
                        .zip(self.value(x).data().chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&g, &v)| g * v).sum::<T>())
                        .collect();
                    let g = Tensor::from_vec(self.shape(s), data).expect("scale grad");
                    self.accumulate(s, g);
                }
            }
            Op::Sum(x) => {
                let g = gout.item();
                self.accumulate_with(x, |xv| Tensor::full(xv.shape(), g));
            }
            Op::Mean(x) => {
                let g = gout.item();
                self.accumulate_with(x, |xv| {
                    Tensor::full(xv.shape(), g / T::from_f64(xv.len() as f64))
                });
            }
            Op::L1(a, b) => {
                let n = T::from_f64(self.value(a).len() as f64);
                let k = gout.item() / n;
                let diff = zip_map(self.value(a), self.value(b), |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        T::zero()
                    }
                });
                self.accumulate_with(b, |_| diff.map(|d| -d));
                self.accumulate(a, diff);
            }
            Op::Mse(a, b) => {
                let n = T::from_f64(self.value(a).len() as f64);
                let k = gout.item() * T::from_f64(2.0) / n;
                let diff = zip_map(self.value(a), self.value(b), |x, y| k * (x - y));
                self.accumulate_with(b, |_| diff.map(|d| -d));
                self.accumulate(a, diff);
            }
        }
        Ok(())
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Applies an activation to a single value.
pub fn activate<T: Scalar>(v: T, kind: Activation) -> T {
    match kind {
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(T::zero()),
        Activation::LeakyRelu(slope) => {
            if v > T::zero() {
                v
            } else {
                v * T::from_f64(slope)
            }
        }
    }
}

/// Derivative expressed through the activation output `y`.
fn activation_slope<T: Scalar>(y: T, kind: Activation) -> T {
    match kind {
        Activation::Sigmoid => y * (T::one() - y),
        Activation::Tanh => T::one() - y * y,
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::LeakyRelu(slope) => {
            if y > T::zero() {
                T::one()
            } else {
                T::from_f64(slope)
            }
        }
    }
}
