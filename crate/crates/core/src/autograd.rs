//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every operation as an append-only node list, so node
//! indices are already a topological order: each [`Var`] only ever refers to
//! nodes created before it. [`Graph::backward`] walks the tape once in reverse
//! and accumulates gradients additively, which makes fan-out (shared
//! subexpressions) correct without any extra bookkeeping.
//!
//! Shapes follow the NCHW convention for image-like tensors. The only implicit
//! broadcasting is the per-channel bias inside [`Graph::conv2d`]; everything
//! else goes through [`Graph::broadcast`] or [`Graph::reshape`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::{matmul_into, Real, Tensor};

/// Group-normalisation epsilon.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        cols: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Broadcast(Var),
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(invalid(format!("variable {} does not belong to this graph", v.0)));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary_same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.check(a)?;
        let v = self.map(a, |x| x * c);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1, zero-padded ("same") 2D convolution with an odd square kernel.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err(&xs, &ws));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(&[ws[0]], self.shape(b)));
            }
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kernel) = (ws[0], ws[2]);
        let hw = h * wd;
        let n = batch * hw;
        let kdim = cin * kernel * kernel;

        let cols = im2col(self.value(x).data(), batch, cin, h, wd, kernel);
        let mut out_t = vec![T::zero(); cout * n];
        matmul_into(cout, kdim, n, self.value(w).data(), false, &cols, false, &mut out_t, false);

        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::zero(); batch * cout * hw];
        for co in 0..cout {
            let bv = bias.as_ref().map_or(T::zero(), |bs| bs[co]);
            let row = &out_t[co * n..(co + 1) * n];
            for bi in 0..batch {
                let dst = &mut out[(bi * cout + co) * hw..(bi * cout + co + 1) * hw];
                for (d, s) in dst.iter_mut().zip(&row[bi * hw..(bi + 1) * hw]) {
                    *d = *s + bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![batch, cout, h, wd], out)?;
        // The unfolded input is only needed for the weight gradient.
        let cols = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                cols,
            },
            rg,
        ))
    }

    /// Group normalisation over `[B, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(invalid("group_norm needs at least [B, C]"));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(invalid(format!("{groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(&[c], self.shape(gamma)));
        }
        let spatial: usize = xs[2..].iter().product();
        let per_group = (c / groups) * spatial;
        let eps = T::from_f64_lossy(GROUP_NORM_EPS);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let count = T::from_usize(per_group).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(xs[0] * groups);
        for (gi, chunk) in xv.chunks(per_group).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let base = gi * per_group;
            let g = gi % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = g * (c / groups) + j / spatial;
                let nh = (v - mean) * inv;
                xhat[base + j] = nh;
                out[base + j] = nh * gv[ch] + bv[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.map(x, |a| a * sigmoid(a));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Silu(x), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = last_axis_softmax(self.value(x), false);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = last_axis_softmax(self.value(x), true);
        let rg = self.rg(x);
        Ok(self.push(v, Op::LogSoftmax(x), rg))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let n = T::from_usize(xv.len().max(1)).unwrap();
        let s = xv.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err(&shape, xv.shape()));
        }
        let v = Tensor::new(shape, xv.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Concatenate `[B, Ca, ...]` and `[B, Cb, ...]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err(&sa, &sb));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for bi in 0..sa[0] {
            out.extend_from_slice(&va[bi * ca..(bi + 1) * ca]);
            out.extend_from_slice(&vb[bi * cb..(bi + 1) * cb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatChannels(a, b), rg))
    }

    /// Expand size-1 axes of `x` to `shape` (same rank).
    pub fn broadcast(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len() || xs.iter().zip(&shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(shape_err(&shape, &xs));
        }
        let map = broadcast_index(&xs, &shape);
        let xv = self.value(x).data();
        let out = map.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Broadcast(x), rg))
    }

    /// 2x2 average pooling on `[B, C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(invalid(format!("avg_pool2 needs even spatial dims, got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::from_f64_lossy(0.25);
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xx in 0..wo {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * ho * wo + y * wo + xx] = s * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], ho, wo], out)?, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling on `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(invalid(format!("upsample2 needs [B, C, H, W], got {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let planes = xs[0] * xs[1];
        let mut out = vec![T::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], ho, wo], out)?, Op::Upsample2(x), rg))
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(invalid(format!("global_avg_pool needs [B, C, H, W], got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let n = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![xs[0], xs[1]], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Reverse sweep from a single-element output. Every node that requires a
    /// gradient and lies upstream of `output` receives `d output / d node`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![T::one()]);
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if v.0 >= i {
                // Parents always precede children on the tape.
                return Err(invalid(format!("cycle detected at node {i}")));
            }
            if nodes[v.0].requires_grad {
                let len = nodes[v.0].value.len();
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                f(slot);
            }
            Ok(())
        };
        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g))?;
                acc(grads, *b, &mut |d| add_into(d, g))?;
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g))?;
                acc(grads, *b, &mut |d| {
                    for (d, s) in d.iter_mut().zip(g) {
                        *d = *d - *s;
                    }
                })?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |d| {
                    for ((d, s), y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + *s * *y;
                    }
                })?;
                acc(grads, *b, &mut |d| {
                    for ((d, s), x) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + *s * *x;
                    }
                })?;
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &mut |d| {
                    for (d, s) in d.iter_mut().zip(g) {
                        *d = *d + *s * *c;
                    }
                })?;
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T, dB = A^T G
                acc(grads, *a, &mut |d| matmul_into(m, n, k, g, false, vb, true, d, true))?;
                acc(grads, *b, &mut |d| matmul_into(k, m, n, va, true, g, false, d, true))?;
            }
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let xs = self.shape(*x);
                let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[0];
                let hw = h * wd;
                let n = batch * hw;
                let kdim = cin * kernel * kernel;
                // [B, Cout, HW] -> [Cout, B*HW]
                let mut gt = vec![T::zero(); cout * n];
                for bi in 0..batch {
                    for co in 0..cout {
                        gt[co * n + bi * hw..co * n + (bi + 1) * hw]
                            .copy_from_slice(&g[(bi * cout + co) * hw..(bi * cout + co + 1) * hw]);
                    }
                }
                if let Some(b) = b {
                    acc(grads, *b, &mut |d| {
                        for (co, dv) in d.iter_mut().enumerate() {
                            *dv = *dv + gt[co * n..(co + 1) * n].iter().copied().sum::<T>();
                        }
                    })?;
                }
                acc(grads, *w, &mut |d| matmul_into(cout, n, kdim, &gt, false, cols, true, d, true))?;
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); kdim * n];
                    matmul_into(kdim, cout, n, self.value(*w).data(), true, &gt, false, &mut dcols, false);
                    acc(grads, *x, &mut |d| col2im(&dcols, d, batch, cin, h, wd, *kernel))?;
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let spatial: usize = xs[2..].iter().product();
                let cpg = c / groups;
                let per_group = cpg * spatial;
                let gv = self.value(*gamma).data();
                // Visits (group instance, channel within group, spatial slice).
                let planes = |f: &mut dyn FnMut(usize, usize, std::ops::Range<usize>)| {
                    for gi in 0..inv_std.len() {
                        for cc in 0..cpg {
                            let start = gi * per_group + cc * spatial;
                            f(gi, (gi % groups) * cpg + cc, start..start + spatial);
                        }
                    }
                };
                acc(grads, *beta, &mut |d| {
                    planes(&mut |_, ch, r| d[ch] = d[ch] + g[r].iter().copied().sum::<T>())
                })?;
                acc(grads, *gamma, &mut |d| {
                    planes(&mut |_, ch, r| {
                        let s: T = g[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| *a * *b).sum();
                        d[ch] = d[ch] + s;
                    })
                })?;
                acc(grads, *x, &mut |d| {
                    let count = T::from_usize(per_group).unwrap();
                    let mut sums = vec![(T::zero(), T::zero()); inv_std.len()];
                    planes(&mut |gi, ch, r| {
                        let gamma = gv[ch];
                        for (s, xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            let dxh = *s * gamma;
                            sums[gi].0 = sums[gi].0 + dxh;
                            sums[gi].1 = sums[gi].1 + dxh * *xh;
                        }
                    });
                    planes(&mut |gi, ch, r| {
                        let (sum_dxh, sum_dxh_xh) = sums[gi];
                        let scale = inv_std[gi] / count;
                        let gamma = gv[ch];
                        for ((dv, s), xh) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                            let dxh = *s * gamma;
                            *dv = *dv + (count * dxh - sum_dxh - *xh * sum_dxh_xh) * scale;
                        }
                    });
                })?;
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |d| {
                    for ((d, s), &a) in d.iter_mut().zip(g).zip(xv) {
                        let sg = sigmoid(a);
                        *d = *d + *s * (sg + a * sg * (T::one() - sg));
                    }
                })?;
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let last = *self.shape(*x).last().unwrap();
                acc(grads, *x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                        let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = *dv + *yv * (*gv - dot);
                        }
                    }
                })?;
            }
            Op::LogSoftmax(x) => {
                let y = nodes[i].value.data();
                let last = *self.shape(*x).last().unwrap();
                acc(grads, *x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                        let total: T = gr.iter().copied().sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = *dv + *gv - yv.exp() * total;
                        }
                    }
                })?;
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len().max(1)).unwrap();
                let v = g[0] / n;
                acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d = *d + v))?;
            }
            Op::Sum(x) => {
                acc(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0]))?;
            }
            Op::Reshape(x) => acc(grads, *x, &mut |d| add_into(d, g))?,
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let batch = sa[0];
                acc(grads, *a, &mut |d| {
                    for bi in 0..batch {
                        let src = &g[bi * (ca + cb)..bi * (ca + cb) + ca];
                        add_into(&mut d[bi * ca..(bi + 1) * ca], src);
                    }
                })?;
                acc(grads, *b, &mut |d| {
                    for bi in 0..batch {
                        let src = &g[bi * (ca + cb) + ca..(bi + 1) * (ca + cb)];
                        add_into(&mut d[bi * cb..(bi + 1) * cb], src);
                    }
                })?;
            }
            Op::Broadcast(x) => {
                let map = broadcast_index(self.shape(*x), nodes[i].value.shape());
                acc(grads, *x, &mut |d| {
                    for (s, &src) in g.iter().zip(&map) {
                        d[src] = d[src] + *s;
                    }
                })?;
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                acc(grads, *x, &mut |d| {
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            for xx in 0..w {
                                let s = g[p * ho * wo + (y / 2) * wo + xx / 2] * quarter;
                                let di = p * h * w + y * w + xx;
                                d[di] = d[di] + s;
                            }
                        }
                    }
                })?;
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (2 * h, 2 * w);
                acc(grads, *x, &mut |d| {
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let di = p * h * w + (y / 2) * w + xx / 2;
                                d[di] = d[di] + g[p * ho * wo + y * wo + xx];
                            }
                        }
                    }
                })?;
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let n = T::from_usize(hw).unwrap();
                acc(grads, *x, &mut |d| {
                    for (chunk, s) in d.chunks_mut(hw).zip(g) {
                        let v = *s / n;
                        chunk.iter_mut().for_each(|d| *d = *d + v);
                    }
                })?;
            }
        }
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf (or any node that was reached); `None` if the node
    /// does not require a gradient or is not upstream of the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros for unreached nodes.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); graph.value(v).len()])
    }
}

fn last_axis_softmax<T: Real>(x: &Tensor<T>, log: bool) -> Tensor<T> {
    let last = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(last.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln();
        for &v in row {
            out.push(if log { v - m - lz } else { (v - m).exp() / z });
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// For each output linear index, the source index in the broadcast input.
fn broadcast_index(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let total: usize = dst.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < dst[d] {
                break;
            }
            offset -= src_strides[d] * dst[d];
            idx[d] = 0;
        }
    }
    out
}

/// Unfold `[B, C, H, W]` into `[C*k*k, B*H*W]` for a zero-padded stride-1 kernel.
fn im2col<T: Real>(x: &[T], batch: usize, cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let n = batch * hw;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); cin * k * k * n];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..batch {
                    let src = &x[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[bi * hw + y * w..bi * hw + (y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im<T: Real>(cols: &[T], dx: &mut [T], batch: usize, cin: usize, h: usize, w: usize, k: usize) {
    let hw = h * w;
    let n = batch * hw;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (dy, dxo) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..batch {
                    let dst = &mut dx[(bi * cin + ci) * hw..(bi * cin + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dxo).max(0) as usize;
                        let x1 = (w as isize - dxo).min(w as isize).max(0) as usize;
                        if x0 < x1 {
                            let d0 = sy as usize * w + (x0 as isize + dxo) as usize;
                            let s0 = bi * hw + y * w;
                            for (d, v) in dst[d0..d0 + (x1 - x0)].iter_mut().zip(&src[s0 + x0..s0 + x1]) {
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per parameter
    /// tensor; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one [`Var`] per entry of `params`
/// (registered as differentiable leaves) and must return a scalar node.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor<f64>],
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    let base = g.value(out).data()[0];
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::GradCheck("function is not deterministic".into()));
    }
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *var);
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(c) if c < n => sample(&mut rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - opts.step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![2, 2], 1.0));
        let y = g.sum(x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn identity_and_fan_out() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.5));
        let gr = g.backward(x).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[1.0]);

        let y = g.add(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![2], 1.0));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.param(Tensor::<f64>::zeros(vec![2, 3]));
        let b = g.param(Tensor::zeros(vec![3, 2]));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        let x = g.param(Tensor::zeros(vec![1, 6, 2, 2]));
        let gm = g.param(Tensor::zeros(vec![6]));
        assert!(g.group_norm(x, gm, gm, 4).is_err());
        assert!(g.group_norm(x, gm, gm, 3).is_ok());
    }

    #[test]
    fn one_by_one_conv_scales_image() {
        let xs: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 1, 3, 3], xs.clone()));
        let k = g.param(t(vec![1, 1, 1, 1], vec![1.7]));
        let y = g.conv2d(x, k, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&xs) {
            assert!((a - 1.7 * b).abs() < 1e-15);
        }
        // upstream weights u: d/dk sum(u * k x) = sum(u * x)
        let u: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let uv = g.constant(t(vec![1, 1, 3, 3], u.clone()));
        let prod = g.mul(y, uv).unwrap();
        let s = g.sum(prod).unwrap();
        let gr = g.backward(s).unwrap();
        let want: f64 = u.iter().zip(&xs).map(|(a, b)| a * b).sum();
        assert!((gr.get(k).unwrap()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param(t(vec![2, 2], vec![0.3, -0.2, 0.5, 0.1]));
        let x = g.constant(t(vec![2, 1], vec![1.0, 2.0]));
        let y = g.matmul(w, x).unwrap();
        let y = g.silu(y).unwrap();
        let s = g.sum(y).unwrap();
        let z = g.scale(s, 0.0).unwrap();
        let gr = g.backward(z).unwrap();
        assert!(gr.get(w).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_map_grad_check_is_exact() {
        let w = t(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6]);
        let x = t(vec![2, 1], vec![1.5, -0.5]);
        let rep = grad_check(
            |g, p| {
                let y = g.matmul(p[0], p[1])?;
                g.sum(y)
            },
            &[w, x],
            1e-10,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn softmax_cross_entropy_grad_check() {
        let logits = t(vec![2, 3], vec![0.2, -1.0, 0.7, 1.1, 0.3, -0.4]);
        let onehot = t(vec![2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let rep = grad_check(
            move |g, p| {
                let lp = g.log_softmax(p[0])?;
                let oh = g.constant(onehot.clone());
                let m = g.mul(lp, oh)?;
                let s = g.sum(m)?;
                g.scale(s, -0.5)
            },
            &[logits],
            1e-6,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let r = grad_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let c = g.constant(Tensor::scalar(calls.get()));
                g.mul(p[0], c)
            },
            &[Tensor::scalar(1.0)],
            1e-6,
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }

    #[test]
    fn shared_subexpression_matches_unrolled_tree() {
        let w = vec![0.3, -0.7, 0.2, 0.9];
        // shared: h = silu(w); y = sum(h * h)
        let mut g = Graph::new();
        let wv = g.param(t(vec![4], w.clone()));
        let h = g.silu(wv).unwrap();
        let hh = g.mul(h, h).unwrap();
        let y = g.sum(hh).unwrap();
        let shared = g.backward(y).unwrap().get(wv).unwrap().to_vec();

        // unrolled: two independent silu nodes
        let mut g = Graph::new();
        let wv = g.param(t(vec![4], w));
        let h1 = g.silu(wv).unwrap();
        let h2 = g.silu(wv).unwrap();
        let hh = g.mul(h1, h2).unwrap();
        let y = g.sum(hh).unwrap();
        let unrolled = g.backward(y).unwrap().get(wv).unwrap().to_vec();
        assert_eq!(shared, unrolled);
    }

    #[test]
    fn pooling_and_concat_shapes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::full(vec![2, 3, 4, 4], 1.0));
        let p = g.avg_pool2(x).unwrap();
        assert_eq!(g.shape(p), &[2, 3, 2, 2]);
        let u = g.upsample2(p).unwrap();
        assert_eq!(g.shape(u), &[2, 3, 4, 4]);
        let c = g.concat_channels(x, u).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 4, 4]);
        let gap = g.global_avg_pool(c).unwrap();
        assert_eq!(g.shape(gap), &[2, 6]);
        assert!(g.value(gap).data().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }
}
