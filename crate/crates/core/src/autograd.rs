//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! Only the ops the networks in this crate need are provided. Convolutions
//! are stride-1 "same" convolutions lowered to im2col + GEMM per sample, so
//! every sample of a batch is computed independently of the others.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Scale(Var, T),
    AddChannel { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

/// Gradients of a scalar root with respect to every grad-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn conv_col_len(c: usize, k: usize) -> usize {
    c * k * k
}

/// Unfolds `x` (`[c, h, w]`) into `[c*k*k, h*w]` patches with zero padding `k/2`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Generic axis permutation; `out.shape[i] = in.shape[perm[i]]`.
fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is not needed (inputs, detached values).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Value copy cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= s;
        }
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a per-sample, per-channel offset `bias: [n, c]` to `x: [n, c, ...]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(self.shape(bias), &xs[..2], "add_channel: bias must be [n, c]");
        let spatial: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            for o in chunk {
                *o += b[i];
            }
        }
        self.push(out, Op::AddChannel { x, bias }, &[x, bias])
    }

    /// Stride-1 zero-padded convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be [n, c, h, w]");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [o, c, k, k]");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv2d: channel mismatch");
        assert!(k % 2 == 1 && ws[3] == k, "conv2d: kernel must be odd and square");
        let hw = h * wd;
        let ckk = conv_col_len(c, k);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * o * hw];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for s in 0..n {
            let xin = &xv[s * c * hw..(s + 1) * c * hw];
            let dst = &mut out[s * o * hw..(s + 1) * o * hw];
            if k == 1 {
                gemm(false, false, o, hw, c, wv, xin, T::zero(), dst);
            } else {
                im2col(xin, c, h, wd, k, &mut col);
                gemm(false, false, o, hw, ckk, wv, &col, T::zero(), dst);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (oc, plane) in dst.chunks_mut(hw).enumerate() {
                    for v in plane {
                        *v += bv[oc];
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(vec![n, o, h, wd], out), Op::Conv2d { x, w, b, k }, &parents)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(c % groups == 0, "group_norm: {c} channels not divisible by {groups} groups");
        let spatial: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let eps = T::of_f64(1e-5);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let mf = T::of_f64(m as f64);
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * cpg) * spatial;
                let chunk = &xv[start..start + m];
                let mean = chunk.iter().copied().sum::<T>() / mf;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let off = start + ci * spatial;
                    for i in 0..spatial {
                        out[off + i] = (xv[off + i] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let op = Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds };
        self.push(Tensor::new(xs, out), op, &[x, gamma, beta])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| silu(a)).collect());
        self.push(out, Op::Silu(x), &[x])
    }

    /// `y = x · wᵀ + b` with `x: [m, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear: input must be 2-d");
        assert_eq!(xs[1], ws[1], "linear: feature mismatch");
        let (m, inp, outf) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); m * outf];
        gemm(false, true, m, outf, inp, self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(outf) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(vec![m, outf], out), Op::Linear { x, w, b }, &parents)
    }

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[0], sb[0], "concat: batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat: spatial mismatch");
        let n = sa[0];
        let la = self.value(a).len() / n;
        let lb = self.value(b).len() / n;
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        self.push(Tensor::new(shape, out), Op::Concat(a, b), &[a, b])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        let quarter = T::of_f64(0.25);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = s * quarter;
                }
            }
        }
        self.push(Tensor::new(vec![xs[0], xs[1], oh, ow], out), Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![xs[0], xs[1], oh, ow], out), Op::Upsample2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(perm.len(), v.shape().len(), "permute: rank mismatch");
        let (shape, data) = permute_data(v.data(), v.shape(), perm);
        self.push(Tensor::new(shape, data), Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Batched matmul: `a: [b, m, k]` times `b: [b, k, n]` (or `[b, n, k]` with `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm: inner dimension mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                n,
                k,
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![batch, m, n], out), Op::Bmm { a, b, trans_b }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let last = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softmax(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.abs()).collect());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * a).collect());
        self.push(out, Op::Square(x), &[x])
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::of_f64(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Backpropagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward: root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()]));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
        }
        // Only leaf gradients are retained.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    let mut g = dy.clone();
                    for v in g.data_mut() {
                        *v = -*v;
                    }
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let mut g = dy.clone();
                    for v in g.data_mut() {
                        *v *= *s;
                    }
                    self.accumulate(grads, *a, g);
                }
            }
            Op::AddChannel { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, dy.clone());
                }
                if self.wants(*bias) {
                    let spatial: usize = out_shape[2..].iter().product();
                    let data: Vec<T> =
                        dy.data().chunks(spatial).map(|c| c.iter().copied().sum()).collect();
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, data));
                }
            }
            Op::Conv2d { x, w, b, k } => self.conv2d_backward(*x, *w, *b, *k, dy, grads),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, dy, grads)
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let data = xv
                        .iter()
                        .zip(dy.data())
                        .map(|(&a, &g)| {
                            let s = T::one() / (T::one() + (-a).exp());
                            g * s * (T::one() + a * (T::one() - s))
                        })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), data));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (m, inp) = (xs[0], xs[1]);
                let outf = out_shape[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * inp];
                    gemm(false, false, m, inp, outf, dy.data(), self.value(*w).data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(vec![m, inp], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); outf * inp];
                    gemm(true, false, outf, inp, m, dy.data(), self.value(*x).data(), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![outf, inp], dw));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); outf];
                        for row in dy.data().chunks(outf) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![outf], db));
                    }
                }
            }
            Op::Concat(a, b) => {
                let n = out_shape[0];
                let la = self.value(*a).len() / n;
                let lb = self.value(*b).len() / n;
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(n * la);
                    for s in 0..n {
                        ga.extend_from_slice(&dy.data()[s * (la + lb)..s * (la + lb) + la]);
                    }
                    self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga));
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(n * lb);
                    for s in 0..n {
                        gb.extend_from_slice(&dy.data()[s * (la + lb) + la..(s + 1) * (la + lb)]);
                    }
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb));
                }
            }
            Op::AvgPool2(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::of_f64(0.25);
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[p * h * w + y * w + xx] =
                                    dy.data()[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::Upsample2(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for p in 0..xs[0] * xs[1] {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[p * h * w + (y / 2) * w + xx / 2] += dy.data()[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let g = dy.clone().reshape(self.shape(*x).to_vec());
                    self.accumulate(grads, *x, g);
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let (shape, data) = permute_data(dy.data(), dy.shape(), &inverse_perm(perm));
                    self.accumulate(grads, *x, Tensor::new(shape, data));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out_shape[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let dc = &dy.data()[i * m * n..(i + 1) * m * n];
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        // da = dc · op(b)ᵀ
                        gemm(false, !trans_b, m, k, n, dc, bb, T::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.clone(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let dc = &dy.data()[i * m * n..(i + 1) * m * n];
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(true, false, n, k, m, dc, aa, T::zero(), dst);
                        } else {
                            gemm(true, false, k, n, m, aa, dc, T::zero(), dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, db));
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let last = *out_shape.last().unwrap();
                    let mut dx = vec![T::zero(); dy.len()];
                    for ((yr, gr), dr) in node
                        .value
                        .data()
                        .chunks(last)
                        .zip(dy.data().chunks(last))
                        .zip(dx.chunks_mut(last))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), dx));
                }
            }
            Op::Abs(x) => {
                if self.wants(*x) {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&a, &g)| {
                            if a > T::zero() {
                                g
                            } else if a < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), data));
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    let two = T::of_f64(2.0);
                    let data =
                        self.value(*x).data().iter().zip(dy.data()).map(|(&a, &g)| two * a * g).collect();
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), data));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let v = self.value(*x);
                    let g = dy.item() / T::of_f64(v.len() as f64);
                    self.accumulate(grads, *x, Tensor::full(v.shape().to_vec(), g));
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let hw = h * wd;
        let ckk = conv_col_len(c, k);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        let mut dcol = if want_x && k != 1 { vec![T::zero(); ckk * hw] } else { Vec::new() };
        for s in 0..n {
            let xin = &xv[s * c * hw..(s + 1) * c * hw];
            let dout = &dy.data()[s * o * hw..(s + 1) * o * hw];
            if want_w {
                if k == 1 {
                    gemm(false, true, o, c, hw, dout, xin, T::one(), &mut dw);
                } else {
                    im2col(xin, c, h, wd, k, &mut col);
                    gemm(false, true, o, ckk, hw, dout, &col, T::one(), &mut dw);
                }
            }
            if want_x {
                let dst = &mut dx[s * c * hw..(s + 1) * c * hw];
                if k == 1 {
                    gemm(true, false, c, hw, o, wv, dout, T::zero(), dst);
                } else {
                    gemm(true, false, ckk, hw, o, wv, dout, T::zero(), &mut dcol);
                    col2im(&dcol, c, h, wd, k, dst);
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xs, dx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::new(ws, dw));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![T::zero(); o];
                for plane in dy.data().chunks(hw).enumerate() {
                    db[plane.0 % o] += plane.1.iter().copied().sum::<T>();
                }
                self.accumulate(grads, b, Tensor::new(vec![o], db));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let mf = T::of_f64(m as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let dyv = dy.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let want_x = self.wants(x);
        let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
        for s in 0..n {
            for g in 0..groups {
                let gi = s * groups + g;
                let (mu, rs) = (mean[gi], rstd[gi]);
                let start = (s * c + g * cpg) * spatial;
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..cpg {
                    let ch = g * cpg + ci;
                    let off = start + ci * spatial;
                    for i in 0..spatial {
                        let xhat = (xv[off + i] - mu) * rs;
                        let d = dyv[off + i];
                        dgamma[ch] += d * xhat;
                        dbeta[ch] += d;
                        let dxhat = d * gv[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
                if want_x {
                    for ci in 0..cpg {
                        let ch = g * cpg + ci;
                        let off = start + ci * spatial;
                        for i in 0..spatial {
                            let xhat = (xv[off + i] - mu) * rs;
                            let dxhat = dyv[off + i] * gv[ch];
                            dx[off + i] = rs / mf * (mf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::new(xs, dx));
        }
        if self.wants(gamma) {
            self.accumulate(grads, gamma, Tensor::new(vec![c], dgamma));
        }
        if self.wants(beta) {
            self.accumulate(grads, beta, Tensor::new(vec![c], dbeta));
        }
    }
}
