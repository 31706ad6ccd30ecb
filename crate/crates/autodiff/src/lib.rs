//! Tape-based reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The graph is built eagerly: every op computes its value immediately and
//! records itself on the tape. `Graph::backward` then walks the tape in
//! reverse and accumulates vector-Jacobian products. Values are kept in
//! standard (row-major) layout so reshapes are views.
//!
//! Only the ops needed by small encoder-decoder vision networks are provided:
//! convolution, bias, pointwise nonlinearities, window-partitioned attention
//! primitives, normalization, pooling/upsampling and scalar reductions.

mod adam;
mod conv;

pub use adam::Adam;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, NdFloat};

/// Scalar element type of a graph. Implemented for `f32` and `f64`; the f64
/// instantiation exists for finite-difference gradient verification.
pub trait Element: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    /// y = conv2d(x, w) with square kernel, symmetric zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    /// y = x + b broadcast over (N, _, H, W), b has shape (C,).
    BiasAdd { x: NodeId, b: NodeId },
    Relu(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    AddConst(NodeId, F),
    ConcatC(NodeId, NodeId),
    UpNearest2(NodeId),
    AvgPool2(NodeId),
    /// Bilinear resize of (N, C, H, W) to (N, C, oh, ow), half-pixel centers.
    UpBilinear { x: NodeId, oh: usize, ow: usize },
    /// Channel layer norm: normalize each (n, :, h, w) fiber, then affine.
    LayerNormCh {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// (N, C, H, W) -> (N*win_count*heads, win*win, C/heads)
    WinPart {
        x: NodeId,
        win: usize,
        heads: usize,
    },
    /// Inverse of WinPart back to (n, c, h, w).
    WinMerge {
        x: NodeId,
        win: usize,
        heads: usize,
    },
    /// Batched matmul on (B, _, _) with optional transposes.
    BatchMatmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Scalar sum of x[:, :, y0..y0+n, x0..x0+n].
    SumWindow {
        x: NodeId,
        y0: usize,
        x0: usize,
        n: usize,
    },
    Reshape { x: NodeId, orig: Vec<usize> },
}

struct Node<F: Element> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by `NodeId`.
pub struct Gradients<F: Element> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Eagerly-evaluated computation tape.
pub struct Graph<F: Element> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> F {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> NodeId {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let y = conv::conv2d_forward(self.value(x), self.value(w), stride, pad);
        let rg = self.needs(x) || self.needs(w);
        self.push(y, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.shape()[1];
        assert_eq!(bv.len(), c, "bias length must match channel count");
        let mut y = xv.clone();
        let (n, _, h, w) = dims4(xv);
        {
            let ys = y.as_slice_mut().unwrap();
            let bs = bv.as_slice().unwrap();
            let hw = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let bval = bs[ci];
                    for v in &mut ys[base..base + hw] {
                        *v += bval;
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(b);
        self.push(y, Op::BiasAdd { x, b }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.needs(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(gelu_val);
        let rg = self.needs(x);
        self.push(y, Op::Gelu(x), rg)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(softplus_val);
        let rg = self.needs(x);
        self.push(y, Op::Softplus(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.exp());
        let rg = self.needs(x);
        self.push(y, Op::Exp(x), rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.abs());
        let rg = self.needs(x);
        self.push(y, Op::Abs(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let y = self.value(a) + self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let y = self.value(a) - self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let y = self.value(a) * self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let y = self.value(x).mapv(|v| v * c);
        let rg = self.needs(x);
        self.push(y, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: F) -> NodeId {
        let y = self.value(x).mapv(|v| v + c);
        let rg = self.needs(x);
        self.push(y, Op::AddConst(x, c), rg)
    }

    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let y = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::ConcatC(a, b), rg)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let mut y = ArrayD::zeros(vec![n, c, h * 2, w * 2]);
        {
            let xs = xv.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let xb = nc * h * w;
                let yb = nc * 4 * h * w;
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xs[xb + iy * w + ix];
                        let o = yb + (2 * iy) * (2 * w) + 2 * ix;
                        ys[o] = v;
                        ys[o + 1] = v;
                        ys[o + 2 * w] = v;
                        ys[o + 2 * w + 1] = v;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(y, Op::UpNearest2(x), rg)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = F::from_f64(0.25);
        let mut y = ArrayD::zeros(vec![n, c, oh, ow]);
        {
            let xs = xv.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let xb = nc * h * w;
                let yb = nc * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = xb + (2 * oy) * w + 2 * ox;
                        ys[yb + oy * ow + ox] =
                            (xs[i] + xs[i + 1] + xs[i + w] + xs[i + w + 1]) * quarter;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(y, Op::AvgPool2(x), rg)
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let (ti, tw) = bilinear_table(h, oh);
        let (si, sw) = bilinear_table(w, ow);
        let mut y = ArrayD::zeros(vec![n, c, oh, ow]);
        {
            let xs = xv.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for nc in 0..n * c {
                let xb = nc * h * w;
                let yb = nc * oh * ow;
                for oy in 0..oh {
                    let (y0, y1) = ti[oy];
                    let wy = F::from_f64(tw[oy]);
                    let onew = F::one() - wy;
                    for ox in 0..ow {
                        let (x0, x1) = si[ox];
                        let wx = F::from_f64(sw[ox]);
                        let a = xs[xb + y0 * w + x0];
                        let b = xs[xb + y0 * w + x1];
                        let cc = xs[xb + y1 * w + x0];
                        let d = xs[xb + y1 * w + x1];
                        let top = a + (b - a) * wx;
                        let bot = cc + (d - cc) * wx;
                        ys[yb + oy * ow + ox] = top * onew + bot * wy;
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(y, Op::UpBilinear { x, oh, ow }, rg)
    }

    pub fn layer_norm_ch(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (n, c, h, w) = dims4(xv);
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut y = ArrayD::zeros(xv.raw_dim());
        {
            let xs = xv.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let gs = gv.as_slice().unwrap();
            let bs = bv.as_slice().unwrap();
            let hw = h * w;
            let epsf = F::from_f64(eps);
            let cf = F::from_f64(c as f64);
            for ni in 0..n {
                for p in 0..hw {
                    let mut mean = F::zero();
                    for ci in 0..c {
                        mean += xs[(ni * c + ci) * hw + p];
                    }
                    mean /= cf;
                    let mut var = F::zero();
                    for ci in 0..c {
                        let d = xs[(ni * c + ci) * hw + p] - mean;
                        var += d * d;
                    }
                    var /= cf;
                    let inv = (var + epsf).sqrt().recip();
                    for ci in 0..c {
                        let idx = (ni * c + ci) * hw + p;
                        ys[idx] = gs[ci] * (xs[idx] - mean) * inv + bs[ci];
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(y, Op::LayerNormCh { x, gamma, beta, eps }, rg)
    }

    /// Split (N, C, H, W) into non-overlapping `win`x`win` windows and heads:
    /// output (N * windows * heads, win*win, C/heads).
    pub fn win_part(&mut self, x: NodeId, win: usize, heads: usize) -> NodeId {
        let xv = self.value(x);
        let (_, c, h, w) = dims4(xv);
        assert!(h % win == 0 && w % win == 0, "window must tile the map");
        assert!(c % heads == 0, "heads must divide channels");
        let y = win_part_forward(xv, win, heads);
        let rg = self.needs(x);
        self.push(y, Op::WinPart { x, win, heads }, rg)
    }

    /// Inverse of `win_part` back to (n, c, h, w).
    pub fn win_merge(
        &mut self,
        x: NodeId,
        win: usize,
        heads: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> NodeId {
        let y = win_merge_forward(self.value(x), win, heads, n, c, h, w);
        let rg = self.needs(x);
        self.push(y, Op::WinMerge { x, win, heads }, rg)
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let y = batch_matmul_forward(self.value(a), self.value(b), ta, tb);
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::BatchMatmul { a, b, ta, tb }, rg)
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("softmax needs an axis");
        let mut y = xv.clone();
        {
            let ys = y.as_slice_mut().unwrap();
            for row in ys.chunks_mut(d) {
                let mut m = row[0];
                for &v in row.iter() {
                    if v > m {
                        m = v;
                    }
                }
                let mut s = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                let inv = s.recip();
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let rg = self.needs(x);
        self.push(y, Op::SoftmaxLast(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.needs(x);
        self.push(scalar0(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.sum() / F::from_f64(v.len() as f64);
        let rg = self.needs(x);
        self.push(scalar0(s), Op::MeanAll(x), rg)
    }

    /// Sum of the n-by-n spatial window over every batch element and channel.
    pub fn sum_window(&mut self, x: NodeId, y0: usize, x0: usize, n: usize) -> NodeId {
        let xv = self.value(x);
        let (nb, c, h, w) = dims4(xv);
        assert!(y0 + n <= h && x0 + n <= w, "window out of bounds");
        let xs = xv.as_slice().unwrap();
        let mut s = F::zero();
        for bc in 0..nb * c {
            let base = bc * h * w;
            for iy in y0..y0 + n {
                for ix in x0..x0 + n {
                    s += xs[base + iy * w + ix];
                }
            }
        }
        let rg = self.needs(x);
        self.push(scalar0(s), Op::SumWindow { x, y0, x0, n }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let xv = self.value(x);
        let orig = xv.shape().to_vec();
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape must preserve element count"
        );
        let y = xv
            .clone()
            .into_shape_with_order(shape.to_vec())
            .expect("standard layout reshape");
        let rg = self.needs(x);
        self.push(y, Op::Reshape { x, orig }, rg)
    }

    /// Reverse pass from a 0-d output node.
    pub fn backward(&self, out: NodeId) -> Gradients<F> {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(scalar0(F::one()));

        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let keep_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.backprop_node(id, &gy, &mut grads);
            if keep_leaf {
                grads[id] = Some(gy);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, id: usize, gy: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    acc(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    acc(&mut grads[w.0], dw);
                }
            }
            Op::BiasAdd { x, b } => {
                if self.needs(*x) {
                    acc(&mut grads[x.0], gy.clone());
                }
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let (n, _, h, w) = dims4(gy);
                    let gys = gy.as_slice().unwrap();
                    let mut db = vec![F::zero(); c];
                    let hw = h * w;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = F::zero();
                            for &g in &gys[base..base + hw] {
                                s += g;
                            }
                            db[ci] += s;
                        }
                    }
                    acc(&mut grads[b.0], ArrayD::from_shape_vec(vec![c], db).unwrap());
                }
            }
            Op::Relu(x) => {
                let mut dx = gy.clone();
                dx.zip_mut_with(self.value(*x), |g, &v| {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                });
                acc(&mut grads[x.0], dx);
            }
            Op::Gelu(x) => {
                let mut dx = gy.clone();
                dx.zip_mut_with(self.value(*x), |g, &v| *g *= gelu_grad(v));
                acc(&mut grads[x.0], dx);
            }
            Op::Softplus(x) => {
                let mut dx = gy.clone();
                dx.zip_mut_with(self.value(*x), |g, &v| {
                    *g *= (F::one() + (-v).exp()).recip();
                });
                acc(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let mut dx = gy.clone();
                dx.zip_mut_with(&self.nodes[id].value, |g, &y| *g *= y);
                acc(&mut grads[x.0], dx);
            }
            Op::Abs(x) => {
                let mut dx = gy.clone();
                dx.zip_mut_with(self.value(*x), |g, &v| {
                    *g *= if v > F::zero() {
                        F::one()
                    } else if v < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                });
                acc(&mut grads[x.0], dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], gy.clone());
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], gy.clone());
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], gy.mapv(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], gy * self.value(*b));
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], gy * self.value(*a));
                }
            }
            Op::Scale(x, c) => {
                acc(&mut grads[x.0], gy.mapv(|g| g * *c));
            }
            Op::AddConst(x, _) => {
                acc(&mut grads[x.0], gy.clone());
            }
            Op::ConcatC(a, b) => {
                let ca = self.value(*a).shape()[1];
                let ga = gy
                    .slice_axis(Axis(1), ndarray::Slice::from(0..ca))
                    .as_standard_layout()
                    .to_owned();
                let gb = gy
                    .slice_axis(Axis(1), ndarray::Slice::from(ca..))
                    .as_standard_layout()
                    .to_owned();
                if self.needs(*a) {
                    acc(&mut grads[a.0], ga);
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], gb);
                }
            }
            Op::UpNearest2(x) => {
                let (n, c, h2, w2) = dims4(gy);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ArrayD::zeros(vec![n, c, h, w]);
                {
                    let gs = gy.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let gb = nc * h2 * w2;
                        let db = nc * h * w;
                        for iy in 0..h {
                            for ix in 0..w {
                                let o = gb + (2 * iy) * w2 + 2 * ix;
                                ds[db + iy * w + ix] =
                                    gs[o] + gs[o + 1] + gs[o + w2] + gs[o + w2 + 1];
                            }
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::AvgPool2(x) => {
                let (n, c, oh, ow) = dims4(gy);
                let (h, w) = (oh * 2, ow * 2);
                let quarter = F::from_f64(0.25);
                let mut dx = ArrayD::zeros(vec![n, c, h, w]);
                {
                    let gs = gy.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let gb = nc * oh * ow;
                        let db = nc * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gs[gb + oy * ow + ox] * quarter;
                                let i = db + (2 * oy) * w + 2 * ox;
                                ds[i] += g;
                                ds[i + 1] += g;
                                ds[i + w] += g;
                                ds[i + w + 1] += g;
                            }
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::UpBilinear { x, oh, ow } => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv);
                let (ti, tw) = bilinear_table(h, *oh);
                let (si, sw) = bilinear_table(w, *ow);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                {
                    let gs = gy.as_slice().unwrap();
                    let ds = dx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        let gb = nc * oh * ow;
                        let db = nc * h * w;
                        for oy in 0..*oh {
                            let (y0, y1) = ti[oy];
                            let wy = F::from_f64(tw[oy]);
                            let onew = F::one() - wy;
                            for ox in 0..*ow {
                                let (x0, x1) = si[ox];
                                let wx = F::from_f64(sw[ox]);
                                let g = gs[gb + oy * ow + ox];
                                ds[db + y0 * w + x0] += g * onew * (F::one() - wx);
                                ds[db + y0 * w + x1] += g * onew * wx;
                                ds[db + y1 * w + x0] += g * wy * (F::one() - wx);
                                ds[db + y1 * w + x1] += g * wy * wx;
                            }
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::LayerNormCh { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let (n, c, h, w) = dims4(xv);
                let hw = h * w;
                let cf = F::from_f64(c as f64);
                let epsf = F::from_f64(*eps);
                let xs = xv.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let gs = gv.as_slice().unwrap();
                let mut dx = ArrayD::zeros(xv.raw_dim());
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for p in 0..hw {
                            let mut mean = F::zero();
                            for ci in 0..c {
                                mean += xs[(ni * c + ci) * hw + p];
                            }
                            mean /= cf;
                            let mut var = F::zero();
                            for ci in 0..c {
                                let d = xs[(ni * c + ci) * hw + p] - mean;
                                var += d * d;
                            }
                            var /= cf;
                            let inv = (var + epsf).sqrt().recip();
                            // dxhat = gy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                            let mut m1 = F::zero();
                            let mut m2 = F::zero();
                            for ci in 0..c {
                                let idx = (ni * c + ci) * hw + p;
                                let xhat = (xs[idx] - mean) * inv;
                                let dxh = gys[idx] * gs[ci];
                                m1 += dxh;
                                m2 += dxh * xhat;
                                dgamma[ci] += gys[idx] * xhat;
                                dbeta[ci] += gys[idx];
                            }
                            m1 /= cf;
                            m2 /= cf;
                            for ci in 0..c {
                                let idx = (ni * c + ci) * hw + p;
                                let xhat = (xs[idx] - mean) * inv;
                                let dxh = gys[idx] * gs[ci];
                                ds[idx] = inv * (dxh - m1 - xhat * m2);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    acc(&mut grads[x.0], dx);
                }
                if self.needs(*gamma) {
                    acc(
                        &mut grads[gamma.0],
                        ArrayD::from_shape_vec(vec![c], dgamma).unwrap(),
                    );
                }
                if self.needs(*beta) {
                    acc(
                        &mut grads[beta.0],
                        ArrayD::from_shape_vec(vec![c], dbeta).unwrap(),
                    );
                }
            }
            Op::WinPart { x, win, heads } => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv);
                let dx = win_merge_forward(gy, *win, *heads, n, c, h, w);
                acc(&mut grads[x.0], dx);
            }
            Op::WinMerge {
                x, win, heads, ..
            } => {
                let dx = win_part_forward(gy, *win, *heads);
                acc(&mut grads[x.0], dx);
            }
            Op::BatchMatmul { a, b, ta, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    // C = opA(A) opB(B): d opA(A) = gy opB(B)^T
                    let da = if *ta {
                        // A^T's grad transposed back: (opB(B) gy^T)
                        batch_matmul_forward(bv, gy, *tb, true)
                    } else {
                        batch_matmul_forward(gy, bv, false, !*tb)
                    };
                    acc(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let db = if *tb {
                        batch_matmul_forward(gy, av, true, *ta)
                    } else {
                        batch_matmul_forward(av, gy, !*ta, false)
                    };
                    acc(&mut grads[b.0], db);
                }
            }
            Op::SoftmaxLast(x) => {
                let yv = &self.nodes[id].value;
                let d = *yv.shape().last().unwrap();
                let mut dx = gy.clone();
                {
                    let ds = dx.as_slice_mut().unwrap();
                    let ys = yv.as_slice().unwrap();
                    for (drow, yrow) in ds.chunks_mut(d).zip(ys.chunks(d)) {
                        let mut dot = F::zero();
                        for (g, y) in drow.iter().zip(yrow.iter()) {
                            dot += *g * *y;
                        }
                        for (g, y) in drow.iter_mut().zip(yrow.iter()) {
                            *g = *y * (*g - dot);
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::SumAll(x) => {
                let g = gy.iter().next().copied().unwrap();
                let xv = self.value(*x);
                acc(&mut grads[x.0], ArrayD::from_elem(xv.raw_dim(), g));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = gy.iter().next().copied().unwrap() / F::from_f64(xv.len() as f64);
                acc(&mut grads[x.0], ArrayD::from_elem(xv.raw_dim(), g));
            }
            Op::SumWindow { x, y0, x0, n } => {
                let g = gy.iter().next().copied().unwrap();
                let xv = self.value(*x);
                let (nb, c, h, w) = dims4(xv);
                let mut dx = ArrayD::zeros(xv.raw_dim());
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for bc in 0..nb * c {
                        let base = bc * h * w;
                        for iy in *y0..y0 + n {
                            for ix in *x0..x0 + n {
                                ds[base + iy * w + ix] = g;
                            }
                        }
                    }
                }
                acc(&mut grads[x.0], dx);
            }
            Op::Reshape { x, orig } => {
                let dx = gy
                    .clone()
                    .into_shape_with_order(orig.clone())
                    .expect("reshape grad");
                acc(&mut grads[x.0], dx);
            }
        }
    }
}

fn acc<F: Element>(slot: &mut Option<ArrayD<F>>, g: ArrayD<F>) {
    match slot {
        None => *slot = Some(g),
        Some(s) => *s += &g,
    }
}

fn scalar0<F: Element>(v: F) -> ArrayD<F> {
    ArrayD::from_elem(ndarray::IxDyn(&[]), v)
}

pub(crate) fn dims4<F>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn gelu_val<F: Element>(x: F) -> F {
    // tanh approximation
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn softplus_val<F: Element>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let m = if x > F::zero() { x } else { F::zero() };
    m + (-x.abs()).exp().ln_1p()
}

/// Source indices and interpolation weights for half-pixel bilinear resize.
fn bilinear_table(in_len: usize, out_len: usize) -> (Vec<(usize, usize)>, Vec<f64>) {
    let scale = in_len as f64 / out_len as f64;
    let mut idx = Vec::with_capacity(out_len);
    let mut wts = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let f = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w = (f - i0 as f64).clamp(0.0, 1.0);
        idx.push((i0, i1));
        wts.push(w);
    }
    (idx, wts)
}

fn win_part_forward<F: Element>(x: &ArrayD<F>, win: usize, heads: usize) -> ArrayD<F> {
    let (n, c, h, w) = dims4(x);
    let (nwh, nww) = (h / win, w / win);
    let d = c / heads;
    let t = win * win;
    let mut y = ArrayD::zeros(vec![n * nwh * nww * heads, t, d]);
    {
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for wy in 0..nwh {
                for wx in 0..nww {
                    for hd in 0..heads {
                        let b = ((ni * nwh + wy) * nww + wx) * heads + hd;
                        for iy in 0..win {
                            for ix in 0..win {
                                let ti = iy * win + ix;
                                let (py, px) = (wy * win + iy, wx * win + ix);
                                for dd in 0..d {
                                    let ci = hd * d + dd;
                                    ys[(b * t + ti) * d + dd] =
                                        xs[((ni * c + ci) * h + py) * w + px];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn win_merge_forward<F: Element>(
    x: &ArrayD<F>,
    win: usize,
    heads: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ArrayD<F> {
    let (nwh, nww) = (h / win, w / win);
    let d = c / heads;
    let t = win * win;
    assert_eq!(x.shape(), &[n * nwh * nww * heads, t, d]);
    let mut y = ArrayD::zeros(vec![n, c, h, w]);
    {
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for wy in 0..nwh {
                for wx in 0..nww {
                    for hd in 0..heads {
                        let b = ((ni * nwh + wy) * nww + wx) * heads + hd;
                        for iy in 0..win {
                            for ix in 0..win {
                                let ti = iy * win + ix;
                                let (py, px) = (wy * win + iy, wx * win + ix);
                                for dd in 0..d {
                                    let ci = hd * d + dd;
                                    ys[((ni * c + ci) * h + py) * w + px] =
                                        xs[(b * t + ti) * d + dd];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn batch_matmul_forward<F: Element>(a: &ArrayD<F>, b: &ArrayD<F>, ta: bool, tb: bool) -> ArrayD<F> {
    let sa = a.shape();
    let sb = b.shape();
    assert_eq!(sa.len(), 3, "batch matmul expects (B, _, _)");
    assert_eq!(sb.len(), 3);
    assert_eq!(sa[0], sb[0], "batch dims must agree");
    let bsz = sa[0];
    let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, nn) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    assert_eq!(ka, kb, "inner dims must agree");
    let mut y = ArrayD::zeros(vec![bsz, m, nn]);
    for i in 0..bsz {
        let av = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let bv = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut yv = y
            .index_axis_mut(Axis(0), i)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let al = if ta { av.reversed_axes() } else { av };
        let bl = if tb { bv.reversed_axes() } else { bv };
        ndarray::linalg::general_mat_mul(F::one(), &al, &bl, F::zero(), &mut yv);
    }
    y
}

/// Convenience view of a graph value as ArrayViewD.
pub fn view<F: Element>(g: &Graph<F>, id: NodeId) -> ArrayViewD<'_, F> {
    g.value(id).view()
}
