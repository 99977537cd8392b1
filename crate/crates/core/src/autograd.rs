//! A small reverse-mode automatic differentiation tape.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for every node that
//! (transitively) depends on a leaf created with `requires_grad = true`.
//! Backward caches (unrolled convolution inputs, attention probabilities) are
//! only kept for nodes that need them.

use crate::fixer::{attention, deform};
use crate::tensor::{conv2d_backward, conv2d_forward, gemm, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Upsample2x(Var),
    ToTokens(Var),
    FromTokens(Var),
    ConcatRows(Var, Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Deform {
        input: Var,
        offsets: Var,
        mask: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    Mse(Var, Var),
    UnitNorm {
        input: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        let rg = self.rg(a);
        self.push(v, Op::OneMinus(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Var {
        let (out, cols) = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Channel concatenation of `C x H x W` values.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&ts);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(input).dims3();
        assert!(start + len <= c, "channel slice out of range");
        let data = self.value(input).data()[start * h * w..(start + len) * h * w].to_vec();
        let rg = self.rg(input);
        self.push(
            Tensor::new(vec![len, h, w], data),
            Op::SliceChannels { input, start },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let src = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(vec![c, h2, w2], out), Op::Upsample2x(input), rg)
    }

    /// `C x H x W` feature map to an `(H*W) x C` token matrix.
    pub fn to_tokens(&mut self, input: Var) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let src = self.value(input).data();
        let n = h * w;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                out[p * c + ch] = src[ch * n + p];
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(vec![n, c], out), Op::ToTokens(input), rg)
    }

    pub fn from_tokens(&mut self, input: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.value(input).dims2();
        assert_eq!(n, h * w, "token count does not match grid");
        let src = self.value(input).data();
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = src[p * c + ch];
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(vec![c, h, w], out), Op::FromTokens(input), rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (na, ca) = self.value(a).dims2();
        let (nb, cb) = self.value(b).dims2();
        assert_eq!(ca, cb, "token width mismatch");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![na + nb, ca], data), Op::ConcatRows(a, b), rg)
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Var {
        let (n, c) = self.value(input).dims2();
        assert!(start + len <= n);
        let data = self.value(input).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(input);
        self.push(Tensor::new(vec![len, c], data), Op::SliceRows { input, start }, rg)
    }

    /// `x W + b` with `x: n x i`, `W: i x o`, `b: o`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let (n, i) = self.value(input).dims2();
        let (wi, o) = self.value(weight).dims2();
        assert_eq!(i, wi, "linear input width mismatch");
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            n,
            i,
            o,
            1.0,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            1.0,
            &mut out,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            Tensor::new(vec![n, o], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, c) = self.value(q).dims2();
        assert_eq!(self.value(k).dims2(), (n, c));
        assert_eq!(self.value(v).dims2(), (n, c));
        let (out, probs) = attention::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            c,
            heads,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![n, c], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Modulated deformable 3x3 convolution (without the residual).
    pub fn deform_conv(
        &mut self,
        input: Var,
        offsets: Var,
        mask: Var,
        weight: Var,
        bias: Var,
    ) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let o = self.value(weight).shape()[0];
        assert_eq!(self.value(weight).shape(), &[o, c, 3, 3]);
        assert_eq!(self.value(offsets).shape(), &[2 * deform::TAPS, h, w]);
        assert_eq!(self.value(mask).shape(), &[deform::TAPS, h, w]);
        let cols = deform::deform_im2col(
            self.value(input).data(),
            c,
            h,
            w,
            self.value(offsets).data(),
            self.value(mask).data(),
        );
        let mut out = vec![0.0; o * h * w];
        for (oc, &bv) in self.value(bias).data().iter().enumerate() {
            out[oc * h * w..(oc + 1) * h * w].fill(bv);
        }
        gemm(
            o,
            c * deform::TAPS,
            h * w,
            1.0,
            self.value(weight).data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        let rg = [input, offsets, mask, weight, bias]
            .iter()
            .any(|&v| self.rg(v));
        let cols = if rg { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![o, h, w], out),
            Op::Deform {
                input,
                offsets,
                mask,
                weight,
                bias,
                cols,
            },
            rg,
        )
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = s / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Mse(a, b), rg)
    }

    /// Normalizes each pixel's channel vector to unit length.
    pub fn unit_norm(&mut self, input: Var, eps: f64) -> Var {
        let (c, h, w) = self.value(input).dims3();
        let src = self.value(input).data();
        let n = h * w;
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let norm = (0..c).map(|ch| src[ch * n + p].powi(2)).sum::<f64>().sqrt() + eps;
            for ch in 0..c {
                out[ch * n + p] = src[ch * n + p] / norm;
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(vec![c, h, w], out), Op::UnitNorm { input, eps }, rg)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::OneMinus(a) => acc(&mut grads, *a, g.map(|x| -x)),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(val, |gv, y| gv * y * (1.0 - y))),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(val, |gv, y| gv * (1.0 - y * y))),
                Op::Silu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let xin = self.value(*input);
                    let (di, dw, db) = conv2d_backward(
                        &g,
                        cols,
                        xin.dims3(),
                        self.value(*weight),
                        *geom,
                        self.rg(*input),
                    );
                    if let Some(di) = di {
                        acc(&mut grads, *input, Tensor::new(xin.shape().to_vec(), di));
                    }
                    if self.rg(*weight) {
                        let ws = self.value(*weight).shape().to_vec();
                        acc(&mut grads, *weight, Tensor::new(ws, dw));
                    }
                    if let Some(b) = bias {
                        if self.rg(*b) {
                            acc(&mut grads, *b, Tensor::new(vec![db.len()], db));
                        }
                    }
                }
                Op::Concat(parts) => {
                    let (_, h, w) = val.dims3();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[0];
                        if self.rg(p) {
                            let d = g.data()[off * h * w..(off + pc) * h * w].to_vec();
                            acc(&mut grads, p, Tensor::new(vec![pc, h, w], d));
                        }
                        off += pc;
                    }
                }
                Op::SliceChannels { input, start } => {
                    let xs = self.value(*input).shape().to_vec();
                    let (h, w) = (xs[1], xs[2]);
                    let mut d = Tensor::zeros(&xs);
                    let len = val.shape()[0];
                    d.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
                    acc(&mut grads, *input, d);
                }
                Op::Upsample2x(input) => {
                    let (c, h, w) = self.value(*input).dims3();
                    let (h2, w2) = (2 * h, 2 * w);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                d[(ch * h + y / 2) * w + x / 2] += g.data()[(ch * h2 + y) * w2 + x];
                            }
                        }
                    }
                    acc(&mut grads, *input, Tensor::new(vec![c, h, w], d));
                }
                Op::ToTokens(input) => {
                    let (c, h, w) = self.value(*input).dims3();
                    let n = h * w;
                    let mut d = vec![0.0; c * n];
                    for p in 0..n {
                        for ch in 0..c {
                            d[ch * n + p] = g.data()[p * c + ch];
                        }
                    }
                    acc(&mut grads, *input, Tensor::new(vec![c, h, w], d));
                }
                Op::FromTokens(input) => {
                    let (n, c) = self.value(*input).dims2();
                    let mut d = vec![0.0; n * c];
                    for ch in 0..c {
                        for p in 0..n {
                            d[p * c + ch] = g.data()[ch * n + p];
                        }
                    }
                    acc(&mut grads, *input, Tensor::new(vec![n, c], d));
                }
                Op::ConcatRows(a, b) => {
                    let (na, c) = self.value(*a).dims2();
                    let (nb, _) = self.value(*b).dims2();
                    if self.rg(*a) {
                        acc(
                            &mut grads,
                            *a,
                            Tensor::new(vec![na, c], g.data()[..na * c].to_vec()),
                        );
                    }
                    if self.rg(*b) {
                        acc(
                            &mut grads,
                            *b,
                            Tensor::new(vec![nb, c], g.data()[na * c..].to_vec()),
                        );
                    }
                }
                Op::SliceRows { input, start } => {
                    let xs = self.value(*input).shape().to_vec();
                    let c = xs[1];
                    let mut d = Tensor::zeros(&xs);
                    let len = val.shape()[0];
                    d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    acc(&mut grads, *input, d);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (n, i) = self.value(*input).dims2();
                    let (_, o) = self.value(*weight).dims2();
                    if self.rg(*input) {
                        let mut d = vec![0.0; n * i];
                        gemm(n, o, i, 1.0, g.data(), false, self.value(*weight).data(), true, 0.0, &mut d);
                        acc(&mut grads, *input, Tensor::new(vec![n, i], d));
                    }
                    if self.rg(*weight) {
                        let mut d = vec![0.0; i * o];
                        gemm(i, n, o, 1.0, self.value(*input).data(), true, g.data(), false, 0.0, &mut d);
                        acc(&mut grads, *weight, Tensor::new(vec![i, o], d));
                    }
                    if self.rg(*bias) {
                        let mut d = vec![0.0; o];
                        for row in g.data().chunks_exact(o) {
                            for (a, b) in d.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        acc(&mut grads, *bias, Tensor::new(vec![o], d));
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (n, c) = self.value(*q).dims2();
                    let (dq, dk, dv) = attention::attention_backward(
                        g.data(),
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        n,
                        c,
                        *heads,
                    );
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.rg(var) {
                            acc(&mut grads, var, Tensor::new(vec![n, c], d));
                        }
                    }
                }
                Op::Deform {
                    input,
                    offsets,
                    mask,
                    weight,
                    bias,
                    cols,
                } => {
                    let (c, h, w) = self.value(*input).dims3();
                    let o = self.value(*weight).shape()[0];
                    let ck = c * deform::TAPS;
                    let n = h * w;
                    if self.rg(*weight) {
                        let mut dw = vec![0.0; o * ck];
                        gemm(o, n, ck, 1.0, g.data(), false, cols, true, 0.0, &mut dw);
                        acc(&mut grads, *weight, Tensor::new(vec![o, c, 3, 3], dw));
                    }
                    if self.rg(*bias) {
                        let db = (0..o).map(|oc| g.data()[oc * n..(oc + 1) * n].iter().sum()).collect();
                        acc(&mut grads, *bias, Tensor::new(vec![o], db));
                    }
                    if self.rg(*input) || self.rg(*offsets) || self.rg(*mask) {
                        let mut dcols = vec![0.0; ck * n];
                        gemm(ck, o, n, 1.0, self.value(*weight).data(), true, g.data(), false, 0.0, &mut dcols);
                        let (di, doff, dm) = deform::deform_col_backward(
                            &dcols,
                            self.value(*input).data(),
                            c,
                            h,
                            w,
                            self.value(*offsets).data(),
                            self.value(*mask).data(),
                        );
                        if self.rg(*input) {
                            acc(&mut grads, *input, Tensor::new(vec![c, h, w], di));
                        }
                        if self.rg(*offsets) {
                            acc(&mut grads, *offsets, Tensor::new(vec![2 * deform::TAPS, h, w], doff));
                        }
                        if self.rg(*mask) {
                            acc(&mut grads, *mask, Tensor::new(vec![deform::TAPS, h, w], dm));
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let gv = g.data()[0];
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let s = 2.0 * gv / ta.len() as f64;
                    if self.rg(*a) {
                        acc(&mut grads, *a, ta.zip_map(tb, |x, y| s * (x - y)));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, ta.zip_map(tb, |x, y| s * (y - x)));
                    }
                }
                Op::UnitNorm { input, eps } => {
                    let x = self.value(*input);
                    let (c, h, w) = x.dims3();
                    let n = h * w;
                    let mut d = vec![0.0; c * n];
                    for p in 0..n {
                        let r = (0..c).map(|ch| x.data()[ch * n + p].powi(2)).sum::<f64>().sqrt();
                        let s = r + eps;
                        // y = x / (|x| + eps); dy/dx = I/s - x x^T / (s^2 |x|)
                        let gx: f64 = (0..c).map(|ch| g.data()[ch * n + p] * x.data()[ch * n + p]).sum();
                        for ch in 0..c {
                            let xi = x.data()[ch * n + p];
                            let mut v = g.data()[ch * n + p] / s;
                            if r > 0.0 {
                                v -= xi * gx / (s * s * r);
                            }
                            d[ch * n + p] = v;
                        }
                    }
                    acc(&mut grads, *input, Tensor::new(vec![c, h, w], d));
                }
            }
        }
        Gradients { grads }
    }
}
