//! Dense `f64` tensors and the convolution / matrix kernels the network is
//! built from. Feature maps are planar `C x H x W`; token matrices are `N x C`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    /// Normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected C x H x W, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// One channel plane of a `C x H x W` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.dims3();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    /// Concatenates `C x H x W` tensors along channels.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        let (_, h, w) = parts[0].dims3();
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            let (pc, ph, pw) = p.dims3();
            assert_eq!((ph, pw), (h, w), "spatial mismatch in channel concat");
            data.extend_from_slice(&p.data);
            c += pc;
        }
        Tensor::new(vec![c, h, w], data)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// "Same" 3x3 convolution.
    pub const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
    /// 1x1 convolution.
    pub const POINT: ConvGeom = ConvGeom::new(1, 1, 0);
    /// 3x3 convolution that halves the resolution.
    pub const DOWN3: ConvGeom = ConvGeom::new(3, 2, 1);

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `[0, w)`.
#[inline]
fn valid_cols(g: ConvGeom, kx: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if w + g.pad > kx {
        ((w + g.pad - kx - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unrolls `C x H x W` input patches into a `(C*k*k) x (Ho*Wo)` matrix.
pub fn im2col(input: &[f64], c: usize, h: usize, w: usize, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, w, wo);
                if lo >= hi {
                    continue;
                }
                let x0 = (lo * g.stride + kx) - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let d = &mut dst[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        d.copy_from_slice(&src_row[x0..x0 + (hi - lo)]);
                    } else {
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src_row[x0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input grid.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_cols(g, kx, w, wo);
                if lo >= hi {
                    continue;
                }
                let x0 = (lo * g.stride + kx) - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst_row[x0..x0 + (hi - lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dst_row[x0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution. `weight` is `O x C x k x k`, `bias` has `O` entries.
/// Returns the output tensor and the unrolled input (needed for the backward pass).
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeom,
) -> (Tensor, Vec<f64>) {
    let (c, h, w) = input.dims3();
    let o = weight.shape()[0];
    assert_eq!(
        weight.shape(),
        &[o, c, g.kernel, g.kernel],
        "conv weight shape does not match input channels"
    );
    let (ho, wo) = g.out_size(h, w);
    let cols = if g == ConvGeom::POINT {
        input.data().to_vec()
    } else {
        im2col(input.data(), c, h, w, g)
    };
    let ckk = c * g.kernel * g.kernel;
    let mut out = vec![0.0; o * ho * wo];
    if let Some(b) = bias {
        for (oc, &bv) in b.data().iter().enumerate() {
            out[oc * ho * wo..(oc + 1) * ho * wo].fill(bv);
        }
    }
    gemm(o, ckk, ho * wo, 1.0, weight.data(), false, &cols, false, 1.0, &mut out);
    (Tensor::new(vec![o, ho, wo], out), cols)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cols: &[f64],
    input_shape: (usize, usize, usize),
    weight: &Tensor,
    g: ConvGeom,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (c, h, w) = input_shape;
    let (o, ho, wo) = grad_out.dims3();
    let ckk = c * g.kernel * g.kernel;
    let n = ho * wo;
    let mut dw = vec![0.0; o * ckk];
    gemm(o, n, ckk, 1.0, grad_out.data(), false, cols, true, 0.0, &mut dw);
    let db = (0..o)
        .map(|oc| grad_out.data()[oc * n..(oc + 1) * n].iter().sum())
        .collect();
    let di = need_input.then(|| {
        let mut dcols = vec![0.0; ckk * n];
        gemm(ckk, o, n, 1.0, weight.data(), true, grad_out.data(), false, 0.0, &mut dcols);
        if g == ConvGeom::POINT {
            dcols
        } else {
            col2im(&dcols, c, h, w, g)
        }
    });
    (di, dw, db)
}

/// Bilinear footprint of a continuous sample position: the four integer
/// corners `(y, x)` with their weights, in the order
/// `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`.
#[inline]
pub fn bilinear_corners(py: f64, px: f64) -> [(isize, isize, f64); 4] {
    let y0 = py.floor();
    let x0 = px.floor();
    let ly = py - y0;
    let lx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1, (1.0 - ly) * lx),
        (y0 + 1, x0, ly * (1.0 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ]
}
