//! The fixer forward pass expressed on an autodiff [`Graph`].
//!
//! `p` is the list of parameter leaves returned by [`FixerModel::bind`],
//! indexed by the layout.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

use super::deform::TAPS;
use super::model::{ConvLayer, FixerModel};

fn conv(g: &mut Graph, p: &[Var], l: ConvLayer, x: Var) -> Var {
    g.conv(x, p[l.w], Some(p[l.b]), l.geom)
}

fn conv_silu(g: &mut Graph, p: &[Var], l: ConvLayer, x: Var) -> Var {
    let y = conv(g, p, l, x);
    g.silu(y)
}

/// Maps `[0, 1]` pixels to `[-1, 1]`.
pub(crate) fn normalize_input(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// Average-pools a `1 x H x W` mask by `2^scale`.
pub(crate) fn pool_mask(mask: &Tensor, scale: usize) -> Tensor {
    let (_, h, w) = mask.dims3();
    let f = 1 << scale;
    let (hs, ws) = (h / f, w / f);
    let mut out = vec![0.0; hs * ws];
    let norm = (f * f) as f64;
    for y in 0..hs {
        for x in 0..ws {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    s += mask.data()[(y * f + dy) * w + x * f + dx];
                }
            }
            out[y * ws + x] = s / norm;
        }
    }
    Tensor::new(vec![1, hs, ws], out)
}

/// Encoder on a normalized `C x H x W` input: `(latent, taps)`, taps finest first.
pub(crate) fn encode(g: &mut Graph, m: &FixerModel, p: &[Var], x: Var) -> (Var, Vec<Var>) {
    let l = &m.layout;
    let mut h = conv_silu(g, p, l.stem, x);
    let mut taps = Vec::with_capacity(l.enc_convs.len());
    let last = l.enc_convs.len() - 1;
    for i in 0..=last {
        h = conv_silu(g, p, l.enc_convs[i], h);
        taps.push(h);
        h = if i < last {
            conv_silu(g, p, l.enc_downs[i], h)
        } else {
            conv(g, p, l.enc_downs[i], h)
        };
    }
    (h, taps)
}

/// Joint attention over the concatenated token sequences of both latents;
/// returns the updated `(degraded, reference)` latents.
pub(crate) fn mixed_attention(g: &mut Graph, m: &FixerModel, p: &[Var], zd: Var, zr: Var) -> (Var, Var) {
    let (_, h, w) = g.value(zd).dims3();
    let n = h * w;
    let td = g.to_tokens(zd);
    let tr = g.to_tokens(zr);
    let mut t = g.concat_rows(td, tr);
    t = attention_blocks(g, m, p, t);
    let d = g.slice_rows(t, 0, n);
    let r = g.slice_rows(t, n, n);
    (g.from_tokens(d, h, w), g.from_tokens(r, h, w))
}

/// `t := t + softmax(Q K^T / sqrt(d)) V` for every block.
pub(crate) fn attention_blocks(g: &mut Graph, m: &FixerModel, p: &[Var], mut t: Var) -> Var {
    for blk in &m.layout.attn {
        let q = g.linear(t, p[blk.q.w], p[blk.q.b]);
        let k = g.linear(t, p[blk.k.w], p[blk.k.b]);
        let v = g.linear(t, p[blk.v.w], p[blk.v.b]);
        let a = g.attention(q, k, v, m.config().heads);
        t = g.add(t, a);
    }
    t
}

/// Offset predictor at `scale`: `(offsets in [-R, R], mask in [0, 1])`.
pub(crate) fn predict_offsets(
    g: &mut Graph,
    m: &FixerModel,
    p: &[Var],
    scale: usize,
    fd: Var,
    fr: Var,
    valid: Var,
) -> (Var, Var) {
    let l = &m.layout.ldi[scale];
    let x = g.concat(&[fd, fr, valid]);
    let hdn = conv_silu(g, p, l.pred1, x);
    let raw = conv(g, p, l.pred2, hdn);
    let off = g.slice_channels(raw, 0, 2 * TAPS);
    let off = g.tanh(off);
    let off = g.scale(off, m.config().max_offset);
    let mask = g.slice_channels(raw, 2 * TAPS, TAPS);
    let mask = g.sigmoid(mask);
    (off, mask)
}

/// `f_ref + DCN(f_ref, offsets, mask)`.
pub(crate) fn deformable_sample(
    g: &mut Graph,
    weight: Var,
    bias: Var,
    fr: Var,
    off: Var,
    mask: Var,
) -> Var {
    let d = g.deform_conv(fr, off, mask, weight, bias);
    g.add(fr, d)
}

/// Confidence map from the gate convolution.
pub(crate) fn gate(g: &mut Graph, m: &FixerModel, p: &[Var], scale: usize, fd: Var, fra: Var, valid: Var) -> Var {
    let x = g.concat(&[fd, fra, valid]);
    let z = conv(g, p, m.layout.ldi[scale].gate, x);
    g.sigmoid(z)
}

/// `G * f_deg + (1 - G) * f_ref_aligned`.
pub(crate) fn fuse(g: &mut Graph, gate: Var, fd: Var, fra: Var) -> Var {
    let a = g.mul(gate, fd);
    let inv = g.one_minus(gate);
    let b = g.mul(inv, fra);
    g.add(a, b)
}

/// Decoder: returns the `C x H x W` output in `[0, 1]`.
pub(crate) fn decode(g: &mut Graph, m: &FixerModel, p: &[Var], z: Var, fused: &[Var]) -> Var {
    let l = &m.layout;
    let mut h = conv_silu(g, p, l.dec_in, z);
    for i in (0..fused.len()).rev() {
        h = g.upsample2x(h);
        let cat = g.concat(&[h, fused[i]]);
        h = conv_silu(g, p, l.dec_merge[i], cat);
        h = conv_silu(g, p, l.dec_convs[i], h);
    }
    let out = conv(g, p, l.dec_out, h);
    g.sigmoid(out)
}

/// Full pipeline on `[0, 1]` image tensors; `valid` is the `1 x H x W`
/// validity mask of the warped reference (1 = valid). Invalid pixels of
/// `warped` must already be zero-filled.
pub(crate) fn forward(
    g: &mut Graph,
    m: &FixerModel,
    p: &[Var],
    degraded: &Tensor,
    warped: &Tensor,
    valid: &Tensor,
) -> Var {
    let xd = g.constant(normalize_input(degraded));
    let xr = g.constant(normalize_input(warped));
    let (zd, fd) = encode(g, m, p, xd);
    let (zr, fr) = encode(g, m, p, xr);
    let (zd, _) = mixed_attention(g, m, p, zd, zr);
    let mut fused = Vec::with_capacity(fd.len());
    for i in 0..fd.len() {
        if !m.config().use_ldi {
            fused.push(g.add(fd[i], fr[i]));
            continue;
        }
        let v = g.constant(pool_mask(valid, i));
        let (off, mask) = predict_offsets(g, m, p, i, fd[i], fr[i], v);
        let l = &m.layout.ldi[i];
        let fra = deformable_sample(g, p[l.dcn_w], p[l.dcn_b], fr[i], off, mask);
        let gt = gate(g, m, p, i, fd[i], fra, v);
        fused.push(fuse(g, gt, fd[i], fra));
    }
    decode(g, m, p, zd, &fused)
}
