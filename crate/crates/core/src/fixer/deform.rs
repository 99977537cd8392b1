//! Modulated deformable 3x3 sampling kernels.
//!
//! Layout follows the common DCNv2 convention: for tap `k = ky * 3 + kx`,
//! channel `2k` of the offset tensor is the vertical offset and `2k + 1` the
//! horizontal one. Samples falling outside the grid read as zero.

use crate::tensor::bilinear_corners;

pub const TAPS: usize = 9;

#[inline]
fn tap_base(k: usize) -> (f64, f64) {
    ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0)
}

#[inline]
fn sample(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Gathers masked, offset samples into a `(C*9) x (H*W)` column matrix whose
/// row index is `c * 9 + k`.
pub fn deform_im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    offsets: &[f64],
    mask: &[f64],
) -> Vec<f64> {
    let hw = h * w;
    debug_assert_eq!(offsets.len(), 2 * TAPS * hw);
    debug_assert_eq!(mask.len(), TAPS * hw);
    let mut cols = vec![0.0; c * TAPS * hw];
    for k in 0..TAPS {
        let (by, bx) = tap_base(k);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let m = mask[k * hw + p];
                let py = y as f64 + by + offsets[2 * k * hw + p];
                let px = x as f64 + bx + offsets[(2 * k + 1) * hw + p];
                let corners = bilinear_corners(py, px);
                for ch in 0..c {
                    let plane = &input[ch * hw..(ch + 1) * hw];
                    let v: f64 = corners
                        .iter()
                        .map(|&(cy, cx, wt)| wt * sample(plane, h, w, cy, cx))
                        .sum();
                    cols[(ch * TAPS + k) * hw + p] = m * v;
                }
            }
        }
    }
    cols
}

/// Gradients of [`deform_im2col`] given the gradient of its columns:
/// `(d_input, d_offsets, d_mask)`.
pub fn deform_col_backward(
    dcols: &[f64],
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    offsets: &[f64],
    mask: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut d_input = vec![0.0; c * hw];
    let mut d_off = vec![0.0; 2 * TAPS * hw];
    let mut d_mask = vec![0.0; TAPS * hw];
    for k in 0..TAPS {
        let (by, bx) = tap_base(k);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let m = mask[k * hw + p];
                let py = y as f64 + by + offsets[2 * k * hw + p];
                let px = x as f64 + bx + offsets[(2 * k + 1) * hw + p];
                let y0 = py.floor();
                let x0 = px.floor();
                let ly = py - y0;
                let lx = px - x0;
                let (y0, x0) = (y0 as isize, x0 as isize);
                let corners = bilinear_corners(py, px);
                let mut gm = 0.0;
                let mut gy = 0.0;
                let mut gx = 0.0;
                for ch in 0..c {
                    let g = dcols[(ch * TAPS + k) * hw + p];
                    if g == 0.0 {
                        continue;
                    }
                    let plane = &input[ch * hw..(ch + 1) * hw];
                    let v00 = sample(plane, h, w, y0, x0);
                    let v01 = sample(plane, h, w, y0, x0 + 1);
                    let v10 = sample(plane, h, w, y0 + 1, x0);
                    let v11 = sample(plane, h, w, y0 + 1, x0 + 1);
                    let val = corners[0].2 * v00
                        + corners[1].2 * v01
                        + corners[2].2 * v10
                        + corners[3].2 * v11;
                    gm += g * val;
                    let gv = g * m;
                    gy += gv * (-(1.0 - lx) * v00 - lx * v01 + (1.0 - lx) * v10 + lx * v11);
                    gx += gv * (-(1.0 - ly) * v00 + (1.0 - ly) * v01 - ly * v10 + ly * v11);
                    let dplane = &mut d_input[ch * hw..(ch + 1) * hw];
                    for &(cy, cx, wt) in &corners {
                        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                            dplane[cy as usize * w + cx as usize] += gv * wt;
                        }
                    }
                }
                d_mask[k * hw + p] = gm;
                d_off[2 * k * hw + p] = gy;
                d_off[(2 * k + 1) * hw + p] = gx;
            }
        }
    }
    (d_input, d_off, d_mask)
}
