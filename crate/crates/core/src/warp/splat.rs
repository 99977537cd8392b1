//! Forward (softmax splatting) and backward (bilinear gather) warping.
//!
//! Both warps are linear in the source pixel values once the flow and the
//! importance are fixed, so each is expressed as a sparse [`WarpPlan`] that
//! can be applied forward and transposed for gradients.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::bilinear_corners;

use super::geometry::FlowField;

/// Sparse linear map from source pixels to target pixels. Entry weights are
/// already normalized per target.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    height: usize,
    width: usize,
    entries: Vec<(usize, usize, f64)>,
    valid: Vec<bool>,
}

impl WarpPlan {
    /// Target pixels that received any mass.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// `(target, source, weight)` triples.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Sum of normalized weights arriving at each target pixel.
    pub fn received_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.height * self.width];
        for &(t, _, wt) in &self.entries {
            mass[t] += wt;
        }
        mass
    }

    /// Applies the plan to interleaved `channels`-wide pixel data.
    pub fn apply(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width * channels];
        for &(t, s, wt) in &self.entries {
            for c in 0..channels {
                out[t * channels + c] += wt * src[s * channels + c];
            }
        }
        out
    }

    /// Adjoint of [`WarpPlan::apply`]: maps an output gradient to a source gradient.
    pub fn apply_transpose(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width * channels];
        for &(t, s, wt) in &self.entries {
            for c in 0..channels {
                out[s * channels + c] += wt * grad_out[t * channels + c];
            }
        }
        out
    }

    pub fn warp(&self, src: &Image) -> Image {
        let data = self.apply(src.data(), src.channels());
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::from_parts_unchecked(
            self.height,
            self.width,
            src.channels(),
            data,
            Some(self.valid.clone()),
        )
    }
}

fn check_dims(image: &Image, flow: &FlowField) -> Result<()> {
    if image.dims() != flow.dims() {
        return Err(Error::Shape(format!(
            "image {:?} vs flow {:?}",
            image.dims(),
            flow.dims()
        )));
    }
    Ok(())
}

/// Builds the softmax-splatting plan. Each valid source pixel spreads over
/// the 2x2 bilinear footprint of its displaced position; contributions
/// meeting at one target are blended with weights `exp(importance / T)`.
pub fn splat_plan(
    source: &Image,
    flow: &FlowField,
    importance: &[f64],
    temperature: f64,
) -> Result<WarpPlan> {
    check_dims(source, flow)?;
    let (h, w) = source.dims();
    if importance.len() != h * w {
        return Err(Error::Shape(format!(
            "{} importance values for {h}x{w}",
            importance.len()
        )));
    }
    if importance.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in splatting importance".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "splatting temperature must be positive, got {temperature}"
        )));
    }

    // (target, source, bilinear weight)
    let mut raw = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            if !source.is_valid(y, x) || !flow.is_valid(y, x) {
                continue;
            }
            let (dx, dy) = flow.get(y, x);
            for (ty, tx, b) in bilinear_corners(y as f64 + dy, x as f64 + dx) {
                if b > 0.0 && ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                    raw.push((ty as usize * w + tx as usize, y * w + x, b));
                }
            }
        }
    }

    // Per-target max importance keeps the largest exponent at zero, so a lone
    // contributor never underflows.
    let mut zmax = vec![f64::NEG_INFINITY; h * w];
    for &(t, s, _) in &raw {
        zmax[t] = zmax[t].max(importance[s]);
    }
    let mut weighted: Vec<(usize, usize, f64)> = raw
        .into_iter()
        .map(|(t, s, b)| (t, s, b * ((importance[s] - zmax[t]) / temperature).exp()))
        .collect();
    let mut total = vec![0.0; h * w];
    for &(t, _, wt) in &weighted {
        total[t] += wt;
    }
    for e in weighted.iter_mut() {
        e.2 /= total[e.0];
    }
    weighted.retain(|e| e.2 > 0.0);
    let valid = total.iter().map(|&m| m > 0.0).collect();
    Ok(WarpPlan {
        height: h,
        width: w,
        entries: weighted,
        valid,
    })
}

/// Forward-warps `source` along `flow`. Target pixels that receive no mass
/// are zero and flagged invalid.
pub fn softmax_splat(
    source: &Image,
    flow: &FlowField,
    importance: &[f64],
    temperature: f64,
) -> Result<Image> {
    Ok(splat_plan(source, flow, importance, temperature)?.warp(source))
}

/// Builds the bilinear gather plan `out(p) = source(p + flow(p))`.
pub fn gather_plan(source: &Image, flow: &FlowField) -> Result<WarpPlan> {
    check_dims(source, flow)?;
    let (h, w) = source.dims();
    let mut entries = Vec::with_capacity(4 * h * w);
    let mut valid = vec![false; h * w];
    let eps = 1e-9;
    for y in 0..h {
        for x in 0..w {
            if !flow.is_valid(y, x) {
                continue;
            }
            let (dx, dy) = flow.get(y, x);
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            if sy < -eps || sx < -eps || sy > (h - 1) as f64 + eps || sx > (w - 1) as f64 + eps {
                continue;
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let t = y * w + x;
            for (cy, cx, b) in bilinear_corners(sy, sx) {
                if b > 0.0 {
                    entries.push((t, cy as usize * w + cx as usize, b));
                }
            }
            valid[t] = true;
        }
    }
    Ok(WarpPlan {
        height: h,
        width: w,
        entries,
        valid,
    })
}

/// Bilinear backward warp. Samples outside the image are flagged invalid.
pub fn backward_warp(source: &Image, flow: &FlowField) -> Result<Image> {
    Ok(gather_plan(source, flow)?.warp(source))
}
