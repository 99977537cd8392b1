//! Dense flow estimation between a reference image and a synthesized view.
//!
//! A registered [`FlowEstimator`] is used when available; otherwise a
//! coarse-to-fine SAD block matcher runs: an image pyramid with 2x
//! downsampling, an exhaustive search of +-4 px around several candidate
//! centers at every level (the upsampled prediction, its 4-neighbours'
//! predictions and zero), and ties broken toward the smallest displacement.

use std::path::PathBuf;
use std::process::Command;

use crate::error::{Error, Result};
use crate::image::Image;

use super::geometry::FlowField;

/// Search radius per pyramid level, in pixels.
pub const SEARCH_RADIUS: i32 = 4;
/// Half-size of the SAD patch.
pub const PATCH_RADIUS: i32 = 3;
const MIN_LEVEL_SIDE: usize = 16;
const MAX_LEVELS: usize = 5;

/// An external flow backend. Failures are reported as strings and surfaced
/// to callers as [`Error::ExternalEstimator`] so they can fall back.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, reference: &Image, target: &Image) -> std::result::Result<FlowField, String>;
}

/// Runs `<program> <reference.png> <target.png> <out.flo>` and reads the
/// resulting Middlebury flow file.
#[derive(Debug, Clone)]
pub struct ExecutableFlowEstimator {
    pub program: PathBuf,
}

impl FlowEstimator for ExecutableFlowEstimator {
    fn estimate(&self, reference: &Image, target: &Image) -> std::result::Result<FlowField, String> {
        let dir = std::env::temp_dir().join(format!(
            "refix-flow-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let (rp, tp, fp) = (dir.join("ref.png"), dir.join("tgt.png"), dir.join("out.flo"));
        crate::io::write_png(&rp, reference).map_err(|e| e.to_string())?;
        crate::io::write_png(&tp, target).map_err(|e| e.to_string())?;
        let status = Command::new(&self.program)
            .arg(&rp)
            .arg(&tp)
            .arg(&fp)
            .status()
            .map_err(|e| format!("cannot run {}: {e}", self.program.display()))?;
        let result = if status.success() {
            crate::io::read_flo(&fp).map_err(|e| e.to_string())
        } else {
            Err(format!("{} exited with {status}", self.program.display()))
        };
        let _ = std::fs::remove_dir_all(&dir);
        result
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at_clamped(&self, y: i32, x: i32) -> f64 {
        let y = y.clamp(0, self.h as i32 - 1) as usize;
        let x = x.clamp(0, self.w as i32 - 1) as usize;
        self.data[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let s = self.data[2 * y * self.w + 2 * x]
                    + self.data[2 * y * self.w + 2 * x + 1]
                    + self.data[(2 * y + 1) * self.w + 2 * x]
                    + self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data[y * w + x] = 0.25 * s;
            }
        }
        Plane { h, w, data }
    }
}

fn pyramid(img: &Image) -> Vec<Plane> {
    let (h, w) = img.dims();
    let mut levels = vec![Plane {
        h,
        w,
        data: img.luminance(),
    }];
    while levels.len() < MAX_LEVELS {
        let last = levels.last().unwrap();
        if last.h / 2 < MIN_LEVEL_SIDE || last.w / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next = last.downsample();
        levels.push(next);
    }
    levels
}

fn sad(reference: &Plane, target: &Plane, y: i32, x: i32, dy: i32, dx: i32) -> f64 {
    let mut s = 0.0;
    for oy in -PATCH_RADIUS..=PATCH_RADIUS {
        for ox in -PATCH_RADIUS..=PATCH_RADIUS {
            let a = reference.at_clamped(y + oy, x + ox);
            let b = target.at_clamped(y + oy + dy, x + ox + dx);
            s += (a - b).abs();
        }
    }
    s
}

/// Ordering key for tie-breaking: smaller magnitude first, then row-major.
#[inline]
fn tie_key(dy: i32, dx: i32) -> (i32, i32, i32) {
    (dy * dy + dx * dx, dy, dx)
}

fn match_level(reference: &Plane, target: &Plane, prior: &[(i32, i32)]) -> Vec<(i32, i32)> {
    let (h, w) = (reference.h as i32, reference.w as i32);
    let mut out = Vec::with_capacity(reference.h * reference.w);
    let mut centers = Vec::with_capacity(6);
    for y in 0..h {
        for x in 0..w {
            centers.clear();
            centers.push((0, 0));
            for (ny, nx) in [(y, x), (y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)] {
                if (0..h).contains(&ny) && (0..w).contains(&nx) {
                    let c = prior[(ny * w + nx) as usize];
                    if !centers.contains(&c) {
                        centers.push(c);
                    }
                }
            }
            let mut best = (f64::INFINITY, (0, 0, 0), (0, 0));
            for &(px, py) in &centers {
                for dy in py - SEARCH_RADIUS..=py + SEARCH_RADIUS {
                    for dx in px - SEARCH_RADIUS..=px + SEARCH_RADIUS {
                        let key = tie_key(dy, dx);
                        if best.0 == 0.0 && key >= best.1 {
                            continue;
                        }
                        let cost = sad(reference, target, y, x, dy, dx);
                        if cost < best.0 || (cost == best.0 && key < best.1) {
                            best = (cost, key, (dx, dy));
                        }
                    }
                }
            }
            out.push(best.2);
        }
    }
    out
}

/// Bilinear 2x upsampling of an integer flow, scaled to the finer grid and
/// rounded to the nearest integer search center.
fn upsample_prior(coarse: &[(i32, i32)], ch: usize, cw: usize, h: usize, w: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(h * w);
    let at = |y: usize, x: usize| coarse[y * cw + x];
    for y in 0..h {
        for x in 0..w {
            let sy = ((y as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (ch - 1) as f64);
            let sx = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (cw - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(ch - 1), (x0 + 1).min(cw - 1));
            let (ly, lx) = (sy - y0 as f64, sx - x0 as f64);
            let lerp = |f: fn((i32, i32)) -> i32| {
                let a = f(at(y0, x0)) as f64 * (1.0 - lx) + f(at(y0, x1)) as f64 * lx;
                let b = f(at(y1, x0)) as f64 * (1.0 - lx) + f(at(y1, x1)) as f64 * lx;
                a * (1.0 - ly) + b * ly
            };
            let dx = (2.0 * lerp(|p| p.0)).round() as i32;
            let dy = (2.0 * lerp(|p| p.1)).round() as i32;
            out.push((dx, dy));
        }
    }
    out
}

/// Built-in coarse-to-fine block matcher. The flow at a reference pixel
/// points to its match in `target`.
pub fn block_matching_flow(reference: &Image, target: &Image) -> Result<FlowField> {
    if reference.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "flow inputs differ in size: {:?} vs {:?}",
            reference.dims(),
            target.dims()
        )));
    }
    let pr = pyramid(reference);
    let pt = pyramid(target);
    let levels = pr.len();
    let coarsest = &pr[levels - 1];
    let mut flow = vec![(0, 0); coarsest.h * coarsest.w];
    for lvl in (0..levels).rev() {
        let (r, t) = (&pr[lvl], &pt[lvl]);
        if lvl != levels - 1 {
            let c = &pr[lvl + 1];
            flow = upsample_prior(&flow, c.h, c.w, r.h, r.w);
        }
        flow = match_level(r, t, &flow);
    }
    let (h, w) = reference.dims();
    let data = flow.iter().flat_map(|&(dx, dy)| [dx as f64, dy as f64]).collect();
    FlowField::new(h, w, data)
}

/// Estimates flow from `reference` toward `target`, preferring `external`.
pub fn estimate_flow(
    reference: &Image,
    target: &Image,
    external: Option<&dyn FlowEstimator>,
) -> Result<FlowField> {
    if reference.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "flow inputs differ in size: {:?} vs {:?}",
            reference.dims(),
            target.dims()
        )));
    }
    match external {
        Some(est) => {
            let flow = est.estimate(reference, target).map_err(Error::ExternalEstimator)?;
            if flow.dims() != reference.dims() {
                return Err(Error::ExternalEstimator(format!(
                    "estimator returned {:?} flow for {:?} images",
                    flow.dims(),
                    reference.dims()
                )));
            }
            Ok(flow)
        }
        None => block_matching_flow(reference, target),
    }
}
