//! Reference pre-alignment: warping a reference image into the frame of a
//! degraded view by geometry (depth + pose, or disparity) or by flow.

mod flow;
mod geometry;
mod splat;

pub use flow::{
    block_matching_flow, estimate_flow, ExecutableFlowEstimator, FlowEstimator, PATCH_RADIUS,
    SEARCH_RADIUS,
};
pub use geometry::{
    disparity_to_flow, project_points, CameraIntrinsics, CameraPose, DepthMap, DisparityMap,
    FlowField, ViewTransform,
};
pub use splat::{backward_warp, gather_plan, softmax_splat, splat_plan, WarpPlan};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::bilinear_corners;

/// Default softmax-splatting temperature.
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Brightness-constancy residual of `flow` against `target`: the mean
/// absolute channel difference between each reference pixel and the
/// bilinear sample at its displaced position. Out-of-view samples score 0.
pub fn photometric_residual(reference: &Image, target: &Image, flow: &FlowField) -> Result<Vec<f64>> {
    if reference.dims() != target.dims() || reference.channels() != target.channels() {
        return Err(Error::Shape("residual inputs differ in size".into()));
    }
    let (h, w) = reference.dims();
    let ch = reference.channels();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if !flow.is_valid(y, x) {
                continue;
            }
            let (dx, dy) = flow.get(y, x);
            let (sy, sx) = (y as f64 + dy, x as f64 + dx);
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let mut r = 0.0;
            for c in 0..ch {
                let mut v = 0.0;
                for (cy, cx, b) in bilinear_corners(sy, sx) {
                    if b > 0.0 {
                        v += b * target.get(cy as usize, cx as usize, c);
                    }
                }
                r += (reference.get(y, x, c) - v).abs();
            }
            out[y * w + x] = r / ch as f64;
        }
    }
    Ok(out)
}

/// Warps `reference` into the target view described by `transform`.
///
/// * depth + pose: reprojected flow, importance `-depth` (nearer wins);
/// * disparity: `dx = -d`, importance `|d|`;
/// * flow: importance is the negative photometric residual against
///   `degraded` when given, uniform otherwise.
pub fn pre_align(
    reference: &Image,
    transform: &ViewTransform,
    degraded: Option<&Image>,
    temperature: f64,
) -> Result<Image> {
    if transform.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "transform grid {:?} does not match reference {:?}",
            transform.dims(),
            reference.dims()
        )));
    }
    let (flow, importance) = match transform {
        ViewTransform::DepthPose {
            depth,
            intrinsics,
            relative_pose,
        } => {
            let flow = project_points(depth, intrinsics, relative_pose)?;
            let imp = depth
                .data()
                .iter()
                .enumerate()
                .map(|(i, &d)| if depth.is_valid(i) { -d } else { 0.0 })
                .collect();
            (flow, imp)
        }
        ViewTransform::Disparity(d) => {
            let imp = d.data().iter().map(|v| v.abs()).collect();
            (disparity_to_flow(d), imp)
        }
        ViewTransform::Flow(f) => {
            let imp = match degraded {
                Some(deg) => photometric_residual(reference, deg, f)?
                    .into_iter()
                    .map(|r| -r)
                    .collect(),
                None => vec![0.0; reference.height() * reference.width()],
            };
            (f.clone(), imp)
        }
    };
    softmax_splat(reference, &flow, &importance, temperature)
}
