//! Cameras, per-pixel geometry grids and their conversion to flow.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "degenerate intrinsics: fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidInput("non-finite principal point".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }

    /// Back-projects pixel `(x, y)` at depth `z` into camera coordinates.
    pub fn unproject(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx * z, (y - self.cy) / self.fy * z, z)
    }

    /// Projects a camera-space point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rigid motion of the target camera expressed in the source camera frame:
/// a point `X_s` in source coordinates has target coordinates
/// `X_t = R^T (X_s - t)`. A camera moving by `+t` along x therefore makes
/// content move by `-fx * t / Z` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "rotation is not a proper rotation (orthonormality error {ortho:e}, det {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_only(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn source_to_target(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Relative pose between two world-to-camera extrinsics
    /// (`X_cam = R X_world + t`), from the `source` camera to the `target` one.
    pub fn relative(
        source: (&Matrix3<f64>, &Vector3<f64>),
        target: (&Matrix3<f64>, &Vector3<f64>),
    ) -> Result<Self> {
        let (rs, ts) = source;
        let (rt, tt) = target;
        let r = rs * rt.transpose();
        let t = ts - r * tt;
        Self::new(r, t)
    }
}

/// Metric depth per pixel; pixels flagged invalid carry no geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl DepthMap {
    /// Non-positive or non-finite entries are flagged invalid.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} depth values for {height}x{width}",
                data.len()
            )));
        }
        let valid: Vec<bool> = data.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        let valid = (!valid.iter().all(|&v| v)).then_some(valid);
        Ok(Self {
            height,
            width,
            data,
            valid,
        })
    }

    /// Uses an explicit mask; every pixel marked valid must have positive depth.
    pub fn with_mask(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != height * width || valid.len() != height * width {
            return Err(Error::Shape("depth/mask size mismatch".into()));
        }
        if let Some(i) = (0..data.len()).find(|&i| valid[i] && !(data[i] > 0.0 && data[i].is_finite())) {
            return Err(Error::InvalidInput(format!(
                "non-positive depth {} at valid pixel ({}, {})",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            valid: Some(valid),
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[i])
    }
}

/// Signed horizontal shift per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} disparity values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("disparity".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel displacement `(dx, dy)` from source to target coordinates.
/// Pixels without a displacement are flagged invalid and hold
/// [`FlowField::SENTINEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    pub const SENTINEL: f64 = 1.0e6;

    /// `data` is interleaved `(dx, dy)` per pixel, row-major.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::Shape(format!(
                "{} flow values for {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            valid: None,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
            valid: None,
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let data = (0..height * width).flat_map(|_| [dx, dy]).collect();
        Self {
            height,
            width,
            data,
            valid: None,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Result<Self> {
        let mut data = Vec::with_capacity(2 * height * width);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid.as_ref().is_none_or(|v| v[y * self.width + x])
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn invalidate(&mut self, y: usize, x: usize) {
        let (h, w) = (self.height, self.width);
        let mask = self.valid.get_or_insert_with(|| vec![true; h * w]);
        mask[y * w + x] = false;
        let i = 2 * (y * w + x);
        self.data[i] = Self::SENTINEL;
        self.data[i + 1] = Self::SENTINEL;
    }

    pub fn negated(&self) -> FlowField {
        let mut out = self.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            if self.valid.as_ref().is_none_or(|m| m[i / 2]) {
                *v = -*v;
            }
        }
        out
    }
}

/// The view transformation that maps a reference image into the target view.
#[derive(Debug, Clone)]
pub enum ViewTransform {
    DepthPose {
        depth: DepthMap,
        intrinsics: CameraIntrinsics,
        relative_pose: CameraPose,
    },
    Disparity(DisparityMap),
    Flow(FlowField),
}

impl ViewTransform {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ViewTransform::DepthPose { depth, .. } => depth.dims(),
            ViewTransform::Disparity(d) => d.dims(),
            ViewTransform::Flow(f) => f.dims(),
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        ViewTransform::Flow(FlowField::zeros(height, width))
    }
}

/// Reprojects every source pixel into the target camera and returns the
/// resulting displacement. Invalid-depth pixels and points that land behind
/// the target camera are flagged invalid.
pub fn project_points(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    relative_pose: &CameraPose,
) -> Result<FlowField> {
    let (h, w) = depth.dims();
    let mut flow = FlowField::zeros(h, w);
    // Unproject/reproject round-trips are not bit-exact; the identity motion is.
    let identity = relative_pose.is_identity();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.is_valid(i) {
                flow.invalidate(y, x);
                continue;
            }
            let z = depth.data[i];
            if z <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "non-positive depth {z} at valid pixel ({x}, {y})"
                )));
            }
            if identity {
                continue;
            }
            let (xf, yf) = (x as f64, y as f64);
            let p = intrinsics.unproject(xf, yf, z);
            let q = relative_pose.source_to_target(&p);
            match intrinsics.project(&q) {
                Some((u, v)) => {
                    flow.data[2 * i] = u - xf;
                    flow.data[2 * i + 1] = v - yf;
                }
                None => flow.invalidate(y, x),
            }
        }
    }
    Ok(flow)
}

/// `dx = -disparity`, `dy = 0`: positive disparity moves content left.
pub fn disparity_to_flow(disparity: &DisparityMap) -> FlowField {
    let (h, w) = disparity.dims();
    let data = disparity.data.iter().flat_map(|&d| [-d, 0.0]).collect();
    FlowField {
        height: h,
        width: w,
        data,
        valid: None,
    }
}
