//! Procedural planar scenes viewed under known homographies.
//!
//! Every frame samples the same analytic texture, so frames are exact and
//! the reference-to-frame flow is known in closed form.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;
use crate::training::reference_index;
use crate::warp::{FlowField, ViewTransform};

#[derive(Debug, Clone)]
struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Debug, Clone)]
struct Disc {
    cy: f64,
    cx: f64,
    r: f64,
    color: [f64; 3],
}

/// A seeded analytic RGB texture on the plane.
#[derive(Debug, Clone)]
pub struct Texture {
    base: [f64; 3],
    waves: Vec<Wave>,
    discs: Vec<Disc>,
}

impl Texture {
    pub fn new(seed: u64, extent: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let base = color(&mut rng);
        let waves = (0..4)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let period: f64 = rng.random_range(3.0..12.0);
                let a: f64 = rng.random_range(0.05..0.15);
                Wave {
                    fy: theta.sin() / period,
                    fx: theta.cos() / period,
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: [a * rng.random_range(0.5..1.0), a * rng.random_range(0.5..1.0), a * rng.random_range(0.5..1.0)],
                }
            })
            .collect();
        let discs = (0..12)
            .map(|_| Disc {
                cy: rng.random_range(-0.2..1.2) * extent,
                cx: rng.random_range(-0.2..1.2) * extent,
                r: rng.random_range(0.04..0.15) * extent,
                color: color(&mut rng),
            })
            .collect();
        Self { base, waves, discs }
    }

    /// Colour at plane point `(u, v)` (column, row).
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.base;
        for d in &self.discs {
            let dist = ((v - d.cy).powi(2) + (u - d.cx).powi(2)).sqrt();
            // one-pixel anti-aliased edge
            let a = (d.r - dist + 0.5).clamp(0.0, 1.0);
            for k in 0..3 {
                c[k] = (1.0 - a) * c[k] + a * d.color[k];
            }
        }
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.fy * v + w.fx * u) + w.phase).sin();
            for k in 0..3 {
                c[k] += w.amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Maps frame pixels `(x, y, 1)` to texture-plane points.
pub type Homography = Matrix3<f64>;

fn apply(h: &Homography, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// A small random view change about the image centre: rotation, scale,
/// translation and a slight perspective tilt.
pub fn random_homography(rng: &mut impl Rng, height: usize, width: usize, strength: f64) -> Homography {
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let angle: f64 = rng.random_range(-0.05..0.05) * strength;
    let scale: f64 = 1.0 + rng.random_range(-0.05..0.05) * strength;
    let (ty, tx): (f64, f64) = (rng.random_range(-4.0..4.0) * strength, rng.random_range(-4.0..4.0) * strength);
    let (py, px): (f64, f64) = (rng.random_range(-2e-4..2e-4) * strength, rng.random_range(-2e-4..2e-4) * strength);
    let to_origin = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let (s, c) = angle.sin_cos();
    let rs = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, px, py, 1.0);
    back * rs * to_origin
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frames: Vec<Image>,
    /// Frame-pixel to texture-plane maps.
    pub homographies: Vec<Homography>,
    /// Flow from the reference frame to each frame.
    pub transforms: Vec<ViewTransform>,
    pub reference: usize,
}

/// Renders `n` views of one seeded texture; the middle view is the reference.
pub fn synthetic_scene(seed: u64, height: usize, width: usize, n: usize, strength: f64) -> Result<SyntheticScene> {
    let reference = reference_index(n)?;
    let texture = Texture::new(seed, height.max(width) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let homographies: Vec<Homography> = (0..n)
        .map(|i| {
            if i == reference {
                Homography::identity()
            } else {
                random_homography(&mut rng, height, width, strength)
            }
        })
        .collect();
    let frames = homographies
        .iter()
        .map(|h| {
            let mut data = Vec::with_capacity(height * width * 3);
            for y in 0..height {
                for x in 0..width {
                    let (u, v) = apply(h, x as f64, y as f64);
                    data.extend_from_slice(&texture.sample(u, v));
                }
            }
            Image::new(height, width, 3, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let href = homographies[reference];
    let transforms = homographies
        .iter()
        .map(|h| {
            let inv = h.try_inverse().expect("view homographies are invertible");
            let m = inv * href;
            Ok(ViewTransform::Flow(FlowField::from_fn(height, width, |y, x| {
                let (u, v) = apply(&m, x as f64, y as f64);
                (u - x as f64, v - y as f64)
            })?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        frames,
        homographies,
        transforms,
        reference,
    })
}
