//! Synthetic degraders standing in for generative re-synthesis.
//!
//! A degrader maps a frame sequence to a degraded sequence of the same
//! length and size. Built-in operators are seeded and deterministic.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filters::{downsample_area, gaussian_blur, resize_bicubic};
use crate::image::Image;
use crate::warp::{estimate_flow, pre_align, ViewTransform, DEFAULT_TEMPERATURE};

/// Sequence-in, sequence-out degradation.
pub trait Degrader: Send + Sync {
    fn name(&self) -> String;
    fn degrade(&self, frames: &[Image]) -> Result<Vec<Image>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DegraderKind {
    Identity,
    /// Gaussian blur followed by additive Gaussian noise.
    BlurNoise { sigma: f64, noise: f64 },
    /// Per-block mean plus coarsely quantized residual.
    Blocky { block: usize, step: f64 },
    /// Downsample by `factor`, bicubic upsample back.
    Spatial { factor: usize },
    /// Oriented sinusoidal interference plus fine noise.
    StructuredNoise { amplitude: f64 },
    /// Each frame replaced by the frame `stride` steps away, flow-warped
    /// back onto it.
    Temporal { stride: usize },
}

impl DegraderKind {
    pub const BLUR_NOISE: DegraderKind = DegraderKind::BlurNoise {
        sigma: 1.5,
        noise: 0.03,
    };
    pub const BLOCKY: DegraderKind = DegraderKind::Blocky { block: 8, step: 0.2 };
}

impl fmt::Display for DegraderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegraderKind::Identity => write!(f, "identity"),
            DegraderKind::BlurNoise { sigma, noise } => write!(f, "blur_noise:{sigma}:{noise}"),
            DegraderKind::Blocky { block, step } => write!(f, "blocky:{block}:{step}"),
            DegraderKind::Spatial { factor } => write!(f, "spatial:{factor}"),
            DegraderKind::StructuredNoise { amplitude } => write!(f, "structured_noise:{amplitude}"),
            DegraderKind::Temporal { stride } => write!(f, "temporal:{stride}"),
        }
    }
}

impl FromStr for DegraderKind {
    type Err = Error;

    /// `name[:param[:param]]`, e.g. `blur_noise`, `blur_noise:2:0.05`,
    /// `spatial:4`, `temporal:3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize, default: f64| -> Result<f64> {
            match args.get(i) {
                None => Ok(default),
                Some(a) => a
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| Error::Config(format!("bad degrader parameter '{a}' in '{s}'"))),
            }
        };
        let int = |i: usize, default: usize| -> Result<usize> {
            let v = num(i, default as f64)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Config(format!("degrader '{s}' needs a positive integer")));
            }
            Ok(v as usize)
        };
        let max_args = match name {
            "identity" => 0,
            "blur_noise" | "blocky" => 2,
            _ => 1,
        };
        if args.len() > max_args {
            return Err(Error::Config(format!("too many parameters in degrader '{s}'")));
        }
        Ok(match name {
            "identity" => DegraderKind::Identity,
            "blur_noise" => DegraderKind::BlurNoise {
                sigma: num(0, 1.5)?,
                noise: num(1, 0.03)?,
            },
            "blocky" => DegraderKind::Blocky {
                block: int(0, 8)?,
                step: num(1, 0.2)?,
            },
            "spatial" => DegraderKind::Spatial { factor: int(0, 4)? },
            "structured_noise" => DegraderKind::StructuredNoise {
                amplitude: num(0, 0.08)?,
            },
            "temporal" => DegraderKind::Temporal { stride: int(0, 3)? },
            other => {
                return Err(Error::Config(format!(
                    "unknown degrader '{other}' (expected identity, blur_noise, blocky, spatial, structured_noise or temporal)"
                )))
            }
        })
    }
}

/// A built-in degrader with its seed. Frame `i` draws its randomness from
/// `(seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedDegrader {
    pub kind: DegraderKind,
    pub seed: u64,
}

impl NamedDegrader {
    pub fn new(kind: DegraderKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    fn frame_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        rng
    }

    fn degrade_frame(&self, frames: &[Image], i: usize) -> Result<Image> {
        let img = frames[i].clone().without_valid();
        let (h, w, c) = (img.height(), img.width(), img.channels());
        Ok(match &self.kind {
            DegraderKind::Identity => img,
            DegraderKind::BlurNoise { sigma, noise } => {
                let blurred = gaussian_blur(&img, *sigma);
                let mut rng = self.frame_rng(i);
                let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
                let data = blurred
                    .data()
                    .iter()
                    .map(|&v| v + if *noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
                    .collect();
                Image::new(h, w, c, data)?
            }
            DegraderKind::Blocky { block, step } => blocky(&img, *block, *step),
            DegraderKind::Spatial { factor } => {
                let small = downsample_area(&img, *factor)?;
                resize_bicubic(&small, h, w)?
            }
            DegraderKind::StructuredNoise { amplitude } => {
                let mut rng = self.frame_rng(i);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let period: f64 = rng.random_range(3.0..7.0);
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (fy, fx) = (theta.sin() / period, theta.cos() / period);
                let fine = Normal::new(0.0, 0.25 * amplitude).expect("finite std");
                let mut data = img.data().to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let wave = amplitude
                            * (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                        for ch in 0..c {
                            data[(y * w + x) * c + ch] += wave + fine.sample(&mut rng);
                        }
                    }
                }
                Image::new(h, w, c, data)?
            }
            DegraderKind::Temporal { stride } => {
                let n = frames.len();
                let src = if i + stride < n {
                    i + stride
                } else {
                    i.saturating_sub(*stride)
                };
                if src == i {
                    img
                } else {
                    let source = &frames[src];
                    let flow = estimate_flow(source, &img, None)?;
                    let warped = pre_align(source, &ViewTransform::Flow(flow), Some(&img), DEFAULT_TEMPERATURE)?;
                    warped.zero_invalid().without_valid()
                }
            }
        })
    }
}

fn blocky(img: &Image, block: usize, step: f64) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = img.data().to_vec();
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let ys = by..(by + block).min(h);
            let xs = bx..(bx + block).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                let mut mean = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        mean += img.get(y, x, ch);
                    }
                }
                mean /= n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let r = img.get(y, x, ch) - mean;
                        let q = if step > 0.0 { (r / step).round() * step } else { r };
                        data[(y * w + x) * c + ch] = (mean + q).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Image::from_parts_unchecked(h, w, c, data, None)
}

impl Degrader for NamedDegrader {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn degrade(&self, frames: &[Image]) -> Result<Vec<Image>> {
        (0..frames.len()).map(|i| self.degrade_frame(frames, i)).collect()
    }
}
