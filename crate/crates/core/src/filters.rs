//! Small image filters used by the degraders and the synthetic data generator.

use crate::error::{Error, Result};
use crate::image::Image;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is a copy.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = s.clamp(0.0, 1.0);
            }
        }
    }
    Image::from_parts_unchecked(h, w, c, out, img.valid().map(<[bool]>::to_vec))
}

/// Keys cubic convolution weight, `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Per output index: four source indices and their weights (pixel-center
/// alignment, clamped borders).
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 4]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let f = s.floor();
            let t = s - f;
            let mut taps = [(0usize, 0.0); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let idx = (f as isize + j as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *tap = (idx, cubic(t - (j as f64 - 1.0)));
            }
            taps
        })
        .collect()
}

/// Bicubic resize to `height x width`; the validity mask is dropped.
pub fn resize_bicubic(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidInput("resize target must be non-empty".into()));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let ty = cubic_taps(h, height);
    let tx = cubic_taps(w, width);
    let src = img.data();
    let mut tmp = vec![0.0; h * width * c];
    for y in 0..h {
        for (x, taps) in tx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * width + x) * c + ch] = taps.iter().map(|&(i, wt)| wt * src[(y * w + i) * c + ch]).sum();
            }
        }
    }
    let mut out = vec![0.0; height * width * c];
    for (y, taps) in ty.iter().enumerate() {
        for x in 0..width {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[(i * width + x) * c + ch]).sum();
                out[(y * width + x) * c + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::from_parts_unchecked(height, width, c, out, None))
}

/// Box-average downsampling by an integer factor; trailing rows/columns
/// that do not fill a whole box are averaged over what is present.
pub fn downsample_area(img: &Image, k: usize) -> Result<Image> {
    if k == 0 {
        return Err(Error::InvalidInput("downsampling factor must be positive".into()));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = oy * k..((oy + 1) * k).min(h);
            let xs = ox * k..((ox + 1) * k).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += img.get(y, x, ch);
                    }
                }
                out[(oy * ow + ox) * c + ch] = s / n;
            }
        }
    }
    Ok(Image::from_parts_unchecked(oh, ow, c, out, None))
}
