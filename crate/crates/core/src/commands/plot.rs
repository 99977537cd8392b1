//! Minimal raster scatter plots.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::write_png;

const PALETTE: [[f64; 3]; 8] = [
    [0.89, 0.10, 0.11],
    [0.22, 0.49, 0.72],
    [0.30, 0.69, 0.29],
    [0.60, 0.31, 0.64],
    [1.00, 0.50, 0.00],
    [0.65, 0.34, 0.16],
    [0.97, 0.51, 0.75],
    [0.40, 0.40, 0.40],
];

pub fn color(i: usize) -> [f64; 3] {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Dot,
    Faint,
    Cross,
    Ring,
}

pub struct Scatter {
    size: usize,
    margin: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    px: Vec<[f64; 3]>,
}

impl Scatter {
    /// A blank canvas framing every point in `extent`.
    pub fn new(size: usize, extent: &[[f64; 2]]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in extent {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        for k in 0..2 {
            if !lo[k].is_finite() || hi[k] - lo[k] < 1e-12 {
                let c = if lo[k].is_finite() { lo[k] } else { 0.0 };
                lo[k] = c - 1.0;
                hi[k] = c + 1.0;
            }
        }
        Self {
            size,
            margin: 0.06 * size as f64,
            lo,
            hi,
            px: vec![[1.0; 3]; size * size],
        }
    }

    fn to_px(&self, p: [f64; 2]) -> (f64, f64) {
        let span = self.size as f64 - 2.0 * self.margin;
        let x = self.margin + (p[0] - self.lo[0]) / (self.hi[0] - self.lo[0]) * span;
        let y = self.margin + (self.hi[1] - p[1]) / (self.hi[1] - self.lo[1]) * span;
        (x, y)
    }

    fn put(&mut self, x: i64, y: i64, c: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.size && (y as usize) < self.size {
            self.px[y as usize * self.size + x as usize] = c;
        }
    }

    fn line_px(&mut self, a: (f64, f64), b: (f64, f64), c: [f64; 3]) {
        let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.put(x.round() as i64, y.round() as i64, c);
        }
    }

    pub fn marker(&mut self, p: [f64; 2], m: Marker, c: [f64; 3]) {
        let (x, y) = self.to_px(p);
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        match m {
            Marker::Dot | Marker::Faint => {
                let c = if m == Marker::Faint { c.map(|v| 0.35 * v + 0.65) } else { c };
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        if dx * dx + dy * dy <= 5 {
                            self.put(xi + dx, yi + dy, c);
                        }
                    }
                }
            }
            Marker::Cross => {
                for d in -6..=6i64 {
                    for w in -1..=1 {
                        self.put(xi + d, yi + d + w, [0.0; 3]);
                        self.put(xi + d, yi - d + w, [0.0; 3]);
                    }
                }
                for d in -4..=4i64 {
                    self.put(xi + d, yi + d, c);
                    self.put(xi + d, yi - d, c);
                }
            }
            Marker::Ring => {
                for k in 0..96 {
                    let a = k as f64 / 96.0 * std::f64::consts::TAU;
                    for r in [5.0, 6.0, 7.0] {
                        let col = if r == 6.0 { c } else { [0.0; 3] };
                        self.put((x + r * a.cos()).round() as i64, (y + r * a.sin()).round() as i64, col);
                    }
                }
            }
        }
    }

    pub fn arrow(&mut self, from: [f64; 2], to: [f64; 2], c: [f64; 3]) {
        let a = self.to_px(from);
        let b = self.to_px(to);
        self.line_px(a, b, c);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1.0 {
            return;
        }
        let (ux, uy) = (dx / len, dy / len);
        for side in [-1.0, 1.0] {
            let tip = (b.0 - 10.0 * ux - side * 5.0 * uy, b.1 - 10.0 * uy + side * 5.0 * ux);
            self.line_px(b, tip, c);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self.px.iter().flatten().copied().collect();
        let img = Image::new(self.size, self.size, 3, data).map_err(|e| Error::InvalidInput(format!("plot: {e}")))?;
        write_png(path, &img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_land_inside_the_frame() {
        let pts = [[0.0, 0.0], [1.0, 2.0]];
        let mut s = Scatter::new(64, &pts);
        s.arrow(pts[0], pts[1], color(2));
        s.marker(pts[0], Marker::Dot, color(0));
        s.marker(pts[1], Marker::Cross, color(1));
        let (x, y) = s.to_px(pts[0]);
        assert_eq!(s.px[y.round() as usize * 64 + x.round() as usize], color(0));
        let inked = s.px.iter().filter(|p| **p != [1.0; 3]).count();
        assert!(inked > 20);
        let single = Scatter::new(32, &[[3.0, 3.0]]);
        let (x, y) = single.to_px([3.0, 3.0]);
        assert!((x - 16.0).abs() < 1e-9 && (y - 16.0).abs() < 1e-9);
    }
}
