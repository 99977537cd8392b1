//! Full-reference image quality metrics and the external-metric plugin
//! interface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{list_pngs, read_png};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)` over all channels; `f64::INFINITY` when the
/// images are identical.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::InvalidInput(format!("PSNR peak must be positive, got {peak}")));
    }
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid-region map, on BT.601 luma for RGB inputs.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (a.luminance(), b.luminance());
    let k = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// An external full-reference metric: `<program> <pred.png> <gt.png>`
/// printing one float. A nonzero exit means the metric is unavailable.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPlugin {
    pub name: String,
    pub program: PathBuf,
}

impl MetricPlugin {
    pub fn new(name: impl Into<String>, program: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            program: program.into(),
        }
    }

    /// `name=program` or a bare program path (named after its file stem).
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, program) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let n = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Config(format!("bad plugin '{spec}'")))?
                    .to_string();
                (n, p)
            }
        };
        if name.is_empty() || name.contains(',') || program.as_os_str().is_empty() {
            return Err(Error::Config(format!("bad plugin '{spec}'")));
        }
        Ok(Self { name, program })
    }

    /// `None` when the plugin cannot be run, fails, or prints no number.
    pub fn evaluate(&self, pred: &Path, gt: &Path) -> Option<f64> {
        let out = Command::new(&self.program).arg(pred).arg(gt).output().ok()?;
        if !out.status.success() {
            log::debug!("metric plugin {} unavailable: {}", self.name, out.status);
            return None;
        }
        String::from_utf8_lossy(&out.stdout).trim().parse::<f64>().ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub external: BTreeMap<String, f64>,
}

/// Mean and population standard deviation of one metric column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    /// Infinite values (lossless PSNR) make the mean infinite; the spread is
    /// then 0 if every value is infinite and infinite otherwise.
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count,
            };
        }
        if values.iter().any(|v| v.is_infinite()) {
            let all = values.iter().all(|v| v.is_infinite());
            return Self {
                mean: f64::INFINITY,
                std: if all { 0.0 } else { f64::INFINITY },
                count,
            };
        }
        let n = count as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Per file name, sorted.
    pub per_image: Vec<(String, MetricReport)>,
    /// Column name to summary; external columns only when some value exists.
    pub summary: BTreeMap<String, Summary>,
}

impl Evaluation {
    pub fn mean_report(&self) -> MetricReport {
        let external = self
            .summary
            .iter()
            .filter(|(k, _)| *k != "psnr" && *k != "ssim")
            .map(|(k, s)| (k.clone(), s.mean))
            .collect();
        MetricReport {
            psnr_db: self.summary["psnr"].mean,
            ssim: self.summary["ssim"].mean,
            external,
        }
    }

    fn external_names(&self) -> Vec<&String> {
        self.summary.keys().filter(|k| *k != "psnr" && *k != "ssim").collect()
    }

    /// `file,psnr,ssim[,external...]`; missing external values are empty.
    pub fn to_csv(&self) -> String {
        let ext = self.external_names();
        let mut s = String::from("file,psnr,ssim");
        for e in &ext {
            s.push(',');
            s.push_str(e);
        }
        s.push('\n');
        for (name, r) in &self.per_image {
            let _ = write!(s, "{name},{},{}", fmt_value(r.psnr_db), fmt_value(r.ssim));
            for e in &ext {
                s.push(',');
                if let Some(v) = r.external.get(*e) {
                    s.push_str(&fmt_value(*v));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Plain-text summary, one `{ ... }` block per metric.
    pub fn summary_text(&self) -> String {
        let mut s = format!("images: {}\n", self.per_image.len());
        for (name, m) in &self.summary {
            let _ = writeln!(
                s,
                "{name}: {{ mean: {}, std: {}, count: {} }}",
                fmt_value(m.mean),
                fmt_value(m.std),
                m.count
            );
        }
        s
    }
}

/// Fixed-precision rendering with `inf`/`nan` spelled out.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// Errors unless both directories hold the same non-empty set of PNG names.
pub fn matching_names(a: &Path, b: &Path) -> Result<Vec<String>> {
    let na = list_pngs(a)?;
    let nb = list_pngs(b)?;
    if na != nb {
        let only_a: Vec<_> = na.iter().filter(|n| !nb.contains(n)).cloned().collect();
        let only_b: Vec<_> = nb.iter().filter(|n| !na.contains(n)).cloned().collect();
        return Err(Error::FilenameMismatch(format!(
            "only in {}: [{}]; only in {}: [{}]",
            a.display(),
            only_a.join(", "),
            b.display(),
            only_b.join(", ")
        )));
    }
    if na.is_empty() {
        return Err(Error::InvalidInput(format!("no PNG files in {}", a.display())));
    }
    Ok(na)
}

/// Per-image and summary metrics for matching PNG names in two directories.
pub fn evaluate_pairs(pred_dir: &Path, gt_dir: &Path, plugins: &[MetricPlugin]) -> Result<Evaluation> {
    let names = matching_names(pred_dir, gt_dir)?;
    let per_image = names
        .par_iter()
        .map(|name| {
            let (pp, gp) = (pred_dir.join(name), gt_dir.join(name));
            let (pred, gt) = (read_png(&pp)?, read_png(&gp)?);
            let external = plugins
                .iter()
                .filter_map(|p| p.evaluate(&pp, &gp).map(|v| (p.name.clone(), v)))
                .collect();
            Ok((
                name.clone(),
                MetricReport {
                    psnr_db: psnr(&pred, &gt, 1.0)?,
                    ssim: ssim(&pred, &gt)?,
                    external,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary = BTreeMap::new();
    let col = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Vec<f64> { per_image.iter().filter_map(|(_, r)| f(r)).collect() };
    summary.insert("psnr".to_string(), Summary::of(&col(&|r| Some(r.psnr_db))));
    summary.insert("ssim".to_string(), Summary::of(&col(&|r| Some(r.ssim))));
    for p in plugins {
        let vals = col(&|r| r.external.get(&p.name).copied());
        if !vals.is_empty() {
            summary.insert(p.name.clone(), Summary::of(&vals));
        }
    }
    Ok(Evaluation { per_image, summary })
}
