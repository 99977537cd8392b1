//! Reconstruction loss: mean squared error plus a weighted perceptual term.
//!
//! The built-in perceptual distance compares unit-normalized activations of
//! a frozen, seeded four-layer convolutional pyramid. An external perceptual
//! metric can be plugged in for evaluation, but it cannot be trained through.

use std::path::PathBuf;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{ConvGeom, Tensor};

/// Seed of the frozen perceptual feature network.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;
const UNIT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum PerceptualBackend {
    RandomFeatures,
    /// `<program> <a.png> <b.png>` printing one float.
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_lpips: f64,
    pub perceptual_backend: PerceptualBackend,
    /// Training crop size `(h, w)`; full images when `None`.
    pub patch_size: Option<(usize, usize)>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_lpips: 1.0,
            perceptual_backend: PerceptualBackend::RandomFeatures,
            patch_size: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lpips.is_finite() && self.lambda_lpips >= 0.0) {
            return Err(Error::Config("lambda_lpips must be finite and non-negative".into()));
        }
        if let Some((h, w)) = self.patch_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("patch size must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
}

/// The frozen random-feature pyramid.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor, ConvGeom)>,
}

const LAYERS: [(usize, usize, usize); 4] = [(3, 8, 1), (8, 16, 2), (16, 32, 2), (32, 32, 2)];

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYERS
            .iter()
            .map(|&(cin, cout, stride)| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let w = Tensor::randn(&[cout, cin, 3, 3], std, &mut rng);
                let b = Tensor::randn(&[cout], 0.1, &mut rng);
                (w, b, ConvGeom::new(3, stride, 1))
            })
            .collect();
        Self { layers }
    }

    pub fn standard() -> Self {
        Self::new(PERCEPTUAL_SEED)
    }

    /// Per-layer unit-normalized features of a `[0, 1]` image tensor.
    fn features(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let (c, _, _) = g.value(x).dims3();
        let mut h = if c == 1 { g.concat(&[x, x, x]) } else { x };
        h = g.scale(h, 2.0);
        let shape = g.value(h).shape().to_vec();
        let shift = g.constant(Tensor::full(&shape, -1.0));
        h = g.add(h, shift);
        let mut feats = Vec::with_capacity(self.layers.len());
        for (w, b, geom) in &self.layers {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            h = g.conv(h, wv, Some(bv), *geom);
            h = g.silu(h);
            feats.push(g.unit_norm(h, UNIT_EPS));
        }
        feats
    }

    /// `sum_l C_l * mean((phi_l(a) - phi_l(b))^2)`: the per-pixel squared
    /// feature distance, averaged over pixels and summed over layers.
    pub fn distance_graph(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let c = g.value(x).shape()[0] as f64;
            let d = g.mse(x, y);
            let d = g.scale(d, c);
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d),
            });
        }
        total.expect("at least one layer")
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "images differ: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        )));
    }
    Ok(())
}

fn external_distance(program: &PathBuf, a: &Image, b: &Image) -> Result<f64> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let (pa, pb) = (dir.path().join("a.png"), dir.path().join("b.png"));
    crate::io::write_png(&pa, a)?;
    crate::io::write_png(&pb, b)?;
    let out = Command::new(program)
        .arg(&pa)
        .arg(&pb)
        .output()
        .map_err(|e| Error::io(program, e))?;
    if !out.status.success() {
        return Err(Error::InvalidInput(format!(
            "perceptual plugin {} exited with {}",
            program.display(),
            out.status
        )));
    }
    String::from_utf8_lossy(&out.stdout)
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::InvalidInput(format!("perceptual plugin {} printed no number", program.display())))
}

/// Perceptual distance between two images of equal size.
pub fn perceptual_distance(a: &Image, b: &Image, config: &LossConfig) -> Result<f64> {
    check_pair(a, b)?;
    match &config.perceptual_backend {
        PerceptualBackend::RandomFeatures => {
            let net = PerceptualNet::standard();
            let mut g = Graph::new();
            let (va, vb) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
            let d = net.distance_graph(&mut g, va, vb);
            Ok(g.value(d).data()[0])
        }
        PerceptualBackend::External(p) => external_distance(p, a, b),
    }
}

/// Loss graph on a prediction node: `(total, l2, perceptual)`.
pub fn loss_graph(g: &mut Graph, net: &PerceptualNet, pred: Var, gt: &Tensor, lambda: f64) -> (Var, Var, Var) {
    let t = g.constant(gt.clone());
    let l2 = g.mse(pred, t);
    let perc = net.distance_graph(g, pred, t);
    let weighted = g.scale(perc, lambda);
    let total = g.add(l2, weighted);
    (total, l2, perc)
}

/// `MSE(pred, gt) + lambda * perceptual(pred, gt)`.
pub fn total_loss(pred: &Image, gt: &Image, config: &LossConfig) -> Result<LossValue> {
    check_pair(pred, gt)?;
    config.validate()?;
    let l2 = {
        let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        s / pred.data().len() as f64
    };
    let perceptual = if config.lambda_lpips == 0.0 {
        0.0
    } else {
        perceptual_distance(pred, gt, config)?
    };
    Ok(LossValue {
        total: l2 + config.lambda_lpips * perceptual,
        l2,
        perceptual,
    })
}

/// Loss value and its gradient with respect to the prediction's planar
/// `C x H x W` tensor (random-feature backend only).
pub fn total_loss_with_grad(pred: &Image, gt: &Image, config: &LossConfig) -> Result<(LossValue, Tensor)> {
    check_pair(pred, gt)?;
    config.validate()?;
    if config.perceptual_backend != PerceptualBackend::RandomFeatures {
        return Err(Error::Config("external perceptual metrics are not differentiable".into()));
    }
    let net = PerceptualNet::standard();
    let mut g = Graph::new();
    let p = g.leaf(pred.to_tensor(), true);
    let (total, l2, perc) = loss_graph(&mut g, &net, p, &gt.to_tensor(), config.lambda_lpips);
    let value = LossValue {
        total: g.value(total).data()[0],
        l2: g.value(l2).data()[0],
        perceptual: g.value(perc).data()[0],
    };
    let mut grads = g.backward(total);
    let grad = grads.take(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape()));
    Ok((value, grad))
}
