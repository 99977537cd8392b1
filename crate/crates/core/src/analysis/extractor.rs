//! Patch-token feature extractors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fixer::round_to_f32;
use crate::image::Image;
use crate::tensor::{conv2d_forward, ConvGeom, Tensor};

/// `L x D` token matrix over a `rows x cols` patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenGrid {
    tokens: Vec<f64>,
    rows: usize,
    cols: usize,
    dim: usize,
}

impl PatchTokenGrid {
    pub fn new(tokens: Vec<f64>, rows: usize, cols: usize, dim: usize) -> Result<Self> {
        if rows * cols == 0 || dim == 0 {
            return Err(Error::InvalidInput("token grid needs at least one token and channel".into()));
        }
        if tokens.len() != rows * cols * dim {
            return Err(Error::Shape(format!(
                "{} token values for a {rows}x{cols} grid of dimension {dim}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("patch tokens".into()));
        }
        Ok(Self { tokens, rows, cols, dim })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major `L x D` values.
    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }
}

/// Maps an image to patch tokens. Implementations are immutable once built.
pub trait FeatureExtractor: Send + Sync {
    fn patch_stride(&self) -> usize;
    fn dim(&self) -> usize;
    /// Called with dimensions already checked against the stride.
    fn tokens(&self, image: &Image) -> Result<PatchTokenGrid>;
}

/// Only patch tokens are produced; there is no global token.
pub fn extract_patch_tokens(image: &Image, extractor: &dyn FeatureExtractor) -> Result<PatchTokenGrid> {
    let s = extractor.patch_stride();
    let (h, w) = image.dims();
    if h % s != 0 || w % s != 0 {
        return Err(Error::Indivisible {
            what: "feature extraction",
            height: h,
            width: w,
            divisor: s,
        });
    }
    extractor.tokens(image)
}

const TOY_LAYERS: [(usize, usize); 3] = [(3, 16), (16, 32), (32, 32)];
pub const TOY_SEED: u64 = 0xd1_5eed;

/// Three stride-2 3x3 convolutions with SiLU: 32 channels at stride 8.
/// Biases are zero, so a black image yields zero tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl ToyExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = TOY_LAYERS
            .iter()
            .map(|&(cin, cout)| {
                let mut w = Tensor::randn(&[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), &mut rng);
                round_to_f32(&mut w);
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        Self { layers }
    }

    pub fn standard() -> Self {
        Self::new(TOY_SEED)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "extractor");
        ck.set_meta("layers", self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            ck.push(format!("layer{i}.w"), w.clone());
            ck.push(format!("layer{i}.b"), b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        if ck.meta("kind") != Some("extractor") {
            return Err(Error::format(path, "not an extractor checkpoint"));
        }
        let find = |name: &str| {
            ck.tensors()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(TOY_LAYERS.len());
        for (i, &(cin, cout)) in TOY_LAYERS.iter().enumerate() {
            let (w, b) = (find(&format!("layer{i}.w"))?, find(&format!("layer{i}.b"))?);
            if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
                return Err(Error::format(path, format!("layer {i} has the wrong shape")));
            }
            layers.push((w, b));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

impl FeatureExtractor for ToyExtractor {
    fn patch_stride(&self) -> usize {
        8
    }

    fn dim(&self) -> usize {
        TOY_LAYERS[TOY_LAYERS.len() - 1].1
    }

    fn tokens(&self, image: &Image) -> Result<PatchTokenGrid> {
        let mut h = image.to_rgb().to_tensor();
        for (w, b) in &self.layers {
            let (y, _) = conv2d_forward(&h, w, Some(b), ConvGeom::DOWN3);
            h = y.map(|v| v / (1.0 + (-v).exp()));
        }
        let (d, rows, cols) = h.dims3();
        let mut tokens = vec![0.0; rows * cols * d];
        for c in 0..d {
            for (p, v) in h.channel(c).iter().enumerate() {
                tokens[p * d + c] = *v;
            }
        }
        PatchTokenGrid::new(tokens, rows, cols, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_extractor_shapes_and_zero_input() {
        let ex = ToyExtractor::standard();
        let img = Image::from_fn(64, 64, 3, |y, x, c| ((y * 5 + x * 3 + c) % 9) as f64 / 8.0).unwrap();
        let t = extract_patch_tokens(&img, &ex).unwrap();
        assert_eq!((t.grid_shape(), t.len(), t.dim()), ((8, 8), 64, 32));
        assert_eq!(t, extract_patch_tokens(&img, &ex).unwrap());
        let zero = extract_patch_tokens(&Image::filled(64, 64, 3, 0.0).unwrap(), &ex).unwrap();
        assert!(zero.tokens().iter().all(|&v| v == 0.0));
        let gray = Image::filled(16, 24, 1, 0.5).unwrap();
        assert_eq!(extract_patch_tokens(&gray, &ex).unwrap().grid_shape(), (2, 3));
    }

    #[test]
    fn indivisible_input_asks_for_padding() {
        let err = extract_patch_tokens(&Image::filled(60, 64, 3, 0.0).unwrap(), &ToyExtractor::standard()).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn weights_round_trip_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ex.ufix");
        let ex = ToyExtractor::new(9);
        ex.save(&p).unwrap();
        assert_eq!(ToyExtractor::load(&p).unwrap(), ex);
        assert_ne!(ToyExtractor::new(10), ex);
    }
}
