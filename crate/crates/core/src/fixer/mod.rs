//! The reference-guided fixer network and its building blocks.

pub mod attention;
pub mod deform;
pub(crate) mod graph;
mod model;

pub use model::{round_to_f32, FixerConfig, FixerModel, ParamSet, GATE_BIAS_INIT};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

use deform::TAPS;

/// Encoder bottleneck features, `C x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid(Tensor);

impl LatentGrid {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 3 || t.shape().contains(&0) {
            return Err(Error::Shape(format!("latent must be C x h x w, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("latent grid".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Encoder taps, finest first; each scale halves the spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures(Vec<Tensor>);

impl MultiScaleFeatures {
    pub fn new(scales: Vec<Tensor>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Shape("at least one feature scale required".into()));
        }
        for (i, t) in scales.iter().enumerate() {
            if t.shape().len() != 3 {
                return Err(Error::Shape(format!("scale {i} is not C x H x W")));
            }
            if i > 0 {
                let (_, ph, pw) = scales[i - 1].dims3();
                let (_, h, w) = t.dims3();
                if 2 * h != ph || 2 * w != pw {
                    return Err(Error::Shape(format!(
                        "scale {i} is {h}x{w}, expected half of {ph}x{pw}"
                    )));
                }
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("feature scale {i}")));
            }
        }
        Ok(Self(scales))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&self, i: usize) -> &Tensor {
        &self.0[i]
    }

    pub fn scales(&self) -> &[Tensor] {
        &self.0
    }
}

/// Per-tap sampling offsets (`2K x H x W`, dy/dx interleaved per tap) and
/// modulation mask (`K x H x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    offsets: Tensor,
    mask: Tensor,
}

impl OffsetField {
    pub fn new(offsets: Tensor, mask: Tensor) -> Result<Self> {
        let (c, h, w) = offsets.dims3();
        if c != 2 * TAPS || mask.shape() != [TAPS, h, w] {
            return Err(Error::Shape(format!(
                "offset field shapes {:?} / {:?} do not match {} taps",
                offsets.shape(),
                mask.shape(),
                TAPS
            )));
        }
        if !offsets.all_finite() {
            return Err(Error::NonFinite("offsets".into()));
        }
        if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { offsets, mask })
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }
}

/// Gate output `G` in `[0, 1]`, one entry per channel and pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Tensor);

impl ConfidenceMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("confidence entries must lie in [0, 1]".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `G * f_deg + (1 - G) * f_ref_aligned`, elementwise.
pub fn fuse(f_deg: &Tensor, f_ref_aligned: &Tensor, gate: &ConfidenceMap) -> Result<Tensor> {
    check_same(f_deg, f_ref_aligned, "fusion")?;
    check_same(f_deg, gate.tensor(), "fusion gate")?;
    let mut g = Graph::new();
    let (d, r, gt) = (
        g.constant(f_deg.clone()),
        g.constant(f_ref_aligned.clone()),
        g.constant(gate.tensor().clone()),
    );
    let out = graph::fuse(&mut g, gt, d, r);
    Ok(g.value(out).clone())
}

/// Modulated deformable 3x3 convolution with explicit weights
/// (`C x C x 3 x 3`, bias `C`), added residually to `f_ref`.
pub fn deformable_sample_with(
    f_ref: &Tensor,
    field: &OffsetField,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = f_ref.dims3();
    if field.offsets.shape()[1..] != [h, w] {
        return Err(Error::Shape("offset field does not match feature grid".into()));
    }
    if weight.shape() != [c, c, 3, 3] || bias.shape() != [c] {
        return Err(Error::Shape(format!(
            "deformable weights {:?} / {:?} do not fit {c} channels",
            weight.shape(),
            bias.shape()
        )));
    }
    let mut g = Graph::new();
    let fr = g.constant(f_ref.clone());
    let off = g.constant(field.offsets.clone());
    let mask = g.constant(field.mask.clone());
    let wv = g.constant(weight.clone());
    let bv = g.constant(bias.clone());
    let out = graph::deformable_sample(&mut g, wv, bv, fr, off, mask);
    Ok(g.value(out).clone())
}

fn all_valid(h: usize, w: usize) -> Tensor {
    Tensor::full(&[1, h, w], 1.0)
}

impl FixerModel {
    fn inference_graph(&self) -> (Graph, Vec<Var>) {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        (g, p)
    }

    fn check_divisible(&self, what: &'static str, h: usize, w: usize) -> Result<()> {
        let d = self.config().divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Indivisible {
                what,
                height: h,
                width: w,
                divisor: d,
            });
        }
        Ok(())
    }

    fn check_image(&self, img: &Image, what: &'static str) -> Result<()> {
        if img.channels() != self.config().in_channels {
            return Err(Error::Shape(format!(
                "{what} has {} channels, model expects {}",
                img.channels(),
                self.config().in_channels
            )));
        }
        self.check_divisible(what, img.height(), img.width())
    }

    fn check_scale(&self, scale: usize) -> Result<()> {
        if !self.config().use_ldi {
            return Err(Error::Config("model was built without detail injection".into()));
        }
        if scale >= self.config().scales {
            return Err(Error::InvalidInput(format!(
                "scale {scale} out of range (model has {})",
                self.config().scales
            )));
        }
        Ok(())
    }

    fn check_feature(&self, f: &Tensor, scale: usize) -> Result<()> {
        let c = self.config().channels[scale];
        if f.shape().len() != 3 || f.shape()[0] != c {
            return Err(Error::Shape(format!(
                "scale {scale} features must have {c} channels, got {:?}",
                f.shape()
            )));
        }
        Ok(())
    }

    /// Bottleneck latent and the per-scale encoder taps of `image`.
    pub fn encode(&self, image: &Image) -> Result<(LatentGrid, MultiScaleFeatures)> {
        self.check_image(image, "encoder input")?;
        let (mut g, p) = self.inference_graph();
        let x = g.constant(graph::normalize_input(&image.to_tensor()));
        let (z, taps) = graph::encode(&mut g, self, &p, x);
        let feats = taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((LatentGrid::new(g.value(z).clone())?, MultiScaleFeatures::new(feats)?))
    }

    /// Joint attention over both latents' tokens with residual updates.
    pub fn reference_mixed_attention(
        &self,
        z_deg: &LatentGrid,
        z_ref: &LatentGrid,
    ) -> Result<(LatentGrid, LatentGrid)> {
        check_same(z_deg.tensor(), z_ref.tensor(), "attention latents")?;
        self.check_latent(z_deg)?;
        let (mut g, p) = self.inference_graph();
        let zd = g.constant(z_deg.tensor().clone());
        let zr = g.constant(z_ref.tensor().clone());
        let (d, r) = graph::mixed_attention(&mut g, self, &p, zd, zr);
        Ok((
            LatentGrid::new(g.value(d).clone())?,
            LatentGrid::new(g.value(r).clone())?,
        ))
    }

    /// The attention blocks on an arbitrary `n x C` token matrix.
    pub fn attend_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        if tokens.shape().len() != 2 || tokens.shape()[1] != self.config().latent_channels {
            return Err(Error::Shape(format!(
                "tokens must be n x {}, got {:?}",
                self.config().latent_channels,
                tokens.shape()
            )));
        }
        let (mut g, p) = self.inference_graph();
        let t = g.constant(tokens.clone());
        let out = graph::attention_blocks(&mut g, self, &p, t);
        Ok(g.value(out).clone())
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        if z.tensor().shape()[0] != self.config().latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, model expects {}",
                z.tensor().shape()[0],
                self.config().latent_channels
            )));
        }
        Ok(())
    }

    /// Offsets and modulation mask at `scale`. `valid` is the warped
    /// reference's validity pooled to this scale (`1 x H x W`); all-valid
    /// when absent.
    pub fn predict_offsets(
        &self,
        f_deg: &Tensor,
        f_ref: &Tensor,
        valid: Option<&Tensor>,
        scale: usize,
    ) -> Result<OffsetField> {
        self.check_scale(scale)?;
        check_same(f_deg, f_ref, "offset prediction")?;
        self.check_feature(f_deg, scale)?;
        let (_, h, w) = f_deg.dims3();
        let valid = valid.cloned().unwrap_or_else(|| all_valid(h, w));
        let (mut g, p) = self.inference_graph();
        let (fd, fr, v) = (g.constant(f_deg.clone()), g.constant(f_ref.clone()), g.constant(valid));
        let (off, mask) = graph::predict_offsets(&mut g, self, &p, scale, fd, fr, v);
        OffsetField::new(g.value(off).clone(), g.value(mask).clone())
    }

    /// Deformable alignment of reference features with this scale's kernel.
    pub fn deformable_sample(&self, f_ref: &Tensor, field: &OffsetField, scale: usize) -> Result<Tensor> {
        self.check_scale(scale)?;
        self.check_feature(f_ref, scale)?;
        let l = &self.layout.ldi[scale];
        let t = self.params().tensors();
        deformable_sample_with(f_ref, field, &t[l.dcn_w], &t[l.dcn_b])
    }

    /// Gated fusion at `scale`: returns the fused features and the gate.
    pub fn gated_fusion(
        &self,
        f_deg: &Tensor,
        f_ref_aligned: &Tensor,
        valid: Option<&Tensor>,
        scale: usize,
    ) -> Result<(Tensor, ConfidenceMap)> {
        self.check_scale(scale)?;
        check_same(f_deg, f_ref_aligned, "gated fusion")?;
        self.check_feature(f_deg, scale)?;
        let (_, h, w) = f_deg.dims3();
        let valid = valid.cloned().unwrap_or_else(|| all_valid(h, w));
        let (mut g, p) = self.inference_graph();
        let (fd, fra, v) = (
            g.constant(f_deg.clone()),
            g.constant(f_ref_aligned.clone()),
            g.constant(valid),
        );
        let gt = graph::gate(&mut g, self, &p, scale, fd, fra, v);
        let out = graph::fuse(&mut g, gt, fd, fra);
        Ok((g.value(out).clone(), ConfidenceMap::new(g.value(gt).clone())?))
    }

    /// Decodes a latent with per-scale feature injection.
    pub fn decode(&self, z: &LatentGrid, fused: &MultiScaleFeatures) -> Result<Image> {
        if fused.len() != self.config().scales {
            return Err(Error::Shape(format!(
                "{} feature scales given, model has {}",
                fused.len(),
                self.config().scales
            )));
        }
        self.check_latent(z)?;
        let (_, zh, zw) = z.tensor().dims3();
        for (i, f) in fused.scales().iter().enumerate() {
            self.check_feature(f, i)?;
            let (_, h, w) = f.dims3();
            if h != zh << (self.config().scales - i) || w != zw << (self.config().scales - i) {
                return Err(Error::Shape(format!("scale {i} features do not match the latent size")));
            }
        }
        let (mut g, p) = self.inference_graph();
        let zv = g.constant(z.tensor().clone());
        let fv: Vec<Var> = fused.scales().iter().map(|t| g.constant(t.clone())).collect();
        let out = graph::decode(&mut g, self, &p, zv, &fv);
        Image::from_tensor(g.value(out))
    }

    /// Restores `degraded` using the pre-aligned reference `warped`. Pixels
    /// flagged invalid in `warped` are zero-filled before encoding.
    pub fn fix(&self, degraded: &Image, warped: &Image) -> Result<Image> {
        if !degraded.same_dims(warped) {
            return Err(Error::Shape(format!(
                "degraded {:?}x{} and warped {:?}x{} differ",
                degraded.dims(),
                degraded.channels(),
                warped.dims(),
                warped.channels()
            )));
        }
        self.check_image(degraded, "degraded view")?;
        let (deg, war, valid) = fixer_inputs(degraded, warped);
        let (mut g, p) = self.inference_graph();
        let fwd = graph::forward(&mut g, self, &p, &deg, &war, &valid);
        Image::from_tensor(g.value(fwd))
    }
}

/// Network-ready planar tensors: degraded, zero-filled warped, and the
/// `1 x H x W` validity mask.
pub fn fixer_inputs(degraded: &Image, warped: &Image) -> (Tensor, Tensor, Tensor) {
    let (h, w) = warped.dims();
    let valid = warped
        .valid_or_all()
        .into_iter()
        .map(|v| if v { 1.0 } else { 0.0 })
        .collect();
    (
        degraded.to_tensor(),
        warped.zero_invalid().to_tensor(),
        Tensor::new(vec![1, h, w], valid),
    )
}
