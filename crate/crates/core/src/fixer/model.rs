//! Fixer configuration, parameter storage and layer layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tensor};

use super::deform::TAPS;

#[derive(Debug, Clone, PartialEq)]
pub struct FixerConfig {
    /// Image channels (3 for RGB).
    pub in_channels: usize,
    /// Number of encoder feature scales `n`.
    pub scales: usize,
    /// Channel count per scale, finest first.
    pub channels: Vec<usize>,
    /// Bottleneck latent channels.
    pub latent_channels: usize,
    /// Offset bound `R` in pixels at every scale.
    pub max_offset: f64,
    /// Reference-mixed attention blocks at the bottleneck.
    pub attn_blocks: usize,
    pub heads: usize,
    /// Hidden width of the offset/mask predictor.
    pub offset_hidden: usize,
    /// When false each scale injects `f_deg + f_ref` straight into the
    /// decoder, with no deformable alignment and no gate.
    pub use_ldi: bool,
    /// Excludes encoder parameters from training.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FixerConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            scales: 3,
            channels: vec![32, 64, 128],
            latent_channels: 128,
            max_offset: 4.0,
            attn_blocks: 2,
            heads: 1,
            offset_hidden: 32,
            use_ldi: true,
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl FixerConfig {
    /// A small configuration for desk-scale training runs and tests.
    pub fn toy() -> Self {
        Self {
            channels: vec![8, 16, 16],
            latent_channels: 16,
            offset_hidden: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales == 0 {
            return bad("model needs at least one scale".into());
        }
        if self.channels.len() != self.scales {
            return bad(format!(
                "{} channel counts given for {} scales",
                self.channels.len(),
                self.scales
            ));
        }
        if self.channels.contains(&0) || self.latent_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad("in_channels must be 1 or 3".into());
        }
        if !(self.max_offset > 0.0 && self.max_offset.is_finite()) {
            return bad("max_offset must be positive".into());
        }
        if self.heads == 0 || !self.latent_channels.is_multiple_of(self.heads) {
            return bad(format!(
                "latent channels {} do not split into {} heads",
                self.latent_channels, self.heads
            ));
        }
        if self.offset_hidden == 0 {
            return bad("offset_hidden must be positive".into());
        }
        Ok(())
    }

    /// Spatial divisor required of input images.
    pub fn divisor(&self) -> usize {
        1 << self.scales
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    pub w: usize,
    pub b: usize,
    pub geom: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearLayer {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct LdiScale {
    pub pred1: ConvLayer,
    pub pred2: ConvLayer,
    pub dcn_w: usize,
    pub dcn_b: usize,
    pub gate: ConvLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub stem: ConvLayer,
    pub enc_convs: Vec<ConvLayer>,
    /// Stride-2 convolutions; the last one produces the latent.
    pub enc_downs: Vec<ConvLayer>,
    pub attn: Vec<AttnBlock>,
    pub ldi: Vec<LdiScale>,
    pub dec_in: ConvLayer,
    pub dec_merge: Vec<ConvLayer>,
    pub dec_convs: Vec<ConvLayer>,
    pub dec_out: ConvLayer,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom, gain: f64) -> ConvLayer {
        let fan_in = (cin * geom.kernel * geom.kernel) as f64;
        let w = Tensor::randn(&[cout, cin, geom.kernel, geom.kernel], gain / fan_in.sqrt(), &mut self.rng);
        let w = self.params.push(format!("{name}.w"), w);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, geom }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> ConvLayer {
        let w = self.params.push(
            format!("{name}.w"),
            Tensor::zeros(&[cout, cin, geom.kernel, geom.kernel]),
        );
        let b = self.params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        ConvLayer { w, b, geom }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, gain: f64) -> LinearLayer {
        let w = Tensor::randn(&[cin, cout], gain / (cin as f64).sqrt(), &mut self.rng);
        let w = self.params.push(format!("{name}.w"), w);
        let b = self.params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        LinearLayer { w, b }
    }
}

/// SiLU-friendly gain for random initialization.
const GAIN: f64 = 1.4;

/// Gate bias at initialization: `sigmoid(2) ~ 0.88`, i.e. start by trusting
/// the degraded-view features.
pub const GATE_BIAS_INIT: f64 = 2.0;

pub(crate) fn build(config: &FixerConfig) -> (ParamSet, Layout) {
    let mut b = Builder {
        params: ParamSet::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let ch = &config.channels;
    let n = config.scales;
    let lat = config.latent_channels;

    let stem = b.conv("enc.stem", config.in_channels, ch[0], ConvGeom::SAME3, GAIN);
    let mut enc_convs = Vec::new();
    let mut enc_downs = Vec::new();
    for i in 0..n {
        enc_convs.push(b.conv(&format!("enc.s{i}.conv"), ch[i], ch[i], ConvGeom::SAME3, GAIN));
        let (name, cout) = if i + 1 < n {
            (format!("enc.s{i}.down"), ch[i + 1])
        } else {
            ("enc.latent".to_string(), lat)
        };
        enc_downs.push(b.conv(&name, ch[i], cout, ConvGeom::DOWN3, GAIN));
    }

    let attn = (0..config.attn_blocks)
        .map(|k| AttnBlock {
            q: b.linear(&format!("attn.{k}.q"), lat, lat, 1.0),
            k: b.linear(&format!("attn.{k}.k"), lat, lat, 1.0),
            v: b.linear(&format!("attn.{k}.v"), lat, lat, 0.5),
        })
        .collect();

    let mut ldi = Vec::new();
    if config.use_ldi {
        for (i, &c) in ch.iter().enumerate() {
            let pred1 = b.conv(&format!("ldi.{i}.pred1"), 2 * c + 1, config.offset_hidden, ConvGeom::SAME3, GAIN);
            // zero-initialized: identity alignment (zero offsets, mask 0.5) at start
            let pred2 = b.zero_conv(&format!("ldi.{i}.pred2"), config.offset_hidden, 3 * TAPS, ConvGeom::SAME3);
            let dcn_w = b.params.push(
                format!("ldi.{i}.dcn.w"),
                Tensor::randn(&[c, c, 3, 3], 0.5 / ((9 * c) as f64).sqrt(), &mut b.rng),
            );
            let dcn_b = b.params.push(format!("ldi.{i}.dcn.b"), Tensor::zeros(&[c]));
            let gate = b.conv(&format!("ldi.{i}.gate"), 2 * c + 1, c, ConvGeom::SAME3, 0.5);
            b.params.tensors[gate.b] = Tensor::full(&[c], GATE_BIAS_INIT);
            ldi.push(LdiScale {
                pred1,
                pred2,
                dcn_w,
                dcn_b,
                gate,
            });
        }
    }

    let dec_in = b.conv("dec.in", lat, ch[n - 1], ConvGeom::SAME3, GAIN);
    let mut dec_merge = vec![None; n];
    let mut dec_convs = vec![None; n];
    for i in (0..n).rev() {
        dec_merge[i] = Some(b.conv(&format!("dec.s{i}.merge"), 2 * ch[i], ch[i], ConvGeom::POINT, GAIN));
        let cout = if i > 0 { ch[i - 1] } else { ch[0] };
        dec_convs[i] = Some(b.conv(&format!("dec.s{i}.conv"), ch[i], cout, ConvGeom::SAME3, GAIN));
    }
    let dec_out = b.conv("dec.out", ch[0], config.in_channels, ConvGeom::SAME3, 1.0);

    let layout = Layout {
        stem,
        enc_convs,
        enc_downs,
        attn,
        ldi,
        dec_in,
        dec_merge: dec_merge.into_iter().map(Option::unwrap).collect(),
        dec_convs: dec_convs.into_iter().map(Option::unwrap).collect(),
        dec_out,
    };
    let mut params = b.params;
    for t in params.tensors_mut() {
        round_to_f32(t);
    }
    (params, layout)
}

/// Snaps values to the nearest `f32`, the precision checkpoints store.
pub fn round_to_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// The fixer network: encoder with feature taps, reference-mixed attention
/// at the bottleneck, per-scale deformable alignment and gated fusion, and a
/// decoder that merges the fused features.
#[derive(Debug, Clone)]
pub struct FixerModel {
    config: FixerConfig,
    params: ParamSet,
    pub(crate) layout: Layout,
}

impl PartialEq for FixerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl FixerModel {
    /// Freshly initialized model, seeded by `config.seed`.
    pub fn new(config: FixerConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_params(config: FixerConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if named.len() != model.params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = model
                .params
                .index_of(&name)
                .ok_or_else(|| Error::InvalidInput(format!("unexpected tensor '{name}'")))?;
            if model.params.tensors[i].shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensors[i].shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("tensor '{name}'")));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &FixerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Whether parameter `i` receives gradient updates.
    pub fn is_trainable(&self, i: usize) -> bool {
        !(self.config.freeze_encoder && self.params.names[i].starts_with("enc."))
    }

    /// Parameter groups, keyed by the first two name components
    /// (`enc.stem`, `attn.0`, `ldi.1`, `dec.s0`, ...).
    pub fn param_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, name) in self.params.names.iter().enumerate() {
            let key: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups
    }

    /// Creates one graph leaf per parameter. `trainable` leaves track gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), trainable && self.is_trainable(i)))
            .collect()
    }
}
