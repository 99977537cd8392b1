//! `section.key = value` run configuration.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::ProjectionMethod;
use crate::dataset::WarpMode;
use crate::error::{Error, Result};
use crate::fixer::FixerConfig;
use crate::training::{LossConfig, OptimConfig};
use crate::warp::DEFAULT_TEMPERATURE;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub lambda_lpips: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch: 1,
            steps: 50_000,
            patch_h: 480,
            patch_w: 832,
            lambda_lpips: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpSection {
    pub mode: WarpMode,
    pub temperature: f64,
}

impl Default for WarpSection {
    fn default() -> Self {
        Self {
            mode: WarpMode::Flow,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSection {
    pub method: ProjectionMethod,
    pub perplexity: f64,
    pub seed: u64,
    /// Images drawn per variant; all when `None`.
    pub samples: Option<usize>,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            method: ProjectionMethod::Tsne,
            perplexity: 30.0,
            seed: 0,
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: FixerConfig,
    pub train: TrainSection,
    pub warp: WarpSection,
    pub analyze: AnalyzeSection,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive and finite")))
    }
}

/// Mixes a named stream into a base seed (FNV-1a over the name, then a
/// splitmix64 finalizer).
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = base ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "model.scales" => m.scales = parse(key, v)?,
            "model.channels" => {
                m.channels = v
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "model.latent_channels" => m.latent_channels = parse(key, v)?,
            "model.max_offset" => m.max_offset = parse(key, v)?,
            "model.attn_blocks" => m.attn_blocks = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.offset_hidden" => m.offset_hidden = parse(key, v)?,
            "model.use_ldi" => m.use_ldi = parse(key, v)?,
            "model.freeze_encoder" => m.freeze_encoder = parse(key, v)?,
            "train.lr" => self.train.lr = positive(key, parse(key, v)?)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.patch_h" => self.train.patch_h = parse(key, v)?,
            "train.patch_w" => self.train.patch_w = parse(key, v)?,
            "train.lambda_lpips" => self.train.lambda_lpips = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "warp.mode" => self.warp.mode = v.parse()?,
            "warp.temperature" => self.warp.temperature = positive(key, parse(key, v)?)?,
            "analyze.method" => {
                self.analyze.method = v
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: expected tsne or pca, got '{v}'")))?
            }
            "analyze.perplexity" => self.analyze.perplexity = positive(key, parse(key, v)?)?,
            "analyze.seed" => self.analyze.seed = parse(key, v)?,
            "analyze.samples" => self.analyze.samples = Some(parse(key, v)?),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim().validate()?;
        self.loss().validate()?;
        if self.analyze.samples == Some(0) {
            return Err(Error::Config("analyze.samples must be positive".into()));
        }
        Ok(())
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.analyze.seed = seed;
        self
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.train.seed, "init")
    }

    pub fn crop_seed(&self) -> u64 {
        derive_seed(self.train.seed, "crop")
    }

    pub fn curation_seed(&self) -> u64 {
        derive_seed(self.train.seed, "curation")
    }

    pub fn analysis_seed(&self) -> u64 {
        derive_seed(self.analyze.seed, "analysis")
    }

    /// Model configuration with the derived initialization seed.
    pub fn fixer_config(&self) -> FixerConfig {
        FixerConfig {
            seed: self.init_seed(),
            ..self.model.clone()
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.train.lr,
            batch_size: self.train.batch,
            max_steps: self.train.steps,
            seed: self.crop_seed(),
            ..OptimConfig::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_lpips: self.train.lambda_lpips,
            patch_size: Some((self.train.patch_h, self.train.patch_w)),
            ..LossConfig::default()
        }
    }
}
