//! `UFIX` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UFIX" | u32 version | u32 meta_len | meta (UTF-8 "key=value" lines)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | u8 dtype (0 = f32)
//!             | u64 byte_offset | u64 byte_len
//! raw f32 data, offsets relative to the start of this section
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fixer::{FixerConfig, FixerModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UFIX";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Metadata plus named tensors, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor)> {
        self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            let len = 4 * t.len() as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0, path };
        if rd.take(4)? != MAGIC {
            return Err(Error::format(path, "not a UFIX checkpoint"));
        }
        let version = rd.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = rd.u32()? as usize;
        let meta_text = std::str::from_utf8(rd.take(meta_len)?)
            .map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        let mut meta = Vec::new();
        for line in meta_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad metadata line '{line}'")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = rd.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| rd.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if rd.take(1)?[0] != DTYPE_F32 {
                return Err(Error::format(path, format!("tensor '{name}' has unsupported dtype")));
            }
            let offset = rd.u64()? as usize;
            let len = rd.u64()? as usize;
            if len != 4 * shape.iter().product::<usize>() {
                return Err(Error::format(path, format!("tensor '{name}' size does not match its shape")));
            }
            manifest.push((name, shape, offset, len));
        }
        let data = &bytes[rd.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset, len) in manifest {
            let raw = data
                .get(offset..offset + len)
                .ok_or_else(|| Error::format(path, format!("tensor '{name}' runs past end of file")))?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, values)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Writes the model configuration into checkpoint metadata.
pub fn write_config(ck: &mut Checkpoint, cfg: &FixerConfig) {
    ck.set_meta("kind", "fixer");
    ck.set_meta("in_channels", cfg.in_channels);
    ck.set_meta("scales", cfg.scales);
    let ch: Vec<String> = cfg.channels.iter().map(|c| c.to_string()).collect();
    ck.set_meta("channels", ch.join(","));
    ck.set_meta("latent_channels", cfg.latent_channels);
    ck.set_meta("max_offset", cfg.max_offset);
    ck.set_meta("attn_blocks", cfg.attn_blocks);
    ck.set_meta("heads", cfg.heads);
    ck.set_meta("offset_hidden", cfg.offset_hidden);
    ck.set_meta("use_ldi", cfg.use_ldi);
    ck.set_meta("freeze_encoder", cfg.freeze_encoder);
    ck.set_meta("seed", cfg.seed);
}

/// Reads a model configuration back from checkpoint metadata.
pub fn read_config(ck: &Checkpoint, path: &Path) -> Result<FixerConfig> {
    if ck.meta("kind") != Some("fixer") {
        return Err(Error::format(path, "checkpoint does not hold a fixer model"));
    }
    fn field<T: std::str::FromStr>(ck: &Checkpoint, path: &Path, key: &str) -> Result<T> {
        let raw = ck
            .meta(key)
            .ok_or_else(|| Error::format(path, format!("missing config key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value '{raw}' for '{key}'")))
    }
    let channels = ck
        .meta("channels")
        .ok_or_else(|| Error::format(path, "missing config key 'channels'"))?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(path, "bad channel list"))?;
    let cfg = FixerConfig {
        in_channels: field(ck, path, "in_channels")?,
        scales: field(ck, path, "scales")?,
        channels,
        latent_channels: field(ck, path, "latent_channels")?,
        max_offset: field(ck, path, "max_offset")?,
        attn_blocks: field(ck, path, "attn_blocks")?,
        heads: field(ck, path, "heads")?,
        offset_hidden: field(ck, path, "offset_hidden")?,
        use_ldi: field(ck, path, "use_ldi")?,
        freeze_encoder: field(ck, path, "freeze_encoder")?,
        seed: field(ck, path, "seed")?,
    };
    cfg.validate()
        .map_err(|e| Error::format(path, format!("stored config is invalid: {e}")))?;
    Ok(cfg)
}

/// A checkpoint holding the model's configuration and parameters.
pub fn model_checkpoint(model: &FixerModel) -> Checkpoint {
    let mut ck = Checkpoint::new();
    write_config(&mut ck, model.config());
    for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
        ck.push(name.clone(), t.clone());
    }
    ck
}

/// Splits `ck` into the model and any extra (non-parameter) tensors.
pub fn model_from_checkpoint(ck: Checkpoint, path: &Path) -> Result<(FixerModel, Checkpoint)> {
    let cfg = read_config(&ck, path)?;
    let probe = FixerModel::new(cfg.clone())?;
    let mut params = Vec::new();
    let mut rest = Checkpoint {
        meta: ck.meta.clone(),
        tensors: Vec::new(),
    };
    for (name, t) in ck.tensors {
        if probe.params().index_of(&name).is_some() {
            params.push((name, t));
        } else {
            rest.tensors.push((name, t));
        }
    }
    let model = FixerModel::from_params(cfg, params)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, rest))
}

pub fn save_model(model: &FixerModel, path: impl AsRef<Path>) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FixerModel> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let ck = Checkpoint::load(&path)?;
    Ok(model_from_checkpoint(ck, &path)?.0)
}
