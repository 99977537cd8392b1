//! The pixel container shared by every stage of the pipeline.
//!
//! Pixels are stored row-major and channel-interleaved (`H x W x C`) as `f64`
//! in `[0, 1]`. An optional validity mask marks which pixels carry real
//! content; warping leaves holes with `valid = false`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl Image {
    /// Builds an image from interleaved data. Values are clamped to `[0, 1]`;
    /// non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image has zero extent".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        for v in data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image pixel".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            valid: None,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "validity mask has {} entries for a {}x{} image",
                valid.len(),
                self.height,
                self.width
            )));
        }
        self.valid = Some(valid);
        Ok(self)
    }

    pub fn without_valid(mut self) -> Self {
        self.valid = None;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid
            .as_ref()
            .is_none_or(|v| v[y * self.width + x])
    }

    /// Validity as a dense vector; all true when no mask is attached.
    pub fn valid_or_all(&self) -> Vec<bool> {
        self.valid
            .clone()
            .unwrap_or_else(|| vec![true; self.height * self.width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// BT.601 luma, or the single channel of a gray image.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
            valid: self.valid.clone(),
        }
    }

    /// Sets invalid pixels to zero.
    pub fn zero_invalid(&self) -> Image {
        let mut out = self.clone();
        if let Some(valid) = &self.valid {
            for (i, ok) in valid.iter().enumerate() {
                if !ok {
                    for c in 0..self.channels {
                        out.data[i * self.channels + c] = 0.0;
                    }
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        let mut valid = self.valid.as_ref().map(|_| Vec::with_capacity(height * width));
        for y in top..top + height {
            let row = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[row..row + width * self.channels]);
            if let (Some(dst), Some(src)) = (valid.as_mut(), self.valid.as_ref()) {
                dst.extend_from_slice(&src[y * self.width + left..y * self.width + left + width]);
            }
        }
        Ok(Image {
            height,
            width,
            channels: self.channels,
            data,
            valid,
        })
    }

    /// Planar `C x H x W` tensor of the pixel values.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for i in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + i] = self.data[i * c + ch];
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = t.dims3();
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = t.data()[ch * h * w + i];
            }
        }
        Image::new(h, w, c, data)
    }

    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        valid: Option<Vec<bool>>,
    ) -> Image {
        debug_assert_eq!(data.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            data,
            valid,
        }
    }
}
