//! The image currency shared by every module.
//!
//! `ImageTensor` stores interleaved `H×W×C` floats in `[0, 1]`. Networks see
//! images as `NCHW` tensors shifted to `[-1, 1]`; the conversions live here so
//! the two ranges never leak into each other.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from interleaved samples, rejecting non-finite or
    /// out-of-range values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "image dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "expected {} samples for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::data(format!("image sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`ImageTensor::new`] but clamps into `[0, 1]`; NaN maps to 0.
    pub fn from_unclamped(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
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

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "image shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    /// Per-pixel channel mean as a row-major `H×W` plane.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Mean Rec. 709 luminance; single-channel images return their mean.
    pub fn mean_luminance(&self) -> f64 {
        let n = (self.height * self.width) as f64;
        if self.channels == 3 {
            self.data
                .chunks_exact(3)
                .map(|p| 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64)
                .sum::<f64>()
                / n
        } else {
            self.gray().iter().sum::<f64>() / n
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
                self.height, self.width
            )));
        }
        ImageTensor::from_fn(h, w, self.channels, |y, x, c| self.get(y0 + y, x0 + x, c))
    }

    /// Nearest-neighbour resize, used for contact-sheet crops.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Result<ImageTensor> {
        ImageTensor::from_fn(h, w, self.channels, |y, x, c| {
            self.get(y * self.height / h, x * self.width / w, c)
        })
    }

    /// Converts to a `(1, C, H, W)` tensor in `[-1, 1]`.
    pub fn to_signed_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Self::batch_to_signed_tensor(std::slice::from_ref(self), dtype, device)
    }

    /// Stacks equally shaped images into a `(B, C, H, W)` tensor in `[-1, 1]`.
    pub fn batch_to_signed_tensor(images: &[ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot build a tensor from an empty batch"))?;
        let (h, w, c) = first.dims();
        let mut out = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.ensure_same_shape(img)?;
            for ch in 0..c {
                out.extend(img.data.iter().skip(ch).step_by(c).map(|&v| to_signed(v)));
            }
        }
        Ok(Tensor::from_vec(out, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageTensor::batch_to_signed_tensor`], clamping into `[0, 1]`.
    pub fn batch_from_signed_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let plane = h * w;
        (0..b)
            .map(|i| {
                let base = i * c * plane;
                let mut data = vec![0f32; plane * c];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = from_signed(flat[base + ch * plane + p]);
                    }
                }
                ImageTensor::from_unclamped(h, w, c, data)
            })
            .collect()
    }

    pub fn from_signed_tensor(t: &Tensor) -> Result<ImageTensor> {
        let mut imgs = Self::batch_from_signed_tensor(t)?;
        if imgs.len() != 1 {
            return Err(Error::shape(format!("expected batch of 1, got {}", imgs.len())));
        }
        Ok(imgs.remove(0))
    }

    /// Reads any PNG/JPEG as 8-bit RGB scaled to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        ImageTensor::new(h as usize, w as usize, 3, data)
    }

    /// Quantizes to 8 bits, `round(255·v)`.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!("8-bit export needs 3 channels, got {}", self.channels)));
        }
        let raw = self.data.iter().map(|&v| quantize(v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::shape("rgb buffer size mismatch"))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    /// The image rounded to the 8-bit grid, as it would come back from disk.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn to_signed(v: f32) -> f32 {
    2.0 * v - 1.0
}

#[inline]
pub fn from_signed(v: f32) -> f32 {
    (v + 1.0) * 0.5
}
