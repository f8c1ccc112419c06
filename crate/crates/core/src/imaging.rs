//! RGB float images, file IO and resampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// RGB image with `f32` samples, interleaved row-major (HWC), nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "image buffer of {} samples does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(w, h, |x, y, c| self.get(x0 + x, y0 + y, c)))
    }

    /// Pointwise blend `(1 − t)·self + t·other`.
    pub fn blend(&self, other: &Image, t: f32) -> Result<Image> {
        self.ensure_same_size(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        Image::new(self.width, self.height, data)
    }

    pub fn ensure_same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Image::new(w as usize, h as usize, img.into_raw())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size checked at construction")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Image {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        Image {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// Save as 8-bit PNG (or whatever the extension selects).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// (1, 3, H, W) tensor in `[0, 1]`.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        images_to_tensor(std::slice::from_ref(self), dtype)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let plane = h * w;
        Ok((0..b)
            .map(|i| {
                let base = i * 3 * plane;
                Image::from_fn(w, h, |x, y, ch| v[base + ch * plane + y * w + x])
            })
            .collect())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }
}

pub fn images_to_tensor(images: &[Image], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut out = vec![0f32; images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        first.ensure_same_size(img)?;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[i * 3 * plane + c * plane + y * w + x] = img.get(x, y, c);
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Keys cubic convolution kernel with `a = −0.5`.
#[inline]
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-pixel taps `(indices, weights)` for resampling one axis.
fn cubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let base = center.floor();
            let frac = center - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for k in 0..4 {
                let pos = base as i64 - 1 + k as i64;
                idx[k] = pos.clamp(0, src as i64 - 1) as usize;
                w[k] = cubic(frac + 1.0 - k as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling with half-pixel centers and clamped borders.
///
/// The kernel is not widened when downscaling. For an integer factor of 4
/// every output pixel therefore depends only on its own 4×4 input block,
/// which makes downsampling commute with block-aligned cropping.
pub fn resize_bicubic(img: &Image, width: usize, height: usize) -> Result<Image> {
    if img.is_empty() || width == 0 || height == 0 {
        return Err(Error::InvalidInput("cannot resize an empty image".into()));
    }
    let tx = cubic_taps(img.width, width);
    let ty = cubic_taps(img.height, height);
    let mut tmp = vec![0f64; img.height * width * 3];
    for y in 0..img.height {
        for (x, (idx, w)) in tx.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * img.get(idx[k], y, c) as f64;
                }
                tmp[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(width * height * 3);
    for (idx, w) in &ty {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w[k] * tmp[(idx[k] * width + x) * 3 + c];
                }
                out.push(acc as f32);
            }
        }
    }
    Image::new(width, height, out)
}

/// Downsample by an integer factor with [`resize_bicubic`].
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "{}x{} not divisible by {factor}",
            img.width, img.height
        )));
    }
    resize_bicubic(img, img.width / factor, img.height / factor)
}

pub fn upsample(img: &Image, factor: usize) -> Result<Image> {
    resize_bicubic(img, img.width * factor, img.height * factor)
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 || img.is_empty() {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = vec![0f64; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += kv * img.get(xx as usize, y as usize, c) as f64;
                }
                tmp[((y * w + x) * 3 + c as i64) as usize] = acc;
            }
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[((yy * w + x) * 3 + c as i64) as usize];
                }
                out.set(x as usize, y as usize, c, acc as f32);
            }
        }
    }
    out
}

/// Sorted list of image files (png/jpg/jpeg/bmp/webp) directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp" | "webp")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
