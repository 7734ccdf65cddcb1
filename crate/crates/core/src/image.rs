//! Channel-first float images and PNG I/O.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single image in channel-height-width layout. Pixel values loaded from
/// disk lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl TensorImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "image buffer size");
        TensorImage {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Loads an image file as 3-channel floats in `[0, 1]`; grayscale
    /// sources are replicated across the three channels.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        let mut data = vec![0.0; 3 * h * w];
        for (i, px) in raw.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = px[c];
            }
        }
        Ok(Self::new(3, h, w, data))
    }

    /// Channel mean of each pixel, quantised to 8 bits.
    pub fn to_gray8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let mean = (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32;
                (mean.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect()
    }

    fn gray_buffer(&self) -> GrayImage {
        let gray = self.to_gray8();
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([gray[y as usize * self.width + x as usize]])
        })
    }

    /// Writes an 8-bit grayscale PNG (channel mean of `[0, 1]` values).
    pub fn save_gray_png(&self, path: &Path) -> Result<()> {
        self.gray_buffer()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Load {
                    path: path.to_path_buf(),
                    reason: other.to_string(),
                },
            })
    }

    /// In-memory encoding of [`save_gray_png`](Self::save_gray_png).
    pub fn encode_gray_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.gray_buffer()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Integrity(format!("PNG encoding failed: {e}")))?;
        Ok(out.into_inner())
    }
}

/// Stacks equally-sized images into an `[N, C, H, W]` tensor.
pub fn stack(images: &[&TensorImage]) -> Tensor {
    assert!(!images.is_empty(), "cannot stack an empty batch");
    let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!((img.channels, img.height, img.width), (c, h, w), "ragged batch");
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(data, &[images.len(), c, h, w])
}

/// Splits an `[N, C, H, W]` tensor back into images.
pub fn unstack(batch: &Tensor) -> Vec<TensorImage> {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    batch
        .data()
        .chunks_exact(c * h * w)
        .map(|chunk| TensorImage::new(c, h, w, chunk.to_vec()))
        .collect()
}
