//! Image tensors in `[-1, 1]` and their 8-bit file representation.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};
use unblur_autograd::Tensor;

use crate::error::{Error, Result};

/// An `H×W×C` image with values in `[-1, 1]`, stored channel-planar.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageTensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[1, C, H, W]` tensor view of this image.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.data.clone(),
        )
    }

    /// Item `index` of an `[N, C, H, W]` tensor.
    pub fn from_batch(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        };
        if index >= n {
            return Err(Error::Shape(format!("batch index {index} out of {n}")));
        }
        let len = c * h * w;
        ImageTensor::new(c, h, w, t.data()[index * len..(index + 1) * len].to_vec())
    }

    /// Top-left `size×size` window starting at `(y0, x0)`, optionally mirrored
    /// horizontally.
    pub fn crop(&self, y0: usize, x0: usize, size: usize, flip: bool) -> Result<Self> {
        if y0 + size > self.height || x0 + size > self.width {
            return Err(Error::Shape(format!(
                "crop {size}x{size} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Ok(ImageTensor::from_fn(self.channels, size, size, |c, y, x| {
            let sx = if flip { size - 1 - x } else { x };
            self.get(c, y0 + y, x0 + sx)
        }))
    }

    /// Quantizes to 8 bits per sample: `round((v + 1)·127.5)`, clamped.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    /// Builds an image from planar 8-bit samples via `x/127.5 − 1`.
    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        ImageTensor::new(
            channels,
            height,
            width,
            bytes.iter().map(|&b| from_byte(b)).collect(),
        )
    }

    /// Loads an 8-bit PNG or JPEG. Grayscale files stay single-channel unless
    /// `channels` asks for 3; anything else is converted to RGB. Pass `None`
    /// to keep the file's own layout (1 channel for gray, 3 otherwise).
    pub fn load(path: &Path, channels: Option<usize>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let want = channels.unwrap_or(if img.color().has_color() { 3 } else { 1 });
        match want {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                ImageTensor::from_u8(1, h as usize, w as usize, g.as_raw())
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                let (w, h) = (w as usize, h as usize);
                let raw = rgb.as_raw();
                let mut planar = vec![0u8; 3 * w * h];
                for (i, px) in raw.chunks(3).enumerate() {
                    for c in 0..3 {
                        planar[c * w * h + i] = px[c];
                    }
                }
                ImageTensor::from_u8(3, h, w, &planar)
            }
            other => Err(Error::Param(format!(
                "unsupported channel count {other} (expected 1 or 3)"
            ))),
        }
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let img = match self.channels {
            1 => DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, bytes).expect("buffer sized from dims"),
            ),
            3 => {
                let n = self.width * self.height;
                let mut inter = vec![0u8; 3 * n];
                for i in 0..n {
                    for c in 0..3 {
                        inter[3 * i + c] = bytes[c * n + i];
                    }
                }
                let buf: RgbImage = ImageBuffer::from_raw(w, h, inter).expect("buffer sized");
                DynamicImage::ImageRgb8(buf)
            }
            other => {
                return Err(Error::Param(format!(
                    "cannot save a {other}-channel image"
                )))
            }
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Stacks equally sized images into an `[N, C, H, W]` tensor.
pub fn stack(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
    let dims = first.dims();
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != dims {
            return Err(Error::Shape(format!(
                "cannot stack {:?} with {:?}",
                img.dims(),
                dims
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(
        vec![images.len(), dims.0, dims.1, dims.2],
        data,
    ))
}

/// Splits an `[N, C, H, W]` tensor back into images.
pub fn unstack(t: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
    let n = t.shape().first().copied().unwrap_or(0);
    (0..n).map(|i| ImageTensor::from_batch(t, i)).collect()
}
