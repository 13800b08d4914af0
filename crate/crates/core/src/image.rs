//! The channel-last image carrier used by every stage of the pipeline.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// An `H x W x C` array of `f32` samples, channel-last, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
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

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Sample with coordinates clamped to the image border.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Sum of every sample.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    /// Single-channel luma with weights 0.299 / 0.587 / 0.114.
    pub fn to_luma(&self) -> Self {
        match self.channels {
            1 => self.clone(),
            3 => Self::from_fn(self.height, self.width, 1, |y, x, _| {
                0.299 * self.get(y, x, 0) + 0.587 * self.get(y, x, 1) + 0.114 * self.get(y, x, 2)
            }),
            c => Self::from_fn(self.height, self.width, 1, |y, x, _| {
                (0..c).map(|k| self.get(y, x, k)).sum::<f32>() / c as f32
            }),
        }
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// Replicates a single-channel image across `channels`.
    pub fn broadcast_channels(&self, channels: usize) -> Self {
        Self::from_fn(self.height, self.width, channels, |y, x, _| self.get(y, x, 0))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Shifts content by whole pixels, filling uncovered samples with `fill`.
    pub fn translate(&self, dy: isize, dx: isize, fill: f32) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy < 0 || sx < 0 || sy >= self.height as isize || sx >= self.width as isize {
                fill
            } else {
                self.get(sy as usize, sx as usize, c)
            }
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Separable Gaussian blur with clamp-to-edge borders; `radius` taps each side.
    pub fn gaussian_blur(&self, sigma: f32, radius: usize) -> Self {
        if sigma <= 0.0 || radius == 0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma, radius);
        let r = radius as isize;
        let horiz = Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * self.get_clamped(y as isize, x as isize + k as isize - r, c))
                .sum()
        });
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * horiz.get_clamped(y as isize + k as isize - r, x as isize, c))
                .sum()
        })
    }

    /// Gaussian smoothing with zero padding, so the result is exactly zero
    /// farther than `radius` (Chebyshev distance) from any non-zero sample.
    pub fn gaussian_smooth_zero_pad(&self, sigma: f32, radius: usize) -> Self {
        let kernel = gaussian_kernel(sigma, radius);
        let r = radius as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        let at = |img: &ImageTensor, y: isize, x: isize, c: usize| -> f32 {
            if y < 0 || x < 0 || y >= h || x >= w {
                0.0
            } else {
                img.get(y as usize, x as usize, c)
            }
        };
        let horiz = Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * at(self, y as isize, x as isize + k as isize - r, c))
                .sum()
        });
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * at(&horiz, y as isize + k as isize - r, x as isize, c))
                .sum()
        })
    }

    /// Box-average downsampling by an integer factor. Dimensions must divide.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} not divisible by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let norm = 1.0 / (factor * factor) as f32;
        Ok(Self::from_fn(
            self.height / factor,
            self.width / factor,
            self.channels,
            |y, x, c| {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(y * factor + dy, x * factor + dx, c);
                    }
                }
                acc * norm
            },
        ))
    }

    /// Nearest-neighbour resampling to an explicit size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, self.channels, |y, x, c| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(sy, sx, c)
        })
    }

    /// Bilinear resampling with pixel-centre alignment; same-size resampling is exact.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Self::from_fn(height, width, self.channels, |y, x, c| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let wy = fy - y0 as f32;
            let wx = fx - x0 as f32;
            let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
            let bottom = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
            top * (1.0 - wy) + bottom * wy
        })
    }

    /// Rounds to 8-bit levels, as a PNG round trip would.
    pub fn quantize_u8(&self) -> Self {
        self.map(|v| f32::from(to_u8(v)) / 255.0)
    }

    /// `(1, H, W, C)` tensor on the CPU.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (1, self.height, self.width, self.channels),
            &Device::Cpu,
        )?)
    }

    /// Builds an image from a `(1, H, W, C)` or `(H, W, C)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let (h, w, c) = match dims.as_slice() {
            [1, h, w, c] | [h, w, c] => (*h, *w, *c),
            _ => return Err(Error::Shape(format!("cannot view {dims:?} as an image"))),
        };
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::from_fn(h as usize, w as usize, 1, |y, x, _| {
                    f32::from(g.get_pixel(x as u32, y as u32)[0]) / 255.0
                })
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::from_fn(h as usize, w as usize, 3, |y, x, c| {
                    f32::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
                })
            }
        }
    }

    /// Writes an 8-bit PNG (grayscale for 1 channel, RGB for 3).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => {
                let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    image::Luma([to_u8(self.get(y as usize, x as usize, 0))])
                });
                img.save(path)?;
            }
            3 => {
                let img = RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
                    let (y, x) = (y as usize, x as usize);
                    image::Rgb([
                        to_u8(self.get(y, x, 0)),
                        to_u8(self.get(y, x, 1)),
                        to_u8(self.get(y, x, 2)),
                    ])
                });
                img.save(path)?;
            }
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot write a {c}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalised 1-D Gaussian taps of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f32, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_bilinear_is_exact() {
        let img = ImageTensor::from_fn(8, 4, 3, |y, x, c| (y * 7 + x * 3 + c) as f32 / 60.0);
        assert_eq!(img.resize_bilinear(8, 4), img);
    }

    #[test]
    fn zero_pad_smoothing_has_compact_support() {
        let mut img = ImageTensor::zeros(20, 20, 1);
        img.set(10, 10, 0, 1.0);
        let s = img.gaussian_smooth_zero_pad(1.5, 3);
        assert_eq!(s.get(10, 14, 0), 0.0);
        assert!(s.get(10, 13, 0) > 0.0);
        assert!((s.sum() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(6, 5, 3, |y, x, c| ((y + x + c) % 7) as f32 / 6.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p).unwrap();
        assert_eq!(back, img.quantize_u8());
    }

    #[test]
    fn area_downsample_rejects_indivisible() {
        assert!(ImageTensor::zeros(5, 4, 1).area_downsample(2).is_err());
        let img = ImageTensor::from_fn(4, 4, 1, |y, x, _| (y * 4 + x) as f32);
        let d = img.area_downsample(2).unwrap();
        assert_eq!(d.get(0, 0, 0), (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }
}
