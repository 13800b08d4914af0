//! Blur, downsampling, noise and block-DCT compression.

use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::rng::normal_vec;
use crate::{Error, Result};

/// Order in which noise and compression are applied after blur and resampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationOrder {
    #[default]
    NoiseThenJpeg,
    JpegThenNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub blur_sigma: f32,
    pub downsample: usize,
    pub noise_sigma: f32,
    /// `None` disables compression.
    pub jpeg_quality: Option<u8>,
    #[serde(default)]
    pub order: DegradationOrder,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            downsample: 1,
            noise_sigma: 0.05,
            jpeg_quality: Some(40),
            order: DegradationOrder::NoiseThenJpeg,
        }
    }
}

impl DegradationSpec {
    pub fn off() -> Self {
        Self {
            blur_sigma: 0.0,
            downsample: 1,
            noise_sigma: 0.0,
            jpeg_quality: None,
            order: DegradationOrder::NoiseThenJpeg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma {} must be >= 0", self.blur_sigma)));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample factor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::Config(format!("noise sigma {} outside [0, 1]", self.noise_sigma)));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::Config(format!("jpeg quality {q} outside 1..=100")));
            }
        }
        Ok(())
    }
}

fn add_noise(img: &ImageTensor, sigma: f32, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let noise = normal_vec(seed, "degrade-noise", 0, img.data().len());
    let mut out = img.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise) {
        *v += sigma * n;
    }
    out
}

/// Degrades a clean image: blur, area downsample, nearest upsample back,
/// then seeded Gaussian noise and block-DCT compression in the spec's order.
pub fn degrade(hq: &ImageTensor, spec: &DegradationSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    let (h, w, _) = hq.dims();
    let mut img = if spec.blur_sigma > 0.0 {
        let radius = (3.0 * spec.blur_sigma).ceil() as usize;
        hq.gaussian_blur(spec.blur_sigma, radius)
    } else {
        hq.clone()
    };
    if spec.downsample > 1 {
        img = img.area_downsample(spec.downsample)?.resize_nearest(h, w);
    }
    img = match spec.order {
        DegradationOrder::NoiseThenJpeg => {
            let noisy = add_noise(&img, spec.noise_sigma, seed).clamp01();
            match spec.jpeg_quality {
                Some(q) => jpeg_like(&noisy, q)?,
                None => noisy,
            }
        }
        DegradationOrder::JpegThenNoise => {
            let c = match spec.jpeg_quality {
                Some(q) => jpeg_like(&img, q)?,
                None => img,
            };
            add_noise(&c, spec.noise_sigma, seed)
        }
    };
    Ok(img.clamp01())
}

/// Example luminance quantisation table from ITU-T T.81, Annex K.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table using the usual 5000/q and 200-2q rule.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0f64; 64];
    for (o, &b) in t.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0f64; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    c
}

/// Compression artefacts without entropy coding: each channel is split into
/// 8x8 blocks (edge-replicated padding), transformed by an orthonormal DCT,
/// quantised with the scaled table, and transformed back.
pub fn jpeg_like(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let table = quant_table(quality)?;
    let basis = dct_basis();
    let (h, w, ch) = img.dims();
    let mut out = img.clone();
    let mut block = [[0f64; 8]; 8];
    let mut tmp = [[0f64; 8]; 8];
    for c in 0..ch {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + x).min(w - 1);
                        *v = img.get(sy, sx, c) as f64 * 255.0 - 128.0;
                    }
                }
                // forward: tmp = C * block * C^T
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| basis[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|x| tmp[u][x] * basis[v][x]).sum();
                        let q = table[u * 8 + v];
                        block[u][v] = (coef / q).round() * q;
                    }
                }
                // inverse: C^T * coef * C
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| basis[u][y] * block[u][v]).sum();
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        let (oy, ox) = (by + y, bx + x);
                        if oy < h && ox < w {
                            let p: f64 = (0..8).map(|v| tmp[y][v] * basis[v][x]).sum();
                            out.set(oy, ox, c, (((p + 128.0) / 255.0) as f32).clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> ImageTensor {
        ImageTensor::from_fn(32, 24, 3, |y, x, c| (y as f32 * 0.02 + x as f32 * 0.015 + c as f32 * 0.05).min(1.0))
    }

    #[test]
    fn all_off_is_identity() {
        let img = gradient();
        assert_eq!(degrade(&img, &DegradationSpec::off(), 3).unwrap(), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = gradient();
        let spec = DegradationSpec {
            downsample: 2,
            ..Default::default()
        };
        assert_eq!(degrade(&img, &spec, 9).unwrap(), degrade(&img, &spec, 9).unwrap());
        assert_ne!(degrade(&img, &spec, 9).unwrap(), degrade(&img, &spec, 10).unwrap());
    }

    #[test]
    fn quality_100_is_near_lossless_on_gradients() {
        let img = gradient();
        let out = jpeg_like(&img, 100).unwrap();
        let err = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 2.0 / 255.0, "max error {err}");
    }

    #[test]
    fn constant_blocks_survive_at_moderate_quality() {
        for q in [50u8, 75, 100] {
            for v in [0.0f32, 0.13, 0.5, 0.77, 1.0] {
                let img = ImageTensor::filled(13, 10, 3, v);
                let out = jpeg_like(&img, q).unwrap();
                assert!(out.data().iter().all(|o| (o - v).abs() <= 1.0 / 255.0 + 1e-6), "q={q} v={v}");
            }
        }
    }

    #[test]
    fn table_scaling_follows_the_usual_rule() {
        assert_eq!(quant_table(50).unwrap()[0], 16.0);
        assert_eq!(quant_table(100).unwrap().iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(quant_table(1).unwrap()[0], 255.0);
        assert!(quant_table(0).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let img = gradient();
        let bad = [
            DegradationSpec { blur_sigma: -1.0, ..DegradationSpec::off() },
            DegradationSpec { downsample: 0, ..DegradationSpec::off() },
            DegradationSpec { noise_sigma: 1.5, ..DegradationSpec::off() },
            DegradationSpec { jpeg_quality: Some(0), ..DegradationSpec::off() },
            DegradationSpec { downsample: 5, ..DegradationSpec::off() },
        ];
        for s in bad {
            assert!(degrade(&img, &s, 0).is_err(), "{s:?}");
        }
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let img = ImageTensor::filled(4, 4, 1, 0.5);
        let spec = DegradationSpec { noise_sigma: 0.05, ..DegradationSpec::off() };
        let n = 10_000;
        let mut sum = vec![0f64; 16];
        let mut sq = vec![0f64; 16];
        for seed in 0..n {
            let out = degrade(&img, &spec, seed).unwrap();
            for (i, v) in out.data().iter().enumerate() {
                sum[i] += *v as f64;
                sq[i] += (*v as f64).powi(2);
            }
        }
        let want = 0.05f64 * 0.05;
        for i in 0..16 {
            let m = sum[i] / n as f64;
            let var = sq[i] / n as f64 - m * m;
            assert!((var / want - 1.0).abs() < 0.05, "pixel {i}: {var}");
        }
    }

    #[test]
    fn lower_quality_never_raises_psnr() {
        let img = ImageTensor::from_fn(40, 24, 3, |y, x, c| {
            (0.5 + 0.3 * ((y as f32 * 0.4).sin() * (x as f32 * 0.7 + c as f32).cos())).clamp(0.0, 1.0)
        });
        let mut last = f64::INFINITY;
        for q in [100u8, 95, 90, 80, 70, 60, 50, 40, 30, 20, 10, 5, 1] {
            let p = crate::metrics::psnr(&jpeg_like(&img, q).unwrap(), &img).unwrap();
            assert!(p <= last + 1e-9, "q={q}: {p} > {last}");
            last = p;
        }
    }
}
