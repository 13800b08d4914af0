//! PSNR and SSIM against a reference image.

use std::fmt::Write as _;

use crate::image::{gaussian_kernel, ImageTensor};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio for unit dynamic range; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Shape("psnr of empty images".into()));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sse / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn luma64(img: &ImageTensor) -> Vec<f64> {
    let (h, w, c) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(if c >= 3 {
                0.299 * img.get(y, x, 0) as f64 + 0.587 * img.get(y, x, 1) as f64 + 0.114 * img.get(y, x, 2) as f64
            } else {
                img.get(y, x, 0) as f64
            });
        }
    }
    out
}

/// Mean local SSIM on luma over every full 11x11 Gaussian window.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g1: Vec<f64> = {
        let k = gaussian_kernel(SSIM_SIGMA as f32, SSIM_WINDOW / 2);
        let s: f64 = k.iter().map(|v| *v as f64).sum();
        k.iter().map(|v| *v as f64 / s).collect()
    };
    let la = luma64(a);
    let lb = luma64(b);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g1.iter().enumerate() {
                for (j, gj) in g1.iter().enumerate() {
                    let wgt = gi * gj;
                    let p = la[(y + i) * w + x + j];
                    let q = lb[(y + i) * w + x + j];
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, restored: &ImageTensor, reference: &ImageTensor) -> Result<()> {
        self.rows.push(MetricRow {
            id: id.into(),
            psnr: psnr(restored, reference)?,
            ssim: ssim(restored, reference)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `id,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.id, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_constant_offset() {
        let a = ImageTensor::filled(8, 8, 3, 0.25);
        let b = ImageTensor::filled(8, 8, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 16f64.log10()).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.01), 20.0);
    }

    #[test]
    fn ssim_identity_and_size_check() {
        let a = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 9) as f32 / 8.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&ImageTensor::zeros(10, 16, 1), &ImageTensor::zeros(10, 16, 1)).is_err());
    }

    #[test]
    fn csv_has_mean_row() {
        let a = ImageTensor::filled(12, 12, 3, 0.25);
        let b = ImageTensor::filled(12, 12, 3, 0.375);
        let mut r = MetricReport::default();
        r.push("x", &a, &b).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("id,psnr,ssim\nx,18.061800,"));
        assert!(csv.lines().last().unwrap().starts_with("mean,18.061800,"));
    }
}
