//! Pose and attention maps, from generator metadata or from pixels.

use serde::{Deserialize, Serialize};

use crate::body::{
    limits, rasterize_silhouette, Figure, JointAngles, LimbLengths, Skeleton, JOINTS, LIMBS,
};
use crate::image::ImageTensor;
use crate::synth::{PartMasks, DEFAULT_HEIGHT};
use crate::{Error, Result};

pub const JOINT_SIGMA: f32 = 2.0;
pub const LIMB_WIDTH: f32 = 2.0;
pub const ATTENTION_SIGMA: f32 = 1.5;
pub const ATTENTION_RADIUS: usize = 3;
/// Per-channel distance from the background above which a pixel is foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.12;
/// Below this foreground fraction the heuristic reports no detection.
pub const MIN_DETECTION_COVERAGE: f32 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    Oracle,
    #[default]
    Heuristic,
}

/// Generator ground truth needed by oracle extraction.
#[derive(Clone, Debug)]
pub struct OracleMeta {
    pub skeleton: Skeleton,
    pub foreground: ImageTensor,
    pub parts: PartMasks,
}

fn seg_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (bx, by) = (b.0 - a.0, b.1 - a.1);
    let (qx, qy) = (px - a.0, py - a.1);
    let len2 = bx * bx + by * by;
    let h = if len2 > 0.0 {
        ((qx * bx + qy * by) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((qx - bx * h).powi(2) + (qy - by * h).powi(2)).sqrt()
}

/// Three-channel pose map: joint blobs, all limbs, left-side limbs.
pub fn render_pose_map(skel: &Skeleton, height: usize, width: usize) -> ImageTensor {
    let mut out = ImageTensor::zeros(height, width, 3);
    let inv = 1.0 / (2.0 * JOINT_SIGMA * JOINT_SIGMA);
    let half = LIMB_WIDTH / 2.0;
    let limbs: Vec<_> = LIMBS
        .iter()
        .filter(|(a, b)| skel.joints[*a].visible && skel.joints[*b].visible)
        .map(|&(a, b)| {
            let ja = &skel.joints[a];
            let jb = &skel.joints[b];
            ((ja.x, ja.y), (jb.x, jb.y), JOINTS[a].1 || JOINTS[b].1)
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut blob = 0.0f32;
            for j in skel.joints.iter().filter(|j| j.visible) {
                let d2 = (px - j.x).powi(2) + (py - j.y).powi(2);
                blob = blob.max((-d2 * inv).exp());
            }
            let mut all = 0.0f32;
            let mut left = 0.0f32;
            for (a, b, is_left) in &limbs {
                let cov = (half + 0.5 - seg_distance(px, py, *a, *b)).clamp(0.0, 1.0);
                all = all.max(cov);
                if *is_left {
                    left = left.max(cov);
                }
            }
            out.set(y, x, 0, blob);
            out.set(y, x, 1, all);
            out.set(y, x, 2, left);
        }
    }
    out
}

/// Foreground mask smoothed by a truncated Gaussian with zero padding, so
/// values vanish beyond the kernel radius from the mask.
pub fn oracle_attention(foreground: &ImageTensor) -> ImageTensor {
    foreground
        .gaussian_smooth_zero_pad(ATTENTION_SIGMA, ATTENTION_RADIUS)
        .clamp01()
}

/// Per-channel median of the one-pixel border.
pub fn estimate_background(img: &ImageTensor) -> Vec<f32> {
    let (h, w, c) = img.dims();
    (0..c)
        .map(|ch| {
            let mut v = Vec::with_capacity(2 * (h + w));
            for y in 0..h {
                for x in 0..w {
                    if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                        v.push(img.get(y, x, ch));
                    }
                }
            }
            v.sort_by(f32::total_cmp);
            if v.is_empty() {
                0.0
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            }
        })
        .collect()
}

/// Binary foreground from background distance, and its coverage fraction.
pub fn heuristic_foreground(img: &ImageTensor) -> (ImageTensor, f32) {
    let bg = estimate_background(img);
    let (h, w, c) = img.dims();
    let mask = ImageTensor::from_fn(h, w, 1, |y, x, _| {
        let d = (0..c).map(|ch| (img.get(y, x, ch) - bg[ch]).abs()).fold(0.0, f32::max);
        f32::from(d > FOREGROUND_THRESHOLD)
    });
    let cov = if h * w == 0 {
        0.0
    } else {
        (mask.sum() / (h * w) as f64) as f32
    };
    (mask, cov)
}

pub fn heuristic_attention(img: &ImageTensor) -> ImageTensor {
    let (mask, _) = heuristic_foreground(img);
    let s = oracle_attention(&mask);
    let m = s.max_value();
    if m > 0.0 {
        s.map(|v| (v / m).min(1.0))
    } else {
        s
    }
}

fn require_meta(meta: Option<&OracleMeta>) -> Result<&OracleMeta> {
    meta.ok_or_else(|| Error::InvalidArgument("oracle extraction needs generator metadata".into()))
}

/// Pose map, or `None` when the heuristic detects nobody.
pub fn extract_pose(
    img: &ImageTensor,
    mode: ExtractionMode,
    meta: Option<&OracleMeta>,
) -> Result<Option<ImageTensor>> {
    let (h, w) = (img.height(), img.width());
    match mode {
        ExtractionMode::Oracle => Ok(Some(render_pose_map(&require_meta(meta)?.skeleton, h, w))),
        ExtractionMode::Heuristic => Ok(fit_pose(img).map(|f| render_pose_map(&f.skeleton, h, w))),
    }
}

pub fn extract_attention(
    img: &ImageTensor,
    mode: ExtractionMode,
    meta: Option<&OracleMeta>,
) -> Result<ImageTensor> {
    match mode {
        ExtractionMode::Oracle => Ok(oracle_attention(&require_meta(meta)?.foreground)),
        ExtractionMode::Heuristic => Ok(heuristic_attention(img)),
    }
}

/// Everything the restorer needs from one image.
#[derive(Clone, Debug)]
pub struct Structure {
    pub pose: ImageTensor,
    pub attention: ImageTensor,
    pub parts: PartMasks,
    pub detected: bool,
}

/// Pose, attention and part masks in one pass. A missed detection yields
/// all-zero pose and attention maps, empty part masks and `detected = false`.
pub fn extract_structure(
    img: &ImageTensor,
    mode: ExtractionMode,
    meta: Option<&OracleMeta>,
) -> Result<Structure> {
    let (h, w) = (img.height(), img.width());
    match mode {
        ExtractionMode::Oracle => {
            let m = require_meta(meta)?;
            Ok(Structure {
                pose: render_pose_map(&m.skeleton, h, w),
                attention: oracle_attention(&m.foreground),
                parts: m.parts.clone(),
                detected: true,
            })
        }
        ExtractionMode::Heuristic => match fit_pose(img) {
            Some(fit) => Ok(Structure {
                pose: render_pose_map(&fit.skeleton, h, w),
                attention: heuristic_attention(img),
                parts: fit.parts,
                detected: true,
            }),
            None => Ok(Structure {
                pose: ImageTensor::zeros(h, w, 3),
                attention: ImageTensor::zeros(h, w, 1),
                parts: PartMasks::empty(h, w),
                detected: false,
            }),
        },
    }
}

/// Result of fitting the body model to a silhouette.
#[derive(Clone, Debug)]
pub struct PoseFit {
    pub figure: Figure,
    pub skeleton: Skeleton,
    pub parts: PartMasks,
    /// Pixels where the fitted silhouette and the foreground disagree.
    pub mismatch: usize,
}

const N_PARAMS: usize = 13;

fn param_bounds(h: f32, w: f32) -> [(f32, f32); N_PARAMS] {
    [
        (0.0, w),
        (0.0, h),
        limits::SCALE,
        limits::TORSO_LEAN,
        limits::HEAD_TILT,
        limits::SHOULDER,
        limits::ELBOW,
        limits::SHOULDER,
        limits::ELBOW,
        limits::HIP,
        limits::KNEE,
        limits::HIP,
        limits::KNEE,
    ]
}

fn figure_from(p: &[f32; N_PARAMS], unit: f32) -> Figure {
    Figure {
        pelvis: [p[0], p[1]],
        unit,
        lengths: LimbLengths::scaled(p[2] * unit),
        angles: JointAngles {
            torso_lean: p[3],
            head_tilt: p[4],
            shoulder_l: p[5],
            elbow_l: p[6],
            shoulder_r: p[7],
            elbow_r: p[8],
            hip_l: p[9],
            knee_l: p[10],
            hip_r: p[11],
            knee_r: p[12],
        },
    }
}

struct Scorer<'a> {
    fg: &'a [bool],
    fg_count: usize,
    height: usize,
    width: usize,
    stamp: Vec<u32>,
    generation: u32,
}

impl Scorer<'_> {
    /// Symmetric difference between the figure silhouette and the foreground.
    fn mismatch(&mut self, fig: &Figure) -> usize {
        self.generation += 1;
        let g = self.generation;
        let mut sil = 0usize;
        let mut both = 0usize;
        for (_, shape) in fig.body_shapes() {
            shape.for_each_pixel(self.height, self.width, |y, x, d| {
                let i = y * self.width + x;
                if d <= 0.0 && self.stamp[i] != g {
                    self.stamp[i] = g;
                    sil += 1;
                    if self.fg[i] {
                        both += 1;
                    }
                }
            });
        }
        self.fg_count + sil - 2 * both
    }
}

/// Fits the articulated body model to the heuristic foreground by
/// coordinate descent on the silhouette mismatch. `None` below the
/// detection coverage.
pub fn fit_pose(img: &ImageTensor) -> Option<PoseFit> {
    let (mask, coverage) = heuristic_foreground(img);
    if coverage < MIN_DETECTION_COVERAGE {
        return None;
    }
    let (h, w) = (img.height(), img.width());
    let fg: Vec<bool> = mask.data().iter().map(|v| *v > 0.5).collect();
    let unit = h as f32 / DEFAULT_HEIGHT as f32;

    let (mut top, mut bottom) = (h, 0);
    for y in 0..h {
        if (0..w).any(|x| fg[y * w + x]) {
            top = top.min(y);
            bottom = bottom.max(y + 1);
        }
    }
    let extent = (bottom - top) as f32 / unit;
    let s0 = ((extent - 2.2) / 97.0).clamp(limits::SCALE.0, limits::SCALE.1);
    let lower = (LimbLengths::scaled(s0 * unit).thigh + LimbLengths::scaled(s0 * unit).shin) * 0.99;
    let py0 = bottom as f32 - 2.2 * unit - lower;
    let rows = ((py0 - 25.0 * unit).max(0.0) as usize)..(py0.max(0.0) as usize).min(h);
    let (mut sx, mut n) = (0.0f32, 0usize);
    for y in rows {
        for x in 0..w {
            if fg[y * w + x] {
                sx += x as f32 + 0.5;
                n += 1;
            }
        }
    }
    let px0 = if n > 0 { sx / n as f32 } else { w as f32 / 2.0 };

    let bounds = param_bounds(h as f32, w as f32);
    let mid = |b: (f32, f32)| 0.5 * (b.0 + b.1);
    let mut p = [
        px0,
        py0,
        s0,
        0.0,
        0.0,
        mid(limits::SHOULDER),
        0.1,
        mid(limits::SHOULDER),
        0.1,
        mid(limits::HIP),
        0.0,
        mid(limits::HIP),
        0.0,
    ];
    let mut steps = [
        2.0 * unit,
        2.0 * unit,
        0.02,
        0.03,
        0.08,
        0.12,
        0.16,
        0.12,
        0.16,
        0.06,
        0.08,
        0.06,
        0.08,
    ];
    let mut scorer = Scorer {
        fg: &fg,
        fg_count: fg.iter().filter(|v| **v).count(),
        height: h,
        width: w,
        stamp: vec![0; h * w],
        generation: 0,
    };
    let mut best = scorer.mismatch(&figure_from(&p, unit));
    for _level in 0..5 {
        for _pass in 0..4 {
            let mut improved = false;
            for i in 0..N_PARAMS {
                for dir in [1.0f32, -1.0] {
                    loop {
                        let mut q = p;
                        q[i] = (q[i] + dir * steps[i]).clamp(bounds[i].0, bounds[i].1);
                        if q[i] == p[i] {
                            break;
                        }
                        let score = scorer.mismatch(&figure_from(&q, unit));
                        if score < best {
                            best = score;
                            p = q;
                            improved = true;
                        } else {
                            break;
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
        steps.iter_mut().for_each(|s| *s *= 0.5);
    }

    let figure = figure_from(&p, unit);
    let mut skeleton = figure.skeleton();
    for j in &mut skeleton.joints {
        j.x = j.x.clamp(0.0, w as f32 - 1e-3);
        j.y = j.y.clamp(0.0, h as f32 - 1e-3);
    }
    let mut parts = PartMasks::empty(h, w);
    for (kind, shape) in figure.body_shapes() {
        shape.for_each_pixel(h, w, |y, x, d| {
            let i = y * w + x;
            if d <= 0.0 && fg[i] {
                parts.labels[i] = Some(kind.part());
            }
        });
    }
    Some(PoseFit {
        figure,
        skeleton,
        parts,
        mismatch: best,
    })
}

/// Binary silhouette of a figure as a one-channel image.
pub fn figure_silhouette(fig: &Figure, height: usize, width: usize) -> ImageTensor {
    let shapes: Vec<_> = fig.body_shapes().into_iter().map(|(_, s)| s).collect();
    let mut buf = vec![false; height * width];
    rasterize_silhouette(&shapes, height, width, &mut buf);
    ImageTensor::from_fn(height, width, 1, |y, x, _| f32::from(buf[y * width + x]))
}

/// Intersection over union of two maps thresholded at 0.5.
pub fn iou_at_half(a: &ImageTensor, b: &ImageTensor) -> f32 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += usize::from(p && q);
        uni += usize::from(p || q);
    }
    if uni == 0 {
        1.0
    } else {
        inter as f32 / uni as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_sample;

    #[test]
    fn blank_image_has_no_detection() {
        let img = ImageTensor::filled(128, 64, 3, 0.4);
        assert!(extract_pose(&img, ExtractionMode::Heuristic, None).unwrap().is_none());
        assert_eq!(heuristic_attention(&img).max_value(), 0.0);
    }

    #[test]
    fn oracle_pose_peaks_at_joints() {
        let s = generate_sample(5, None).unwrap();
        let map = render_pose_map(&s.skeleton, 128, 64);
        for j in &s.skeleton.joints {
            let (jx, jy) = (j.x as isize, j.y as isize);
            let mut best = (0.0, 0isize, 0isize);
            for dy in -3..=3 {
                for dx in -3..=3 {
                    let (y, x) = (jy + dy, jx + dx);
                    if y >= 0 && x >= 0 && y < 128 && x < 64 {
                        let v = map.get(y as usize, x as usize, 0);
                        if v > best.0 {
                            best = (v, y, x);
                        }
                    }
                }
            }
            let ex = best.2 as f32 + 0.5 - j.x;
            let ey = best.1 as f32 + 0.5 - j.y;
            assert!((ex * ex + ey * ey).sqrt() <= 1.0, "joint {j:?} peak at {best:?}");
        }
        assert!(map.in_unit_range());
    }

    #[test]
    fn oracle_attention_is_zero_outside_dilation() {
        let s = generate_sample(2, None).unwrap();
        let a = oracle_attention(&s.foreground);
        assert!(a.in_unit_range());
        let r = ATTENTION_RADIUS as isize;
        for y in 0..128isize {
            for x in 0..64isize {
                let near = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| s.foreground.get_clamped(y + dy, x + dx, 0) > 0.0
                        && y + dy >= 0 && x + dx >= 0 && y + dy < 128 && x + dx < 64)
                });
                if !near {
                    assert_eq!(a.get(y as usize, x as usize, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn heuristic_fit_is_close_on_a_clean_sample() {
        let s = generate_sample(21, None).unwrap();
        let fit = fit_pose(&s.image).unwrap();
        let err = fit.skeleton.mean_error(&s.skeleton);
        assert!(err < 3.0, "mean joint error {err}");
    }
}
