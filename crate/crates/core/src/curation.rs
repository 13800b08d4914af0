//! Four-phase dataset curation: format screening, person detection, format
//! normalisation and an offline manual-review queue.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::structure::heuristic_foreground;
use crate::{Error, Result};

pub use crate::caption::{parse_caption, serialize_caption, CaptionRecord};

pub const RECORDS_NAME: &str = "curation.jsonl";
pub const QUEUE_NAME: &str = "review_queue.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub min_height: usize,
    pub min_width: usize,
    /// Accepted height/width band.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Aspect ratios outside this inner band are sent to review.
    pub review_aspect_min: f64,
    pub review_aspect_max: f64,
    /// Minimum foreground coverage for a detection (inclusive).
    pub coverage_threshold: f64,
    pub target_height: usize,
    pub target_width: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_height: 128,
            min_width: 64,
            aspect_min: 1.5,
            aspect_max: 2.5,
            review_aspect_min: 1.75,
            review_aspect_max: 2.25,
            coverage_threshold: 0.05,
            target_height: 128,
            target_width: 64,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_height > 0
            && self.min_width > 0
            && self.target_height > 0
            && self.target_width > 0
            && self.aspect_min > 0.0
            && self.aspect_min <= self.review_aspect_min
            && self.review_aspect_min <= self.review_aspect_max
            && self.review_aspect_max <= self.aspect_max
            && (0.0..=1.0).contains(&self.coverage_threshold);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent curation thresholds: {self:?}")))
        }
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom + 1 - self.top
    }

    pub fn width(&self) -> usize {
        self.right + 1 - self.left
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detected: bool,
    pub coverage: f64,
    pub bbox: Option<BBox>,
}

pub trait HumanDetector {
    fn detect(&self, image: &ImageTensor) -> Detection;
}

/// Background-distance foreground; a person is reported when coverage
/// reaches the threshold.
#[derive(Clone, Copy, Debug)]
pub struct ForegroundDetector {
    pub threshold: f64,
}

impl HumanDetector for ForegroundDetector {
    fn detect(&self, image: &ImageTensor) -> Detection {
        let (mask, cov) = heuristic_foreground(image);
        let (h, w) = (mask.height(), mask.width());
        let mut bbox: Option<BBox> = None;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x, 0) > 0.5 {
                    bbox = Some(match bbox {
                        None => BBox { top: y, left: x, bottom: y, right: x },
                        Some(b) => BBox {
                            top: b.top.min(y),
                            left: b.left.min(x),
                            bottom: b.bottom.max(y),
                            right: b.right.max(x),
                        },
                    });
                }
            }
        }
        let coverage = cov as f64;
        Detection {
            detected: coverage > 0.0 && coverage >= self.threshold,
            coverage,
            bbox,
        }
    }
}

pub fn detect_human(image: &ImageTensor, detector: &dyn HumanDetector) -> Detection {
    detector.detect(image)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Accepted,
    Rejected,
    NeedsReview,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub path: PathBuf,
    pub format_ok: bool,
    /// `(height, width)` when decodable.
    pub size: Option<(usize, usize)>,
    pub detection: Option<Detection>,
    pub normalized_path: Option<PathBuf>,
    pub review_reason: Option<String>,
    pub verdict: Option<Verdict>,
    pub status: Status,
    /// Phase (1-4) that rejected the record.
    pub rejected_phase: Option<u8>,
    pub reason: Option<String>,
}

impl CurationRecord {
    fn new(id: String, path: PathBuf) -> Self {
        Self {
            id,
            path,
            format_ok: false,
            size: None,
            detection: None,
            normalized_path: None,
            review_reason: None,
            verdict: None,
            status: Status::Rejected,
            rejected_phase: None,
            reason: None,
        }
    }

    fn reject(&mut self, phase: u8, reason: impl Into<String>) {
        self.status = Status::Rejected;
        self.rejected_phase = Some(phase);
        self.reason = Some(reason.into());
    }

    /// Status implied by the phase results.
    pub fn derived_status(&self) -> Status {
        if !self.format_ok || !self.detection.as_ref().is_some_and(|d| d.detected) {
            return Status::Rejected;
        }
        match (&self.review_reason, self.verdict) {
            (_, Some(Verdict::Reject)) => Status::Rejected,
            (_, Some(Verdict::Accept)) => Status::Accepted,
            (Some(_), None) => Status::NeedsReview,
            (None, None) => Status::Accepted,
        }
    }
}

fn decode(path: &Path) -> std::result::Result<(image::ImageFormat, ImageTensor), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| format!("unreadable: {e}"))?
        .with_guessed_format()
        .map_err(|e| format!("unreadable: {e}"))?;
    let format = reader.format().ok_or_else(|| "undecodable".to_string())?;
    let img = reader.decode().map_err(|_| "undecodable".to_string())?;
    Ok((format, ImageTensor::from_dynamic(&img)))
}

fn id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Phase 1. Unreadable files are rejected, never fatal. Returns the records
/// and the decoded images of those that pass.
pub fn screen_format(paths: &[PathBuf], cfg: &CurationConfig) -> (Vec<CurationRecord>, Vec<Option<ImageTensor>>) {
    let mut records = Vec::with_capacity(paths.len());
    let mut images = Vec::with_capacity(paths.len());
    for p in paths {
        let mut rec = CurationRecord::new(id_of(p), p.clone());
        match decode(p) {
            Err(reason) => {
                rec.reject(1, reason);
                images.push(None);
            }
            Ok((format, img)) => {
                let (h, w) = (img.height(), img.width());
                rec.size = Some((h, w));
                let aspect = h as f64 / w.max(1) as f64;
                if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
                    rec.reject(1, "unsupported format");
                    images.push(None);
                } else if h < cfg.min_height || w < cfg.min_width {
                    rec.reject(1, "too small");
                    images.push(None);
                } else if !(cfg.aspect_min..=cfg.aspect_max).contains(&aspect) {
                    rec.reject(1, "aspect out of range");
                    images.push(None);
                } else {
                    rec.format_ok = true;
                    images.push(Some(img));
                }
            }
        }
        records.push(rec);
    }
    (records, images)
}

/// Phase 3: the largest window of the target aspect that fits in the image,
/// centred on the detection box (or on the image when the box is missing or
/// a single pixel), resampled bilinearly to the target size.
pub fn normalize_format(image: &ImageTensor, bbox: Option<BBox>, height: usize, width: usize) -> Result<ImageTensor> {
    let (ih, iw) = (image.height(), image.width());
    if ih == 0 || iw == 0 || height == 0 || width == 0 {
        return Err(Error::Shape("cannot normalise an empty image".into()));
    }
    let target = height as f64 / width as f64;
    let (ch, cw) = if ih as f64 / iw as f64 > target {
        (((iw as f64 * target).round() as usize).clamp(1, ih), iw)
    } else {
        (ih, ((ih as f64 / target).round() as usize).clamp(1, iw))
    };
    let (cy, cx) = match bbox {
        Some(b) if b.height() > 1 || b.width() > 1 => (
            (b.top + b.bottom.min(ih - 1)) as f64 / 2.0,
            (b.left + b.right.min(iw - 1)) as f64 / 2.0,
        ),
        _ => ((ih - 1) as f64 / 2.0, (iw - 1) as f64 / 2.0),
    };
    let top = ((cy - (ch - 1) as f64 / 2.0).round().max(0.0) as usize).min(ih - ch);
    let left = ((cx - (cw - 1) as f64 / 2.0).round().max(0.0) as usize).min(iw - cw);
    let crop = image.crop(top, left, ch, cw)?;
    let out = if (ch, cw) == (height, width) {
        crop
    } else {
        crop.resize_bilinear(height, width)
    };
    Ok(out.clamp01())
}

/// A line of the review queue; a reviewer fills in `verdict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub path: PathBuf,
    pub reason: String,
    pub verdict: Option<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct Mark {
    id: String,
    verdict: Verdict,
}

/// Reads a JSONL marks file of `{"id", "verdict"}` lines. The same id marked
/// with two different verdicts is an error.
pub fn read_marks(path: &Path) -> Result<BTreeMap<String, Verdict>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut marks = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: Mark = serde_json::from_str(line)?;
        if let Some(prev) = marks.insert(m.id.clone(), m.verdict) {
            if prev != m.verdict {
                return Err(Error::ConflictingMarks(m.id));
            }
        }
    }
    Ok(marks)
}

/// Phase 4: flags borderline coverage (`tau <= c < 2 tau`) and aspect ratios
/// outside the inner band, then applies any reviewer marks.
pub fn build_review_queue(
    records: &mut [CurationRecord],
    cfg: &CurationConfig,
    marks: Option<&BTreeMap<String, Verdict>>,
) -> Vec<ReviewItem> {
    let tau = cfg.coverage_threshold;
    let mut queue = Vec::new();
    for rec in records.iter_mut() {
        if matches!(rec.rejected_phase, Some(p) if p < 4) {
            continue;
        }
        let cov = rec.detection.as_ref().map_or(0.0, |d| d.coverage);
        let aspect = rec.size.map_or(0.0, |(h, w)| h as f64 / w.max(1) as f64);
        let reason = if cov >= tau && cov < 2.0 * tau {
            Some(format!("borderline coverage {cov:.4}"))
        } else if !(cfg.review_aspect_min..=cfg.review_aspect_max).contains(&aspect) {
            Some(format!("extreme aspect {aspect:.3}"))
        } else {
            None
        };
        rec.review_reason = reason.clone();
        rec.verdict = marks.and_then(|m| m.get(&rec.id).copied());
        rec.status = rec.derived_status();
        if rec.verdict == Some(Verdict::Reject) {
            rec.rejected_phase = Some(4);
            rec.reason = Some("rejected in review".into());
        } else {
            rec.rejected_phase = None;
            rec.reason = None;
        }
        if let Some(r) = reason {
            queue.push(ReviewItem {
                id: rec.id.clone(),
                path: rec.path.clone(),
                reason: r,
                verdict: rec.verdict,
            });
        }
    }
    queue
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub total: usize,
    pub rejected_by_phase: [usize; 4],
    pub accepted: usize,
    pub needs_review: usize,
}

impl CurationSummary {
    pub fn of(records: &[CurationRecord]) -> Self {
        let mut s = Self {
            total: records.len(),
            ..Default::default()
        };
        for r in records {
            match r.status {
                Status::Accepted => s.accepted += 1,
                Status::NeedsReview => s.needs_review += 1,
                Status::Rejected => {
                    if let Some(p) = r.rejected_phase {
                        s.rejected_by_phase[(p as usize).clamp(1, 4) - 1] += 1;
                    }
                }
            }
        }
        s
    }
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    Ok(paths)
}

/// Runs all four phases over the files in `input`, writing normalised
/// images, the record manifest and the review queue to `output`.
pub fn curate(
    input: &Path,
    output: &Path,
    cfg: &CurationConfig,
    detector: &dyn HumanDetector,
    marks: Option<&Path>,
) -> Result<(Vec<CurationRecord>, CurationSummary)> {
    cfg.validate()?;
    let marks = marks.map(read_marks).transpose()?;
    let paths = list_inputs(input)?;
    let images_dir = output.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let (mut records, images) = screen_format(&paths, cfg);
    for (rec, img) in records.iter_mut().zip(&images) {
        let Some(img) = img else { continue };
        let det = detect_human(img, detector);
        let detected = det.detected;
        let bbox = det.bbox;
        rec.detection = Some(det);
        if !detected {
            rec.reject(2, "no person detected");
            continue;
        }
        let norm = normalize_format(img, bbox, cfg.target_height, cfg.target_width)?;
        let path = images_dir.join(format!("{}.png", rec.id));
        norm.save_png(&path)?;
        rec.normalized_path = Some(path);
        rec.status = Status::Accepted;
    }
    let queue = build_review_queue(&mut records, cfg, marks.as_ref());
    let write_jsonl = |name: &str, lines: Vec<String>| -> Result<()> {
        let p = output.join(name);
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write_jsonl(
        RECORDS_NAME,
        records.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?,
    )?;
    write_jsonl(
        QUEUE_NAME,
        queue.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?,
    )?;
    let summary = CurationSummary::of(&records);
    Ok((records, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_sample;

    #[test]
    fn screening_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        ImageTensor::filled(256, 128, 3, 0.3).save_png(&good).unwrap();
        let small = dir.path().join("small.png");
        ImageTensor::filled(64, 64, 3, 0.3).save_png(&small).unwrap();
        let broken = dir.path().join("broken.png");
        let bytes = fs::read(&good).unwrap();
        fs::write(&broken, &bytes[..bytes.len() / 3]).unwrap();
        let (recs, imgs) = screen_format(&[good, small, broken], &CurationConfig::default());
        assert!(recs[0].format_ok && imgs[0].is_some());
        assert_eq!(recs[1].reason.as_deref(), Some("too small"));
        assert_eq!(recs[2].reason.as_deref(), Some("undecodable"));
        assert_eq!(recs[2].rejected_phase, Some(1));
    }

    #[test]
    fn detection_threshold_is_inclusive() {
        let blank = ImageTensor::filled(128, 64, 3, 0.5);
        let d = ForegroundDetector { threshold: 0.05 }.detect(&blank);
        assert!(!d.detected);
        assert_eq!(d.coverage, 0.0);
        let mut img = blank.clone();
        // 8 x 8 block of a 16 x 16 image: coverage 0.25 exactly.
        let mut small = ImageTensor::filled(16, 16, 3, 0.5);
        for y in 4..12 {
            for x in 4..12 {
                for c in 0..3 {
                    small.set(y, x, c, 0.9);
                }
            }
        }
        assert!(ForegroundDetector { threshold: 0.25 }.detect(&small).detected);
        assert!(!ForegroundDetector { threshold: 0.2501 }.detect(&small).detected);
        let s = generate_sample(3, None).unwrap();
        img.data_mut().copy_from_slice(s.image.data());
        let d = ForegroundDetector { threshold: 0.05 }.detect(&img);
        assert!(d.detected && d.coverage > 0.05);
    }

    #[test]
    fn normalisation_shapes_and_fallbacks() {
        let s = generate_sample(4, None).unwrap();
        let det = ForegroundDetector { threshold: 0.05 }.detect(&s.image);
        let same = normalize_format(&s.image, det.bbox, 128, 64).unwrap();
        assert!(crate::metrics::psnr(&same, &s.image).unwrap() >= 40.0);
        let big = s.image.resize_bilinear(512, 256);
        assert_eq!(normalize_format(&big, det.bbox, 128, 64).unwrap().dims(), (128, 64, 3));
        let dot = BBox { top: 5, left: 5, bottom: 5, right: 5 };
        let wide = ImageTensor::from_fn(100, 300, 3, |_, x, _| x as f32 / 300.0);
        let a = normalize_format(&wide, Some(dot), 64, 32).unwrap();
        let b = normalize_format(&wide, None, 64, 32).unwrap();
        assert_eq!(a, b);
        let huge = BBox { top: 0, left: 0, bottom: 999, right: 999 };
        assert_eq!(normalize_format(&wide, Some(huge), 64, 32).unwrap().dims(), (64, 32, 3));
    }

    #[test]
    fn review_rules_and_marks() {
        let cfg = CurationConfig::default();
        let rec = |id: &str, cov: f64, size: (usize, usize)| {
            let mut r = CurationRecord::new(id.into(), PathBuf::from(id));
            r.format_ok = true;
            r.size = Some(size);
            r.detection = Some(Detection { detected: true, coverage: cov, bbox: None });
            r.status = Status::Accepted;
            r
        };
        let mut recs = vec![rec("a", 0.075, (128, 64)), rec("b", 0.3, (128, 64)), rec("c", 0.3, (160, 64))];
        let q = build_review_queue(&mut recs, &cfg, None);
        assert_eq!(q.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(recs[0].status, Status::NeedsReview);
        assert_eq!(recs[1].status, Status::Accepted);
        let marks = BTreeMap::from([("a".to_string(), Verdict::Accept), ("c".to_string(), Verdict::Reject)]);
        build_review_queue(&mut recs, &cfg, Some(&marks));
        assert_eq!(recs[0].status, Status::Accepted);
        assert_eq!(recs[2].status, Status::Rejected);
        assert_eq!(recs[2].rejected_phase, Some(4));
        for r in &recs {
            assert_eq!(r.status, r.derived_status());
        }
    }

    #[test]
    fn conflicting_marks_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("marks.jsonl");
        fs::write(&p, "{\"id\":\"x\",\"verdict\":\"accept\"}\n{\"id\":\"x\",\"verdict\":\"reject\"}\n").unwrap();
        assert!(matches!(read_marks(&p), Err(Error::ConflictingMarks(id)) if id == "x"));
        fs::write(&p, "{\"id\":\"x\",\"verdict\":\"accept\"}\n{\"id\":\"x\",\"verdict\":\"accept\"}\n").unwrap();
        assert_eq!(read_marks(&p).unwrap().len(), 1);
    }
}
