//! Paired clean/degraded training examples, on disk or in memory.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::caption::{parse_caption, CaptionRecord};
use crate::degradation::{degrade, DegradationSpec};
use crate::image::ImageTensor;
use crate::rng::derive_seed;
use crate::structure::{oracle_attention, render_pose_map};
use crate::synth::{generate_sample, read_manifest, ManifestEntry, PartMasks, Split, SplitRatio};
use crate::{Error, Result};

/// Name of the manifest written next to degraded images.
pub const DEGRADED_MANIFEST: &str = "degraded.jsonl";

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub hq: ImageTensor,
    pub lq: ImageTensor,
    pub pose: ImageTensor,
    /// Single channel, `[0, 1]`.
    pub attention: ImageTensor,
    pub parts: PartMasks,
    pub caption: CaptionRecord,
    pub split: Split,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradedEntry {
    pub id: String,
    pub image: String,
    pub seed: u64,
}

/// Per-item degradation seed.
pub fn degradation_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "degrade", index as u64)
}

/// Degrades every image listed in `manifest` into `out_dir` and writes a
/// JSONL index of the outputs.
pub fn degrade_dataset(manifest: &Path, spec: &DegradationSpec, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let entries = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut lines = String::new();
    for (i, e) in entries.iter().enumerate() {
        let hq = ImageTensor::load_png(&root.join(&e.image))?;
        let s = degradation_seed(seed, i);
        let lq = degrade(&hq, spec, s)?;
        let out = DegradedEntry {
            id: e.id.clone(),
            image: format!("{}.png", e.id),
            seed: s,
        };
        lq.save_png(&out_dir.join(&out.image))?;
        lines.push_str(&serde_json::to_string(&out)?);
        lines.push('\n');
    }
    let path = out_dir.join(DEGRADED_MANIFEST);
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn single_channel(img: ImageTensor) -> ImageTensor {
    if img.channels() == 1 {
        img
    } else {
        img.channel(0)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Generates `n` humanoids and their degraded copies in memory. Images
    /// are quantised to 8 bits so the result matches what [`Dataset::load`]
    /// reads back from a generated and degraded directory with the same seeds.
    pub fn synthesize(n: usize, seed: u64, degradation: &DegradationSpec, degrade_seed: u64) -> Result<Self> {
        let split = SplitRatio::default();
        let test = split.test_count(n)?;
        let mut examples = Vec::with_capacity(n);
        for i in 0..n {
            let s = generate_sample(derive_seed(seed, "sample", i as u64), None)?;
            let (h, w) = (s.image.height(), s.image.width());
            let hq = s.image.quantize_u8();
            let lq = degrade(&hq, degradation, degradation_seed(degrade_seed, i))?.quantize_u8();
            examples.push(Example {
                id: crate::synth::sample_id(i),
                lq,
                hq,
                pose: render_pose_map(&s.skeleton, h, w).quantize_u8(),
                attention: oracle_attention(&s.foreground).quantize_u8(),
                parts: s.parts,
                caption: s.caption,
                split: if i >= n - test { Split::Test } else { Split::Train },
            });
        }
        Ok(Self { examples })
    }

    /// Reads a generated dataset and its degraded copies, optionally keeping
    /// one split only.
    pub fn load(manifest: &Path, degraded_dir: &Path, split: Option<Split>) -> Result<Self> {
        if !manifest.exists() {
            return Err(Error::MissingArtifact(manifest.to_path_buf()));
        }
        let index = degraded_dir.join(DEGRADED_MANIFEST);
        if !index.exists() {
            return Err(Error::MissingArtifact(index));
        }
        let root = manifest.parent().unwrap_or(Path::new("."));
        let entries: Vec<ManifestEntry> = read_manifest(manifest)?;
        let degraded: Vec<DegradedEntry> = fs::read_to_string(&index)
            .map_err(|e| Error::io(&index, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<_>>()?;
        if degraded.len() != entries.len() {
            return Err(Error::InvalidArgument(format!(
                "{} degraded images for {} dataset entries",
                degraded.len(),
                entries.len()
            )));
        }
        let mut examples = Vec::new();
        for (e, d) in entries.iter().zip(&degraded) {
            if e.id != d.id {
                return Err(Error::InvalidArgument(format!("degraded entry {} does not match {}", d.id, e.id)));
            }
            if split.is_some_and(|s| s != e.split) {
                continue;
            }
            let parsed = parse_caption(&e.caption);
            for w in &parsed.warnings {
                log::warn!("{}: {w}", e.id);
            }
            examples.push(Example {
                id: e.id.clone(),
                hq: ImageTensor::load_png(&root.join(&e.image))?,
                lq: ImageTensor::load_png(&degraded_dir.join(&d.image))?,
                pose: ImageTensor::load_png(&root.join(&e.pose))?,
                attention: single_channel(ImageTensor::load_png(&root.join(&e.attn))?),
                parts: PartMasks::from_label_image(&ImageTensor::load_png(&root.join(&e.parts))?)?,
                caption: parsed.record,
                split: e.split,
            });
        }
        Ok(Self { examples })
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }
}

/// Stacks equally sized images into a `(B, H, W, C)` tensor.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        first.ensure_same_shape(img, "stack")?;
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, c), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    #[test]
    fn disk_and_memory_datasets_agree() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DegradationSpec::default();
        let manifest = generate_dataset(3, 5, &dir.path().join("hq"), SplitRatio::default()).unwrap();
        degrade_dataset(&manifest, &spec, 11, &dir.path().join("lq")).unwrap();
        let disk = Dataset::load(&manifest, &dir.path().join("lq"), None).unwrap();
        let mem = Dataset::synthesize(3, 5, &spec, 11).unwrap();
        assert_eq!(disk.len(), 3);
        for (a, b) in disk.examples.iter().zip(&mem.examples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.hq, b.hq);
            assert_eq!(a.lq, b.lq);
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.attention, b.attention);
            assert_eq!(a.parts, b.parts);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn missing_degraded_dir_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(1, 5, dir.path(), SplitRatio::default()).unwrap();
        assert!(matches!(
            Dataset::load(&manifest, &dir.path().join("nope"), None),
            Err(Error::MissingArtifact(_))
        ));
    }
}
