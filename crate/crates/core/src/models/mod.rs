//! The learned components and the checkpoint format that stores them.

mod codec;
mod denoiser;
mod parts;
mod regressor;
mod text;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use codec::{Codec, CodecMode};
pub use denoiser::Denoiser;
pub use parts::{masks_tensor, PartExtractor, PartFeatureSet};
pub use regressor::Regressor;
pub use text::TextEmbedder;

use crate::caption::VOCABULARY;
use crate::nn::{Initializer, ParamSource, ParamStore};
use crate::rng::substream;
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "body-restore-ckpt/1";
const METADATA_KEY: &str = "body_restore";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecArch {
    pub mode: CodecMode,
    /// Latent channels of the learned codec (the identity codec keeps 3).
    pub latent_channels: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    /// Space-to-depth factor applied to the latent before the first conv.
    pub patch: usize,
    /// Channel widths at the three resolutions.
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorArch {
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextArch {
    pub dim: usize,
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartsArch {
    pub patch: usize,
    pub width: usize,
    pub feature_dim: usize,
}

/// Layer sizes of every component; fully determines all parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub image_height: usize,
    pub image_width: usize,
    pub codec: CodecArch,
    pub denoiser: DenoiserArch,
    pub regressor: RegressorArch,
    pub text: TextArch,
    pub parts: PartsArch,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_height: 128,
            image_width: 64,
            codec: CodecArch {
                mode: CodecMode::Identity,
                latent_channels: 4,
                hidden: 32,
            },
            denoiser: DenoiserArch {
                patch: 2,
                widths: [32, 48, 64],
                time_dim: 32,
                embed_dim: 64,
            },
            regressor: RegressorArch {
                patch: 2,
                width: 32,
                blocks: 3,
            },
            text: TextArch {
                dim: 32,
                vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
            },
            parts: PartsArch {
                patch: 2,
                width: 32,
                feature_dim: 32,
            },
        }
    }
}

impl Architecture {
    /// Channels of a latent: 3 for the identity codec.
    pub fn latent_channels(&self) -> usize {
        match self.codec.mode {
            CodecMode::Identity => 3,
            CodecMode::Learned => self.codec.latent_channels,
        }
    }

    pub fn codec_factor(&self) -> usize {
        match self.codec.mode {
            CodecMode::Identity => 1,
            CodecMode::Learned => 2,
        }
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let f = self.codec_factor();
        (self.image_height / f, self.image_width / f, self.latent_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h == 0 || w == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let f = self.codec_factor();
        let d = &self.denoiser;
        let need = f * d.patch * 4;
        if d.patch == 0 || h % need != 0 || w % need != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} must be divisible by {need} (codec x patch x 4)"
            )));
        }
        for (name, p) in [("regressor", self.regressor.patch), ("parts", self.parts.patch)] {
            if p == 0 || h % p != 0 || w % p != 0 {
                return Err(Error::Config(format!("{name} patch {p} does not divide {h}x{w}")));
            }
        }
        let sizes = [
            d.widths[0],
            d.widths[1],
            d.widths[2],
            d.time_dim,
            d.embed_dim,
            self.regressor.width,
            self.text.dim,
            self.parts.width,
            self.parts.feature_dim,
            self.codec.hidden,
            self.codec.latent_channels,
        ];
        if sizes.contains(&0) || d.time_dim % 2 != 0 {
            return Err(Error::Config("layer sizes must be positive (time_dim even)".into()));
        }
        if self.text.vocabulary.is_empty() {
            return Err(Error::Config("text vocabulary is empty".into()));
        }
        Ok(())
    }
}

/// Structural conditions for one batch, at latent resolution.
#[derive(Clone, Debug)]
pub struct ConditionBundle {
    /// `(B, h, w, C_lat)`
    pub reg_latent: Tensor,
    /// `(B, h, w, C_lat)`
    pub pose_latent: Tensor,
    /// `(B, h, w, 1)` in `[0, 1]`
    pub attn_latent: Tensor,
    /// `(B, D)`
    pub text_emb: Tensor,
}

impl ConditionBundle {
    pub fn validate(&self) -> Result<()> {
        let (b, h, w, _) = self.reg_latent.dims4()?;
        let (pb, ph, pw, _) = self.pose_latent.dims4()?;
        let (ab, ah, aw, ac) = self.attn_latent.dims4()?;
        if (pb, ph, pw) != (b, h, w) || (ab, ah, aw, ac) != (b, h, w, 1) {
            return Err(Error::Shape(format!(
                "condition shapes disagree: reg {:?}, pose {:?}, attn {:?}",
                self.reg_latent.dims(),
                self.pose_latent.dims(),
                self.attn_latent.dims()
            )));
        }
        if self.text_emb.dims2()?.0 != b {
            return Err(Error::Shape("text embedding batch differs".into()));
        }
        let a = self.attn_latent.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("attention latent outside [0, 1]".into()));
        }
        crate::diffusion::ensure_finite(&self.text_emb, "text embedding")?;
        Ok(())
    }

    /// Concatenates bundles along the batch axis.
    pub fn cat(items: &[&ConditionBundle]) -> Result<Self> {
        let pick = |f: fn(&ConditionBundle) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&items.iter().map(|c| f(c)).collect::<Vec<_>>(), 0)?)
        };
        Ok(Self {
            reg_latent: pick(|c| &c.reg_latent)?,
            pose_latent: pick(|c| &c.pose_latent)?,
            attn_latent: pick(|c| &c.attn_latent)?,
            text_emb: pick(|c| &c.text_emb)?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            reg_latent: self.reg_latent.to_dtype(dtype)?,
            pose_latent: self.pose_latent.to_dtype(dtype)?,
            attn_latent: self.attn_latent.to_dtype(dtype)?,
            text_emb: self.text_emb.to_dtype(dtype)?,
        })
    }
}

/// Parameter-name prefixes of each component.
pub mod prefix {
    pub const REGRESSOR: &str = "regressor.";
    pub const DENOISER: &str = "denoiser.";
    pub const TEXT: &str = "text.";
    pub const PARTS: &str = "parts.";
    pub const CODEC: &str = "codec.";
}

/// Every learned array plus the descriptor that shapes them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub arch: Architecture,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    architecture: Architecture,
}

/// Builds every component once against `src`, creating or checking each array.
fn declare_all(arch: &Architecture, src: &mut dyn ParamSource) -> Result<()> {
    Regressor::new(arch, src)?;
    Denoiser::new(arch, src)?;
    TextEmbedder::new(arch, src)?;
    PartExtractor::new(arch, src)?;
    Codec::new(arch, src)?;
    Ok(())
}

impl ModelParams {
    /// Fresh parameters; each component draws from its own named substream.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        {
            let mut i = Initializer::new(&mut store, substream(seed, "init.regressor", 0));
            Regressor::new(arch, &mut i)?;
        }
        {
            let mut i = Initializer::new(&mut store, substream(seed, "init.denoiser", 0));
            Denoiser::new(arch, &mut i)?;
        }
        {
            let mut i = Initializer::new(&mut store, substream(seed, "init.text", 0));
            TextEmbedder::new(arch, &mut i)?;
        }
        {
            let mut i = Initializer::new(&mut store, substream(seed, "init.parts", 0));
            PartExtractor::new(arch, &mut i)?;
        }
        {
            let mut i = Initializer::new(&mut store, substream(seed, "init.codec", 0));
            Codec::new(arch, &mut i)?;
        }
        Ok(Self {
            arch: arch.clone(),
            store,
        })
    }

    pub fn regressor(&self) -> Result<Regressor> {
        Regressor::new(&self.arch, &mut self.store.frozen())
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(&self.arch, &mut self.store.frozen())
    }

    pub fn text(&self) -> Result<TextEmbedder> {
        TextEmbedder::new(&self.arch, &mut self.store.frozen())
    }

    pub fn parts(&self) -> Result<PartExtractor> {
        PartExtractor::new(&self.arch, &mut self.store.frozen())
    }

    pub fn codec(&self) -> Result<Codec> {
        Codec::new(&self.arch, &mut self.store.frozen())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            store: self.store.deep_clone()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            store: self.store.to_dtype(dtype)?,
        })
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.store.all_finite()? {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    /// Checkpoint bytes: safetensors arrays plus one metadata entry holding
    /// the format version and architecture.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&Header {
            format_version: FORMAT_VERSION.into(),
            architecture: self.arch.clone(),
        })?;
        let meta = HashMap::from([(METADATA_KEY.to_string(), header)]);
        let tensors: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(k, v)| (k.to_string(), v.as_tensor().clone()))
            .collect();
        safetensors::serialize(tensors, Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&Architecture>) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        let header = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .ok_or_else(|| Error::Checkpoint("checkpoint has no header".into()))?;
        let header: Header = serde_json::from_str(header)
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format {} is not {FORMAT_VERSION}",
                header.format_version
            )));
        }
        if let Some(exp) = expected {
            if *exp != header.architecture {
                return Err(Error::Checkpoint(
                    "checkpoint architecture differs from the configured one".into(),
                ));
            }
        }
        let arch = header.architecture;
        arch.validate()?;
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        let mut store = ParamStore::new();
        for (k, t) in tensors {
            store.insert(&k, t)?;
        }
        declare_all(&arch, &mut store.frozen())?;
        let reference = Self::init(&arch, 0)?;
        if reference.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, architecture declares {}",
                store.len(),
                reference.store.len()
            )));
        }
        let params = Self { arch, store };
        params.ensure_finite()?;
        Ok(params)
    }

    pub fn load(path: &Path, expected: Option<&Architecture>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            image_height: 16,
            image_width: 8,
            denoiser: DenoiserArch {
                patch: 2,
                widths: [4, 6, 8],
                time_dim: 8,
                embed_dim: 8,
            },
            regressor: RegressorArch {
                patch: 2,
                width: 6,
                blocks: 1,
            },
            text: TextArch {
                dim: 4,
                vocabulary: VOCABULARY.iter().map(|s| s.to_string()).collect(),
            },
            parts: PartsArch {
                patch: 2,
                width: 6,
                feature_dim: 5,
            },
            codec: CodecArch {
                mode: CodecMode::Identity,
                latent_channels: 2,
                hidden: 4,
            },
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = ModelParams::init(&tiny_arch(), 3).unwrap();
        let bytes = p.to_bytes().unwrap();
        assert_eq!(bytes, p.to_bytes().unwrap());
        let q = ModelParams::from_bytes(&bytes, Some(&tiny_arch())).unwrap();
        assert!(p.store.bitwise_eq(&q.store).unwrap());
        assert_eq!(q.arch, tiny_arch());
    }

    #[test]
    fn mismatched_descriptor_is_rejected() {
        let p = ModelParams::init(&tiny_arch(), 3).unwrap();
        let mut other = tiny_arch();
        other.regressor.width = 7;
        let err = ModelParams::from_bytes(&p.to_bytes().unwrap(), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&tiny_arch(), 1).unwrap();
        let b = ModelParams::init(&tiny_arch(), 1).unwrap();
        let c = ModelParams::init(&tiny_arch(), 2).unwrap();
        assert!(a.store.bitwise_eq(&b.store).unwrap());
        assert!(!a.store.bitwise_eq(&c.store).unwrap());
    }

    fn cond(arch: &Architecture, b: usize, seed: u64) -> ConditionBundle {
        let (h, w, c) = arch.latent_dims();
        let n = |label: &str, ch: usize| {
            let v = crate::rng::normal_vec(seed, label, 0, b * h * w * ch);
            Tensor::from_vec(v, (b, h, w, ch), &Device::Cpu).unwrap()
        };
        ConditionBundle {
            reg_latent: n("reg", c),
            pose_latent: n("pose", c),
            attn_latent: n("attn", 1).tanh().unwrap().affine(0.5, 0.5).unwrap(),
            text_emb: Tensor::from_vec(
                crate::rng::normal_vec(seed, "text", 0, b * arch.text.dim),
                (b, arch.text.dim),
                &Device::Cpu,
            )
            .unwrap(),
        }
    }

    #[test]
    fn fresh_branch_leaves_trunk_output_unchanged() {
        let arch = tiny_arch();
        let mut p = ModelParams::init(&arch, 5).unwrap();
        // make the trunk output non-trivial while the fusion stays zero
        p.store.perturb(1, 0.3, &["denoiser.output"]).unwrap();
        let d = p.denoiser().unwrap();
        let c = cond(&arch, 2, 9);
        let z = c.pose_latent.clone();
        let full = d.forward(&z, &[3, 700], &c).unwrap();
        let trunk = d.forward_trunk(&z, &[3, 700], &c.text_emb).unwrap();
        assert_eq!(full.dims(), z.dims());
        let a = full.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = trunk.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().any(|v| *v != 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn denoiser_jvp_matches_central_differences() {
        let arch = tiny_arch();
        let mut p = ModelParams::init(&arch, 5).unwrap();
        p.store.perturb(2, 0.2, &["denoiser."]).unwrap();
        let c = cond(&arch, 1, 4);
        let z = crate::rng::normal_vec(8, "z", 0, 16 * 8 * 3);
        let z = Tensor::from_vec(z, (1, 16, 8, 3), &Device::Cpu).unwrap();
        let v = crate::rng::normal_vec(8, "v", 0, 16 * 8 * 3);
        let v = Tensor::from_vec(v, (1, 16, 8, 3), &Device::Cpu).unwrap();
        let u = crate::rng::normal_vec(8, "u", 0, 16 * 8 * 3);
        let u = Tensor::from_vec(u, (1, 16, 8, 3), &Device::Cpu).unwrap();
        // analytic: d/dz <u, eps(z)> . v
        let zv = candle_core::Var::from_tensor(&z).unwrap();
        let d = p.denoiser().unwrap();
        let out = d.forward(zv.as_tensor(), &[250], &c).unwrap();
        let s = (out * &u).unwrap().sum_all().unwrap();
        let g = s.backward().unwrap();
        let analytic: f64 = crate::nn::scalar(
            &(g.get(zv.as_tensor()).unwrap() * &v).unwrap().sum_all().unwrap(),
        )
        .unwrap();
        // oracle in f64
        let p64 = p.to_dtype(DType::F64).unwrap();
        let d64 = p64.denoiser().unwrap();
        let c64 = c.to_dtype(DType::F64).unwrap();
        let f = |zz: &Tensor| -> f64 {
            let o = d64.forward(zz, &[250], &c64).unwrap();
            crate::nn::scalar(&(o * u.to_dtype(DType::F64).unwrap()).unwrap().sum_all().unwrap()).unwrap()
        };
        let h = 1e-4;
        let z64 = z.to_dtype(DType::F64).unwrap();
        let v64 = v.to_dtype(DType::F64).unwrap();
        let fd = (f(&(&z64 + (&v64 * h).unwrap()).unwrap()) - f(&(&z64 - (&v64 * h).unwrap()).unwrap()))
            / (2.0 * h);
        let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
        assert!(rel <= 1e-3, "analytic {analytic} fd {fd} rel {rel}");
    }

    #[test]
    fn identity_codec_round_trip_is_exact() {
        let arch = tiny_arch();
        let p = ModelParams::init(&arch, 1).unwrap();
        let codec = p.codec().unwrap();
        let img = crate::image::ImageTensor::from_fn(16, 8, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let back = codec.decode_image(&codec.encode_image(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let mut learned = arch.clone();
        learned.codec.mode = CodecMode::Learned;
        learned.denoiser.patch = 1;
        let q = ModelParams::init(&learned, 1).unwrap();
        let z = q.codec().unwrap().encode_image(&img).unwrap();
        assert_eq!(z.dims(), &[1, 8, 4, 2]);
        let odd = crate::image::ImageTensor::zeros(15, 8, 3);
        assert!(q.codec().unwrap().encode_image(&odd).is_err());
    }

    #[test]
    fn fresh_regressor_is_identity_and_output_is_bounded() {
        let arch = tiny_arch();
        let mut p = ModelParams::init(&arch, 1).unwrap();
        let img = crate::image::ImageTensor::from_fn(16, 8, 3, |y, x, c| ((y + x + c) % 5) as f32 / 4.0);
        assert_eq!(p.regressor().unwrap().restore(&img).unwrap(), img);
        p.store.perturb(3, 5.0, &["regressor."]).unwrap();
        let wild = p.regressor().unwrap().restore(&img).unwrap();
        assert!(wild.in_unit_range());
        assert_ne!(wild, img);
        let wrong = crate::image::ImageTensor::zeros(8, 8, 3);
        assert!(p.regressor().unwrap().restore(&wrong).is_err());
    }

    #[test]
    fn caption_embedding_is_mean_of_rows() {
        use crate::caption::{CaptionField, CaptionRecord};
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        let t = p.text().unwrap();
        let empty = t.embed(&CaptionRecord::default()).unwrap();
        assert!(empty.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        let mut one = CaptionRecord::default();
        one.set(CaptionField::AccessoryOnFace, "sunglasses").unwrap();
        let row = VOCABULARY.iter().position(|v| *v == "sunglasses").unwrap();
        let table = p.store.get("text.table").unwrap().as_tensor().get(row).unwrap();
        assert_eq!(
            t.embed(&one).unwrap().squeeze(0).unwrap().to_vec1::<f32>().unwrap(),
            table.to_vec1::<f32>().unwrap()
        );
        let mut a = CaptionRecord::default();
        a.set(CaptionField::UpperGarment, "pink long sleeve").unwrap();
        let mut b = CaptionRecord::default();
        b.set(CaptionField::UpperGarment, "sleeve long pink").unwrap();
        assert_eq!(
            t.embed(&a).unwrap().to_vec2::<f32>().unwrap(),
            t.embed(&b).unwrap().to_vec2::<f32>().unwrap()
        );
        let mut oov = CaptionRecord::default();
        oov.set(CaptionField::Shoes, "golden slippers").unwrap();
        match t.embed(&oov) {
            Err(Error::OutOfVocabulary(tok)) => assert_eq!(tok, "golden"),
            other => panic!("expected out-of-vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn part_features_zero_for_empty_masks_and_deterministic() {
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        let ex = p.parts().unwrap();
        let img = crate::image::ImageTensor::from_fn(16, 8, 3, |y, x, c| ((y * x + c) % 7) as f32 / 6.0);
        let none = crate::synth::PartMasks::empty(16, 8);
        let f = ex.extract(&img, &none).unwrap();
        assert!(!f.any_visible());
        assert!(f.to_vecs().unwrap().iter().flatten().all(|v| *v == 0.0));
        let mut m = crate::synth::PartMasks::empty(16, 8);
        for i in 0..40 {
            m.labels[i] = Some(crate::body::BodyPart::Head);
        }
        let a = ex.extract(&img, &m).unwrap();
        let b = ex.extract(&img, &m).unwrap();
        assert_eq!(a.to_vecs().unwrap(), b.to_vecs().unwrap());
        assert_eq!(a.visible, [true, false, false, false, false]);
        assert!(ex.extract(&img, &crate::synth::PartMasks::empty(8, 8)).is_err());
    }

    #[test]
    fn default_architecture_is_valid() {
        Architecture::default().validate().unwrap();
        let mut bad = Architecture::default();
        bad.image_width = 60;
        assert!(bad.validate().is_err());
    }
}
