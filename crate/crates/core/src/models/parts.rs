use candle_core::{DType, Device, Tensor, D};

use super::Architecture;
use crate::body::BodyPart;
use crate::image::ImageTensor;
use crate::nn::{avg_pool, silu, space_to_depth, Conv2d, Init, Linear, ParamSource};
use crate::synth::PartMasks;
use crate::{Error, Result};

/// Pooled features of the five body parts of one image, in
/// [`BodyPart::ALL`] order. Invisible parts carry zero features.
#[derive(Clone, Debug)]
pub struct PartFeatureSet {
    /// `(5, F)`
    pub features: Tensor,
    pub visible: [bool; BodyPart::COUNT],
}

impl PartFeatureSet {
    pub fn to_vecs(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.features.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    pub fn feature(&self, part: BodyPart) -> Result<Tensor> {
        Ok(self.features.get(part.index())?)
    }

    pub fn any_visible(&self) -> bool {
        self.visible.iter().any(|v| *v)
    }
}

/// Small conv trunk with masked average pooling per part, plus a linear
/// part-identity classifier on the pooled features.
#[derive(Clone, Debug)]
pub struct PartExtractor {
    patch: usize,
    height: usize,
    width: usize,
    convs: [Conv2d; 3],
    classifier: Linear,
}

/// Part masks as a `(1, H, W, 5)` tensor.
pub fn masks_tensor(masks: &PartMasks) -> Result<Tensor> {
    let mut data = vec![0f32; masks.labels.len() * BodyPart::COUNT];
    for (i, l) in masks.labels.iter().enumerate() {
        if let Some(p) = l {
            data[i * BodyPart::COUNT + p.index()] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, masks.height, masks.width, BodyPart::COUNT), &Device::Cpu)?)
}

impl PartExtractor {
    pub fn new(arch: &Architecture, src: &mut dyn ParamSource) -> Result<Self> {
        let p = &arch.parts;
        let cin = 3 * p.patch * p.patch;
        Ok(Self {
            patch: p.patch,
            height: arch.image_height,
            width: arch.image_width,
            convs: [
                src.conv("parts.conv0", 3, 1, cin, p.width, Init::Fan(1.0))?,
                src.conv("parts.conv1", 3, 1, p.width, p.width, Init::Fan(1.0))?,
                src.conv("parts.conv2", 3, 1, p.width, p.feature_dim, Init::Fan(1.0))?,
            ],
            classifier: src.linear("parts.classifier", p.feature_dim, BodyPart::COUNT, Init::Fan(1.0))?,
        })
    }

    /// Pooled features `(B, 5, F)` for images `(B, H, W, 3)` and masks
    /// `(B, H, W, 5)`.
    pub fn pooled(&self, images: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = images.dims4()?;
        let (mb, mh, mw, mc) = masks.dims4()?;
        if (h, w, c) != (self.height, self.width, 3) || (mb, mh, mw, mc) != (b, h, w, BodyPart::COUNT) {
            return Err(Error::Shape(format!(
                "part extractor got images {:?} and masks {:?}",
                images.dims(),
                masks.dims()
            )));
        }
        let x = space_to_depth(images, self.patch)?;
        let f = silu(&self.convs[0].forward(&x)?)?;
        let f = silu(&self.convs[1].forward(&f)?)?;
        let f = self.convs[2].forward(&f)?;
        let (_, fh, fw, fd) = f.dims4()?;
        let m = avg_pool(&masks.to_dtype(f.dtype())?, self.patch)?.reshape((b, fh * fw, BodyPart::COUNT))?;
        let f = f.reshape((b, fh * fw, fd))?;
        let sums = m.sum(1)?; // (B, 5)
        let num = m.transpose(1, 2)?.contiguous()?.matmul(&f)?; // (B, 5, F)
        let denom = sums.clamp(1e-12, f64::INFINITY)?.unsqueeze(D::Minus1)?;
        Ok(num.broadcast_div(&denom)?)
    }

    /// Part-identity logits `(B, 5, 5)` from pooled features.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        let (b, p, f) = pooled.dims3()?;
        Ok(self.classifier.forward(&pooled.reshape((b * p, f))?)?.reshape((b, p, BodyPart::COUNT))?)
    }

    /// Features of one image (a `(1, H, W, 3)` tensor, possibly carrying
    /// gradients) under the given masks.
    pub fn features_of(&self, image: &Tensor, masks: &PartMasks) -> Result<PartFeatureSet> {
        let visible = BodyPart::ALL.map(|p| masks.pixel_count(p) > 0);
        let pooled = self.pooled(image, &masks_tensor(masks)?)?;
        Ok(PartFeatureSet {
            features: pooled.squeeze(0)?,
            visible,
        })
    }

    pub fn extract(&self, image: &ImageTensor, masks: &PartMasks) -> Result<PartFeatureSet> {
        if (image.height(), image.width()) != (masks.height, masks.width) {
            return Err(Error::Shape(format!(
                "image {}x{} and masks {}x{} differ",
                image.height(),
                image.width(),
                masks.height,
                masks.width
            )));
        }
        self.features_of(&image.to_tensor()?, masks)
    }
}
