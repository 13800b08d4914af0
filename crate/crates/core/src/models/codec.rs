use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::Architecture;
use crate::image::ImageTensor;
use crate::nn::{silu, upsample2x_to, Conv2d, Init, ParamSource};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    /// Pixel-space diffusion; encode and decode are exact inverses.
    #[default]
    Identity,
    /// Convolutional autoencoder with 2x spatial reduction.
    Learned,
}

#[derive(Clone, Debug)]
struct Learned {
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
}

/// Image to latent mapping.
#[derive(Clone, Debug)]
pub struct Codec {
    learned: Option<Learned>,
    factor: usize,
}

impl Codec {
    /// Learned-codec arrays are always declared so checkpoints share one
    /// layout; they are only used in learned mode.
    pub fn new(arch: &Architecture, src: &mut dyn ParamSource) -> Result<Self> {
        let c = &arch.codec;
        let h = c.hidden;
        let l = c.latent_channels;
        let learned = Learned {
            enc: [
                src.conv("codec.enc0", 3, 2, 3, h, Init::Fan(1.0))?,
                src.conv("codec.enc1", 3, 1, h, h, Init::Fan(1.0))?,
                src.conv("codec.enc2", 3, 1, h, l, Init::Fan(1.0))?,
            ],
            dec: [
                src.conv("codec.dec0", 3, 1, l, h, Init::Fan(1.0))?,
                src.conv("codec.dec1", 3, 1, h, h, Init::Fan(1.0))?,
                src.conv("codec.dec2", 3, 1, h, 3, Init::Fan(1.0))?,
            ],
        };
        Ok(match c.mode {
            CodecMode::Identity => Self {
                learned: None,
                factor: 1,
            },
            CodecMode::Learned => Self {
                learned: Some(learned),
                factor: 2,
            },
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn is_identity(&self) -> bool {
        self.learned.is_none()
    }

    /// `(B, H, W, C)` images to latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} is not divisible by the codec factor {}",
                self.factor
            )));
        }
        match &self.learned {
            None => Ok(x.clone()),
            Some(l) => {
                let h = silu(&l.enc[0].forward(x)?)?;
                let h = silu(&l.enc[1].forward(&h)?)?;
                l.enc[2].forward(&h)
            }
        }
    }

    /// Latents to images without the final clamp; used for training.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        match &self.learned {
            None => Ok(z.clone()),
            Some(l) => {
                let (_, h, w, _) = z.dims4()?;
                let up = upsample2x_to(z, 2 * h, 2 * w)?;
                let h = silu(&l.dec[0].forward(&up)?)?;
                let h = silu(&l.dec[1].forward(&h)?)?;
                l.dec[2].forward(&h)
            }
        }
    }

    /// Latents to images clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(z)?.clamp(0.0, 1.0)?)
    }

    pub fn encode_image(&self, img: &ImageTensor) -> Result<Tensor> {
        self.encode(&img.to_tensor()?)
    }

    pub fn decode_image(&self, z: &Tensor) -> Result<ImageTensor> {
        ImageTensor::from_tensor(&self.decode(z)?)
    }
}
