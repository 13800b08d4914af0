use candle_core::Tensor;

use super::denoiser::ResBlock;
use super::Architecture;
use crate::image::ImageTensor;
use crate::nn::{depth_to_space, silu, space_to_depth, Conv2d, Init, ParamSource};
use crate::{Error, Result};

/// Residual restoration network. The output convolution starts at zero, so
/// an untrained regressor returns its input unchanged.
#[derive(Clone, Debug)]
pub struct Regressor {
    patch: usize,
    height: usize,
    width: usize,
    input: Conv2d,
    blocks: Vec<ResBlock>,
    output: Conv2d,
}

impl Regressor {
    pub fn new(arch: &Architecture, src: &mut dyn ParamSource) -> Result<Self> {
        let r = &arch.regressor;
        let c = 3 * r.patch * r.patch;
        Ok(Self {
            patch: r.patch,
            height: arch.image_height,
            width: arch.image_width,
            input: src.conv("regressor.input", 3, 1, c, r.width, Init::Fan(1.0))?,
            blocks: (0..r.blocks)
                .map(|i| ResBlock::new(src, &format!("regressor.block{i}"), r.width, r.width, None))
                .collect::<Result<_>>()?,
            output: src.conv("regressor.output", 3, 1, r.width, c, Init::Zeros)?,
        })
    }

    /// Unclamped prediction for `(B, H, W, 3)` inputs; training uses this.
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = x.dims4()?;
        if (h, w, c) != (self.height, self.width, 3) {
            return Err(Error::Shape(format!(
                "regressor expects {}x{}x3, got {h}x{w}x{c}",
                self.height, self.width
            )));
        }
        let mut f = self.input.forward(&space_to_depth(x, self.patch)?)?;
        for b in &self.blocks {
            f = b.forward(&f, None)?;
        }
        let r = depth_to_space(&self.output.forward(&silu(&f)?)?, self.patch)?;
        Ok((x + r)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_raw(x)?.clamp(0.0, 1.0)?)
    }

    pub fn restore(&self, img: &ImageTensor) -> Result<ImageTensor> {
        ImageTensor::from_tensor(&self.forward(&img.to_tensor()?)?)
    }
}
