use candle_core::{Tensor, D};

use super::{Architecture, ConditionBundle};
use crate::nn::{
    depth_to_space, silu, space_to_depth, timestep_embedding, upsample2x_to, Conv2d, Init, Linear,
    ParamSource,
};
use crate::{Error, Result};

/// Residual block with a feature-wise affine modulation from the embedding.
#[derive(Clone, Debug)]
pub(super) struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    film: Option<Linear>,
}

impl ResBlock {
    pub(super) fn new(
        src: &mut dyn ParamSource,
        name: &str,
        cin: usize,
        cout: usize,
        embed: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            conv1: src.conv(&format!("{name}.conv1"), 3, 1, cin, cout, Init::Fan(1.0))?,
            conv2: src.conv(&format!("{name}.conv2"), 3, 1, cout, cout, Init::Fan(0.5))?,
            skip: if cin != cout {
                Some(src.conv(&format!("{name}.skip"), 1, 1, cin, cout, Init::Fan(1.0))?)
            } else {
                None
            },
            film: match embed {
                Some(e) => Some(src.linear(&format!("{name}.film"), e, 2 * cout, Init::Fan(0.5))?),
                None => None,
            },
        })
    }

    pub(super) fn forward(&self, x: &Tensor, emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&silu(x)?)?;
        if let (Some(film), Some(e)) = (&self.film, emb) {
            let (b, c) = (h.dim(0)?, h.dim(3)?);
            let ss = film.forward(e)?.reshape((b, 1, 1, 2 * c))?;
            let scale = ss.narrow(3, 0, c)?;
            let shift = ss.narrow(3, c, c)?;
            h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        }
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Three-resolution encoder shared in structure by the trunk and the
/// condition branch.
#[derive(Clone, Debug)]
struct Encoder {
    input: Conv2d,
    level0: ResBlock,
    down1: Conv2d,
    level1: ResBlock,
    down2: Conv2d,
    mid: ResBlock,
}

struct Features {
    skip0: Tensor,
    skip1: Tensor,
    mid: Tensor,
}

impl Encoder {
    fn new(src: &mut dyn ParamSource, name: &str, cin: usize, w: [usize; 3], e: usize) -> Result<Self> {
        Ok(Self {
            input: src.conv(&format!("{name}.input"), 3, 1, cin, w[0], Init::Fan(1.0))?,
            level0: ResBlock::new(src, &format!("{name}.level0"), w[0], w[0], Some(e))?,
            down1: src.conv(&format!("{name}.down1"), 3, 2, w[0], w[1], Init::Fan(1.0))?,
            level1: ResBlock::new(src, &format!("{name}.level1"), w[1], w[1], Some(e))?,
            down2: src.conv(&format!("{name}.down2"), 3, 2, w[1], w[2], Init::Fan(1.0))?,
            mid: ResBlock::new(src, &format!("{name}.mid"), w[2], w[2], Some(e))?,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Features> {
        let h = self.input.forward(x)?;
        let skip0 = self.level0.forward(&h, Some(emb))?;
        let h = self.down1.forward(&skip0)?;
        let skip1 = self.level1.forward(&h, Some(emb))?;
        let h = self.down2.forward(&skip1)?;
        let mid = self.mid.forward(&h, Some(emb))?;
        Ok(Features { skip0, skip1, mid })
    }
}

/// Trainable copy of the encoder over the structural conditions, fused into
/// the trunk through zero-initialised 1x1 projections.
#[derive(Clone, Debug)]
struct ConditionBranch {
    encoder: Encoder,
    fuse: [Conv2d; 3],
}

/// Noise-prediction network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    patch: usize,
    latent_channels: usize,
    time_dim: usize,
    time1: Linear,
    time2: Linear,
    text: Linear,
    encoder: Encoder,
    up1: ResBlock,
    up0: ResBlock,
    output: Conv2d,
    branch: ConditionBranch,
}

impl Denoiser {
    pub fn new(arch: &Architecture, src: &mut dyn ParamSource) -> Result<Self> {
        let d = &arch.denoiser;
        let c = arch.latent_channels();
        let p2 = d.patch * d.patch;
        let w = d.widths;
        let e = d.embed_dim;
        let n = "denoiser";
        let cond_channels = (2 * c + 1 + c) * p2;
        Ok(Self {
            patch: d.patch,
            latent_channels: c,
            time_dim: d.time_dim,
            time1: src.linear(&format!("{n}.time1"), d.time_dim, e, Init::Fan(1.0))?,
            time2: src.linear(&format!("{n}.time2"), e, e, Init::Fan(1.0))?,
            text: src.linear(&format!("{n}.text"), arch.text.dim, e, Init::Fan(1.0))?,
            encoder: Encoder::new(src, &format!("{n}.trunk"), c * p2, w, e)?,
            up1: ResBlock::new(src, &format!("{n}.up1"), w[2] + w[1], w[1], Some(e))?,
            up0: ResBlock::new(src, &format!("{n}.up0"), w[1] + w[0], w[0], Some(e))?,
            output: src.conv(&format!("{n}.output"), 3, 1, w[0], c * p2, Init::Zeros)?,
            branch: ConditionBranch {
                encoder: Encoder::new(src, &format!("{n}.branch"), cond_channels, w, e)?,
                fuse: [
                    src.conv(&format!("{n}.fuse0"), 1, 1, w[0], w[0], Init::Zeros)?,
                    src.conv(&format!("{n}.fuse1"), 1, 1, w[1], w[1], Init::Zeros)?,
                    src.conv(&format!("{n}.fuse2"), 1, 1, w[2], w[2], Init::Zeros)?,
                ],
            },
        })
    }

    fn embedding(&self, ts: &[usize], text: &Tensor, dtype: candle_core::DType) -> Result<Tensor> {
        let t = timestep_embedding(ts, self.time_dim)?.to_dtype(dtype)?;
        let t = self.time2.forward(&silu(&self.time1.forward(&t)?)?)?;
        Ok(silu(&(t + self.text.forward(text)?)?)?)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, h, w, c) = z.dims4()?;
        let need = self.patch * 4;
        if c != self.latent_channels || h % need != 0 || w % need != 0 {
            return Err(Error::Shape(format!(
                "latent {:?} needs {} channels and sides divisible by {need}",
                z.dims(),
                self.latent_channels
            )));
        }
        Ok(())
    }

    /// Predicts the noise in `z_t` (`(B, h, w, C)`) at per-item timesteps.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &ConditionBundle) -> Result<Tensor> {
        cond.validate()?;
        if cond.reg_latent.dims() != z_t.dims() {
            return Err(Error::Shape(format!(
                "conditions {:?} do not match latent {:?}",
                cond.reg_latent.dims(),
                z_t.dims()
            )));
        }
        self.run(z_t, ts, &cond.text_emb, Some(cond))
    }

    /// The trunk alone: text modulation but no structural branch.
    pub fn forward_trunk(&self, z_t: &Tensor, ts: &[usize], text_emb: &Tensor) -> Result<Tensor> {
        self.run(z_t, ts, text_emb, None)
    }

    fn run(
        &self,
        z_t: &Tensor,
        ts: &[usize],
        text: &Tensor,
        cond: Option<&ConditionBundle>,
    ) -> Result<Tensor> {
        self.check_latent(z_t)?;
        let b = z_t.dim(0)?;
        if ts.len() != b || text.dim(0)? != b {
            return Err(Error::Shape(format!(
                "batch {b} with {} timesteps and {} text rows",
                ts.len(),
                text.dim(0)?
            )));
        }
        let emb = self.embedding(ts, text, z_t.dtype())?;
        let x = space_to_depth(z_t, self.patch)?;
        let mut f = self.encoder.forward(&x, &emb)?;
        if let Some(c) = cond {
            let cin = Tensor::cat(&[z_t, &c.reg_latent, &c.pose_latent, &c.attn_latent], D::Minus1)?;
            let cin = space_to_depth(&cin, self.patch)?;
            let g = self.branch.encoder.forward(&cin, &emb)?;
            f.skip0 = (f.skip0 + self.branch.fuse[0].forward(&g.skip0)?)?;
            f.skip1 = (f.skip1 + self.branch.fuse[1].forward(&g.skip1)?)?;
            f.mid = (f.mid + self.branch.fuse[2].forward(&g.mid)?)?;
        }
        let (_, h1, w1, _) = f.skip1.dims4()?;
        let up = upsample2x_to(&f.mid, h1, w1)?;
        let h = self.up1.forward(&Tensor::cat(&[&up, &f.skip1], D::Minus1)?, Some(&emb))?;
        let (_, h0, w0, _) = f.skip0.dims4()?;
        let up = upsample2x_to(&h, h0, w0)?;
        let h = self.up0.forward(&Tensor::cat(&[&up, &f.skip0], D::Minus1)?, Some(&emb))?;
        let out = self.output.forward(&silu(&h)?)?;
        depth_to_space(&out, self.patch)
    }
}
