//! Reverse diffusion steered by a body-part feature loss.

use candle_core::{DType, Shape, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::body::BodyPart;
use crate::caption::CaptionRecord;
use crate::diffusion::{add_posterior_noise, ensure_finite, estimate_x0, posterior_mean, LatentState, NoiseSchedule, NoiseStream};
use crate::image::ImageTensor;
use crate::metrics::{psnr, ssim};
use crate::models::{Codec, ConditionBundle, Denoiser, ModelParams, PartExtractor, PartFeatureSet};
use crate::nn::{grad_or_zeros, scalar};
use crate::structure::{extract_structure, ExtractionMode, Structure};
use crate::synth::PartMasks;
use crate::training::build_conditions;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Differentiate through the noise prediction as well.
    #[default]
    #[serde(rename = "full-chain")]
    FullChain,
    /// Treat the noise prediction as a constant.
    #[serde(rename = "truncated")]
    Truncated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartLossVariant {
    #[default]
    #[serde(rename = "normalized-L2")]
    NormalizedL2,
    /// Divergence between the part classifier's label distributions.
    #[serde(rename = "logit-CE")]
    LogitCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Gradient scale; 0 disables guidance.
    pub scale: f64,
    #[serde(default)]
    pub mode: GradientMode,
    pub seed: u64,
    #[serde(default)]
    pub variant: PartLossVariant,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 0.0,
            mode: GradientMode::FullChain,
            seed: 0,
            variant: PartLossVariant::NormalizedL2,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} must be finite and >= 0", self.scale)));
        }
        Ok(())
    }
}

/// Part features of the regression output, the target of guidance.
#[derive(Clone, Debug)]
pub struct PartReference {
    pub features: PartFeatureSet,
    pub masks: PartMasks,
}

impl PartReference {
    pub fn new(extractor: &PartExtractor, reg: &Tensor, masks: &PartMasks) -> Result<Self> {
        let features = extractor.features_of(reg, masks)?;
        if !features.any_visible() {
            return Err(Error::NoVisibleParts);
        }
        Ok(Self {
            features: PartFeatureSet {
                features: features.features.detach(),
                visible: features.visible,
            },
            masks: masks.clone(),
        })
    }
}

fn visible_rows(features: &Tensor, visible: &[bool; BodyPart::COUNT]) -> Result<Tensor> {
    let idx: Vec<u32> = (0..BodyPart::COUNT as u32).filter(|&i| visible[i as usize]).collect();
    if idx.is_empty() {
        return Err(Error::NoVisibleParts);
    }
    let idx = Tensor::new(idx.as_slice(), features.device())?;
    Ok(features.index_select(&idx, 0)?)
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Part loss of a `(1, H, W, 3)` image against a reference, differentiable
/// with respect to the image. Parts invisible in the masks are skipped.
pub fn part_loss_tensor(
    extractor: &PartExtractor,
    image: &Tensor,
    reference: &PartReference,
    variant: PartLossVariant,
) -> Result<Tensor> {
    let feats = extractor.features_of(image, &reference.masks)?;
    let visible = reference.features.visible;
    let f = visible_rows(&feats.features, &visible)?;
    let r = visible_rows(&reference.features.features.to_dtype(f.dtype())?, &visible)?;
    match variant {
        PartLossVariant::NormalizedL2 => Ok((normalize_rows(&f)? - normalize_rows(&r)?)?.sqr()?.sum_all()?),
        PartLossVariant::LogitCe => {
            let lf = candle_nn::ops::log_softmax(&extractor.logits(&f.unsqueeze(0)?)?, D::Minus1)?;
            let lr = candle_nn::ops::log_softmax(&extractor.logits(&r.unsqueeze(0)?)?, D::Minus1)?;
            Ok((lr.exp()? * (lr - lf)?)?.sum_all()?)
        }
    }
}

/// Part loss between a decoded image and the regression output under the
/// given masks.
pub fn part_loss(
    decoded: &ImageTensor,
    reg: &ImageTensor,
    masks: &PartMasks,
    params: &ModelParams,
    variant: PartLossVariant,
) -> Result<f64> {
    decoded.ensure_same_shape(reg, "part_loss")?;
    let extractor = params.parts()?;
    let reference = PartReference::new(&extractor, &reg.to_tensor()?, masks)?;
    scalar(&part_loss_tensor(&extractor, &decoded.to_tensor()?, &reference, variant)?)
}

/// The networks a sampling run reads.
#[derive(Clone, Debug)]
pub struct SamplerModels {
    pub denoiser: Denoiser,
    pub codec: Codec,
    pub extractor: PartExtractor,
}

impl SamplerModels {
    pub fn new(params: &ModelParams) -> Result<Self> {
        Ok(Self {
            denoiser: params.denoiser()?,
            codec: params.codec()?,
            extractor: params.parts()?,
        })
    }
}

/// Loss, latent gradient and the detached noise prediction and clean
/// estimate of one guided step.
#[derive(Clone, Debug)]
pub struct GuidanceStep {
    pub loss: f64,
    pub gradient: Tensor,
    pub eps: Tensor,
    pub x0: Tensor,
}

/// Gradient of the part loss of the decoded clean estimate with respect to
/// `z_t`. The scale is applied by the caller.
pub fn guidance_gradient(
    state: &LatentState,
    cond: &ConditionBundle,
    models: &SamplerModels,
    reference: &PartReference,
    mode: GradientMode,
    variant: PartLossVariant,
    sched: &NoiseSchedule,
) -> Result<GuidanceStep> {
    let t = state.t;
    if t == 0 {
        return Err(Error::InvalidArgument("guidance needs t >= 1".into()));
    }
    let z = Var::from_tensor(&state.z.detach())?;
    let zt = z.as_tensor();
    let eps = match mode {
        GradientMode::FullChain => models.denoiser.forward(zt, &[t], cond)?,
        GradientMode::Truncated => models.denoiser.forward(&zt.detach(), &[t], cond)?,
    };
    let x0 = estimate_x0(zt, t, &eps, sched)?;
    let decoded = models.codec.decode_raw(&x0)?;
    let loss = part_loss_tensor(&models.extractor, &decoded, reference, variant)?;
    let grads = loss.backward()?;
    let gradient = grad_or_zeros(&grads, zt)?;
    if ensure_finite(&gradient, "gradient").is_err() {
        return Err(Error::NonFiniteGradient { step: t });
    }
    Ok(GuidanceStep {
        loss: scalar(&loss)?,
        gradient,
        eps: eps.detach(),
        x0: x0.detach(),
    })
}

/// One entry of the per-step trace; `part_loss` is absent when no body part
/// was detected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub part_loss: Option<f64>,
}

pub fn trace_jsonl(trace: &[TraceStep]) -> Result<String> {
    let mut s = String::new();
    for step in trace {
        s.push_str(&serde_json::to_string(step)?);
        s.push('\n');
    }
    Ok(s)
}

/// Runs the reverse chain from the seeded initial latent. Each step
/// estimates the clean latent, records the part loss, shifts the posterior
/// mean by `-scale * gradient` and adds the step's seeded noise. Returns the
/// clean estimate of the final step and the trace.
pub fn sample_guided_latent(
    models: &SamplerModels,
    cond: &ConditionBundle,
    reference: Option<&PartReference>,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
) -> Result<(Tensor, Vec<TraceStep>)> {
    gcfg.validate()?;
    let shape: Shape = cond.reg_latent.shape().clone();
    let noise = NoiseStream::new(gcfg.seed);
    let mut z = noise.initial(&shape)?;
    let mut x0_last = None;
    let mut trace = Vec::with_capacity(sched.inference_steps().len());
    for &t in sched.inference_steps() {
        let (eps, x0, loss, grad) = match reference {
            Some(r) if gcfg.scale > 0.0 => {
                let step = guidance_gradient(
                    &LatentState { z: z.clone(), t },
                    cond,
                    models,
                    r,
                    gcfg.mode,
                    gcfg.variant,
                    sched,
                )?;
                (step.eps, step.x0, Some(step.loss), Some(step.gradient))
            }
            _ => {
                let eps = models.denoiser.forward(&z, &[t], cond)?;
                let x0 = estimate_x0(&z, t, &eps, sched)?;
                let loss = match reference {
                    Some(r) => Some(scalar(&part_loss_tensor(
                        &models.extractor,
                        &models.codec.decode_raw(&x0)?,
                        r,
                        gcfg.variant,
                    )?)?),
                    None => None,
                };
                (eps, x0, loss, None)
            }
        };
        let mut mean = posterior_mean(&z, t, &eps, sched)?;
        if let Some(g) = grad {
            mean = (mean - g.affine(gcfg.scale, 0.0)?)?;
        }
        z = add_posterior_noise(&mean, t, sched, &noise.step(t, &shape)?)?;
        if ensure_finite(&z, "latent").is_err() {
            return Err(Error::NonFinite(format!("latent after step t={t}")));
        }
        trace.push(TraceStep { t, part_loss: loss });
        x0_last = Some(x0);
    }
    let x0 = x0_last.ok_or_else(|| Error::Config("schedule has no inference steps".into()))?;
    Ok((x0, trace))
}

/// Result of restoring one image.
#[derive(Clone, Debug)]
pub struct Restoration {
    pub image: ImageTensor,
    /// The regression output the diffusion stage was conditioned on.
    pub reg: ImageTensor,
    pub structure: Structure,
    pub trace: Vec<TraceStep>,
}

impl Restoration {
    /// Part loss of the output against the regression image, if any part
    /// was detected.
    pub fn part_loss(&self, params: &ModelParams, variant: PartLossVariant) -> Result<Option<f64>> {
        if !self.structure.parts.labels.iter().any(Option::is_some) {
            return Ok(None);
        }
        part_loss(&self.image, &self.reg, &self.structure.parts, params, variant).map(Some)
    }
}

/// Diffusion stage for a given regression output and structure.
pub fn restore_with_structure(
    reg: &ImageTensor,
    structure: Structure,
    caption: &CaptionRecord,
    params: &ModelParams,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
) -> Result<Restoration> {
    let models = SamplerModels::new(params)?;
    let text = params.text()?;
    let cond = build_conditions(
        &models.codec,
        &text,
        &[reg],
        &[&structure.pose],
        &[&structure.attention],
        &[caption],
    )?;
    let reference = if structure.parts.labels.iter().any(Option::is_some) {
        Some(PartReference::new(&models.extractor, &reg.to_tensor()?, &structure.parts)?)
    } else {
        None
    };
    let (x0, trace) = sample_guided_latent(&models, &cond, reference.as_ref(), sched, gcfg)?;
    let image = ImageTensor::from_tensor(&models.codec.decode(&x0)?.to_dtype(DType::F32)?)?;
    Ok(Restoration {
        image,
        reg: reg.clone(),
        structure,
        trace,
    })
}

/// Full restoration of a degraded image: regression, structure extraction
/// on the regression output, then guided diffusion. A missed detection is
/// logged and sampling proceeds with empty structural conditions.
pub fn guided_sample(
    lq: &ImageTensor,
    caption: &CaptionRecord,
    params: &ModelParams,
    sched: &NoiseSchedule,
    gcfg: &GuidanceConfig,
) -> Result<Restoration> {
    let (h, w) = (params.arch.image_height, params.arch.image_width);
    if (lq.height(), lq.width(), lq.channels()) != (h, w, 3) {
        return Err(Error::Shape(format!(
            "input is {}x{}x{}, the model expects {h}x{w}x3",
            lq.height(),
            lq.width(),
            lq.channels()
        )));
    }
    let reg = params.regressor()?.restore(lq)?;
    let structure = extract_structure(&reg, ExtractionMode::Heuristic, None)?;
    if !structure.detected {
        log::warn!("no person detected; sampling without pose and attention conditions");
    }
    restore_with_structure(&reg, structure, caption, params, sched, gcfg)
}

/// One input of a guidance-scale sweep.
#[derive(Clone, Debug)]
pub struct SweepItem {
    pub id: String,
    pub lq: ImageTensor,
    pub hq: ImageTensor,
    pub caption: CaptionRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub mean_part_loss: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub const SWEEP_SCALES: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

/// Restores every item at each scale (plus the unguided baseline first) and
/// reports mean part loss, PSNR and SSIM. Items without any detected part
/// are left out of the part-loss mean.
pub fn sweep_scales(
    items: &[SweepItem],
    params: &ModelParams,
    sched: &NoiseSchedule,
    base: &GuidanceConfig,
    scales: &[f64],
) -> Result<Vec<SweepRow>> {
    let regressor = params.regressor()?;
    let prepared: Vec<(ImageTensor, Structure)> = items
        .iter()
        .map(|it| {
            let reg = regressor.restore(&it.lq)?;
            let s = extract_structure(&reg, ExtractionMode::Heuristic, None)?;
            Ok((reg, s))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &scale in std::iter::once(&0.0).chain(scales) {
        let cfg = GuidanceConfig { scale, ..base.clone() };
        let (mut pl, mut npl, mut ps, mut ss) = (0.0, 0usize, 0.0, 0.0);
        for (it, (reg, s)) in items.iter().zip(&prepared) {
            let r = restore_with_structure(reg, s.clone(), &it.caption, params, sched, &cfg)?;
            if let Some(l) = r.part_loss(params, cfg.variant)? {
                pl += l;
                npl += 1;
            }
            ps += psnr(&r.image, &it.hq)?;
            ss += ssim(&r.image, &it.hq)?;
        }
        let n = items.len().max(1) as f64;
        let row = SweepRow {
            scale,
            mean_part_loss: if npl == 0 { f64::NAN } else { pl / npl as f64 },
            mean_psnr: ps / n,
            mean_ssim: ss / n,
        };
        log::info!("scale {scale}: part loss {:.5}, psnr {:.3}", row.mean_part_loss, row.mean_psnr);
        rows.push(row);
    }
    Ok(rows)
}

/// The positive scale with the lowest mean part loss.
pub fn calibrated_scale(rows: &[SweepRow]) -> Option<f64> {
    rows.iter()
        .filter(|r| r.scale > 0.0 && r.mean_part_loss.is_finite())
        .min_by(|a, b| a.mean_part_loss.total_cmp(&b.mean_part_loss))
        .map(|r| r.scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_plain, ScheduleConfig};
    use crate::models::{Architecture, CodecMode};
    use crate::nn::scalar;
    use candle_core::Device;

    pub(crate) fn probe_arch() -> Architecture {
        let mut a = crate::models::tests::tiny_arch();
        a.image_height = 8;
        a.image_width = 4;
        a.denoiser.patch = 1;
        a.regressor.patch = 1;
        a.parts.patch = 1;
        a.codec.mode = CodecMode::Identity;
        a
    }

    fn probe_params(arch: &Architecture) -> ModelParams {
        let mut p = ModelParams::init(arch, 3).unwrap();
        p.store.perturb(1, 0.1, &["denoiser.output", "denoiser.fuse"]).unwrap();
        p
    }

    fn probe_masks(h: usize, w: usize) -> PartMasks {
        let mut m = PartMasks::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                m.labels[y * w + x] = match y * 5 / h {
                    0 => Some(BodyPart::Head),
                    1 => Some(BodyPart::Torso),
                    2 if x == 0 => Some(BodyPart::Hands),
                    3 => Some(BodyPart::Legs),
                    4 => Some(BodyPart::Feet),
                    _ => None,
                };
            }
        }
        m
    }

    fn image(h: usize, w: usize, k: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c * 7 + k) % 13) as f32 / 12.0)
    }

    fn cond_for(params: &ModelParams, reg: &ImageTensor) -> ConditionBundle {
        let (h, w) = (reg.height(), reg.width());
        let pose = image(h, w, 4);
        let attn = ImageTensor::from_fn(h, w, 1, |y, x, _| ((y + x) % 3) as f32 / 2.0);
        build_conditions(
            &params.codec().unwrap(),
            &params.text().unwrap(),
            &[reg],
            &[&pose],
            &[&attn],
            &[&CaptionRecord::default()],
        )
        .unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss_in_both_variants() {
        let arch = probe_arch();
        let p = probe_params(&arch);
        let img = image(8, 4, 0);
        let masks = probe_masks(8, 4);
        for v in [PartLossVariant::NormalizedL2, PartLossVariant::LogitCe] {
            assert!(part_loss(&img, &img, &masks, &p, v).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn noise_and_mask_swaps_change_the_loss() {
        let arch = probe_arch();
        let p = probe_params(&arch);
        let img = image(8, 4, 0);
        let noisy = crate::degradation::degrade(
            &img,
            &crate::degradation::DegradationSpec {
                noise_sigma: 0.3,
                ..crate::degradation::DegradationSpec::off()
            },
            1,
        )
        .unwrap();
        let masks = probe_masks(8, 4);
        let v = PartLossVariant::NormalizedL2;
        assert!(part_loss(&noisy, &img, &masks, &p, v).unwrap() > 0.0);
        let extractor = p.parts().unwrap();
        let reference = PartReference::new(&extractor, &img.to_tensor().unwrap(), &masks).unwrap();
        let swapped = PartReference {
            masks: masks.swapped(BodyPart::Head, BodyPart::Legs),
            ..reference.clone()
        };
        let other = image(8, 4, 5).to_tensor().unwrap();
        let a = scalar(&part_loss_tensor(&extractor, &other, &reference, v).unwrap()).unwrap();
        let b = scalar(&part_loss_tensor(&extractor, &other, &swapped, v).unwrap()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn no_visible_parts_is_an_error() {
        let p = probe_params(&probe_arch());
        let img = image(8, 4, 0);
        let err = part_loss(&img, &img, &PartMasks::empty(8, 4), &p, PartLossVariant::NormalizedL2).unwrap_err();
        assert!(matches!(err, Error::NoVisibleParts));
    }

    #[test]
    fn loss_is_stationary_at_the_reference() {
        let p = probe_params(&probe_arch());
        let extractor = p.parts().unwrap();
        let img = image(8, 4, 0).to_tensor().unwrap();
        let masks = probe_masks(8, 4);
        let reference = PartReference::new(&extractor, &img, &masks).unwrap();
        let v = Var::from_tensor(&img).unwrap();
        let loss = part_loss_tensor(&extractor, v.as_tensor(), &reference, PartLossVariant::NormalizedL2).unwrap();
        let g = loss.backward().unwrap().get(v.as_tensor()).unwrap().clone();
        let norm = scalar(&g.sqr().unwrap().sum_all().unwrap()).unwrap().sqrt();
        assert!(norm <= 1e-6, "gradient norm {norm}");
    }

    fn fd_check(mode: GradientMode) -> f64 {
        let arch = probe_arch();
        let p = probe_params(&arch);
        let sched = ScheduleConfig::default().build().unwrap();
        let reg = image(8, 4, 1);
        let masks = probe_masks(8, 4);
        let t = 300;
        let z = Tensor::from_vec(crate::rng::normal_vec(2, "z", 0, 96), (1, 8, 4, 3), &Device::Cpu).unwrap();

        let models = SamplerModels::new(&p).unwrap();
        let reference = PartReference::new(&models.extractor, &reg.to_tensor().unwrap(), &masks).unwrap();
        let cond = cond_for(&p, &reg);
        let state = LatentState { z: z.clone(), t };
        let step =
            guidance_gradient(&state, &cond, &models, &reference, mode, PartLossVariant::NormalizedL2, &sched).unwrap();
        let g = step.gradient.flatten_all().unwrap().to_vec1::<f32>().unwrap();

        let p64 = p.to_dtype(DType::F64).unwrap();
        let m64 = SamplerModels::new(&p64).unwrap();
        let c64 = cond.to_dtype(DType::F64).unwrap();
        let r64 = PartReference::new(&m64.extractor, &reg.to_tensor().unwrap().to_dtype(DType::F64).unwrap(), &masks)
            .unwrap();
        let z64 = z.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval = |zv: &[f64]| -> f64 {
            let zt = Tensor::from_vec(zv.to_vec(), (1, 8, 4, 3), &Device::Cpu).unwrap();
            let eps = m64.denoiser.forward(&zt, &[t], &c64).unwrap();
            let eps = match mode {
                GradientMode::FullChain => eps,
                GradientMode::Truncated => {
                    let z0 = Tensor::from_vec(z64.clone(), (1, 8, 4, 3), &Device::Cpu).unwrap();
                    m64.denoiser.forward(&z0, &[t], &c64).unwrap()
                }
            };
            let x0 = estimate_x0(&zt, t, &eps, &sched).unwrap();
            let img = m64.codec.decode_raw(&x0).unwrap();
            scalar(&part_loss_tensor(&m64.extractor, &img, &r64, PartLossVariant::NormalizedL2).unwrap()).unwrap()
        };
        let h = 1e-4;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..z64.len() {
            let mut a = z64.clone();
            let mut b = z64.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (eval(&a) - eval(&b)) / (2.0 * h);
            num += (g[i] as f64 - fd).powi(2);
            den += fd * fd;
        }
        assert!(den > 0.0);
        (num / den).sqrt()
    }

    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let rel = fd_check(GradientMode::FullChain);
        assert!(rel <= 1e-3, "relative error {rel}");
    }

    #[test]
    fn truncated_gradient_matches_finite_differences() {
        let rel = fd_check(GradientMode::Truncated);
        assert!(rel <= 1e-3, "relative error {rel}");
    }

    #[test]
    fn scale_zero_matches_the_plain_sampler() {
        let arch = crate::models::tests::tiny_arch();
        let p = probe_params(&arch);
        let mut sched_cfg = ScheduleConfig::default();
        sched_cfg.inference_steps = 10;
        let sched = sched_cfg.build().unwrap();
        let reg = image(16, 8, 2);
        let cond = cond_for(&p, &reg);
        let models = SamplerModels::new(&p).unwrap();
        let reference = PartReference::new(&models.extractor, &reg.to_tensor().unwrap(), &probe_masks(16, 8)).unwrap();
        let gcfg = GuidanceConfig { seed: 7, ..Default::default() };
        let (x0, trace) = sample_guided_latent(&models, &cond, Some(&reference), &sched, &gcfg).unwrap();
        assert_eq!(trace.len(), 10);
        assert!(trace.iter().all(|s| s.part_loss.unwrap().is_finite()));

        // The plain chain, then the final clean estimate from its last input.
        let shape = cond.reg_latent.shape().clone();
        let last = *sched.inference_steps().last().unwrap();
        let mut z_before_last = None;
        sample_plain(&sched, &shape, NoiseStream::new(7), |z, t| {
            if t == last {
                z_before_last = Some(z.clone());
            }
            models.denoiser.forward(z, &[t], &cond)
        })
        .unwrap();
        let zl = z_before_last.unwrap();
        let eps = models.denoiser.forward(&zl, &[last], &cond).unwrap();
        let want = estimate_x0(&zl, last, &eps, &sched).unwrap();
        let diff = scalar(&(x0 - want).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(diff <= 1e-6, "max diff {diff}");

        let guided = GuidanceConfig { scale: 10.0, ..gcfg };
        let (g, _) = sample_guided_latent(&models, &cond, Some(&reference), &sched, &guided).unwrap();
        let (g2, _) = sample_guided_latent(&models, &cond, Some(&reference), &sched, &guided).unwrap();
        assert_eq!(g.flatten_all().unwrap().to_vec1::<f32>().unwrap(), g2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn negative_scale_is_rejected() {
        assert!(GuidanceConfig { scale: -1.0, ..Default::default() }.validate().is_err());
        let json = r#"{"scale": 1.0, "mode": "truncated", "seed": 3, "variant": "logit-CE"}"#;
        let c: GuidanceConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.variant, PartLossVariant::LogitCe);
        assert_eq!(c.mode, GradientMode::Truncated);
    }
}
