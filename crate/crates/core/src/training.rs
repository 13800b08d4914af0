//! Losses and seeded training loops for every learned component.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::BodyPart;
use crate::caption::CaptionRecord;
use crate::dataset::{stack_images, Dataset, Example};
use crate::diffusion::{ensure_same_shape, forward_diffuse_batch, NoiseSchedule};
use crate::image::ImageTensor;
use crate::models::{
    masks_tensor, prefix, Codec, ConditionBundle, Denoiser, ModelParams, PartExtractor, Regressor,
    TextEmbedder,
};
use crate::nn::{avg_pool, scalar};
use crate::rng::{normal_vec, substream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many iterations.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("Adam moments must lie in (0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint interval must be positive");
        }
        Ok(())
    }

    fn optimizer(&self, vars: Vec<candle_core::Var>) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: 0.0,
            },
        )?)
    }
}

/// Mean squared difference.
pub fn regression_loss(out: &Tensor, hq: &Tensor) -> Result<Tensor> {
    ensure_same_shape(out, hq, "regression_loss")?;
    Ok((out - hq)?.sqr()?.mean_all()?)
}

/// Mean of `((1 + a) * (eps - eps_pred))^2`, with the single-channel weight
/// map `a` broadcast across latent channels.
pub fn weighted_denoising_loss(eps: &Tensor, eps_pred: &Tensor, attention: &Tensor) -> Result<Tensor> {
    ensure_same_shape(eps, eps_pred, "denoising loss")?;
    let (b, h, w, _) = eps.dims4()?;
    if attention.dims4()? != (b, h, w, 1) {
        return Err(Error::Shape(format!(
            "attention {:?} does not cover residual {:?}",
            attention.dims(),
            eps.dims()
        )));
    }
    // accumulate in f64 so the weight law holds to the output's precision
    let weight = (attention.to_dtype(DType::F64)? + 1.0)?;
    let residual = (eps - eps_pred)?.to_dtype(DType::F64)?;
    Ok(residual.broadcast_mul(&weight)?.sqr()?.mean_all()?.to_dtype(eps.dtype())?)
}

/// One diffusion training batch at latent resolution.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub z0: Tensor,
    pub cond: ConditionBundle,
    /// `(B, h, w, 1)` loss weight map in `[0, 1]`.
    pub attention: Tensor,
}

/// Timesteps and noise for one batch.
#[derive(Clone, Debug)]
pub struct DiffusionDraws {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl DiffusionDraws {
    /// Uniform timesteps in `1..=T` and standard-normal noise, both from
    /// the `(seed, index)` substream.
    pub fn sample(seed: u64, index: u64, shape: &[usize], sched: &NoiseSchedule) -> Result<Self> {
        let b = shape[0];
        let mut rng = substream(seed, "diffusion-timesteps", index);
        let ts = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
        let n = shape.iter().product();
        let eps = Tensor::from_vec(normal_vec(seed, "diffusion-noise", index, n), shape, &Device::Cpu)?;
        Ok(Self { ts, eps })
    }
}

/// Attention-weighted denoising loss on fixed draws.
pub fn diffusion_loss_with(
    denoiser: &Denoiser,
    batch: &DiffusionBatch,
    draws: &DiffusionDraws,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let a = batch.attention.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("attention weights outside [0, 1]".into()));
    }
    let eps = draws.eps.to_dtype(batch.z0.dtype())?;
    let z_t = forward_diffuse_batch(&batch.z0, &draws.ts, &eps, sched)?;
    let pred = denoiser.forward(&z_t, &draws.ts, &batch.cond)?;
    weighted_denoising_loss(&eps, &pred, &batch.attention)
}

/// Attention-weighted denoising loss with draws taken from `seed`.
pub fn diffusion_loss(denoiser: &Denoiser, batch: &DiffusionBatch, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
    let draws = DiffusionDraws::sample(seed, 0, batch.z0.dims(), sched)?;
    diffusion_loss_with(denoiser, batch, &draws, sched)
}

/// Resamples a `(B, H, W, 1)` map to latent resolution by area averaging.
pub fn attention_to_latent(attention: &Tensor, factor: usize) -> Result<Tensor> {
    avg_pool(attention, factor)
}

/// Builds conditions for a batch of restored images, pose maps, attention
/// maps and captions.
pub fn build_conditions(
    codec: &Codec,
    text: &TextEmbedder,
    reg: &[&ImageTensor],
    pose: &[&ImageTensor],
    attention: &[&ImageTensor],
    captions: &[&CaptionRecord],
) -> Result<ConditionBundle> {
    Ok(ConditionBundle {
        reg_latent: codec.encode(&stack_images(reg)?)?,
        pose_latent: codec.encode(&stack_images(pose)?)?,
        attn_latent: attention_to_latent(&stack_images(attention)?, codec.factor())?,
        text_emb: text.embed_batch(captions)?,
    })
}

/// Loss history and the trained parameters.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Loss of every iteration, 1-based iteration `i` at index `i - 1`.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and last `window` iterations.
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l}", i + 1);
        }
        s
    }
}

fn batch_indices(seed: u64, label: &str, iteration: usize, n: usize, b: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = substream(seed, label, iteration as u64);
    Ok((0..b).map(|_| rng.random_range(0..n)).collect())
}

/// Shared Adam loop: evaluates `loss_fn(iteration)` (1-based), steps the
/// variables under `prefixes`, writes checkpoints and the loss log to `out`.
fn run_loop<F>(
    name: &str,
    cfg: &TrainConfig,
    params: ModelParams,
    prefixes: &[&str],
    out: Option<&Path>,
    mut loss_fn: F,
) -> Result<TrainReport>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = cfg.optimizer(params.store.vars_with_prefix(prefixes))?;
    let mut report = TrainReport {
        params,
        losses: Vec::with_capacity(cfg.iterations),
    };
    for it in 1..=cfg.iterations {
        let loss = loss_fn(it)?;
        let v = scalar(&loss)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        opt.backward_step(&loss)?;
        report.losses.push(v);
        if it % 100 == 0 {
            log::info!("{name}: iteration {it}/{} loss {v:.6}", cfg.iterations);
        }
        if let Some(dir) = out {
            if it % cfg.checkpoint_every == 0 && it != cfg.iterations {
                report.params.save(&dir.join(format!("{name}_iter{it:06}.safetensors")))?;
            }
        }
    }
    report.params.ensure_finite()?;
    if let Some(dir) = out {
        report.params.save(&dir.join(format!("{name}.safetensors")))?;
        let log = dir.join(format!("{name}_loss.csv"));
        fs::write(&log, report.loss_csv()).map_err(|e| Error::io(&log, e))?;
    }
    Ok(report)
}

fn pick<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a Example> {
    idx.iter().map(|&i| &data.examples[i]).collect()
}

/// Trains the restoration network to map degraded images to clean ones.
pub fn train_regressor(cfg: &TrainConfig, data: &Dataset, params: ModelParams, out: Option<&Path>) -> Result<TrainReport> {
    let net = Regressor::new(&params.arch, &mut params.store.trainable())?;
    let n = data.len();
    run_loop("regressor", cfg, params, &[prefix::REGRESSOR], out, |it| {
        let batch = pick(data, &batch_indices(cfg.seed, "batch.regressor", it, n, cfg.batch_size)?);
        let lq = stack_images(&batch.iter().map(|e| &e.lq).collect::<Vec<_>>())?;
        let hq = stack_images(&batch.iter().map(|e| &e.hq).collect::<Vec<_>>())?;
        regression_loss(&net.forward_raw(&lq)?, &hq)
    })
}

/// Trains the part extractor as a part-identity classifier on clean and
/// degraded images.
pub fn train_parts(cfg: &TrainConfig, data: &Dataset, params: ModelParams, out: Option<&Path>) -> Result<TrainReport> {
    let net = PartExtractor::new(&params.arch, &mut params.store.trainable())?;
    let n = data.len();
    let eye = Tensor::eye(BodyPart::COUNT, DType::F32, &Device::Cpu)?.unsqueeze(0)?;
    run_loop("parts", cfg, params, &[prefix::PARTS], out, |it| {
        let idx = batch_indices(cfg.seed, "batch.parts", it, n, cfg.batch_size)?;
        let mut rng = substream(cfg.seed, "batch.parts.source", it as u64);
        let batch = pick(data, &idx);
        let images: Vec<&ImageTensor> = batch
            .iter()
            .map(|e| if rng.random_bool(0.5) { &e.hq } else { &e.lq })
            .collect();
        let masks = Tensor::cat(
            &batch.iter().map(|e| masks_tensor(&e.parts)).collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let visible: Vec<f32> = batch
            .iter()
            .flat_map(|e| BodyPart::ALL.map(|p| f32::from(u8::from(e.parts.pixel_count(p) > 0))))
            .collect();
        let count = visible.iter().sum::<f32>().max(1.0);
        let visible = Tensor::from_vec(visible, (batch.len(), BodyPart::COUNT), &Device::Cpu)?;
        let logits = net.logits(&net.pooled(&stack_images(&images)?, &masks)?)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let correct = logp.broadcast_mul(&eye)?.sum(D::Minus1)?;
        Ok((correct * visible)?.sum_all()?.affine(-1.0 / count as f64, 0.0)?)
    })
}

/// Trains the learned codec for reconstruction. The identity codec has no
/// trainable arrays in use, so this returns the parameters unchanged.
pub fn train_codec(cfg: &TrainConfig, data: &Dataset, params: ModelParams, out: Option<&Path>) -> Result<TrainReport> {
    let codec = Codec::new(&params.arch, &mut params.store.trainable())?;
    if codec.is_identity() {
        return Ok(TrainReport { params, losses: vec![] });
    }
    let n = data.len();
    run_loop("codec", cfg, params, &[prefix::CODEC], out, |it| {
        let batch = pick(data, &batch_indices(cfg.seed, "batch.codec", it, n, cfg.batch_size)?);
        let x = stack_images(&batch.iter().map(|e| &e.hq).collect::<Vec<_>>())?;
        regression_loss(&codec.decode_raw(&codec.encode(&x)?)?, &x)
    })
}

/// Restores every example's degraded image with the current regressor.
pub fn restore_all(params: &ModelParams, data: &Dataset) -> Result<Vec<ImageTensor>> {
    let net = params.regressor()?;
    data.examples.iter().map(|e| net.restore(&e.lq)).collect()
}

/// Trains the denoiser (trunk and condition branch) and the caption table
/// with the attention-weighted objective. Conditions use the regressor's
/// restorations of the degraded images and the dataset's pose and attention
/// maps; the codec is frozen.
pub fn train_diffusion(
    cfg: &TrainConfig,
    data: &Dataset,
    params: ModelParams,
    sched: &NoiseSchedule,
    out: Option<&Path>,
) -> Result<TrainReport> {
    let restored = restore_all(&params, data)?;
    let codec = params.codec()?;
    let denoiser = Denoiser::new(&params.arch, &mut params.store.trainable())?;
    let text = TextEmbedder::new(&params.arch, &mut params.store.trainable())?;
    let n = data.len();
    run_loop("diffusion", cfg, params, &[prefix::DENOISER, prefix::TEXT], out, |it| {
        let idx = batch_indices(cfg.seed, "batch.diffusion", it, n, cfg.batch_size)?;
        let batch = pick(data, &idx);
        let cond = build_conditions(
            &codec,
            &text,
            &idx.iter().map(|&i| &restored[i]).collect::<Vec<_>>(),
            &batch.iter().map(|e| &e.pose).collect::<Vec<_>>(),
            &batch.iter().map(|e| &e.attention).collect::<Vec<_>>(),
            &batch.iter().map(|e| &e.caption).collect::<Vec<_>>(),
        )?;
        let z0 = codec.encode(&stack_images(&batch.iter().map(|e| &e.hq).collect::<Vec<_>>())?)?;
        let batch = DiffusionBatch {
            attention: cond.attn_latent.clone(),
            z0,
            cond,
        };
        let draws = DiffusionDraws::sample(cfg.seed, it as u64, batch.z0.dims(), sched)?;
        diffusion_loss_with(&denoiser, &batch, &draws, sched)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::DegradationSpec;
    use crate::diffusion::ScheduleConfig;
    use crate::models::tests::tiny_arch;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(normal_vec(seed, "t", 0, n), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn regression_loss_matches_double_loop() {
        let a = ImageTensor::from_fn(5, 4, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        let b = ImageTensor::from_fn(5, 4, 3, |y, x, c| ((y * 2 + x * 5 + c * 3) % 7) as f32 / 6.0);
        let got = scalar(&regression_loss(&a.to_tensor().unwrap(), &b.to_tensor().unwrap()).unwrap()).unwrap();
        let mut want = 0.0f64;
        for y in 0..5 {
            for x in 0..4 {
                for c in 0..3 {
                    want += ((a.get(y, x, c) - b.get(y, x, c)) as f64).powi(2);
                }
            }
        }
        want /= 60.0;
        assert!((got - want).abs() < 1e-7);
        let offset = a.map(|v| v + 0.1);
        let l = scalar(&regression_loss(&offset.to_tensor().unwrap(), &a.to_tensor().unwrap()).unwrap()).unwrap();
        assert!((l - 0.01).abs() < 1e-7);
        assert!(regression_loss(&a.to_tensor().unwrap(), &rand_tensor(0, &[1, 5, 4, 1])).is_err());
    }

    #[test]
    fn weight_law_on_fixed_residual() {
        let eps = rand_tensor(1, &[2, 4, 4, 3]);
        let pred = rand_tensor(2, &[2, 4, 4, 3]);
        let zeros = Tensor::zeros((2, 4, 4, 1), DType::F32, &Device::Cpu).unwrap();
        let base = scalar(&weighted_denoising_loss(&eps, &pred, &zeros).unwrap()).unwrap();
        let (e, p): (Vec<f32>, Vec<f32>) = (
            eps.flatten_all().unwrap().to_vec1().unwrap(),
            pred.flatten_all().unwrap().to_vec1().unwrap(),
        );
        let plain = e.iter().zip(&p).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / e.len() as f64;
        assert!((base - plain).abs() <= 1e-7 * plain, "{base} vs {plain}");
        for a in [0.0, 0.5, 1.0] {
            let att = (zeros.clone() + a).unwrap();
            let l = scalar(&weighted_denoising_loss(&eps, &pred, &att).unwrap()).unwrap();
            assert!((l - (1.0 + a).powi(2) * base).abs() <= 1e-7 * l.max(1.0), "a={a}");
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { eps: 0.0, ..Default::default() },
            TrainConfig { checkpoint_every: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn tiny_data() -> Dataset {
        // Tiny architectures use 16x8 images; shrink the generator output.
        let mut d = Dataset::synthesize(4, 3, &DegradationSpec::default(), 1).unwrap();
        for e in &mut d.examples {
            e.hq = e.hq.resize_nearest(16, 8);
            e.lq = e.lq.resize_nearest(16, 8);
            e.pose = e.pose.resize_nearest(16, 8);
            e.attention = e.attention.resize_nearest(16, 8);
            let mut m = crate::synth::PartMasks::empty(16, 8);
            for y in 0..16 {
                for x in 0..8 {
                    m.labels[y * 8 + x] = e.parts.labels[(y * 8) * 64 + x * 8];
                }
            }
            e.parts = m;
        }
        d
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let arch = tiny_arch();
        let init = ModelParams::init(&arch, 4).unwrap();
        let cfg = TrainConfig { iterations: 0, batch_size: 2, ..Default::default() };
        let sched = ScheduleConfig::default().build().unwrap();
        let r = train_diffusion(&cfg, &tiny_data(), init.deep_clone().unwrap(), &sched, None).unwrap();
        assert!(r.params.store.bitwise_eq(&init.store).unwrap());
        assert!(r.losses.is_empty());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let arch = tiny_arch();
        let data = tiny_data();
        let cfg = TrainConfig { iterations: 3, batch_size: 2, ..Default::default() };
        let sched = ScheduleConfig::default().build().unwrap();
        let run = || {
            let p = ModelParams::init(&arch, 4).unwrap();
            let p = train_regressor(&cfg, &data, p, None).unwrap().params;
            let p = train_parts(&cfg, &data, p, None).unwrap().params;
            train_diffusion(&cfg, &data, p, &sched, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
        assert_eq!(a.losses, b.losses);
        let init = ModelParams::init(&arch, 4).unwrap();
        assert!(!a.params.store.bitwise_eq(&init.store).unwrap());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { iterations: 4, batch_size: 2, checkpoint_every: 2, ..Default::default() };
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        train_regressor(&cfg, &tiny_data(), p, Some(dir.path())).unwrap();
        assert!(dir.path().join("regressor.safetensors").exists());
        assert!(dir.path().join("regressor_iter000002.safetensors").exists());
        let csv = fs::read_to_string(dir.path().join("regressor_loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("iteration,loss\n1,"));
    }

    #[test]
    fn non_finite_loss_names_the_iteration() {
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        let cfg = TrainConfig { iterations: 5, batch_size: 1, ..Default::default() };
        let err = run_loop("x", &cfg, p, &[prefix::REGRESSOR], None, |it| {
            Ok(Tensor::new(if it == 3 { f32::NAN } else { 1.0 }, &Device::Cpu)?)
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 3 }));
    }

    #[test]
    fn diffusion_loss_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let mut params = ModelParams::init(&arch, 2).unwrap();
        params.store.perturb(9, 0.05, &["denoiser.output", "denoiser.fuse"]).unwrap();
        let sched = ScheduleConfig::default().build().unwrap();
        let data = tiny_data();
        let make_batch = |p: &ModelParams| -> DiffusionBatch {
            let ex: Vec<&Example> = data.examples.iter().take(2).collect();
            let text = p.text().unwrap();
            let codec = p.codec().unwrap();
            let cond = build_conditions(
                &codec,
                &text,
                &ex.iter().map(|e| &e.lq).collect::<Vec<_>>(),
                &ex.iter().map(|e| &e.pose).collect::<Vec<_>>(),
                &ex.iter().map(|e| &e.attention).collect::<Vec<_>>(),
                &ex.iter().map(|e| &e.caption).collect::<Vec<_>>(),
            )
            .unwrap();
            let z0 = codec.encode(&stack_images(&ex.iter().map(|e| &e.hq).collect::<Vec<_>>()).unwrap()).unwrap();
            DiffusionBatch { attention: cond.attn_latent.clone(), z0, cond }
        };
        let draws = DiffusionDraws::sample(5, 0, &[2, 16, 8, 3], &sched).unwrap();

        let den = Denoiser::new(&arch, &mut params.store.trainable()).unwrap();
        let loss = diffusion_loss_with(&den, &make_batch(&params), &draws, &sched).unwrap();
        let grads = loss.backward().unwrap();

        let probes = [
            ("denoiser.fuse1.weight", 3usize),
            ("denoiser.trunk.input.weight", 17),
            ("denoiser.branch.level0.conv1.weight", 5),
        ];
        for (name, k) in probes {
            let var = params.store.get(name).unwrap();
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()[k] as f64;

            let eval = |delta: f64| -> f64 {
                let p64 = params.to_dtype(DType::F64).unwrap();
                let v = p64.store.get(name).unwrap();
                let mut vals = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                vals[k] += delta;
                v.set(&Tensor::from_vec(vals, v.shape(), &Device::Cpu).unwrap()).unwrap();
                let den = p64.denoiser().unwrap();
                let mut b = make_batch(&params);
                b.z0 = b.z0.to_dtype(DType::F64).unwrap();
                b.cond = b.cond.to_dtype(DType::F64).unwrap();
                b.attention = b.attention.to_dtype(DType::F64).unwrap();
                scalar(&diffusion_loss_with(&den, &b, &draws, &sched).unwrap()).unwrap()
            };
            let h = 1e-4;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel <= 1e-3, "{name}[{k}]: analytic {g} fd {fd} rel {rel}");
        }
    }
}
