//! The desk-scale end-to-end experiment: synthesize and degrade humanoids,
//! train both stages, pick a guidance scale on a few test images, then
//! restore and score the test split with and without guidance.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::degradation::DegradationSpec;
use crate::diffusion::ScheduleConfig;
use crate::guidance::{
    calibrated_scale, guided_sample, sweep_scales, GradientMode, GuidanceConfig, PartLossVariant, SweepItem, SweepRow,
    SWEEP_SCALES,
};
use crate::metrics::MetricReport;
use crate::models::{Architecture, ModelParams};
use crate::rng::derive_seed;
use crate::synth::Split;
use crate::training::{restore_all, train_diffusion, train_parts, train_regressor, TrainConfig};
use crate::Result;

/// Minimum PSNR gain of the restored test images over their degraded inputs.
pub const PSNR_MARGIN_DB: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskRunOptions {
    /// Total humanoids; the last 1/11 form the test split.
    pub count: usize,
    pub regressor_iterations: usize,
    pub parts_iterations: usize,
    pub diffusion_iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Test images used to pick the guidance scale.
    pub sweep_count: usize,
    /// Cap on restored test images.
    pub limit: Option<usize>,
    pub mode: GradientMode,
    pub seed: u64,
    pub model: Architecture,
    pub schedule: ScheduleConfig,
    pub degradation: DegradationSpec,
    /// Directory for checkpoints and loss logs.
    pub checkpoints: Option<PathBuf>,
}

impl Default for DeskRunOptions {
    fn default() -> Self {
        Self {
            count: 2200,
            regressor_iterations: 2000,
            parts_iterations: 400,
            diffusion_iterations: 2000,
            learning_rate: 1e-3,
            batch_size: 16,
            sweep_count: 20,
            limit: None,
            mode: GradientMode::Truncated,
            seed: 0,
            model: Architecture::default(),
            schedule: ScheduleConfig::default(),
            degradation: DegradationSpec::default(),
            checkpoints: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

impl From<&MetricReport> for Scores {
    fn from(r: &MetricReport) -> Self {
        Self {
            psnr: r.mean_psnr(),
            ssim: r.mean_ssim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskRunReport {
    pub options: DeskRunOptions,
    pub train_images: usize,
    pub test_images: usize,
    pub degraded: Scores,
    pub regression: Scores,
    pub unguided: Scores,
    pub guided: Scores,
    /// The calibrated guidance scale.
    pub scale: f64,
    pub unguided_part_loss: f64,
    pub guided_part_loss: f64,
    pub sweep: Vec<SweepRow>,
    /// Mean loss over the first and last 50 iterations.
    pub regressor_loss: (f64, f64),
    pub diffusion_loss: (f64, f64),
    pub seconds: f64,
}

/// Outcome of the three end-to-end requirements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeskRunChecks {
    pub psnr_gain: f64,
    pub ssim_gain: f64,
    pub part_loss_drop: f64,
}

impl DeskRunChecks {
    pub fn passed(&self) -> bool {
        self.psnr_gain >= PSNR_MARGIN_DB && self.ssim_gain > 0.0 && self.part_loss_drop > 0.0
    }
}

impl DeskRunReport {
    /// Gains of the guided restorations over the degraded inputs, and the
    /// part-loss drop relative to unguided sampling.
    pub fn checks(&self) -> DeskRunChecks {
        DeskRunChecks {
            psnr_gain: self.guided.psnr - self.degraded.psnr,
            ssim_gain: self.guided.ssim - self.degraded.ssim,
            part_loss_drop: self.unguided_part_loss - self.guided_part_loss,
        }
    }
}

pub fn run_desk(opts: &DeskRunOptions) -> Result<DeskRunReport> {
    let start = Instant::now();
    let data = Dataset::synthesize(
        opts.count,
        derive_seed(opts.seed, "data", 0),
        &opts.degradation,
        derive_seed(opts.seed, "degrade", 0),
    )?;
    let train = data.split(Split::Train);
    let mut test = data.split(Split::Test);
    if let Some(l) = opts.limit {
        test.examples.truncate(l);
    }
    log::info!("{} train / {} test images", train.len(), test.len());

    let sched = opts.schedule.build()?;
    let cfg = |name: &str, iterations: usize| TrainConfig {
        learning_rate: opts.learning_rate,
        batch_size: opts.batch_size,
        iterations,
        seed: derive_seed(opts.seed, &format!("train.{name}"), 0),
        ..Default::default()
    };
    let ckpt = opts.checkpoints.as_deref();
    let params = ModelParams::init(&opts.model, derive_seed(opts.seed, "init", 0))?;
    let reg = train_regressor(&cfg("regressor", opts.regressor_iterations), &train, params, ckpt)?;
    let regressor_loss = reg.smoothed_endpoints(50).unwrap_or((f64::NAN, f64::NAN));
    let parts = train_parts(&cfg("parts", opts.parts_iterations), &train, reg.params, ckpt)?;
    let diff = train_diffusion(&cfg("diffusion", opts.diffusion_iterations), &train, parts.params, &sched, ckpt)?;
    let diffusion_loss = diff.smoothed_endpoints(50).unwrap_or((f64::NAN, f64::NAN));
    let params = diff.params;
    log::info!("training done after {:.0}s", start.elapsed().as_secs_f64());

    let base = GuidanceConfig {
        scale: 0.0,
        mode: opts.mode,
        seed: derive_seed(opts.seed, "sweep", 0),
        variant: PartLossVariant::NormalizedL2,
    };
    let items: Vec<SweepItem> = test
        .examples
        .iter()
        .take(opts.sweep_count)
        .map(|e| SweepItem {
            id: e.id.clone(),
            lq: e.lq.clone(),
            hq: e.hq.clone(),
            caption: e.caption.clone(),
        })
        .collect();
    let sweep = sweep_scales(&items, &params, &sched, &base, &SWEEP_SCALES)?;
    let scale = calibrated_scale(&sweep).unwrap_or(SWEEP_SCALES[0]);
    log::info!("calibrated scale {scale}");

    let mut degraded = MetricReport::default();
    let mut regression = MetricReport::default();
    for (e, r) in test.examples.iter().zip(restore_all(&params, &test)?) {
        degraded.push(&e.id, &e.lq, &e.hq)?;
        regression.push(&e.id, &r, &e.hq)?;
    }

    let run = |s: f64| -> Result<(MetricReport, f64)> {
        let mut report = MetricReport::default();
        let (mut loss, mut counted) = (0.0, 0usize);
        for (i, e) in test.examples.iter().enumerate() {
            let g = GuidanceConfig {
                scale: s,
                seed: derive_seed(opts.seed, "restore", i as u64),
                ..base.clone()
            };
            let r = guided_sample(&e.lq, &e.caption, &params, &sched, &g)?;
            report.push(&e.id, &r.image, &e.hq)?;
            if let Some(l) = r.part_loss(&params, g.variant)? {
                loss += l;
                counted += 1;
            }
        }
        let mean = if counted == 0 { f64::NAN } else { loss / counted as f64 };
        log::info!(
            "s={s}: psnr {:.3} ssim {:.4} part loss {mean:.5}",
            report.mean_psnr(),
            report.mean_ssim()
        );
        Ok((report, mean))
    };
    let (unguided, unguided_part_loss) = run(0.0)?;
    let (guided, guided_part_loss) = run(scale)?;

    Ok(DeskRunReport {
        options: opts.clone(),
        train_images: train.len(),
        test_images: test.len(),
        degraded: (&degraded).into(),
        regression: (&regression).into(),
        unguided: (&unguided).into(),
        guided: (&guided).into(),
        scale,
        unguided_part_loss,
        guided_part_loss,
        sweep,
        regressor_loss,
        diffusion_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(psnr: f64, ssim: f64, pl: f64) -> DeskRunReport {
        let s = |p, q| Scores { psnr: p, ssim: q };
        DeskRunReport {
            options: DeskRunOptions::default(),
            train_images: 0,
            test_images: 0,
            degraded: s(20.0, 0.5),
            regression: s(0.0, 0.0),
            unguided: s(0.0, 0.0),
            guided: s(psnr, ssim),
            scale: 1.0,
            unguided_part_loss: 0.5,
            guided_part_loss: pl,
            sweep: vec![],
            regressor_loss: (0.0, 0.0),
            diffusion_loss: (0.0, 0.0),
            seconds: 0.0,
        }
    }

    #[test]
    fn checks_apply_the_margin() {
        assert!(report(22.0, 0.6, 0.4).checks().passed());
        assert!(!report(21.9, 0.6, 0.4).checks().passed());
        assert!(!report(23.0, 0.5, 0.4).checks().passed());
        assert!(!report(23.0, 0.6, 0.5).checks().passed());
    }

    #[test]
    fn options_round_trip_through_json() {
        let o = DeskRunOptions {
            limit: Some(3),
            ..Default::default()
        };
        let back: DeskRunOptions = serde_json::from_str(&serde_json::to_string(&o).unwrap()).unwrap();
        assert_eq!(back, o);
        let partial: DeskRunOptions = serde_json::from_str(r#"{"count": 22}"#).unwrap();
        assert_eq!(partial.count, 22);
    }
}
