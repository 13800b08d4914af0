//! Restores one degraded humanoid with and without part guidance and prints
//! the per-step part loss. Pass a trained checkpoint (for example from the
//! `train-diffusion` command) to see meaningful output; without one, a fresh
//! model is briefly trained first.
//!
//! cargo run --release --example guided_restore -- [checkpoint.safetensors] [scale]

use std::path::PathBuf;

use body_restore::dataset::Dataset;
use body_restore::degradation::DegradationSpec;
use body_restore::diffusion::ScheduleConfig;
use body_restore::guidance::{guided_sample, GradientMode, GuidanceConfig};
use body_restore::metrics::psnr;
use body_restore::models::{Architecture, ModelParams};
use body_restore::synth::Split;
use body_restore::training::{train_diffusion, train_parts, train_regressor, TrainConfig};

fn main() -> body_restore::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let checkpoint = args.next().filter(|s| s != "-").map(PathBuf::from);
    let scale: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10.0);

    let data = Dataset::synthesize(44, 5, &DegradationSpec::default(), 6)?;
    let sched = ScheduleConfig::default().build()?;
    let params = match checkpoint {
        Some(p) => ModelParams::load(&p, None)?,
        None => {
            let train = data.split(Split::Train);
            let cfg = TrainConfig { iterations: 30, batch_size: 8, ..Default::default() };
            let p = ModelParams::init(&Architecture::default(), 2)?;
            let p = train_regressor(&cfg, &train, p, None)?.params;
            let p = train_parts(&cfg, &train, p, None)?.params;
            train_diffusion(&cfg, &train, p, &sched, None)?.params
        }
    };

    let e = &data.split(Split::Test).examples[0];
    println!("degraded   psnr {:.3}", psnr(&e.lq, &e.hq)?);
    for s in [0.0, scale] {
        let g = GuidanceConfig { scale: s, mode: GradientMode::Truncated, seed: 1, ..Default::default() };
        let r = guided_sample(&e.lq, &e.caption, &params, &sched, &g)?;
        let losses: Vec<String> = r
            .trace
            .iter()
            .step_by(10)
            .map(|t| format!("t={} {:.4}", t.t, t.part_loss.unwrap_or(f64::NAN)))
            .collect();
        println!("s={s:<6} psnr {:.3}  detected {}", psnr(&r.image, &e.hq)?, r.structure.detected);
        println!("           regression psnr {:.3}", psnr(&r.reg, &e.hq)?);
        println!("           part loss {}", losses.join(", "));
        println!("           final part loss {:?}", r.part_loss(&params, g.variant)?);
    }
    Ok(())
}
