//! Sweeps the guidance scale over a handful of test images and reports the
//! scale with the lowest part loss.
//!
//! cargo run --release --example guidance_sweep -- <checkpoint.safetensors> [count]

use body_restore::dataset::Dataset;
use body_restore::degradation::DegradationSpec;
use body_restore::diffusion::ScheduleConfig;
use body_restore::guidance::{calibrated_scale, sweep_scales, GradientMode, GuidanceConfig, SweepItem, SWEEP_SCALES};
use body_restore::models::ModelParams;
use body_restore::synth::Split;

fn main() -> body_restore::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let Some(checkpoint) = args.next() else {
        eprintln!("usage: guidance_sweep <checkpoint.safetensors> [count]");
        std::process::exit(2);
    };
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let params = ModelParams::load(checkpoint.as_ref(), None)?;
    let data = Dataset::synthesize(11 * count, 8, &DegradationSpec::default(), 9)?.split(Split::Test);
    let items: Vec<SweepItem> = data
        .examples
        .iter()
        .map(|e| SweepItem { id: e.id.clone(), lq: e.lq.clone(), hq: e.hq.clone(), caption: e.caption.clone() })
        .collect();
    let base = GuidanceConfig { mode: GradientMode::Truncated, seed: 3, ..Default::default() };
    let sched = ScheduleConfig::default().build()?;
    let rows = sweep_scales(&items, &params, &sched, &base, &SWEEP_SCALES)?;
    println!("{:>8} {:>10} {:>8} {:>8}", "scale", "part loss", "psnr", "ssim");
    for r in &rows {
        println!("{:>8} {:>10.5} {:>8.3} {:>8.4}", r.scale, r.mean_part_loss, r.mean_psnr, r.mean_ssim);
    }
    println!("calibrated scale: {:?}", calibrated_scale(&rows));
    Ok(())
}
