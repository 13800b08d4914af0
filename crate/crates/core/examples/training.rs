//! Trains the regression restorer, the part extractor and the conditional
//! denoiser for a few iterations each on a small synthetic set, writing
//! checkpoints and loss logs.
//!
//! cargo run --release --example training -- [out_dir] [iterations]

use std::path::PathBuf;

use body_restore::dataset::Dataset;
use body_restore::degradation::DegradationSpec;
use body_restore::diffusion::ScheduleConfig;
use body_restore::models::{Architecture, ModelParams};
use body_restore::synth::Split;
use body_restore::training::{train_diffusion, train_parts, train_regressor, TrainConfig};

fn main() -> body_restore::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "training".into()));
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);

    let data = Dataset::synthesize(66, 3, &DegradationSpec::default(), 4)?.split(Split::Train);
    let cfg = TrainConfig {
        iterations,
        batch_size: 8,
        checkpoint_every: iterations.max(2) / 2,
        seed: 9,
        ..Default::default()
    };
    let params = ModelParams::init(&Architecture::default(), 1)?;
    let sched = ScheduleConfig::default().build()?;

    let reg = train_regressor(&cfg, &data, params, Some(&out))?;
    let parts = train_parts(&cfg, &data, reg.params.deep_clone()?, Some(&out))?;
    let diff = train_diffusion(&cfg, &data, parts.params.deep_clone()?, &sched, Some(&out))?;
    for (name, r) in [("regressor", &reg), ("parts", &parts), ("diffusion", &diff)] {
        let (first, last) = r.smoothed_endpoints(5).unwrap_or_default();
        println!("{name:<10} loss {first:.5} -> {last:.5}");
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}
