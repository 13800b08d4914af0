//! End-to-end run at desk scale: synthesize, degrade, train both stages,
//! sweep the guidance scale, restore the test split and score it.
//!
//! The full-size run takes a couple of hours on one CPU core. Shrink it with
//! `--n 220 --regressor-iters 200 --diffusion-iters 200` for a quick look.
//!
//! ```text
//! cargo run --release --example desk_run -- --out results/desk_run.json
//! ```

use std::path::PathBuf;

use body_restore::experiment::{run_desk, DeskRunOptions, PSNR_MARGIN_DB};
use body_restore::guidance::GradientMode;
use clap::Parser;

#[derive(Parser, Debug)]
struct Opts {
    /// Total number of humanoids; the last 1/11 are the test split.
    #[arg(long, default_value_t = 2200)]
    n: usize,
    #[arg(long, default_value_t = 2000)]
    regressor_iters: usize,
    #[arg(long, default_value_t = 400)]
    parts_iters: usize,
    #[arg(long, default_value_t = 2000)]
    diffusion_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    sweep_count: usize,
    #[arg(long)]
    limit: Option<usize>,
    /// Differentiate through the denoiser too (slower).
    #[arg(long)]
    full_chain: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk_run.json")]
    out: PathBuf,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let o = Opts::parse();
    let opts = DeskRunOptions {
        count: o.n,
        regressor_iterations: o.regressor_iters,
        parts_iterations: o.parts_iters,
        diffusion_iterations: o.diffusion_iters,
        learning_rate: o.lr,
        batch_size: o.batch,
        sweep_count: o.sweep_count,
        limit: o.limit,
        mode: if o.full_chain { GradientMode::FullChain } else { GradientMode::Truncated },
        seed: o.seed,
        checkpoints: o.checkpoints,
        ..Default::default()
    };
    let report = run_desk(&opts)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(dir) = o.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&o.out, &text)?;
    let c = report.checks();
    println!(
        "psnr {:.3} -> {:.3} ({:+.3} dB, need {PSNR_MARGIN_DB}), ssim {:+.4}, part loss {:+.5} at s={}",
        report.degraded.psnr,
        report.guided.psnr,
        c.psnr_gain,
        c.ssim_gain,
        -c.part_loss_drop,
        report.scale
    );
    println!("{}", if c.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
