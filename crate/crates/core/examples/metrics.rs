//! Scores degraded copies of a few humanoids and writes the per-image CSV.
//!
//! cargo run --example metrics -- [count]

use body_restore::dataset::Dataset;
use body_restore::degradation::DegradationSpec;
use body_restore::metrics::{psnr_from_mse, MetricReport};

fn main() -> body_restore::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(11);
    let data = Dataset::synthesize(n, 1, &DegradationSpec::default(), 2)?;
    let mut report = MetricReport::default();
    for e in &data.examples {
        report.push(&e.id, &e.lq, &e.hq)?;
    }
    print!("{}", report.to_csv());
    println!("an MSE of 0.01 is {} dB", psnr_from_mse(0.01));
    Ok(())
}
