//! Runs the heuristic pose and attention extractors over generated humanoids
//! and compares them with the generator's ground truth.
//!
//! cargo run --example structure_extraction -- [count]

use std::time::Instant;

use body_restore::structure::{fit_pose, heuristic_attention, iou_at_half, oracle_attention};
use body_restore::synth::generate_sample;

fn main() -> body_restore::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let start = Instant::now();
    let (mut err, mut worst, mut iou, mut misses) = (0.0f32, 0.0f32, 0.0f32, 0);
    for seed in 0..n {
        let s = generate_sample(10_000 + seed, None)?;
        match fit_pose(&s.image) {
            Some(fit) => {
                let e = fit.skeleton.mean_error(&s.skeleton);
                err += e;
                worst = worst.max(e);
            }
            None => misses += 1,
        }
        iou += iou_at_half(&heuristic_attention(&s.image), &oracle_attention(&s.foreground));
    }
    let fitted = (n - misses) as f32;
    println!("samples            {n}");
    println!("missed detections  {misses}");
    println!("mean joint error   {:.3} px", err / fitted.max(1.0));
    println!("worst joint error  {worst:.3} px");
    println!("mean attention IoU {:.4}", iou / n as f32);
    println!("elapsed            {:.2?}", start.elapsed());
    Ok(())
}
