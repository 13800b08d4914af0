//! Degrades one humanoid at several settings and reports how much each
//! stage costs in PSNR and SSIM.
//!
//! cargo run --example degradation -- [out_dir]

use std::path::PathBuf;

use body_restore::degradation::{degrade, DegradationSpec};
use body_restore::metrics::{psnr, ssim};
use body_restore::synth::generate_sample;

fn main() -> body_restore::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "degradation".into()));
    std::fs::create_dir_all(&out).map_err(|e| body_restore::Error::InvalidArgument(e.to_string()))?;
    let hq = generate_sample(3, None)?.image.quantize_u8();
    hq.save_png(&out.join("clean.png"))?;

    let off = DegradationSpec::off();
    let settings = [
        ("blur", DegradationSpec { blur_sigma: 1.0, ..off.clone() }),
        ("noise", DegradationSpec { noise_sigma: 0.05, ..off.clone() }),
        ("jpeg40", DegradationSpec { jpeg_quality: Some(40), ..off.clone() }),
        ("down2", DegradationSpec { downsample: 2, ..off.clone() }),
        ("default", DegradationSpec::default()),
    ];
    println!("{:<8} {:>8} {:>8}", "setting", "psnr", "ssim");
    for (name, spec) in settings {
        let lq = degrade(&hq, &spec, 11)?;
        lq.save_png(&out.join(format!("{name}.png")))?;
        println!("{name:<8} {:>8.3} {:>8.4}", psnr(&lq, &hq)?, ssim(&lq, &hq)?);
    }
    Ok(())
}
