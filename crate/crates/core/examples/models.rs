//! Builds every component at the default size, runs one forward pass of
//! each and round-trips the parameters through a checkpoint file.
//!
//! cargo run --example models

use std::collections::BTreeMap;

use body_restore::caption::CaptionRecord;
use body_restore::dataset::stack_images;
use body_restore::models::{Architecture, ModelParams};
use body_restore::synth::generate_sample;
use body_restore::training::build_conditions;

fn main() -> body_restore::Result<()> {
    let arch = Architecture::default();
    let params = ModelParams::init(&arch, 0)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (name, var) in params.store.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *counts.entry(group).or_default() += var.as_tensor().elem_count();
    }
    for (group, n) in &counts {
        println!("{group:<10} {n:>9} parameters");
    }

    let s = generate_sample(5, None)?;
    let reg = params.regressor()?.restore(&s.image)?;
    println!("regressor output {:?}", reg.dims());

    let codec = params.codec()?;
    let pose = body_restore::structure::render_pose_map(&s.skeleton, 128, 64);
    let attn = body_restore::structure::oracle_attention(&s.foreground);
    let cond = build_conditions(&codec, &params.text()?, &[&reg], &[&pose], &[&attn], &[&s.caption])?;
    let z = codec.encode(&stack_images(&[&s.image])?)?;
    let eps = params.denoiser()?.forward(&z, &[500], &cond)?;
    println!("latent {:?}, noise prediction {:?}", z.dims(), eps.dims());

    let features = params.parts()?.extract(&s.image, &s.parts)?;
    println!("part features visible: {}", features.any_visible());
    let empty = params.text()?.embed(&CaptionRecord::default())?;
    println!("empty caption embedding {:?}", empty.dims());

    let path = std::env::temp_dir().join("body_restore_models_example.safetensors");
    params.save(&path)?;
    let back = ModelParams::load(&path, Some(&arch))?;
    println!("checkpoint round trip bit-exact: {}", back.store.bitwise_eq(&params.store)?);
    Ok(())
}
