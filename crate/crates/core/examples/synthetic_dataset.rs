//! Generates a few procedural humanoids, checks their invariants and writes a
//! small dataset with sidecars and a manifest.
//!
//! cargo run --example synthetic_dataset -- [out_dir] [count]

use std::path::PathBuf;

use body_restore::body::BodyPart;
use body_restore::caption::serialize_caption;
use body_restore::synth::{generate_dataset, generate_sample, read_manifest, Split, SplitRatio};

fn main() -> body_restore::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_dataset".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(22);

    for seed in 0..3 {
        let s = generate_sample(seed, None)?;
        s.check_invariants()?;
        let parts: Vec<String> = BodyPart::ALL
            .iter()
            .map(|p| format!("{p:?} {}", s.parts.pixel_count(*p)))
            .collect();
        println!("seed {seed}: {}", serialize_caption(&s.caption));
        println!("        part pixels: {}", parts.join(", "));
    }

    let manifest = generate_dataset(n, 7, &out, SplitRatio::default())?;
    let entries = read_manifest(&manifest)?;
    let test = entries.iter().filter(|e| e.split == Split::Test).count();
    println!("wrote {} samples ({test} test) to {}", entries.len(), manifest.display());
    Ok(())
}
