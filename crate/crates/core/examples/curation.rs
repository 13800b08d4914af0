//! Curates a folder of mixed inputs: unreadable files, blank frames and
//! humanoids, with one reviewer verdict applied from a marks file.
//!
//! cargo run --example curation -- [work_dir]

use std::fs;
use std::path::PathBuf;

use body_restore::curation::{curate, CurationConfig, ForegroundDetector, RECORDS_NAME};
use body_restore::image::ImageTensor;
use body_restore::synth::generate_sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "curation".into()));
    let raw = work.join("raw");
    fs::create_dir_all(&raw)?;
    fs::write(raw.join("broken.png"), b"not an image")?;
    fs::write(raw.join("notes.txt"), b"hello")?;
    ImageTensor::filled(128, 64, 3, 0.5).save_png(&raw.join("blank.png"))?;
    ImageTensor::filled(40, 20, 3, 0.5).save_png(&raw.join("tiny.png"))?;
    for i in 0..4 {
        generate_sample(40 + i, None)?.image.save_png(&raw.join(format!("person{i}.png")))?;
    }
    let marks = work.join("marks.jsonl");
    fs::write(&marks, "{\"id\": \"person3\", \"verdict\": \"reject\"}\n")?;

    let cfg = CurationConfig::default();
    let detector = ForegroundDetector { threshold: cfg.coverage_threshold };
    let out = work.join("out");
    let (records, summary) = curate(&raw, &out, &cfg, &detector, Some(&marks))?;
    for r in &records {
        println!("{:<10} {:?} {}", r.id, r.status, r.reason.as_deref().unwrap_or(""));
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    println!("records in {}", out.join(RECORDS_NAME).display());
    Ok(())
}
