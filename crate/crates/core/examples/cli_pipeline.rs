//! Drives every command-line stage in process with a deliberately tiny
//! configuration: generate, degrade, train, restore, evaluate, sweep and
//! curate. The same steps run from a shell as `body-restore <command>
//! --config run.json`.
//!
//! cargo run --example cli_pipeline -- [work_dir]

use std::fs;
use std::path::PathBuf;

use body_restore::cli::{self, RunConfig};
use body_restore::image::ImageTensor;
use body_restore::synth::generate_sample;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cli_pipeline".into()));
    fs::create_dir_all(&work)?;

    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.paths.data = work.join("data");
    cfg.paths.degraded = work.join("degraded");
    cfg.paths.checkpoints = work.join("checkpoints");
    cfg.paths.restored = work.join("restored");
    cfg.paths.evaluation = work.join("evaluation");
    cfg.paths.sweep = work.join("sweep");
    cfg.paths.curate_in = work.join("raw");
    cfg.paths.curate_out = work.join("curated");
    cfg.generate.count = 22;
    cfg.schedule.inference_steps = 10;
    cfg.model.denoiser.widths = [8, 12, 16];
    cfg.model.regressor.width = 8;
    cfg.model.parts.width = 8;
    for t in [&mut cfg.regressor, &mut cfg.parts, &mut cfg.codec, &mut cfg.diffusion] {
        t.iterations = 10;
        t.batch_size = 4;
    }
    cfg.guidance.scale = 1.0;
    cfg.sweep.count = 2;

    fs::create_dir_all(&cfg.paths.curate_in)?;
    generate_sample(1, None)?.image.save_png(&cfg.paths.curate_in.join("person.png"))?;
    ImageTensor::filled(128, 64, 3, 0.4).save_png(&cfg.paths.curate_in.join("empty.png"))?;

    let config = work.join("run.json");
    fs::write(&config, serde_json::to_string_pretty(&cfg)?)?;
    let config = config.to_string_lossy().into_owned();
    for command in ["gen", "degrade", "train-regressor", "train-diffusion", "restore", "evaluate", "sweep-s", "curate"] {
        let code = cli::run(["body-restore", command, "--config", config.as_str()]);
        println!("{command:<16} exit {code}");
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("{}", fs::read_to_string(cfg.paths.evaluation.join("summary.json"))?);
    println!("{}", fs::read_to_string(cfg.paths.sweep.join("sweep.csv"))?);
    Ok(())
}
