//! Runs every pipeline stage end to end and writes `metrics.json` and
//! `report.md`.
//!
//!     cargo run --example experiment -- [out_dir] [--desk]
//!
//! Without `--desk` the dataset and epoch counts are shrunk so the run
//! takes a few minutes; `--desk` runs the full acceptance configuration.

use std::path::PathBuf;

use rffi::harness::{report, run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let desk = args.iter().any(|a| a == "--desk");
    let out = args.iter().find(|a| !a.starts_with("--")).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rffi-experiment-example"));
    let mut cfg = ExperimentConfig::desk(&out);
    if !desk {
        let d = &mut cfg.dataset;
        d.device_count = 4;
        // Calibration needs at least 200 validation packets.
        d.train_pool_per_device = 250;
        d.test_per_device = 60;
        d.unseen_device_count = 2;
        d.unseen_per_device = 50;
        d.noise_packets = 100;
        cfg.classifier.train.hyper.epochs = 6;
        cfg.guard.train.max_epochs = 8;
        cfg.guard.train.warmup_epochs = 4;
        cfg.verify.probe_count = 64;
        cfg.verify.wrong_keys = 20;
    }
    let bundle = run_experiment(&cfg)?;
    println!("{}", report::render(&bundle));
    println!("artifacts in {}", out.display());
    Ok(())
}
