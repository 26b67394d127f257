//! Simulates a small LoRa dataset on disk, then runs the log-Mel front end
//! over one packet per split.
//!
//!     cargo run --example simulate_featurize -- [out_dir]

use std::path::PathBuf;

use rffi::frontend::{featurize, FrontendConfig};
use rffi::rf_sim::{build_dataset, packet_path, DatasetConfig, IqBuffer, Split};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rffi-simulate-example"));
    let cfg = DatasetConfig { device_count: 3, train_pool_per_device: 20, test_per_device: 5, unseen_device_count: 1, unseen_per_device: 5, noise_packets: 5, ..DatasetConfig::desk() };
    let manifest = build_dataset(&cfg, &out)?;
    println!("dataset in {}", out.display());
    for split in [Split::Train, Split::Val, Split::Test, Split::Unseen, Split::Noise] {
        println!("  {:<7} {:>4} packets", split.name(), manifest.count(split));
    }

    let fe = FrontendConfig::default();
    for split in [Split::Train, Split::Unseen, Split::Noise] {
        let rec = manifest.split(split).next().expect("split is populated");
        let iq = IqBuffer::read(&packet_path(&out, rec), fe.sample_rate_hz)?;
        let spec = featurize(&iq, &fe)?;
        let norm = spec.normalization.expect("featurize standardizes");
        // Mean standardized energy per Mel band, coarsely binned.
        let bands: String = (0..spec.n_mels)
            .map(|m| {
                let mean = (0..spec.frames).map(|f| spec.at(m, f)).sum::<f32>() / spec.frames as f32;
                [' ', '.', ':', '+', '#'][((mean + 1.5).clamp(0.0, 3.99) / 0.8) as usize]
            })
            .collect();
        println!("{:<7} {} samples -> {:?}, log-mean {:.2}, log-std {:.2} |{bands}|", split.name(), iq.len(), spec.shape(), norm.mean, norm.std);
    }
    Ok(())
}
