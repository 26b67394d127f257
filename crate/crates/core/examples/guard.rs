//! Trains the robust ConvVAE guard on clean packets, calibrates its
//! threshold to a 5% false-positive rate and scores anomalies.
//!
//!     cargo run --example guard

use rffi::frontend::FrontendConfig;
use rffi::guard::{anomaly_scores, calibrate_threshold, train_guard, GuardTrainConfig, VaePreset, VaePresetName};
use rffi::harness::experiment::render_feature_sets;
use rffi::harness::metrics::{auroc, average_precision};
use rffi::rf_sim::DatasetConfig;

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig { device_count: 4, train_pool_per_device: 250, test_per_device: 60, unseen_device_count: 2, unseen_per_device: 60, noise_packets: 60, ..DatasetConfig::desk() };
    let sets = render_feature_sets(&data, &FrontendConfig::default())?;
    let cfg = GuardTrainConfig { max_epochs: 12, ..GuardTrainConfig::robust() };
    let out = train_guard(&sets.train.specs, &sets.val.specs, &VaePreset::named(VaePresetName::Robust), &cfg, 5, &mut |e| {
        println!("epoch {:>2}  beta {:.2}  train {:.2}  val {:.2}  mse {:.4}", e.epoch, e.beta, e.train_loss, e.val_loss, e.val_mse);
    })?;

    let alpha = 0.5;
    let score = |xs: &[rffi::frontend::LogMelSpectrogram]| anomaly_scores(&out.vae, &xs.iter().collect::<Vec<_>>(), alpha);
    let calib = calibrate_threshold(&score(&sets.val.specs)?, 0.05, alpha)?;
    println!("tau {:.3}, calibration FPR {:.3}", calib.tau, calib.achieved_fpr);

    let clean = score(&sets.test.specs)?;
    let kept = clean.iter().filter(|&&s| s <= calib.tau).count() as f64 / clean.len() as f64;
    println!("clean test keep rate {kept:.3}");
    for (name, pool) in [("unseen", &sets.unseen), ("noise", &sets.noise)] {
        let anomalies = score(pool)?;
        let scores: Vec<f64> = clean.iter().chain(&anomalies).copied().collect();
        let labels: Vec<bool> = clean.iter().map(|_| false).chain(anomalies.iter().map(|_| true)).collect();
        let flagged = anomalies.iter().filter(|&&s| s > calib.tau).count() as f64 / anomalies.len() as f64;
        println!("{name:<7} AUROC {:.3}  AP {:.3}  flagged {flagged:.3}", auroc(&scores, &labels)?, average_precision(&scores, &labels)?);
    }
    Ok(())
}
