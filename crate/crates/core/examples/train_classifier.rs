//! Trains a mini_resnet fingerprint classifier on a few simulated devices
//! and prints the per-class report.
//!
//!     cargo run --example train_classifier

use rffi::classifier::{build_model, evaluate, train, ArchPreset, PresetName, TrainConfig, WmConfig};
use rffi::frontend::FrontendConfig;
use rffi::harness::experiment::render_feature_sets;
use rffi::rf_sim::DatasetConfig;

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig { device_count: 4, train_pool_per_device: 60, test_per_device: 30, unseen_device_count: 0, noise_packets: 0, ..DatasetConfig::desk() };
    let sets = render_feature_sets(&data, &FrontendConfig::default())?;
    println!("train {} / val {} / test {}", sets.train.len(), sets.val.len(), sets.test.len());

    let mut cfg = TrainConfig::default();
    cfg.hyper.epochs = 8;
    cfg.wm = WmConfig { trigger: false, adversarial: false, signature: false, ..WmConfig::default() };
    let model = build_model(&ArchPreset::named(PresetName::MiniResnet), data.device_count as usize, 1)?;
    let out = train(model, &sets.train, &sets.val, None, &cfg, 1, &mut |e| {
        println!("epoch {:>2}  loss {:.3}  train {:.3}  val {:.3}", e.epoch, e.task_loss, e.train_accuracy, e.val_accuracy);
    })?;

    let r = evaluate(&out.model, &sets.test)?;
    println!("best epoch {}, test accuracy {:.3}", out.best_epoch, r.accuracy);
    for (c, s) in r.per_class.iter().enumerate() {
        println!("  device {c}: precision {:.3} recall {:.3} f1 {:.3} (n={})", s.precision, s.recall, s.f1, s.support);
    }
    println!("weighted recall {:.3} == accuracy {:.3}", r.weighted_avg.recall, r.accuracy);
    Ok(())
}
