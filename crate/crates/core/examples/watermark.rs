//! Embeds the trigger, adversarial-trigger and signature watermarks, then
//! verifies ownership with the right key and with a wrong one.
//!
//!     cargo run --example watermark

use rffi::attacks::Sanitize;
use rffi::classifier::{build_model, evaluate, train, ArchPreset, PresetName, TrainConfig};
use rffi::frontend::FrontendConfig;
use rffi::harness::experiment::render_feature_sets;
use rffi::rf_sim::DatasetConfig;
use rffi::watermark::{gen_key, verify_signature, verify_trigger, VerifyMode};

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig { device_count: 4, train_pool_per_device: 60, test_per_device: 30, unseen_device_count: 0, noise_packets: 0, ..DatasetConfig::desk() };
    let sets = render_feature_sets(&data, &FrontendConfig::default())?;
    let classes = data.device_count as usize;
    let preset = ArchPreset::named(PresetName::MiniResnet);
    let key = gen_key(1337, classes, preset.feature_dim)?;
    println!("trigger block at mel {} frame {}, reserved class {}", key.trigger.mel, key.trigger.frame, key.y_wm);

    let mut cfg = TrainConfig::default();
    cfg.hyper.epochs = 10;
    let model = build_model(&preset, classes, 1)?;
    let out = train(model, &sets.train, &sets.val, Some(&key), &cfg, 1, &mut |e| {
        println!("epoch {:>2}  task {:.3}  trig {:.3}  adv {:.3}  sig {:.4}  val {:.3}", e.epoch, e.task_loss, e.trigger_loss, e.adversarial_loss, e.signature_loss, e.val_accuracy);
    })?;
    let model = out.model;
    println!("clean test accuracy {:.3}", evaluate(&model, &sets.test)?.accuracy);

    let probes = &sets.test.specs;
    let sanitized = VerifyMode::Sanitized { steps: vec![Sanitize::GaussianBlur { sigma: 1.0 }, Sanitize::Noise { sigma: 0.05 }], seed: 3 };
    for (name, mode) in [("plain", VerifyMode::Plain), ("adversarial", VerifyMode::Adversarial), ("sanitized", sanitized)] {
        let r = verify_trigger(&model, &key, probes, &mode)?;
        println!("{name:<12} ASR {:.3} (threshold {}) {}", r.score, r.threshold, if r.pass { "pass" } else { "fail" });
    }
    let r = verify_signature(&model, &key, probes)?;
    println!("signature    cosine {:.3} {}", r.score, if r.pass { "pass" } else { "fail" });

    let wrong = gen_key(99, classes, preset.feature_dim)?;
    let r = verify_signature(&model, &wrong, probes)?;
    println!("wrong key    cosine {:.3} {}", r.score, if r.pass { "pass" } else { "fail" });
    Ok(())
}
