//! Trains a small watermarked model and runs the removal and evasion
//! attacks against it.
//!
//!     cargo run --example attacks

use rffi::attacks::{run_attacks, AttackContext, AttackSpec, Sanitize};
use rffi::classifier::{build_model, train, ArchPreset, PresetName, TrainConfig};
use rffi::frontend::FrontendConfig;
use rffi::harness::experiment::render_feature_sets;
use rffi::rf_sim::DatasetConfig;
use rffi::watermark::gen_key;

fn main() -> anyhow::Result<()> {
    let data = DatasetConfig { device_count: 4, train_pool_per_device: 60, test_per_device: 30, unseen_device_count: 0, noise_packets: 0, ..DatasetConfig::desk() };
    let sets = render_feature_sets(&data, &FrontendConfig::default())?;
    let classes = data.device_count as usize;
    let preset = ArchPreset::named(PresetName::MiniResnet);
    let key = gen_key(7, classes, preset.feature_dim)?;
    let mut cfg = TrainConfig::default();
    cfg.hyper.epochs = 10;
    let model = train(build_model(&preset, classes, 2)?, &sets.train, &sets.val, Some(&key), &cfg, 2, &mut |_| {})?.model;

    let ctx = AttackContext { model: &model, key: Some(&key), eval_set: &sets.test, probes: &sets.test.specs, finetune_set: &sets.val, guard: None, seed: 9 };
    let specs = [
        AttackSpec::Prune { rho: 0.3 },
        AttackSpec::Quantize { bits: 8 },
        AttackSpec::Finetune { epochs: 2, lr: 1e-4 },
        AttackSpec::Sanitize { steps: vec![Sanitize::GaussianBlur { sigma: 1.0 }, Sanitize::Noise { sigma: 0.05 }] },
        AttackSpec::Evade { epsilon: 0.3, steps: 10, max_inputs: 60 },
    ];
    for r in run_attacks(&ctx, &specs)? {
        let pp = |p: Option<rffi::attacks::PrePost>| p.map_or("-".to_string(), |p| format!("{:.3} -> {:.3}", p.pre, p.post));
        println!(
            "{:<9} accuracy {}  ASR {}  cosine {}  misclassified {}",
            r.attack.name(),
            pp(Some(r.clean_accuracy)),
            pp(r.trigger_asr),
            pp(r.signature_cosine),
            r.misclassification_rate.map_or("-".to_string(), |m| format!("{m:.3}")),
        );
    }
    Ok(())
}
