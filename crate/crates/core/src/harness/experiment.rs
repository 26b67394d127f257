//! End-to-end protocol: simulate → featurize → train classifiers → train and
//! calibrate the guard → verify watermarks → attacks → bundle + report.
//!
//! Each expensive stage writes into a directory named by a digest of its own
//! settings and its upstream digests, with a `.complete` marker written last.
//! A rerun with an unchanged stage reuses it; a partial stage is redone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{digest_of, ExperimentConfig};
use super::metrics::{auroc, average_precision, keep_rate};
use crate::attacks::{run_attacks, AttackContext, AttackReport};
use crate::checkpoint::Checkpoint;
use crate::classifier::{self, build_model, evaluate, ArchPreset, EpochLog, EvalReport, LabeledSet, Model, TrainConfig};
use crate::error::{Error, Result};
use crate::frontend::{build_mel_filterbank, featurize_with, read_features, write_features, FrontendConfig, LogMelSpectrogram};
use crate::guard::{self, anomaly_scores, calibrate_threshold, GuardCalibration, GuardEpochLog, Vae, VaePreset};
use crate::nn::graph::cosine;
use crate::rf_sim::{self, DatasetManifest, IqBuffer, Split};
use crate::seed::{self, tag};
use crate::watermark::{self, gen_key, probe_indices, verify_signature, verify_trigger, VerificationResult, VerifyMode, WatermarkKey};

const MARKER: &str = ".complete";

fn short(d: &str) -> &str {
    &d[..16]
}

fn is_complete(dir: &Path, digest: &str) -> bool {
    fs::read_to_string(dir.join(MARKER)).map(|s| s.trim() == digest).unwrap_or(false)
}

fn mark_complete(dir: &Path, digest: &str) -> Result<()> {
    let p = dir.join(MARKER);
    fs::write(&p, digest).map_err(|e| Error::io(&p, e))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn staged<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage { stage, source: Box::new(e) })
}

/// Feature file path for a manifest record: `iq/<split>/x.iq` → `features/<split>/x.rflm`.
pub fn feature_path(root: &Path, rec: &rf_sim::PacketRecord) -> PathBuf {
    let rel = Path::new(&rec.path);
    let split_dir = rel.parent().and_then(|p| p.file_name()).map(PathBuf::from).unwrap_or_default();
    let stem = rel.file_stem().map(PathBuf::from).unwrap_or_default();
    root.join("features").join(split_dir).join(stem).with_extension("rflm")
}

/// Featurizes every packet of a dataset into `out_root`, copying the manifest
/// alongside so the directory is self-describing.
pub fn featurize_dataset(data_root: &Path, manifest: &DatasetManifest, cfg: &FrontendConfig, out_root: &Path) -> Result<()> {
    let fb = build_mel_filterbank(cfg)?;
    for split in [Split::Train, Split::Val, Split::Test, Split::Unseen, Split::Noise] {
        let dir = out_root.join("features").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for rec in &manifest.records {
        let iq = IqBuffer::read(&rf_sim::packet_path(data_root, rec), cfg.sample_rate_hz)?;
        write_features(&feature_path(out_root, rec), &featurize_with(&iq, cfg, &fb)?)?;
    }
    manifest.save(out_root)?;
    write_json(&out_root.join("frontend.json"), cfg)
}

/// Features of one experiment, grouped by split.
pub struct FeatureSets {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    pub unseen: Vec<LogMelSpectrogram>,
    pub noise: Vec<LogMelSpectrogram>,
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<(LogMelSpectrogram, Option<u32>)>> {
    manifest.split(split).map(|r| Ok((read_features(&feature_path(root, r))?, r.device_id))).collect()
}

pub fn load_labeled(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<LabeledSet> {
    let mut set = LabeledSet::default();
    for (spec, dev) in load_split(root, manifest, split)? {
        let y = dev.ok_or_else(|| Error::InvalidConfig(format!("{} record without a device id", split.name())))?;
        set.push(spec, y as usize);
    }
    Ok(set)
}

pub fn load_feature_sets(root: &Path) -> Result<FeatureSets> {
    let m = DatasetManifest::load(root)?;
    let plain = |s| Ok::<_, Error>(load_split(root, &m, s)?.into_iter().map(|(x, _)| x).collect());
    Ok(FeatureSets {
        train: load_labeled(root, &m, Split::Train)?,
        val: load_labeled(root, &m, Split::Val)?,
        test: load_labeled(root, &m, Split::Test)?,
        unseen: plain(Split::Unseen)?,
        noise: plain(Split::Noise)?,
    })
}

/// Simulates and featurizes a dataset in memory, skipping the disk layout.
/// Handy for small runs; experiments go through the cached stages instead.
pub fn render_feature_sets(dataset: &rf_sim::DatasetConfig, frontend: &FrontendConfig) -> Result<FeatureSets> {
    let fb = build_mel_filterbank(frontend)?;
    let mut sets = FeatureSets { train: LabeledSet::default(), val: LabeledSet::default(), test: LabeledSet::default(), unseen: Vec::new(), noise: Vec::new() };
    for rec in rf_sim::plan_dataset(dataset)? {
        let spec = featurize_with(&rf_sim::render_packet(dataset, &rec)?, frontend, &fb)?;
        let label = rec.device_id.map(|d| d as usize);
        match (rec.split, label) {
            (Split::Train, Some(y)) => sets.train.push(spec, y),
            (Split::Val, Some(y)) => sets.val.push(spec, y),
            (Split::Test, Some(y)) => sets.test.push(spec, y),
            (Split::Unseen, _) => sets.unseen.push(spec),
            (Split::Noise, _) => sets.noise.push(spec),
            (s, None) => return Err(Error::InvalidConfig(format!("{} record without a device id", s.name()))),
        }
    }
    Ok(sets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unseen: usize,
    pub noise: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub stage_digest: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub eval: EvalReport,
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlainTriggerMetrics {
    pub classifier: ClassifierMetrics,
    pub trigger: VerificationResult,
    pub sanitized: VerificationResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub no_watermark: Option<ClassifierMetrics>,
    pub plain_trigger: Option<PlainTriggerMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkMetrics {
    pub trigger: VerificationResult,
    pub adversarial: VerificationResult,
    pub sanitized: VerificationResult,
    pub signature: VerificationResult,
    /// Rate at which the reserved class is predicted on the clean test set.
    pub clean_wm_rate: f64,
    pub wrong_keys: usize,
    pub wrong_key_signature_pass_rate: f64,
    pub wrong_key_trigger_pass_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolMetrics {
    pub pool: String,
    pub count: usize,
    pub auroc: f64,
    pub average_precision: f64,
    /// Fraction of the pool flagged at the calibrated threshold.
    pub flag_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardMetrics {
    pub stage_digest: String,
    pub best_epoch: usize,
    pub initial_val_mse: f64,
    pub best_val_mse: f64,
    pub calibration: GuardCalibration,
    pub test_count: usize,
    /// Flag rate on the held-out clean test split.
    pub test_fpr: f64,
    pub keep_rate: f64,
    pub pools: Vec<PoolMetrics>,
    pub pooled: PoolMetrics,
    pub history: Vec<GuardEpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub config_digest: String,
    pub dataset: DatasetSummary,
    pub classifier: ClassifierMetrics,
    pub baselines: Baselines,
    pub watermark: WatermarkMetrics,
    pub guard: GuardMetrics,
    pub attacks: Vec<AttackReport>,
    /// Wall-clock only; excluded from reproducibility comparisons.
    pub timings: Vec<StageTiming>,
}

impl MetricsBundle {
    /// The bundle with timings cleared, the part that must reproduce exactly.
    pub fn without_timings(&self) -> Self {
        MetricsBundle { timings: Vec::new(), ..self.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub const BUNDLE_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";

struct Clock<'a> {
    timings: Vec<StageTiming>,
    log: &'a mut dyn FnMut(&str),
}

impl Clock<'_> {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut dyn FnMut(&str)) -> Result<(T, bool)>) -> Result<T> {
        (self.log)(&format!("[{stage}] start"));
        let t0 = Instant::now();
        let (v, cached) = staged(stage, || f(&mut *self.log))?;
        let seconds = t0.elapsed().as_secs_f64();
        (self.log)(&format!("[{stage}] done in {seconds:.1}s{}", if cached { " (cached)" } else { "" }));
        self.timings.push(StageTiming { stage: stage.to_string(), seconds, cached });
        Ok(v)
    }
}

/// Which watermark objective a classifier is trained under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Main,
    NoWatermark,
    PlainTrigger,
}

fn variant_config(base: &TrainConfig, v: Variant) -> TrainConfig {
    let mut c = base.clone();
    match v {
        Variant::Main => {}
        Variant::NoWatermark => {
            c.wm.trigger = false;
            c.wm.adversarial = false;
            c.wm.signature = false;
        }
        Variant::PlainTrigger => c.wm.adversarial = false,
    }
    c
}

/// Trains (or reloads) one classifier variant and evaluates it on the test split.
pub fn train_classifier_stage(
    cfg: &ExperimentConfig,
    features_digest: &str,
    sets: &FeatureSets,
    key: &WatermarkKey,
    variant: Variant,
    log: &mut dyn FnMut(&str),
) -> Result<((Model, ClassifierMetrics), bool)> {
    let tc = variant_config(&cfg.classifier.train, variant);
    let use_key = variant != Variant::NoWatermark;
    let digest = digest_of(&("classifier", features_digest, cfg.seed, cfg.classifier.preset, &tc, use_key.then_some(&key.key_seed)));
    let dir = cfg.output_dir.join("models").join(short(&digest));
    let ck_path = dir.join("classifier.rfck");
    let hist_path = dir.join("history.json");
    let c = cfg.dataset.device_count as usize;
    let cached = is_complete(&dir, &digest);
    let (model, best_epoch, best_val, history) = if cached {
        let ck = Checkpoint::load(&ck_path)?;
        let m = Model::from_checkpoint(&ck)?;
        let history: Vec<EpochLog> = read_json(&hist_path)?;
        let best_val = ck.metrics.get("val_accuracy").copied().unwrap_or(f64::NAN);
        (m, ck.epoch as usize, best_val, history)
    } else {
        fresh_dir(&dir)?;
        let preset = ArchPreset::named(cfg.classifier.preset);
        let model = build_model(&preset, c, seed::derive(cfg.seed, &[tag::INIT]))?;
        let k = use_key.then_some(key);
        let out = classifier::train(model, &sets.train, &sets.val, k, &tc, cfg.seed, &mut |e: &EpochLog| {
            log(&format!("  epoch {:>2} lr {:.2e} task {:.4} trig {:.4} adv {:.4} sig {:.4} train {:.3} val {:.3}", e.epoch, e.lr, e.task_loss, e.trigger_loss, e.adversarial_loss, e.signature_loss, e.train_accuracy, e.val_accuracy));
        })?;
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("val_accuracy".to_string(), out.best_val_accuracy);
        out.model.to_checkpoint(&digest, out.best_epoch as u32, metrics).save(&ck_path)?;
        write_json(&hist_path, &out.history)?;
        mark_complete(&dir, &digest)?;
        (out.model, out.best_epoch, out.best_val_accuracy, out.history)
    };
    let eval = evaluate(&model, &sets.test)?;
    let metrics = ClassifierMetrics { stage_digest: digest, best_epoch, best_val_accuracy: best_val, eval, history };
    Ok(((model, metrics), cached))
}

fn pool_metrics(name: &str, clean: &[f64], anomalous: &[f64], tau: f64) -> Result<PoolMetrics> {
    let scores: Vec<f64> = clean.iter().chain(anomalous).copied().collect();
    let labels: Vec<bool> = clean.iter().map(|_| false).chain(anomalous.iter().map(|_| true)).collect();
    Ok(PoolMetrics {
        pool: name.to_string(),
        count: anomalous.len(),
        auroc: auroc(&scores, &labels)?,
        average_precision: average_precision(&scores, &labels)?,
        flag_rate: anomalous.iter().filter(|&&s| s > tau).count() as f64 / anomalous.len().max(1) as f64,
    })
}

/// Trains (or reloads) the guard: `(vae, best_epoch, initial_val_mse, history, digest)`.
#[allow(clippy::type_complexity)]
pub fn train_guard_stage(cfg: &ExperimentConfig, features_digest: &str, sets: &FeatureSets, log: &mut dyn FnMut(&str)) -> Result<((Vae, usize, f64, Vec<GuardEpochLog>, String), bool)> {
    let preset = VaePreset::named(cfg.guard.preset);
    let digest = digest_of(&("guard", features_digest, cfg.seed, &preset, &cfg.guard.train));
    let dir = cfg.output_dir.join("guard").join(short(&digest));
    let ck_path = dir.join("vae.rfck");
    let hist_path = dir.join("history.json");
    if is_complete(&dir, &digest) {
        let ck = Checkpoint::load(&ck_path)?;
        let vae = Vae::from_checkpoint(&ck)?;
        let initial = ck.metrics.get("initial_val_mse").copied().unwrap_or(f64::NAN);
        return Ok(((vae, ck.epoch as usize, initial, read_json(&hist_path)?, digest), true));
    }
    fresh_dir(&dir)?;
    let out = guard::train_guard(&sets.train.specs, &sets.val.specs, &preset, &cfg.guard.train, seed::derive(cfg.seed, &[tag::INIT, 2]), &mut |e: &GuardEpochLog| {
        log(&format!("  epoch {:>2} β {:.2} train {:.3} val {:.3} mse {:.4}", e.epoch, e.beta, e.train_loss, e.val_loss, e.val_mse));
    })?;
    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("initial_val_mse".to_string(), out.initial_val_mse);
    out.vae.to_checkpoint(&digest, out.best_epoch as u32, metrics).save(&ck_path)?;
    write_json(&hist_path, &out.history)?;
    mark_complete(&dir, &digest)?;
    Ok(((out.vae, out.best_epoch, out.initial_val_mse, out.history, digest), false))
}

/// Simulates the dataset unless a complete copy exists: `(digest, dir)`.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<((String, PathBuf), bool)> {
    let digest = digest_of(&("dataset", &cfg.dataset));
    let dir = cfg.output_dir.join("data").join(short(&digest));
    if is_complete(&dir, &digest) {
        return Ok(((digest, dir), true));
    }
    fresh_dir(&dir)?;
    rf_sim::build_dataset(&cfg.dataset, &dir)?;
    mark_complete(&dir, &digest)?;
    Ok(((digest, dir), false))
}

/// Featurizes the dataset unless a complete copy exists: `(digest, dir)`.
pub fn ensure_features(cfg: &ExperimentConfig, dataset_digest: &str, data_dir: &Path) -> Result<((String, PathBuf), bool)> {
    let digest = digest_of(&("features", dataset_digest, &cfg.frontend));
    let dir = cfg.output_dir.join("features").join(short(&digest));
    if is_complete(&dir, &digest) {
        return Ok(((digest, dir), true));
    }
    fresh_dir(&dir)?;
    featurize_dataset(data_dir, &DatasetManifest::load(data_dir)?, &cfg.frontend, &dir)?;
    mark_complete(&dir, &digest)?;
    Ok(((digest, dir), false))
}

/// Runs the full protocol quietly.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsBundle> {
    run_experiment_with(cfg, &mut |_| {})
}

/// Runs the full protocol, sending progress lines to `log`. Writes
/// `metrics.json` and `report.md` into the output directory.
pub fn run_experiment_with(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<MetricsBundle> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.toml"))?;
    let config_digest = cfg.digest();
    let mut clock = Clock { timings: Vec::new(), log };

    let (dataset_digest, data_dir) = clock.run("simulate", |_| ensure_dataset(cfg))?;
    let (features_digest, feat_dir) = clock.run("featurize", |_| ensure_features(cfg, &dataset_digest, &data_dir))?;
    let sets = load_feature_sets(&feat_dir)?;
    let dataset = DatasetSummary {
        train: sets.train.len(),
        val: sets.val.len(),
        test: sets.test.len(),
        unseen: sets.unseen.len(),
        noise: sets.noise.len(),
    };

    let c = cfg.dataset.device_count as usize;
    let feature_dim = ArchPreset::named(cfg.classifier.preset).feature_dim;
    let key = gen_key(cfg.classifier.key_seed, c, feature_dim)?;
    let key_path = out.join("keys").join(format!("{}.rfwk", cfg.classifier.key_seed));
    fs::create_dir_all(out.join("keys")).map_err(|e| Error::io(out.join("keys"), e))?;
    watermark::save_key(&key, &key_path)?;

    let (model, classifier) = clock.run("train_classifier", |log| train_classifier_stage(cfg, &features_digest, &sets, &key, Variant::Main, log))?;
    let no_watermark = if cfg.classifier.comparisons.no_watermark {
        Some(clock.run("train_no_watermark", |log| train_classifier_stage(cfg, &features_digest, &sets, &key, Variant::NoWatermark, log))?.1)
    } else {
        None
    };
    let plain_model = if cfg.classifier.comparisons.plain_trigger {
        Some(clock.run("train_plain_trigger", |log| train_classifier_stage(cfg, &features_digest, &sets, &key, Variant::PlainTrigger, log))?)
    } else {
        None
    };

    let (vae, guard_best_epoch, initial_val_mse, guard_history, guard_digest) = clock.run("train_guard", |log| train_guard_stage(cfg, &features_digest, &sets, log))?;
    let (cal, test_scores) = clock.run("calibrate", |_| {
        let val_refs: Vec<_> = sets.val.specs.iter().collect();
        let val_scores = anomaly_scores(&vae, &val_refs, cfg.guard.alpha)?;
        let cal = calibrate_threshold(&val_scores, cfg.guard.target_fpr, cfg.guard.alpha)?;
        let test_refs: Vec<_> = sets.test.specs.iter().collect();
        Ok(((cal, anomaly_scores(&vae, &test_refs, cfg.guard.alpha)?), false))
    })?;

    let guard = clock.run("guard_metrics", |_| {
        let score = |xs: &[LogMelSpectrogram]| anomaly_scores(&vae, &xs.iter().collect::<Vec<_>>(), cfg.guard.alpha);
        let unseen = score(&sets.unseen)?;
        let noise = score(&sets.noise)?;
        let kept: Vec<bool> = test_scores.iter().map(|&s| s <= cal.tau).collect();
        let keep = keep_rate(&kept)?;
        let mut pools = Vec::new();
        if !unseen.is_empty() {
            pools.push(pool_metrics("unseen", &test_scores, &unseen, cal.tau)?);
        }
        if !noise.is_empty() {
            pools.push(pool_metrics("noise", &test_scores, &noise, cal.tau)?);
        }
        let all: Vec<f64> = unseen.iter().chain(&noise).copied().collect();
        let pooled = pool_metrics("pooled", &test_scores, &all, cal.tau)?;
        let best_val_mse = guard_history.iter().find(|h| h.epoch == guard_best_epoch).map_or(f64::NAN, |h| h.val_mse);
        Ok((
            GuardMetrics {
                stage_digest: guard_digest.clone(),
                best_epoch: guard_best_epoch,
                initial_val_mse,
                best_val_mse,
                calibration: cal.clone(),
                test_count: test_scores.len(),
                test_fpr: 1.0 - keep,
                keep_rate: keep,
                pools,
                pooled,
                history: guard_history.clone(),
            },
            false,
        ))
    })?;

    let probe_idx = probe_indices(&key, sets.test.len(), cfg.verify.probe_count)?;
    let probes: Vec<LogMelSpectrogram> = probe_idx.iter().map(|&i| sets.test.specs[i].clone()).collect();
    let sanitized_mode = VerifyMode::Sanitized { steps: cfg.verify.sanitize.clone(), seed: seed::derive(cfg.seed, &[tag::SANITIZE]) };

    let watermark = clock.run("verify", |_| {
        let trigger = verify_trigger(&model, &key, &probes, &VerifyMode::Plain)?;
        let adversarial = verify_trigger(&model, &key, &probes, &VerifyMode::Adversarial)?;
        let sanitized = verify_trigger(&model, &key, &probes, &sanitized_mode)?;
        let signature = verify_signature(&model, &key, &probes)?;
        let feats = model.features(&probes.iter().collect::<Vec<_>>())?;
        let mut mean = vec![0.0f64; feature_dim];
        for row in feats.data().chunks(feature_dim) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= probes.len() as f64);
        let (mut sig_pass, mut trig_pass) = (0usize, 0usize);
        for i in 0..cfg.verify.wrong_keys {
            let mut ks = seed::derive(cfg.classifier.key_seed, &[tag::KEY, i as u64]);
            if ks == key.key_seed {
                ks = ks.wrapping_add(1);
            }
            let wrong = gen_key(ks, c, feature_dim)?;
            if cosine(&mean, &wrong.v).is_some_and(|cs| cs >= watermark::COSINE_THRESHOLD) {
                sig_pass += 1;
            }
            if verify_trigger(&model, &wrong, &probes, &VerifyMode::Plain)?.pass {
                trig_pass += 1;
            }
        }
        let n = cfg.verify.wrong_keys.max(1) as f64;
        Ok((
            WatermarkMetrics {
                trigger,
                adversarial,
                sanitized,
                signature,
                clean_wm_rate: classifier.eval.wm_prediction_rate,
                wrong_keys: cfg.verify.wrong_keys,
                wrong_key_signature_pass_rate: sig_pass as f64 / n,
                wrong_key_trigger_pass_rate: trig_pass as f64 / n,
            },
            false,
        ))
    })?;

    let plain_trigger = match plain_model {
        Some((pm, metrics)) => Some(clock.run("verify_plain_trigger", |_| {
            Ok((
                PlainTriggerMetrics {
                    trigger: verify_trigger(&pm, &key, &probes, &VerifyMode::Plain)?,
                    sanitized: verify_trigger(&pm, &key, &probes, &sanitized_mode)?,
                    classifier: metrics,
                },
                false,
            ))
        })?),
        None => None,
    };

    let attacks = clock.run("attacks", |_| {
        let ctx = AttackContext {
            model: &model,
            key: Some(&key),
            eval_set: &sets.test,
            probes: &probes,
            finetune_set: &sets.val,
            guard: Some((&vae, &cal)),
            seed: seed::derive(cfg.seed, &[tag::ATTACK]),
        };
        Ok((run_attacks(&ctx, &cfg.attacks)?, false))
    })?;

    let bundle = MetricsBundle {
        config_digest,
        dataset,
        classifier,
        baselines: Baselines { no_watermark, plain_trigger },
        watermark,
        guard,
        attacks,
        timings: clock.timings,
    };
    bundle.save(&out.join(BUNDLE_FILE))?;
    let report = super::report::render(&bundle);
    fs::write(out.join(REPORT_FILE), report).map_err(|e| Error::io(out.join(REPORT_FILE), e))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_paths_mirror_iq_layout() {
        let rec = rf_sim::PacketRecord { path: "iq/test/dev003_pkt00201.iq".into(), device_id: Some(3), packet_index: 201, split: Split::Test, snr_db: Some(20.0), seed: 1 };
        assert_eq!(feature_path(Path::new("/f"), &rec), PathBuf::from("/f/features/test/dev003_pkt00201.rflm"));
    }

    #[test]
    fn variants_toggle_terms() {
        let base = TrainConfig::default();
        let nw = variant_config(&base, Variant::NoWatermark);
        assert!(!nw.wm.trigger && !nw.wm.adversarial && !nw.wm.signature);
        let pt = variant_config(&base, Variant::PlainTrigger);
        assert!(pt.wm.trigger && !pt.wm.adversarial && pt.wm.signature);
    }
}
