//! Residual spectrogram classifier with `C` device classes plus one reserved
//! watermark class. Training and evaluation live here too.

pub mod arch;

pub use arch::{backbone_forward, init_params, residual_block, ArchPreset, PresetName};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::nn::{adamw_step, batch_tensor, light_spec_aug, lr_schedule, AugmentConfig, Graph, ParamStore, Tensor, TrainHyper, Var};
use crate::seed::{self, tag};
use crate::watermark::{apply_trigger, craft_adversarial, WatermarkKey};

pub const CHECKPOINT_TAG: &str = "classifier";

/// Inference chunk size; bounds tape memory.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub preset: ArchPreset,
    pub params: ParamStore,
    pub num_device_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub class: usize,
}

/// Spectrograms with device labels in `0..C`.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub specs: Vec<LogMelSpectrogram>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn push(&mut self, spec: LogMelSpectrogram, label: usize) {
        self.specs.push(spec);
        self.labels.push(label);
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    preset: ArchPreset,
    num_device_classes: usize,
}

pub fn build_model(preset: &ArchPreset, num_device_classes: usize, seed: u64) -> Result<Model> {
    if num_device_classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 device classes, got {num_device_classes}")));
    }
    let params = init_params(preset, num_device_classes + 1, seed)?;
    Ok(Model { preset: preset.clone(), params, num_device_classes })
}

impl Model {
    /// `C + 1`.
    pub fn outputs(&self) -> usize {
        self.num_device_classes + 1
    }

    /// Index of the reserved watermark class, always `C`.
    pub fn wm_class(&self) -> usize {
        self.num_device_classes
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        backbone_forward(&self.preset, &self.params, g, x)
    }

    /// Logits `(n, C+1)` and penultimate features `(n, feature_dim)`.
    pub fn infer(&self, specs: &[&LogMelSpectrogram]) -> Result<(Tensor, Tensor)> {
        let mut logits = Vec::new();
        let mut feats = Vec::new();
        for chunk in specs.chunks(EVAL_CHUNK) {
            let mut g = Graph::frozen();
            let x = g.constant(batch_tensor(chunk));
            let (l, f) = self.forward(&mut g, x)?;
            logits.extend_from_slice(g.value(l).data());
            feats.extend_from_slice(g.value(f).data());
        }
        let n = specs.len();
        Ok((Tensor::new(vec![n, self.outputs()], logits)?, Tensor::new(vec![n, self.preset.feature_dim], feats)?))
    }

    pub fn predict(&self, spec: &LogMelSpectrogram) -> Result<Prediction> {
        let (logits, _) = self.infer(&[spec])?;
        let logits = logits.into_data();
        let class = argmax(&logits);
        Ok(Prediction { logits, class })
    }

    pub fn predict_batch(&self, specs: &[&LogMelSpectrogram]) -> Result<Vec<usize>> {
        let (logits, _) = self.infer(specs)?;
        Ok(logits.data().chunks(self.outputs()).map(argmax).collect())
    }

    pub fn features(&self, specs: &[&LogMelSpectrogram]) -> Result<Tensor> {
        Ok(self.infer(specs)?.1)
    }

    pub fn to_checkpoint(&self, config_digest: &str, epoch: u32, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let descriptor = Descriptor { preset: self.preset.clone(), num_device_classes: self.num_device_classes };
        let mut params = self.params.clone();
        params.reset_optimizer();
        Checkpoint {
            tag: CHECKPOINT_TAG.into(),
            descriptor: serde_json::to_value(descriptor).expect("descriptor serializes"),
            config_digest: config_digest.into(),
            epoch,
            metrics,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        if ck.tag != CHECKPOINT_TAG {
            return Err(Error::InvalidConfig(format!("checkpoint holds a `{}` model, expected a classifier", ck.tag)));
        }
        let d: Descriptor = serde_json::from_value(ck.descriptor.clone())?;
        let reference = build_model(&d.preset, d.num_device_classes, 0)?;
        for (name, p) in reference.params.iter() {
            let got = ck.params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::shape(format!("checkpoint parameter `{name}` has shape {:?}", got.value.shape())));
            }
        }
        if reference.params.len() != ck.params.len() {
            return Err(Error::shape("checkpoint carries unexpected parameters"));
        }
        let mut params = ck.params.clone();
        params.reset_optimizer();
        Ok(Model { preset: d.preset, params, num_device_classes: d.num_device_classes })
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Which watermark terms are active and how often they appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmConfig {
    /// Expected fraction of each batch replaced by triggered rows.
    pub p_wm: f64,
    /// Fraction of triggered rows that are additionally adversarially perturbed.
    pub adv_fraction: f64,
    pub trigger: bool,
    pub adversarial: bool,
    pub signature: bool,
    pub trigger_weight: f64,
    pub adversarial_weight: f64,
}

impl Default for WmConfig {
    fn default() -> Self {
        WmConfig { p_wm: 0.05, adv_fraction: 0.5, trigger: true, adversarial: true, signature: true, trigger_weight: 1.0, adversarial_weight: 1.0 }
    }
}

impl WmConfig {
    pub fn plain_trigger() -> Self {
        WmConfig { adversarial: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.p_wm) {
            return Err(Error::InvalidConfig(format!("p_wm must lie in [0, 0.5), got {}", self.p_wm)));
        }
        if !(0.0..=1.0).contains(&self.adv_fraction) {
            return Err(Error::InvalidConfig(format!("adv_fraction must lie in [0, 1], got {}", self.adv_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: TrainHyper,
    pub wm: WmConfig,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-averaged loss terms.
    pub task_loss: f64,
    pub trigger_loss: f64,
    pub adversarial_loss: f64,
    pub signature_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochLog>,
}

pub fn accuracy(model: &Model, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("accuracy over an empty set".into()));
    }
    let refs: Vec<_> = set.specs.iter().collect();
    let preds = model.predict_batch(&refs)?;
    let hits = preds.iter().zip(&set.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / set.len() as f64)
}

fn check_labels(set: &LabeledSet, classes: usize, what: &str) -> Result<()> {
    if set.specs.len() != set.labels.len() {
        return Err(Error::shape(format!("{what}: {} specs but {} labels", set.specs.len(), set.labels.len())));
    }
    if let Some(&y) = set.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidConfig(format!("{what}: label {y} outside 0..{classes}")));
    }
    Ok(())
}

/// Number of watermark rows in a batch of `b`: `⌊p·b⌋` plus one more with
/// probability equal to the fractional part.
fn wm_rows(rng: &mut impl Rng, p: f64, b: usize) -> usize {
    let exact = p * b as f64;
    let base = exact.floor();
    let extra = rng.gen_bool((exact - base).clamp(0.0, 1.0));
    (base as usize + extra as usize).min(b.saturating_sub(1))
}

struct BatchLoss {
    task: f64,
    trigger: f64,
    adversarial: f64,
    signature: f64,
    correct: usize,
    clean: usize,
}

/// Trains `model` under the combined task + watermark objective, early
/// stopping on validation accuracy. `observe` sees every finished epoch.
pub fn train(
    model: Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    key: Option<&WatermarkKey>,
    cfg: &TrainConfig,
    seed: u64,
    observe: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.hyper.validate()?;
    cfg.wm.validate()?;
    let c = model.num_device_classes;
    check_labels(train_set, c, "train set")?;
    check_labels(val_set, c, "val set")?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training needs non-empty train and val sets".into()));
    }
    if let Some(k) = key {
        k.check_compatible(c, model.preset.feature_dim)?;
    }
    let hyper = &cfg.hyper;
    let b = hyper.batch_size.min(train_set.len());
    let steps_per_epoch = train_set.len().div_ceil(b);
    let total_steps = steps_per_epoch * hyper.epochs;

    let mut model = model;
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut adv_counter = 0usize;
    let mut step = 0usize;

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut aug_rng = seed::rng(seed, &[tag::AUGMENT, epoch as u64]);
        let mut wm_rng = seed::rng(seed, &[tag::WATERMARK, epoch as u64]);
        let mut sums = [0.0f64; 4];
        let (mut correct, mut seen) = (0usize, 0usize);
        let mut lr = hyper.learning_rate;
        for idx in order.chunks(b) {
            lr = lr_schedule(hyper.schedule, step, total_steps, hyper.learning_rate);
            let bl = train_step(&mut model, train_set, idx, key, cfg, lr, &mut aug_rng, &mut wm_rng, &mut adv_counter)
                .map_err(|e| match e {
                    Error::NonFinite(d) => Error::Diverged { epoch, detail: d },
                    other => other,
                })?;
            for (s, v) in sums.iter_mut().zip([bl.task, bl.trigger, bl.adversarial, bl.signature]) {
                *s += v;
            }
            correct += bl.correct;
            seen += bl.clean;
            step += 1;
        }
        let val_accuracy = accuracy(&model, val_set)?;
        let n = steps_per_epoch as f64;
        let log = EpochLog {
            epoch,
            lr,
            task_loss: sums[0] / n,
            trigger_loss: sums[1] / n,
            adversarial_loss: sums[2] / n,
            signature_loss: sums[3] / n,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
        };
        observe(&log);
        history.push(log);
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.early_stop_patience {
                break;
            }
        }
    }
    best.params.reset_optimizer();
    Ok(TrainOutcome { model: best, best_epoch, best_val_accuracy: best_val, history })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    set: &LabeledSet,
    idx: &[usize],
    key: Option<&WatermarkKey>,
    cfg: &TrainConfig,
    lr: f64,
    aug_rng: &mut seed::Rng,
    wm_rng: &mut seed::Rng,
    adv_counter: &mut usize,
) -> Result<BatchLoss> {
    let mut rows: Vec<LogMelSpectrogram> = idx.iter().map(|&i| light_spec_aug(&set.specs[i], aug_rng, &cfg.augment).0).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
    let wm = &cfg.wm;
    let mut trig_rows = Vec::new();
    let mut adv_rows = Vec::new();
    if let Some(k) = key.filter(|_| wm.trigger || wm.adversarial) {
        let n_wm = wm_rows(wm_rng, wm.p_wm, rows.len());
        let mut picked: Vec<usize> = (0..rows.len()).collect();
        picked.shuffle(wm_rng);
        picked.truncate(n_wm);
        picked.sort_unstable();
        for r in picked {
            let triggered = apply_trigger(&rows[r], k)?;
            // Deterministic interleave gives exactly `adv_fraction` of rows over a run.
            let before = (*adv_counter as f64 * wm.adv_fraction).floor();
            *adv_counter += 1;
            let adversarial = wm.adversarial && ((*adv_counter as f64 * wm.adv_fraction).floor() > before || !wm.trigger);
            if adversarial {
                rows[r] = craft_adversarial(model, &triggered, k)?;
                adv_rows.push(r);
            } else if wm.trigger {
                rows[r] = triggered;
                trig_rows.push(r);
            }
        }
    }
    let clean_rows: Vec<usize> = (0..rows.len()).filter(|r| !trig_rows.contains(r) && !adv_rows.contains(r)).collect();
    let clean_labels: Vec<usize> = clean_rows.iter().map(|&r| labels[r]).collect();
    let y_wm = model.wm_class();

    let refs: Vec<&LogMelSpectrogram> = rows.iter().collect();
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(&refs));
    let (logits, feats) = model.forward(&mut g, x)?;
    let clean_logits = g.select_rows(logits, &clean_rows)?;
    let correct = g
        .value(clean_logits)
        .data()
        .chunks(model.outputs())
        .zip(&clean_labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let hyper = &cfg.hyper;
    let task = if hyper.focal_gamma > 0.0 {
        g.focal(clean_logits, &clean_labels, hyper.focal_gamma as f32)?
    } else {
        g.smooth_ce(clean_logits, &clean_labels, hyper.label_smoothing as f32)?
    };
    let mut loss = task;
    let mut out = BatchLoss { task: g.value(task).item() as f64, trigger: 0.0, adversarial: 0.0, signature: 0.0, correct, clean: clean_rows.len() };
    for (rows_, weight, slot) in [(&trig_rows, wm.trigger_weight, 0), (&adv_rows, wm.adversarial_weight, 1)] {
        if rows_.is_empty() {
            continue;
        }
        let l = g.select_rows(logits, rows_)?;
        let ce = g.smooth_ce(l, &vec![y_wm; rows_.len()], 0.0)?;
        let v = g.value(ce).item() as f64;
        if slot == 0 {
            out.trigger = v;
        } else {
            out.adversarial = v;
        }
        let scaled = g.scale(ce, weight as f32);
        loss = g.add(loss, scaled)?;
    }
    if let Some(k) = key.filter(|_| wm.signature) {
        let f = g.select_rows(feats, &clean_rows)?;
        let sig = g.signature(f, &k.v, k.lambda)?;
        out.signature = g.value(sig).item() as f64;
        loss = g.add(loss, sig)?;
    }
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", g.value(loss).item())));
    }
    let grads = g.backward(loss)?;
    if grads.params().values().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("parameter gradients".into()));
    }
    adamw_step(&mut model.params, &grads, lr, hyper.weight_decay)?;
    Ok(out)
}

/// Continues task-only training on clean data with a constant learning rate.
pub fn finetune(model: &Model, set: &LabeledSet, epochs: usize, lr: f64, seed: u64) -> Result<Model> {
    let mut m = model.clone();
    if epochs == 0 {
        return Ok(m);
    }
    check_labels(set, m.num_device_classes, "finetune set")?;
    if set.is_empty() {
        return Err(Error::Empty("finetune set".into()));
    }
    let cfg = TrainConfig {
        hyper: TrainHyper { learning_rate: lr, schedule: crate::nn::Schedule::Constant, epochs, ..TrainHyper::default() },
        wm: WmConfig::default(),
        augment: AugmentConfig::default(),
    };
    cfg.hyper.validate()?;
    m.params.reset_optimizer();
    let b = cfg.hyper.batch_size.min(set.len());
    let mut counter = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[tag::SHUFFLE, epoch as u64]));
        let mut aug_rng = seed::rng(seed, &[tag::AUGMENT, epoch as u64]);
        let mut wm_rng = seed::rng(seed, &[tag::WATERMARK, epoch as u64]);
        for idx in order.chunks(b) {
            train_step(&mut m, set, idx, None, &cfg, lr, &mut aug_rng, &mut wm_rng, &mut counter).map_err(|e| match e {
                Error::NonFinite(d) => Error::Diverged { epoch, detail: d },
                other => other,
            })?;
        }
    }
    m.params.reset_optimizer();
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub total: u64,
    pub per_class: Vec<ClassStats>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub min_class: Averages,
    pub max_class: Averages,
    /// Rows are true classes `0..C`, columns predicted classes `0..=C`.
    pub confusion: Vec<Vec<u64>>,
    /// Fraction of predictions that hit the reserved class.
    pub wm_prediction_rate: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds the report from raw predictions. Predictions may name the
/// reserved class `C`; labels may not. Undefined precision (no predictions
/// of a class) counts as 0.
pub fn report_from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut confusion = vec![vec![0u64; classes + 1]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= classes || p > classes {
            return Err(Error::InvalidConfig(format!("label {y} / prediction {p} outside the {classes}-class range")));
        }
        confusion[y][p] += 1;
    }
    let total = preds.len() as u64;
    let hits: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassStats> = (0..classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassStats { precision, recall, f1, support }
        })
        .collect();
    let k = classes as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|s| s.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|s| s.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|s| s.f1).sum::<f64>() / k,
    };
    let n = total as f64;
    let weighted_avg = Averages {
        precision: per_class.iter().map(|s| s.precision * s.support as f64).sum::<f64>() / n,
        // support·recall is the class's true-positive count, so this is hits/n.
        recall: hits as f64 / n,
        f1: per_class.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / n,
    };
    let fold = |f: fn(f64, f64) -> f64, init: f64| Averages {
        precision: per_class.iter().map(|s| s.precision).fold(init, f),
        recall: per_class.iter().map(|s| s.recall).fold(init, f),
        f1: per_class.iter().map(|s| s.f1).fold(init, f),
    };
    let wm_hits: u64 = confusion.iter().map(|row| row[classes]).sum();
    Ok(EvalReport {
        accuracy: hits as f64 / n,
        total,
        min_class: fold(f64::min, f64::INFINITY),
        max_class: fold(f64::max, f64::NEG_INFINITY),
        per_class,
        macro_avg,
        weighted_avg,
        confusion,
        wm_prediction_rate: wm_hits as f64 / n,
    })
}

pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<EvalReport> {
    check_labels(set, model.num_device_classes, "evaluation set")?;
    let refs: Vec<_> = set.specs.iter().collect();
    let preds = model.predict_batch(&refs)?;
    report_from_predictions(&preds, &set.labels, model.num_device_classes)
}
