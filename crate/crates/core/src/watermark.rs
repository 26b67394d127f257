//! Ownership watermarks: a secret trigger block mapped to the reserved
//! class, an adversarially hardened variant of it, and a white-box
//! penultimate-feature signature.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_ascent, sanitize_chain, Sanitize};
use crate::classifier::Model;
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::nn::graph::cosine;
use crate::seed::{self, tag};

pub const SPEC_SHAPE: (usize, usize) = (32, 65);
pub const ASR_THRESHOLD: f64 = 0.9;
pub const COSINE_THRESHOLD: f64 = 0.5;
pub const MIN_PROBES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub mel: usize,
    pub frame: usize,
    pub size: usize,
    pub amplitude: f32,
}

/// L∞ budget of the adversarial trigger.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvBudget {
    pub epsilon: f32,
    pub steps: usize,
    pub step_size: f32,
}

impl Default for AdvBudget {
    fn default() -> Self {
        AdvBudget { epsilon: 0.1, steps: 5, step_size: 0.025 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub key_seed: u64,
    pub trigger: TriggerSpec,
    pub y_wm: usize,
    pub adv: AdvBudget,
    /// Unit signature direction in penultimate-feature space.
    pub v: Vec<f32>,
    pub lambda: f32,
    pub probes: ProbeSpec,
}

pub fn gen_key(key_seed: u64, num_device_classes: usize, feature_dim: usize) -> Result<WatermarkKey> {
    if num_device_classes < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 device classes, got {num_device_classes}")));
    }
    if feature_dim < 8 {
        return Err(Error::InvalidConfig(format!("feature_dim must be ≥ 8, got {feature_dim}")));
    }
    let mut rng = seed::rng(key_seed, &[tag::KEY]);
    let size = 4;
    let mel = rng.gen_range(0..=SPEC_SHAPE.0 - size);
    let frame = rng.gen_range(0..=SPEC_SHAPE.1 - size);
    let raw: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v = raw.iter().map(|x| (x / norm) as f32).collect();
    Ok(WatermarkKey {
        key_seed,
        trigger: TriggerSpec { mel, frame, size, amplitude: 3.0 },
        y_wm: num_device_classes,
        adv: AdvBudget::default(),
        v,
        lambda: 0.05,
        probes: ProbeSpec { count: 64, seed: seed::derive(key_seed, &[tag::PROBES]) },
    })
}

impl WatermarkKey {
    pub fn check_compatible(&self, num_device_classes: usize, feature_dim: usize) -> Result<()> {
        if self.y_wm != num_device_classes {
            return Err(Error::InvalidConfig(format!("key reserves class {} but the model has {num_device_classes} device classes", self.y_wm)));
        }
        if self.v.len() != feature_dim {
            return Err(Error::InvalidConfig(format!("key vector has {} dims, model features have {feature_dim}", self.v.len())));
        }
        Ok(())
    }

    pub fn block_contains(&self, mel: usize, frame: usize) -> bool {
        let t = &self.trigger;
        (t.mel..t.mel + t.size).contains(&mel) && (t.frame..t.frame + t.size).contains(&frame)
    }

    /// Cells of the trigger block as flat row-major indices into a
    /// `frames`-wide grid.
    pub fn block_cells(&self, frames: usize) -> Vec<usize> {
        let t = &self.trigger;
        (t.mel..t.mel + t.size).flat_map(|m| (t.frame..t.frame + t.size).map(move |f| m * frames + f)).collect()
    }
}

/// Overwrites the key's block with the trigger amplitude.
pub fn apply_trigger(spec: &LogMelSpectrogram, key: &WatermarkKey) -> Result<LogMelSpectrogram> {
    let t = &key.trigger;
    if t.mel + t.size > spec.n_mels || t.frame + t.size > spec.frames {
        return Err(Error::shape(format!(
            "trigger block at ({}, {}) size {} outside a {}×{} spectrogram",
            t.mel, t.frame, t.size, spec.n_mels, spec.frames
        )));
    }
    let mut out = spec.clone();
    for i in key.block_cells(spec.frames) {
        out.values[i] = t.amplitude;
    }
    Ok(out)
}

/// Worst-case L∞ perturbation of already-triggered inputs against the
/// watermark label, with the trigger block re-stamped after every step.
pub fn craft_adversarial_batch(model: &Model, triggered: &[&LogMelSpectrogram], key: &WatermarkKey) -> Result<Vec<LogMelSpectrogram>> {
    let labels = vec![key.y_wm; triggered.len()];
    let restamp = |s: &mut LogMelSpectrogram| {
        for i in key.block_cells(s.frames) {
            s.values[i] = key.trigger.amplitude;
        }
    };
    pgd_ascent(model, triggered, &labels, key.adv.epsilon, key.adv.steps, key.adv.step_size, &restamp)
}

pub fn craft_adversarial(model: &Model, triggered: &LogMelSpectrogram, key: &WatermarkKey) -> Result<LogMelSpectrogram> {
    Ok(craft_adversarial_batch(model, &[triggered], key)?.pop().expect("one output per input"))
}

/// `λ(1 − cos(f, v))`.
pub fn signature_loss(feature: &[f32], v: &[f32], lambda: f32) -> Result<f64> {
    if feature.len() != v.len() {
        return Err(Error::shape(format!("feature has {} dims, key vector {}", feature.len(), v.len())));
    }
    let f: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
    let cos = cosine(&f, v).ok_or_else(|| Error::Metric("signature of a zero feature vector".into()))?;
    Ok(lambda as f64 * (1.0 - cos))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationKind {
    Trigger,
    AdversarialTrigger,
    SanitizedTrigger,
    Signature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub kind: VerificationKind,
    pub score: f64,
    pub threshold: f64,
    pub pass: bool,
    pub probe_count: usize,
}

impl VerificationResult {
    fn new(kind: VerificationKind, score: f64, threshold: f64, probe_count: usize) -> Self {
        VerificationResult { kind, score, threshold, pass: score >= threshold, probe_count }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMode {
    Plain,
    Adversarial,
    /// Trigger, then the listed filters in order.
    Sanitized { steps: Vec<Sanitize>, seed: u64 },
}

fn check_probes(probes: &[LogMelSpectrogram]) -> Result<()> {
    if probes.len() < MIN_PROBES {
        return Err(Error::Empty(format!("verification needs at least {MIN_PROBES} probes, got {}", probes.len())));
    }
    if let Some(p) = probes.iter().find(|p| p.shape() != SPEC_SHAPE) {
        return Err(Error::shape(format!("probe shape {:?}, expected {:?}", p.shape(), SPEC_SHAPE)));
    }
    Ok(())
}

/// Black-box trigger check: fraction of triggered probes classified as the
/// reserved class.
pub fn verify_trigger(model: &Model, key: &WatermarkKey, probes: &[LogMelSpectrogram], mode: &VerifyMode) -> Result<VerificationResult> {
    check_probes(probes)?;
    key.check_compatible(model.num_device_classes, model.preset.feature_dim)?;
    let triggered = probes.iter().map(|p| apply_trigger(p, key)).collect::<Result<Vec<_>>>()?;
    let (inputs, kind) = match mode {
        VerifyMode::Plain => (triggered, VerificationKind::Trigger),
        VerifyMode::Adversarial => {
            let refs: Vec<_> = triggered.iter().collect();
            (craft_adversarial_batch(model, &refs, key)?, VerificationKind::AdversarialTrigger)
        }
        VerifyMode::Sanitized { steps, seed: s } => {
            let out = triggered
                .iter()
                .enumerate()
                .map(|(i, t)| sanitize_chain(t, steps, &mut seed::rng(*s, &[tag::SANITIZE, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            (out, VerificationKind::SanitizedTrigger)
        }
    };
    let refs: Vec<_> = inputs.iter().collect();
    let preds = model.predict_batch(&refs)?;
    let hits = preds.iter().filter(|&&p| p == key.y_wm).count();
    Ok(VerificationResult::new(kind, hits as f64 / probes.len() as f64, ASR_THRESHOLD, probes.len()))
}

/// White-box check: cosine between the mean penultimate feature over the
/// probes and the key direction.
pub fn verify_signature(model: &Model, key: &WatermarkKey, probes: &[LogMelSpectrogram]) -> Result<VerificationResult> {
    check_probes(probes)?;
    key.check_compatible(model.num_device_classes, model.preset.feature_dim)?;
    let refs: Vec<_> = probes.iter().collect();
    let score = signature_cosine(model, &refs, &key.v)?;
    Ok(VerificationResult::new(VerificationKind::Signature, score, COSINE_THRESHOLD, probes.len()))
}

pub fn signature_cosine(model: &Model, probes: &[&LogMelSpectrogram], v: &[f32]) -> Result<f64> {
    let feats = model.features(probes)?;
    let d = model.preset.feature_dim;
    let n = probes.len();
    let mut mean = vec![0.0f64; d];
    for row in feats.data().chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let cos = cosine(&mean, v).ok_or_else(|| Error::Metric("mean probe feature is zero".into()))?;
    Ok(cos.clamp(-1.0, 1.0))
}

/// Deterministic choice of `count` distinct probe indices from a pool.
pub fn probe_indices(key: &WatermarkKey, pool_len: usize, count: usize) -> Result<Vec<usize>> {
    if count > pool_len {
        return Err(Error::Empty(format!("probe pool holds {pool_len} items, {count} requested")));
    }
    let mut idx = index::sample(&mut seed::rng(key.probes.seed, &[]), pool_len, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub const KEY_MAGIC: &[u8; 4] = b"RFWK";
pub const KEY_VERSION: u32 = 1;

/// Versioned binary key file: magic, version, seed, trigger tuple, `y_wm`,
/// budget, probe spec, `λ`, `v` blob, CRC32. All little-endian.
pub fn encode_key(key: &WatermarkKey) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(KEY_MAGIC);
    b.extend_from_slice(&KEY_VERSION.to_le_bytes());
    b.extend_from_slice(&key.key_seed.to_le_bytes());
    let t = &key.trigger;
    for x in [t.mel, t.frame, t.size, key.y_wm, key.adv.steps, key.probes.count] {
        b.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for x in [t.amplitude, key.adv.epsilon, key.adv.step_size, key.lambda] {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b.extend_from_slice(&key.probes.seed.to_le_bytes());
    b.extend_from_slice(&(key.v.len() as u32).to_le_bytes());
    for x in &key.v {
        b.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

pub fn decode_key(bytes: &[u8]) -> std::result::Result<WatermarkKey, String> {
    if bytes.len() < 8 || &bytes[..4] != KEY_MAGIC {
        return Err("bad magic".into());
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err("CRC mismatch".into());
    }
    let mut pos = 4;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = body.get(pos..pos + n).ok_or("truncated key file")?;
        pos += n;
        Ok(s)
    };
    let u32_ = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_(take(4)?);
    if version != KEY_VERSION {
        return Err(format!("unsupported key version {version}"));
    }
    let key_seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut ints = [0usize; 6];
    for x in ints.iter_mut() {
        *x = u32_(take(4)?) as usize;
    }
    let mut floats = [0f32; 4];
    for x in floats.iter_mut() {
        *x = f32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    }
    let probe_seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let d = u32_(take(4)?) as usize;
    let v = take(d * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    if pos != body.len() {
        return Err("trailing bytes in key file".into());
    }
    let [mel, frame, size, y_wm, steps, count] = ints;
    let [amplitude, epsilon, step_size, lambda] = floats;
    Ok(WatermarkKey {
        key_seed,
        trigger: TriggerSpec { mel, frame, size, amplitude },
        y_wm,
        adv: AdvBudget { epsilon, steps, step_size },
        v,
        lambda,
        probes: ProbeSpec { count, seed: probe_seed },
    })
}

pub fn save_key(key: &WatermarkKey, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_key(key)).map_err(|e| Error::io(path, e))
}

pub fn load_key(path: &Path) -> Result<WatermarkKey> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_key(&bytes).map_err(|r| Error::format(path, r))
}
