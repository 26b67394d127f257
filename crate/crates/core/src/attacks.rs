//! The adversary: weight tampering (prune, quantize, fine-tune), input
//! sanitization and L∞ input evasion, plus the report that scores each
//! attack against the watermarks and the guard.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, finetune, LabeledSet, Model};
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::guard::{anomaly_scores, GuardCalibration, Vae};
use crate::nn::{batch_tensor, Graph, ParamKind};
use crate::seed::{self, tag};
use crate::watermark::{signature_cosine, verify_trigger, VerifyMode, WatermarkKey};

/// Zeroes the `⌊ρ·n⌋` smallest-magnitude entries across every weight
/// tensor (norm and bias parameters are exempt). Ties break by parameter
/// name, then position.
pub fn prune(model: &Model, rho: f64) -> Result<Model> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("prune fraction must lie in [0, 1), got {rho}")));
    }
    let mut out = model.clone();
    let mut entries: Vec<(f32, usize, usize)> = Vec::new();
    let names: Vec<String> = out.params.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(n, _)| n.clone()).collect();
    for (t, name) in names.iter().enumerate() {
        for (i, &w) in out.params.value(name)?.data().iter().enumerate() {
            entries.push((w.abs(), t, i));
        }
    }
    let k = (rho * entries.len() as f64).floor() as usize;
    if k == 0 {
        return Ok(out);
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, t, i) in &entries[..k] {
        out.params.get_mut(&names[t])?.value.data_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Per-tensor symmetric scale `max|w| / (2^(bits−1) − 1)`.
pub fn quant_scale(values: &[f32], bits: u32) -> f32 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    max / ((1u32 << (bits - 1)) - 1) as f32
}

/// Integer grid level of `w`, computed in f64 so the half-step rounding
/// bound holds exactly before the final f32 store.
pub fn quant_level(w: f32, scale: f32, levels: f64) -> f64 {
    (w as f64 / scale as f64).round_ties_even().clamp(-levels, levels)
}

pub fn dequantize(level: f64, scale: f32) -> f32 {
    (level * scale as f64) as f32
}

/// Symmetric uniform quantization of every weight tensor with
/// round-half-to-even, dequantized back to f32 storage.
pub fn quantize(model: &Model, bits: u32) -> Result<Model> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidConfig(format!("quantization bits must lie in [2, 16], got {bits}")));
    }
    let mut out = model.clone();
    let levels = ((1u32 << (bits - 1)) - 1) as f64;
    for (_, p) in out.params.iter_mut().filter(|(_, p)| p.kind == ParamKind::Weight) {
        let scale = quant_scale(p.value.data(), bits);
        if scale == 0.0 {
            continue;
        }
        for w in p.value.data_mut() {
            *w = dequantize(quant_level(*w, scale, levels), scale);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Sanitize {
    GaussianBlur { sigma: f64 },
    Median3,
    Noise { sigma: f64 },
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur truncated at 3σ with edge replication.
pub fn gaussian_blur(spec: &LogMelSpectrogram, sigma: f64) -> LogMelSpectrogram {
    if sigma <= 0.0 {
        return spec.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = spec.shape();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut rows = vec![0.0f64; h * w];
    for m in 0..h {
        for f in 0..w {
            rows[m * w + f] = k.iter().enumerate().map(|(j, kw)| kw * spec.at(m, clamp(f as i64 + j as i64 - r, w)) as f64).sum();
        }
    }
    let mut out = spec.clone();
    for m in 0..h {
        for f in 0..w {
            let v: f64 = k.iter().enumerate().map(|(j, kw)| kw * rows[clamp(m as i64 + j as i64 - r, h) * w + f]).sum();
            out.set(m, f, v as f32);
        }
    }
    out
}

/// 3×3 median filter with edge replication.
pub fn median3(spec: &LogMelSpectrogram) -> LogMelSpectrogram {
    let (h, w) = spec.shape();
    let mut out = spec.clone();
    let mut win = [0.0f32; 9];
    for m in 0..h {
        for f in 0..w {
            let mut i = 0;
            for dm in -1i64..=1 {
                for df in -1i64..=1 {
                    let mm = (m as i64 + dm).clamp(0, h as i64 - 1) as usize;
                    let ff = (f as i64 + df).clamp(0, w as i64 - 1) as usize;
                    win[i] = spec.at(mm, ff);
                    i += 1;
                }
            }
            win.sort_unstable_by(f32::total_cmp);
            out.set(m, f, win[4]);
        }
    }
    out
}

pub fn sanitize_input(spec: &LogMelSpectrogram, method: &Sanitize, rng: &mut impl Rng) -> Result<LogMelSpectrogram> {
    if spec.shape() != (32, 65) {
        return Err(Error::shape(format!("sanitize expects a 32×65 spectrogram, got {:?}", spec.shape())));
    }
    Ok(match *method {
        Sanitize::GaussianBlur { sigma } => gaussian_blur(spec, sigma),
        Sanitize::Median3 => median3(spec),
        Sanitize::Noise { sigma } => {
            let mut out = spec.clone();
            for v in out.values.iter_mut() {
                *v += (rng.sample::<f64, _>(StandardNormal) * sigma) as f32;
            }
            out
        }
    })
}

pub fn sanitize_chain(spec: &LogMelSpectrogram, steps: &[Sanitize], rng: &mut impl Rng) -> Result<LogMelSpectrogram> {
    let mut out = spec.clone();
    for s in steps {
        out = sanitize_input(&out, s, rng)?;
    }
    Ok(out)
}

const PGD_CHUNK: usize = 64;

/// Signed-gradient ascent on the batch cross-entropy against `labels`,
/// projected onto the L∞ ball of radius `epsilon` around the inputs after
/// every step; `project` runs after the ball projection.
pub fn pgd_ascent(
    model: &Model,
    inputs: &[&LogMelSpectrogram],
    labels: &[usize],
    epsilon: f32,
    steps: usize,
    step_size: f32,
    project: &dyn Fn(&mut LogMelSpectrogram),
) -> Result<Vec<LogMelSpectrogram>> {
    if inputs.len() != labels.len() {
        return Err(Error::shape(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    let mut out: Vec<LogMelSpectrogram> = inputs.iter().map(|&s| s.clone()).collect();
    if epsilon <= 0.0 || steps == 0 {
        return Ok(out);
    }
    for (chunk, (orig, ys)) in out.chunks_mut(PGD_CHUNK).zip(inputs.chunks(PGD_CHUNK).zip(labels.chunks(PGD_CHUNK))) {
        for _ in 0..steps {
            let refs: Vec<&LogMelSpectrogram> = chunk.iter().collect();
            let mut g = Graph::frozen();
            let x = g.input(batch_tensor(&refs));
            let (logits, _) = model.forward(&mut g, x)?;
            let loss = g.smooth_ce(logits, ys, 0.0)?;
            let grad = g.backward(loss)?.take_input(x).ok_or_else(|| Error::Graph("no input gradient".into()))?;
            if !grad.is_finite() {
                return Err(Error::NonFinite("input gradient during PGD".into()));
            }
            let per = grad.numel() / chunk.len();
            for (i, (s, o)) in chunk.iter_mut().zip(orig.iter()).enumerate() {
                let gs = &grad.data()[i * per..(i + 1) * per];
                for ((v, &o), &gv) in s.values.iter_mut().zip(&o.values).zip(gs) {
                    let stepped = if gv > 0.0 {
                        *v + step_size
                    } else if gv < 0.0 {
                        *v - step_size
                    } else {
                        *v
                    };
                    *v = stepped.clamp(o - epsilon, o + epsilon);
                }
                project(s);
            }
        }
    }
    Ok(out)
}

/// Untargeted L∞ PGD against the true labels with step `2.5·ε/steps`.
/// Returns the perturbed inputs and whether each prediction changed.
pub fn evade(model: &Model, specs: &[&LogMelSpectrogram], labels: &[usize], epsilon: f32, steps: usize) -> Result<(Vec<LogMelSpectrogram>, Vec<bool>)> {
    let step = if steps > 0 { 2.5 * epsilon / steps as f32 } else { 0.0 };
    let adv = pgd_ascent(model, specs, labels, epsilon, steps, step, &|_| {})?;
    let before = model.predict_batch(specs)?;
    let refs: Vec<_> = adv.iter().collect();
    let after = model.predict_batch(&refs)?;
    let changed = before.iter().zip(&after).map(|(a, b)| a != b).collect();
    Ok((adv, changed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Prune { rho: f64 },
    Quantize { bits: u32 },
    Finetune { epochs: usize, lr: f64 },
    Sanitize { steps: Vec<Sanitize> },
    /// `max_inputs` caps how many correctly classified inputs are attacked.
    Evade { epsilon: f32, steps: usize, max_inputs: usize },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Prune { .. } => "prune",
            AttackSpec::Quantize { .. } => "quantize",
            AttackSpec::Finetune { .. } => "finetune",
            AttackSpec::Sanitize { .. } => "sanitize",
            AttackSpec::Evade { .. } => "evade",
        }
    }

    pub fn is_input_side(&self) -> bool {
        matches!(self, AttackSpec::Sanitize { .. } | AttackSpec::Evade { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrePost {
    pub pre: f64,
    pub post: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackSpec,
    pub clean_accuracy: PrePost,
    pub trigger_asr: Option<PrePost>,
    pub signature_cosine: Option<PrePost>,
    /// Fraction of attacked inputs the guard flags (input-side attacks).
    pub guard_flag_rate: Option<f64>,
    /// Fraction of attacked, originally correct inputs now misclassified.
    pub misclassification_rate: Option<f64>,
}

/// Everything an attack is scored against.
pub struct AttackContext<'a> {
    pub model: &'a Model,
    pub key: Option<&'a WatermarkKey>,
    pub eval_set: &'a LabeledSet,
    pub probes: &'a [LogMelSpectrogram],
    /// Clean data available to a fine-tuning adversary.
    pub finetune_set: &'a LabeledSet,
    pub guard: Option<(&'a Vae, &'a GuardCalibration)>,
    pub seed: u64,
}

struct Scores {
    accuracy: f64,
    asr: Option<f64>,
    cosine: Option<f64>,
}

fn score_model(ctx: &AttackContext, model: &Model) -> Result<Scores> {
    let (asr, cosine) = match ctx.key {
        Some(k) => {
            let refs: Vec<_> = ctx.probes.iter().collect();
            (Some(verify_trigger(model, k, ctx.probes, &VerifyMode::Plain)?.score), Some(signature_cosine(model, &refs, &k.v)?))
        }
        None => (None, None),
    };
    Ok(Scores { accuracy: accuracy(model, ctx.eval_set)?, asr, cosine })
}

fn flag_rate(ctx: &AttackContext, inputs: &[&LogMelSpectrogram]) -> Result<Option<f64>> {
    match ctx.guard {
        Some((vae, cal)) if !inputs.is_empty() => {
            let scores = anomaly_scores(vae, inputs, cal.alpha)?;
            Ok(Some(scores.iter().filter(|&&s| s > cal.tau).count() as f64 / scores.len() as f64))
        }
        _ => Ok(None),
    }
}

fn pre_post(pre: Option<f64>, post: Option<f64>) -> Option<PrePost> {
    Some(PrePost { pre: pre?, post: post? })
}

/// Runs each attack against the context's model; baseline scores are
/// computed once and shared.
pub fn run_attacks(ctx: &AttackContext, specs: &[AttackSpec]) -> Result<Vec<AttackReport>> {
    if specs.is_empty() {
        return Ok(Vec::new());
    }
    let base = score_model(ctx, ctx.model)?;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| run_one(ctx, &base, spec, seed::derive(ctx.seed, &[tag::ATTACK, i as u64])))
        .collect()
}

fn run_one(ctx: &AttackContext, base: &Scores, spec: &AttackSpec, seed: u64) -> Result<AttackReport> {
    let weight_side = |m: Model| -> Result<AttackReport> {
        let post = score_model(ctx, &m)?;
        Ok(AttackReport {
            attack: spec.clone(),
            clean_accuracy: PrePost { pre: base.accuracy, post: post.accuracy },
            trigger_asr: pre_post(base.asr, post.asr),
            signature_cosine: pre_post(base.cosine, post.cosine),
            guard_flag_rate: None,
            misclassification_rate: None,
        })
    };
    match spec {
        AttackSpec::Prune { rho } => weight_side(prune(ctx.model, *rho)?),
        AttackSpec::Quantize { bits } => weight_side(quantize(ctx.model, *bits)?),
        AttackSpec::Finetune { epochs, lr } => weight_side(finetune(ctx.model, ctx.finetune_set, *epochs, *lr, seed)?),
        AttackSpec::Sanitize { steps } => {
            let clean = ctx
                .eval_set
                .specs
                .iter()
                .enumerate()
                .map(|(i, s)| sanitize_chain(s, steps, &mut seed::rng(seed, &[tag::SANITIZE, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            let post_set = LabeledSet { specs: clean, labels: ctx.eval_set.labels.clone() };
            let post_acc = accuracy(ctx.model, &post_set)?;
            let (asr, cos) = match ctx.key {
                Some(k) => {
                    let mode = VerifyMode::Sanitized { steps: steps.clone(), seed };
                    let asr = verify_trigger(ctx.model, k, ctx.probes, &mode)?.score;
                    let probes = ctx
                        .probes
                        .iter()
                        .enumerate()
                        .map(|(i, s)| sanitize_chain(s, steps, &mut seed::rng(seed, &[tag::PROBES, i as u64])))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<_> = probes.iter().collect();
                    (Some(asr), Some(signature_cosine(ctx.model, &refs, &k.v)?))
                }
                None => (None, None),
            };
            let refs: Vec<_> = post_set.specs.iter().collect();
            Ok(AttackReport {
                attack: spec.clone(),
                clean_accuracy: PrePost { pre: base.accuracy, post: post_acc },
                trigger_asr: pre_post(base.asr, asr),
                signature_cosine: pre_post(base.cosine, cos),
                guard_flag_rate: flag_rate(ctx, &refs)?,
                misclassification_rate: None,
            })
        }
        AttackSpec::Evade { epsilon, steps, max_inputs } => {
            let refs: Vec<_> = ctx.eval_set.specs.iter().collect();
            let preds = ctx.model.predict_batch(&refs)?;
            let correct: Vec<usize> = (0..refs.len()).filter(|&i| preds[i] == ctx.eval_set.labels[i]).take(*max_inputs).collect();
            if correct.is_empty() {
                return Err(Error::Empty("no correctly classified inputs to evade".into()));
            }
            let inputs: Vec<_> = correct.iter().map(|&i| refs[i]).collect();
            let labels: Vec<_> = correct.iter().map(|&i| ctx.eval_set.labels[i]).collect();
            let (adv, changed) = evade(ctx.model, &inputs, &labels, *epsilon, *steps)?;
            let mis = changed.iter().filter(|&&c| c).count() as f64 / changed.len() as f64;
            let adv_refs: Vec<_> = adv.iter().collect();
            let post_acc = {
                let n_wrong = changed.iter().filter(|&&c| c).count();
                let total_correct = preds.iter().zip(&ctx.eval_set.labels).filter(|(p, y)| p == y).count();
                (total_correct - n_wrong) as f64 / refs.len() as f64
            };
            Ok(AttackReport {
                attack: spec.clone(),
                clean_accuracy: PrePost { pre: base.accuracy, post: post_acc },
                trigger_asr: None,
                signature_cosine: None,
                guard_flag_rate: flag_rate(ctx, &adv_refs)?,
                misclassification_rate: Some(mis),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_model, ArchPreset, PresetName};

    fn grid(seed: u64) -> LogMelSpectrogram {
        let mut rng = seed::rng(seed, &[31]);
        LogMelSpectrogram::new(32, 65, (0..32 * 65).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    }

    fn model() -> Model {
        build_model(&ArchPreset::named(PresetName::MiniResnet), 10, 17).unwrap()
    }

    fn prunable(m: &Model) -> Vec<f32> {
        m.params.iter().filter(|(_, p)| p.kind == ParamKind::Weight).flat_map(|(_, p)| p.value.data().to_vec()).collect()
    }

    #[test]
    fn prune_counts_and_identity() {
        let m = model();
        assert_eq!(prune(&m, 0.0).unwrap(), m);
        let n = prunable(&m).len();
        let zeros = |m: &Model| prunable(m).iter().filter(|&&w| w == 0.0).count();
        assert_eq!(zeros(&m), 0);
        let p = prune(&m, 0.3).unwrap();
        assert_eq!(zeros(&p), (0.3 * n as f64).floor() as usize);
        // Norm and bias parameters are untouched.
        for (name, par) in p.params.iter().filter(|(_, p)| p.kind != ParamKind::Weight) {
            assert_eq!(par.value, m.params.value(name).unwrap().clone());
        }
        let mut last = n;
        for rho in [0.1, 0.2, 0.5, 0.9] {
            let nz = n - zeros(&prune(&m, rho).unwrap());
            assert!(nz <= last);
            last = nz;
        }
        assert!(prune(&m, 1.0).is_err());
    }

    #[test]
    fn quantize_grid_and_error_bound() {
        let m = model();
        let q16 = quantize(&m, 16).unwrap();
        for ((name, a), (_, b)) in m.params.iter().zip(q16.params.iter()) {
            if a.kind != ParamKind::Weight {
                assert_eq!(a.value, b.value, "{name}");
                continue;
            }
            let max = a.value.max_abs();
            let bound = max / 32767.0 * 0.5;
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                // Plus half an f32 ulp from storing the dequantized value.
                let tol = bound as f64 + (x.abs() * f32::EPSILON) as f64;
                assert!(((x - y).abs() as f64) <= tol, "{name}: {x} vs {y}, bound {bound}");
            }
        }
        for bits in [2, 4, 8] {
            let q = quantize(&m, bits).unwrap();
            for ((_, a), (_, b)) in m.params.iter().zip(q.params.iter()).filter(|((_, p), _)| p.kind == ParamKind::Weight) {
                let scale = quant_scale(a.value.data(), bits);
                let levels = ((1u32 << (bits - 1)) - 1) as f64;
                for &y in b.value.data() {
                    let k = quant_level(y, scale, levels);
                    assert_eq!(k.fract(), 0.0);
                    assert_eq!(dequantize(k, scale), y);
                }
            }
        }
        assert!(quantize(&m, 1).is_err() && quantize(&m, 17).is_err());
    }

    #[test]
    fn two_bit_grid_is_exact() {
        let mut m = model();
        let w = &mut m.params.get_mut("head.w").unwrap().value;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = [-1.0, 0.0, 1.0][i % 3];
        }
        let q = quantize(&m, 2).unwrap();
        assert_eq!(q.params.value("head.w").unwrap(), m.params.value("head.w").unwrap());
    }

    #[test]
    fn round_half_even() {
        let mut m = model();
        let w = &mut m.params.get_mut("head.w").unwrap().value;
        // Scale becomes 127/127 = 1 at 8 bits: 0.5 → 0, 1.5 → 2, 2.5 → 2.
        let vals = [127.0, 0.5, 1.5, 2.5, -2.5];
        for (v, x) in w.data_mut().iter_mut().zip(vals) {
            *v = x;
        }
        for v in w.data_mut()[5..].iter_mut() {
            *v = 0.0;
        }
        let q = quantize(&m, 8).unwrap();
        assert_eq!(&q.params.value("head.w").unwrap().data()[..5], &[127.0, 0.0, 2.0, 2.0, -2.0]);
    }

    #[test]
    fn blur_limit_and_median_oracles() {
        let s = grid(1);
        let b = gaussian_blur(&s, 1e-4);
        assert!(b.linf_distance(&s) <= 1e-6);
        assert_eq!(gaussian_blur(&s, 0.0), s);
        let c = LogMelSpectrogram::new(32, 65, vec![0.7; 32 * 65]).unwrap();
        assert_eq!(median3(&c), c);
        let blurred = gaussian_blur(&c, 1.0);
        assert!(blurred.linf_distance(&c) < 1e-6);
        for seed in 0..5 {
            let s = grid(seed);
            let m = median3(&s);
            for r in 0..32i64 {
                for f in 0..65i64 {
                    let mut w = vec![];
                    for dr in -1..=1 {
                        for df in -1..=1 {
                            w.push(s.at((r + dr).clamp(0, 31) as usize, (f + df).clamp(0, 64) as usize));
                        }
                    }
                    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    assert_eq!(m.at(r as usize, f as usize), w[4]);
                }
            }
        }
    }

    #[test]
    fn blur_matches_dense_oracle() {
        let s = grid(9);
        let sigma = 1.0;
        let b = gaussian_blur(&s, sigma);
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as i64;
        for m in [0usize, 5, 31] {
            for f in [0usize, 30, 64] {
                let mut acc = 0.0f64;
                for (i, ki) in k.iter().enumerate() {
                    for (j, kj) in k.iter().enumerate() {
                        let mm = (m as i64 + i as i64 - r).clamp(0, 31) as usize;
                        let ff = (f as i64 + j as i64 - r).clamp(0, 64) as usize;
                        acc += ki * kj * s.at(mm, ff) as f64;
                    }
                }
                assert!((acc - b.at(m, f) as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sanitize_rejects_bad_shape() {
        let s = LogMelSpectrogram::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(sanitize_input(&s, &Sanitize::Median3, &mut seed::rng(0, &[])).is_err());
    }

    #[test]
    fn evade_budget() {
        let m = build_model(&ArchPreset::named(PresetName::ShallowCnn), 10, 3).unwrap();
        let xs: Vec<_> = (0..4).map(grid).collect();
        let refs: Vec<_> = xs.iter().collect();
        let (out, changed) = evade(&m, &refs, &[0, 1, 2, 3], 0.0, 10).unwrap();
        assert_eq!(out, xs);
        assert!(changed.iter().all(|&c| !c));
        let (out, _) = evade(&m, &refs, &[0, 1, 2, 3], 0.3, 10).unwrap();
        for (a, b) in out.iter().zip(&xs) {
            assert!(a.linf_distance(b) <= 0.3 + 1e-6);
        }
    }
}
