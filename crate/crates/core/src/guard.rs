//! Convolutional VAE anomaly guard: trained on clean spectrograms only,
//! scored by a mix of reconstruction norm and negative ELBO, thresholded at a
//! target false-positive rate.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::classifier::arch::groups_for;
use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::nn::graph::kl_per_dim;
use crate::nn::{adamw_step, batch_tensor, he_normal, Graph, ParamKind, ParamStore, Tensor, Var};
use crate::seed::{self, tag};

pub const CHECKPOINT_TAG: &str = "vae";
pub const INPUT_SHAPE: (usize, usize) = (32, 65);
pub const MIN_CALIBRATION_SCORES: usize = 200;
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaePresetName {
    Base,
    Robust,
}

impl std::str::FromStr for VaePresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(VaePresetName::Base),
            "robust" => Ok(VaePresetName::Robust),
            other => Err(Error::Unknown { kind: "guard preset", name: other.to_string() }),
        }
    }
}

/// Three 4×4 stride-2 convs down to `(widths[2], 4, 8)`, linear heads to
/// `μ` and `log σ²`; the decoder mirrors it with transposed convs and a
/// final crop/pad to 32×65.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaePreset {
    pub name: VaePresetName,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub widths: [usize; 3],
}

impl VaePreset {
    pub fn named(name: VaePresetName) -> Self {
        let latent_dim = match name {
            VaePresetName::Base => 32,
            VaePresetName::Robust => 64,
        };
        VaePreset { name, latent_dim, base_channels: 64, widths: [64, 64, 128] }
    }

    /// Spatial size after the encoder.
    pub const BOTTLENECK: (usize, usize) = (4, 8);

    fn flat(&self) -> usize {
        self.widths[2] * Self::BOTTLENECK.0 * Self::BOTTLENECK.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardTrainConfig {
    pub beta_max: f64,
    pub warmup_epochs: usize,
    /// Free-bits floor per latent dimension, nats.
    pub free_bits: f64,
    pub learning_rate: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
}

impl GuardTrainConfig {
    pub fn base() -> Self {
        GuardTrainConfig {
            beta_max: 1.0,
            warmup_epochs: 0,
            free_bits: 0.0,
            learning_rate: 3e-4,
            patience: 5,
            batch_size: 64,
            weight_decay: 1e-4,
            max_epochs: 30,
        }
    }

    pub fn robust() -> Self {
        GuardTrainConfig { warmup_epochs: 10, free_bits: 0.02, learning_rate: 2e-3, patience: 10, ..Self::base() }
    }

    pub fn for_preset(name: VaePresetName) -> Self {
        match name {
            VaePresetName::Base => Self::base(),
            VaePresetName::Robust => Self::robust(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.free_bits >= 0.0) {
            return Err(Error::InvalidConfig(format!("free_bits must be ≥ 0, got {}", self.free_bits)));
        }
        if !(self.beta_max >= 0.0) || !(self.learning_rate > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig("guard training needs β_max ≥ 0, lr > 0, batch ≥ 1, patience ≥ 1".into()));
        }
        Ok(())
    }
}

/// `β_max · min(1, epoch / warmup)`; constant when there is no warm-up.
pub fn beta_schedule(epoch: usize, cfg: &GuardTrainConfig) -> f64 {
    if cfg.warmup_epochs == 0 {
        return cfg.beta_max;
    }
    cfg.beta_max * (epoch as f64 / cfg.warmup_epochs as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub preset: VaePreset,
    pub params: ParamStore,
}

fn add_conv(ps: &mut ParamStore, rng: &mut seed::Rng, p: &str, shape: [usize; 4], fan_in: usize, norm: bool) -> Result<()> {
    ps.insert(format!("{p}.w"), ParamKind::Weight, he_normal(&shape, fan_in, rng))?;
    let out = if p.starts_with("dec") { shape[1] } else { shape[0] };
    if norm {
        ps.insert(format!("{p}.gn.g"), ParamKind::Norm, Tensor::full(&[out], 1.0))?;
        ps.insert(format!("{p}.gn.b"), ParamKind::Norm, Tensor::zeros(&[out]))?;
    } else {
        ps.insert(format!("{p}.b"), ParamKind::Bias, Tensor::zeros(&[out]))?;
    }
    Ok(())
}

fn add_linear(ps: &mut ParamStore, rng: &mut seed::Rng, p: &str, out: usize, inp: usize, gain: f32) -> Result<()> {
    let mut w = he_normal(&[out, inp], inp, rng);
    w.data_mut().iter_mut().for_each(|v| *v *= gain);
    ps.insert(format!("{p}.w"), ParamKind::Weight, w)?;
    ps.insert(format!("{p}.b"), ParamKind::Bias, Tensor::zeros(&[out]))?;
    Ok(())
}

pub fn build_vae(preset: &VaePreset, seed: u64) -> Result<Vae> {
    if preset.latent_dim == 0 {
        return Err(Error::InvalidConfig("latent_dim must be > 0".into()));
    }
    let mut rng = seed::rng(seed, &[tag::INIT, 2]);
    let mut ps = ParamStore::new();
    let [w0, w1, w2] = preset.widths;
    let chans = [1, w0, w1, w2];
    for i in 0..3 {
        add_conv(&mut ps, &mut rng, &format!("enc{i}"), [chans[i + 1], chans[i], 4, 4], chans[i] * 16, true)?;
    }
    let d = preset.latent_dim;
    // Small heads start the posterior near the prior.
    add_linear(&mut ps, &mut rng, "mu", d, preset.flat(), 0.1)?;
    add_linear(&mut ps, &mut rng, "logvar", d, preset.flat(), 0.1)?;
    add_linear(&mut ps, &mut rng, "dec_fc", preset.flat(), d, 1.0)?;
    for i in 0..3 {
        let (cin, cout) = (chans[3 - i], chans[2 - i]);
        add_conv(&mut ps, &mut rng, &format!("dec{i}"), [cin, cout, 4, 4], cin * 4, i < 2)?;
    }
    Ok(Vae { preset: preset.clone(), params: ps })
}

/// Tape handles of one VAE forward pass.
pub struct VaeVars {
    pub x_hat: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

fn norm_relu(g: &mut Graph, ps: &ParamStore, p: &str, y: Var) -> Result<Var> {
    let c = g.value(y).shape()[1];
    let gamma = g.param(ps, &format!("{p}.gn.g"))?;
    let beta = g.param(ps, &format!("{p}.gn.b"))?;
    let y = g.group_norm(y, gamma, beta, groups_for(c))?;
    Ok(g.relu(y))
}

impl Vae {
    /// `eta = None` is the deterministic mode `z = μ`.
    pub fn forward(&self, g: &mut Graph, x: Var, eta: Option<Tensor>) -> Result<VaeVars> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != 1 || (h, w) != INPUT_SHAPE {
            return Err(Error::shape(format!("guard expects (n, 1, 32, 65) input, got ({n}, {c}, {h}, {w})")));
        }
        let ps = &self.params;
        let mut y = x;
        for i in 0..3 {
            let wv = g.param(ps, &format!("enc{i}.w"))?;
            y = g.conv2d(y, wv, None, 2, 1)?;
            y = norm_relu(g, ps, &format!("enc{i}"), y)?;
        }
        let flat = g.reshape(y, &[n, self.preset.flat()])?;
        let (mw, mb) = (g.param(ps, "mu.w")?, g.param(ps, "mu.b")?);
        let mu = g.linear(flat, mw, Some(mb))?;
        let (lw, lb) = (g.param(ps, "logvar.w")?, g.param(ps, "logvar.b")?);
        let logvar = g.linear(flat, lw, Some(lb))?;
        let z = match eta {
            Some(e) => g.reparam(mu, logvar, e)?,
            None => mu,
        };
        let (fw, fb) = (g.param(ps, "dec_fc.w")?, g.param(ps, "dec_fc.b")?);
        let y = g.linear(z, fw, Some(fb))?;
        let (bh, bw) = VaePreset::BOTTLENECK;
        let mut y = g.reshape(y, &[n, self.preset.widths[2], bh, bw])?;
        y = g.relu(y);
        for i in 0..3 {
            let wv = g.param(ps, &format!("dec{i}.w"))?;
            if i < 2 {
                y = g.conv_transpose2d(y, wv, None, 2, 1)?;
                y = norm_relu(g, ps, &format!("dec{i}"), y)?;
            } else {
                let b = g.param(ps, &format!("dec{i}.b"))?;
                y = g.conv_transpose2d(y, wv, Some(b), 2, 1)?;
            }
        }
        let x_hat = g.fit(y, INPUT_SHAPE.0, INPUT_SHAPE.1)?;
        Ok(VaeVars { x_hat, mu, logvar, z })
    }

    pub fn to_checkpoint(&self, config_digest: &str, epoch: u32, metrics: BTreeMap<String, f64>) -> Checkpoint {
        let mut params = self.params.clone();
        params.reset_optimizer();
        Checkpoint {
            tag: CHECKPOINT_TAG.into(),
            descriptor: serde_json::to_value(&self.preset).expect("preset serializes"),
            config_digest: config_digest.into(),
            epoch,
            metrics,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Vae> {
        if ck.tag != CHECKPOINT_TAG {
            return Err(Error::InvalidConfig(format!("checkpoint holds a `{}` model, expected a vae", ck.tag)));
        }
        let preset: VaePreset = serde_json::from_value(ck.descriptor.clone())?;
        let reference = build_vae(&preset, 0)?;
        if reference.params.len() != ck.params.len() {
            return Err(Error::shape("checkpoint parameter set does not match the vae preset"));
        }
        for (name, p) in reference.params.iter() {
            if ck.params.get(name)?.value.shape() != p.value.shape() {
                return Err(Error::shape(format!("checkpoint parameter `{name}` has the wrong shape")));
            }
        }
        let mut params = ck.params.clone();
        params.reset_optimizer();
        Ok(Vae { preset, params })
    }
}

/// Result of a single-spectrogram forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeOutput {
    pub x_hat: LogMelSpectrogram,
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
}

/// Forward pass of one spectrogram; `rng = None` is deterministic (`z = μ`).
pub fn vae_forward(vae: &Vae, x: &LogMelSpectrogram, rng: Option<&mut seed::Rng>) -> Result<VaeOutput> {
    let mut g = Graph::frozen();
    let xv = g.constant(batch_tensor(&[x]));
    let d = vae.preset.latent_dim;
    let eta = rng.map(|r| Tensor::from_fn(&[1, d], |_| r.sample::<f32, _>(StandardNormal)));
    let v = vae.forward(&mut g, xv, eta)?;
    let x_hat = LogMelSpectrogram::new(INPUT_SHAPE.0, INPUT_SHAPE.1, g.value(v.x_hat).data().to_vec())?;
    Ok(VaeOutput {
        x_hat,
        mu: g.value(v.mu).data().to_vec(),
        logvar: g.value(v.logvar).data().to_vec(),
        z: g.value(v.z).data().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    /// Batch mean of per-sample squared error.
    pub recon: f64,
    pub kl_per_dim: Vec<f64>,
}

/// `‖x − x̂‖² + β·Σ_d max(KL_d, τ_fb)`, batch-averaged, over rows of `d`
/// latent values.
pub fn elbo_loss(x: &[f32], x_hat: &[f32], mu: &[f32], logvar: &[f32], n: usize, beta: f64, free_bits: f64) -> Result<ElboTerms> {
    if x.len() != x_hat.len() || mu.len() != logvar.len() || n == 0 || mu.len() % n != 0 || x.len() % n != 0 {
        return Err(Error::shape("elbo_loss: inconsistent shapes"));
    }
    if free_bits < 0.0 {
        return Err(Error::InvalidConfig("free_bits must be ≥ 0".into()));
    }
    if [x, x_hat, mu, logvar].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("elbo inputs".into()));
    }
    let recon = x.iter().zip(x_hat).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n as f64;
    let kl = kl_per_dim(mu, logvar, n, mu.len() / n);
    let total = recon + beta * kl.iter().map(|&k| k.max(free_bits)).sum::<f64>();
    Ok(ElboTerms { total, recon, kl_per_dim: kl })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardEpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub train_loss: f64,
    /// Validation objective at `β_max` with `z = μ`.
    pub val_loss: f64,
    /// Validation mean per-element squared reconstruction error.
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct GuardOutcome {
    pub vae: Vae,
    pub best_epoch: usize,
    /// Validation MSE of the untrained network.
    pub initial_val_mse: f64,
    pub history: Vec<GuardEpochLog>,
}

fn validation(vae: &Vae, val: &[&LogMelSpectrogram], cfg: &GuardTrainConfig) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut sq = 0.0;
    for chunk in val.chunks(SCORE_CHUNK) {
        let mut g = Graph::frozen();
        let xt = batch_tensor(chunk);
        let x = g.constant(xt.clone());
        let v = vae.forward(&mut g, x, None)?;
        let t = elbo_loss(xt.data(), g.value(v.x_hat).data(), g.value(v.mu).data(), g.value(v.logvar).data(), chunk.len(), cfg.beta_max, cfg.free_bits)?;
        loss += t.total * chunk.len() as f64;
        sq += t.recon * chunk.len() as f64;
    }
    let n = val.len() as f64;
    let cells = (INPUT_SHAPE.0 * INPUT_SHAPE.1) as f64;
    Ok((loss / n, sq / n / cells))
}

/// Minimizes the β-scheduled free-bits ELBO, early-stopping on validation
/// loss at the final β.
pub fn train_guard(
    train: &[LogMelSpectrogram],
    val: &[LogMelSpectrogram],
    preset: &VaePreset,
    cfg: &GuardTrainConfig,
    seed: u64,
    observe: &mut dyn FnMut(&GuardEpochLog),
) -> Result<GuardOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("guard training needs non-empty train and val sets".into()));
    }
    let mut vae = build_vae(preset, seed)?;
    let val_refs: Vec<_> = val.iter().collect();
    let (_, initial_val_mse) = validation(&vae, &val_refs, cfg)?;
    let mut best = vae.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since = 0;
    let mut history = Vec::new();
    let b = cfg.batch_size.min(train.len());
    let d = preset.latent_dim;
    for epoch in 0..cfg.max_epochs {
        let beta = beta_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[tag::SHUFFLE, 1 << 20 | epoch as u64]));
        let mut eta_rng = seed::rng(seed, &[tag::REPARAM, epoch as u64]);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(b) {
            let refs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let xt = batch_tensor(&refs);
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let eta = Tensor::from_fn(&[idx.len(), d], |_| eta_rng.sample::<f32, _>(StandardNormal));
            let v = vae.forward(&mut g, x, Some(eta))?;
            let recon = g.sq_err(v.x_hat, &xt)?;
            let kl = g.kl_free_bits(v.mu, v.logvar, cfg.free_bits as f32)?;
            let kl = g.scale(kl, beta as f32);
            let loss = g.add(recon, kl)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("guard loss {lv}") });
            }
            total += lv as f64;
            batches += 1;
            let grads = g.backward(loss)?;
            adamw_step(&mut vae.params, &grads, cfg.learning_rate, cfg.weight_decay)?;
        }
        let (val_loss, val_mse) = validation(&vae, &val_refs, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, detail: "non-finite validation loss".into() });
        }
        let log = GuardEpochLog { epoch, beta, train_loss: total / batches as f64, val_loss, val_mse };
        observe(&log);
        history.push(log);
        if val_loss < best_loss {
            best_loss = val_loss;
            best = vae.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    best.params.reset_optimizer();
    Ok(GuardOutcome { vae: best, best_epoch, initial_val_mse, history })
}

/// Deterministic scores `α‖x − x̂‖₂ + (1 − α)·ELBO⁻`, where ELBO⁻ is the
/// squared error plus the full KL (β = 1, no floor).
pub fn anomaly_scores(vae: &Vae, xs: &[&LogMelSpectrogram], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let d = vae.preset.latent_dim;
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(SCORE_CHUNK) {
        let mut g = Graph::frozen();
        let xt = batch_tensor(chunk);
        let x = g.constant(xt.clone());
        let v = vae.forward(&mut g, x, None)?;
        let cells = INPUT_SHAPE.0 * INPUT_SHAPE.1;
        for i in 0..chunk.len() {
            let xs_i = &xt.data()[i * cells..(i + 1) * cells];
            let xh = &g.value(v.x_hat).data()[i * cells..(i + 1) * cells];
            let sq: f64 = xs_i.iter().zip(xh).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            let mu = &g.value(v.mu).data()[i * d..(i + 1) * d];
            let lv = &g.value(v.logvar).data()[i * d..(i + 1) * d];
            let kl: f64 = kl_per_dim(mu, lv, 1, d).iter().sum();
            out.push(score_from_parts(sq, kl, alpha));
        }
    }
    Ok(out)
}

pub fn score_from_parts(recon_sq: f64, kl: f64, alpha: f64) -> f64 {
    alpha * recon_sq.sqrt() + (1.0 - alpha) * (recon_sq + kl)
}

pub fn anomaly_score(vae: &Vae, x: &LogMelSpectrogram, alpha: f64) -> Result<f64> {
    Ok(anomaly_scores(vae, &[x], alpha)?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardCalibration {
    pub alpha: f64,
    pub tau: f64,
    pub target_fpr: f64,
    /// Fraction of calibration scores strictly above `tau`.
    pub achieved_fpr: f64,
    pub summary: ScoreSummary,
}

/// Linear interpolation between order statistics at position `q·(n−1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn calibrate_threshold(scores: &[f64], target_fpr: f64, alpha: f64) -> Result<GuardCalibration> {
    if scores.len() < MIN_CALIBRATION_SCORES {
        return Err(Error::Empty(format!("calibration needs ≥ {MIN_CALIBRATION_SCORES} clean scores, got {}", scores.len())));
    }
    if !(0.0..1.0).contains(&target_fpr) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("target_fpr {target_fpr} / alpha {alpha} out of range")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let tau = quantile(&s, 1.0 - target_fpr);
    let achieved_fpr = s.iter().filter(|&&x| x > tau).count() as f64 / s.len() as f64;
    let summary = ScoreSummary {
        count: s.len(),
        min: s[0],
        q05: quantile(&s, 0.05),
        median: quantile(&s, 0.5),
        q95: quantile(&s, 0.95),
        max: s[s.len() - 1],
    };
    Ok(GuardCalibration { alpha, tau, target_fpr, achieved_fpr, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Flag,
}

/// Flags strictly above the threshold; a score equal to `τ` is kept.
pub fn decide(score: f64, calib: &GuardCalibration) -> Decision {
    if score > calib.tau {
        Decision::Flag
    } else {
        Decision::Keep
    }
}

pub fn guard_decision(vae: &Vae, x: &LogMelSpectrogram, calib: &GuardCalibration) -> Result<(Decision, f64)> {
    let s = anomaly_score(vae, x, calib.alpha)?;
    Ok((decide(s, calib), s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> LogMelSpectrogram {
        let mut rng = seed::rng(seed, &[41]);
        LogMelSpectrogram::new(32, 65, (0..32 * 65).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap()
    }

    fn small() -> VaePreset {
        VaePreset { name: VaePresetName::Robust, latent_dim: 8, base_channels: 8, widths: [8, 8, 16] }
    }

    #[test]
    fn decoder_restores_input_shape() {
        for p in [VaePreset::named(VaePresetName::Base), VaePreset::named(VaePresetName::Robust), small()] {
            let vae = build_vae(&p, 1).unwrap();
            let out = vae_forward(&vae, &spec(2), None).unwrap();
            assert_eq!(out.x_hat.shape(), (32, 65));
            assert_eq!(out.z, out.mu);
            assert_eq!(out.mu.len(), p.latent_dim);
        }
    }

    #[test]
    fn reparameterization_is_seeded() {
        let vae = build_vae(&small(), 1).unwrap();
        let a = vae_forward(&vae, &spec(2), Some(&mut seed::rng(5, &[]))).unwrap();
        let b = vae_forward(&vae, &spec(2), Some(&mut seed::rng(5, &[]))).unwrap();
        assert_eq!(a.z, b.z);
        assert_ne!(a.z, a.mu);
    }

    #[test]
    fn elbo_reference_values() {
        let x = vec![0.5f32; 6];
        let t = elbo_loss(&x, &x, &[0.0; 4], &[0.0; 4], 2, 1.0, 0.02).unwrap();
        assert_eq!(t.kl_per_dim, vec![0.0, 0.0]);
        assert!((t.total - 0.04).abs() < 1e-12);
        let t = elbo_loss(&x, &x, &[0.0; 4], &[0.0; 4], 2, 0.0, 0.02).unwrap();
        assert_eq!(t.total, 0.0);
        let t = elbo_loss(&x, &x, &[1.0], &[0.0], 1, 1.0, 0.0).unwrap();
        assert_eq!(t.kl_per_dim, vec![0.5]);
        assert!(elbo_loss(&[f32::NAN], &[0.0], &[0.0], &[0.0], 1, 1.0, 0.0).is_err());
    }

    #[test]
    fn beta_schedule_endpoints() {
        let cfg = GuardTrainConfig { beta_max: 1.0, ..GuardTrainConfig::robust() };
        assert_eq!(beta_schedule(0, &cfg), 0.0);
        assert_eq!(beta_schedule(5, &cfg), 0.5);
        assert_eq!(beta_schedule(10, &cfg), 1.0);
        assert_eq!(beta_schedule(40, &cfg), 1.0);
        let base = GuardTrainConfig { beta_max: 0.7, ..GuardTrainConfig::base() };
        assert_eq!(beta_schedule(0, &base), 0.7);
        assert_eq!(GuardTrainConfig::base().learning_rate, 3e-4);
        assert_eq!(GuardTrainConfig::robust().learning_rate, 2e-3);
    }

    #[test]
    fn score_mixing() {
        let vae = build_vae(&small(), 3).unwrap();
        let x = spec(4);
        let out = vae_forward(&vae, &x, None).unwrap();
        let sq: f64 = x.values.iter().zip(&out.x_hat.values).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let kl: f64 = kl_per_dim(&out.mu, &out.logvar, 1, 8).iter().sum();
        assert!((anomaly_score(&vae, &x, 1.0).unwrap() - sq.sqrt()).abs() < 1e-9);
        assert!((anomaly_score(&vae, &x, 0.0).unwrap() - (sq + kl)).abs() < 1e-6 * (sq + kl));
        assert!(score_from_parts(4.0, 1.0, 0.5) < score_from_parts(9.0, 1.0, 0.5));
        assert!(anomaly_score(&vae, &x, 1.5).is_err());
    }

    #[test]
    fn calibration_order_statistics() {
        let s: Vec<f64> = (1..=300).map(|i| i as f64).collect();
        let c = calibrate_threshold(&s, 0.05, 0.5).unwrap();
        assert!((c.tau - (1.0 + 0.95 * 299.0)).abs() < 1e-9);
        let hundred: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((quantile(&hundred, 0.95) - 95.05).abs() < 1e-9);
        let c = calibrate_threshold(&s, 0.0, 0.5).unwrap();
        assert_eq!(c.tau, 300.0);
        assert_eq!(c.achieved_fpr, 0.0);
        let flat = vec![2.5; 250];
        let c = calibrate_threshold(&flat, 0.05, 0.5).unwrap();
        assert_eq!((c.tau, c.achieved_fpr), (2.5, 0.0));
        assert_eq!(decide(2.5, &c), Decision::Keep);
        assert_eq!(decide(2.5000001, &c), Decision::Flag);
        assert!(calibrate_threshold(&s[..100], 0.05, 0.5).is_err());
    }

    #[test]
    fn short_training_reduces_reconstruction() {
        // Structured inputs: a handful of smooth prototypes plus noise.
        let protos: Vec<LogMelSpectrogram> = (0..4)
            .map(|k| {
                LogMelSpectrogram::new(32, 65, (0..32 * 65).map(|i| ((i / 65) as f32 * 0.2 + k as f32).sin() * 1.5).collect()).unwrap()
            })
            .collect();
        let mut rng = seed::rng(8, &[]);
        let mut make = |n: usize| -> Vec<LogMelSpectrogram> {
            (0..n)
                .map(|i| {
                    let mut s = protos[i % 4].clone();
                    s.values.iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f32, _>(StandardNormal));
                    s
                })
                .collect()
        };
        let train = make(64);
        let val = make(16);
        let cfg = GuardTrainConfig { max_epochs: 6, batch_size: 16, ..GuardTrainConfig::robust() };
        let out = train_guard(&train, &val, &small(), &cfg, 1, &mut |_| {}).unwrap();
        let best = out.history[out.best_epoch].val_mse;
        assert!(best < 0.7 * out.initial_val_mse, "{} → {best}", out.initial_val_mse);
        let ck = out.vae.to_checkpoint("x", 1, BTreeMap::new());
        let back = Vae::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(anomaly_score(&back, &val[0], 0.5).unwrap(), anomaly_score(&out.vae, &val[0], 0.5).unwrap());
    }
}
