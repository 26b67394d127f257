//! LightSpecAug: one optional time mask, one optional frequency mask and a
//! small additive Gaussian jitter, applied to standardized spectrograms.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::frontend::LogMelSpectrogram;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub time_mask_prob: f64,
    pub max_time_mask: usize,
    pub freq_mask_prob: f64,
    pub max_freq_mask: usize,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { time_mask_prob: 0.5, max_time_mask: 8, freq_mask_prob: 0.5, max_freq_mask: 4, noise_sigma: 0.02 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { time_mask_prob: 0.0, max_time_mask: 0, freq_mask_prob: 0.0, max_freq_mask: 0, noise_sigma: 0.0 }
    }
}

/// What one augmentation draw did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentRecord {
    /// `(start, width)` in frames.
    pub time_mask: Option<(usize, usize)>,
    /// `(start, height)` in mel bins.
    pub freq_mask: Option<(usize, usize)>,
}

/// Zeroes frames `start..start + width`.
pub fn apply_time_mask(spec: &mut LogMelSpectrogram, start: usize, width: usize) {
    let end = (start + width).min(spec.frames);
    for m in 0..spec.n_mels {
        for f in start..end {
            spec.set(m, f, 0.0);
        }
    }
}

/// Zeroes mel rows `start..start + height`.
pub fn apply_freq_mask(spec: &mut LogMelSpectrogram, start: usize, height: usize) {
    let end = (start + height).min(spec.n_mels);
    for m in start..end {
        for f in 0..spec.frames {
            spec.set(m, f, 0.0);
        }
    }
}

fn draw_span(rng: &mut impl Rng, len: usize, max: usize) -> (usize, usize) {
    let width = rng.gen_range(1..=max.min(len));
    let start = rng.gen_range(0..=len - width);
    (start, width)
}

pub fn light_spec_aug(spec: &LogMelSpectrogram, rng: &mut impl Rng, cfg: &AugmentConfig) -> (LogMelSpectrogram, AugmentRecord) {
    let mut out = spec.clone();
    let mut rec = AugmentRecord::default();
    if cfg.max_time_mask > 0 && rng.gen_bool(cfg.time_mask_prob.clamp(0.0, 1.0)) {
        let (s, w) = draw_span(rng, out.frames, cfg.max_time_mask);
        apply_time_mask(&mut out, s, w);
        rec.time_mask = Some((s, w));
    }
    if cfg.max_freq_mask > 0 && rng.gen_bool(cfg.freq_mask_prob.clamp(0.0, 1.0)) {
        let (s, h) = draw_span(rng, out.n_mels, cfg.max_freq_mask);
        apply_freq_mask(&mut out, s, h);
        rec.freq_mask = Some((s, h));
    }
    if cfg.noise_sigma > 0.0 {
        for v in out.values.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += (z * cfg.noise_sigma) as f32;
        }
    }
    (out, rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn spec() -> LogMelSpectrogram {
        LogMelSpectrogram::new(32, 65, (0..32 * 65).map(|i| (i as f32 * 0.013).sin() + 0.5).collect()).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let s = spec();
        let (out, rec) = light_spec_aug(&s, &mut seed::rng(1, &[]), &AugmentConfig::disabled());
        assert_eq!(out, s);
        assert_eq!(rec, AugmentRecord::default());
    }

    #[test]
    fn full_range_time_mask_zeroes_everything() {
        let mut s = spec();
        apply_time_mask(&mut s, 0, 65);
        assert!(s.values.iter().all(|&v| v == 0.0));
        let mut s = spec();
        apply_freq_mask(&mut s, 3, 4);
        for f in 0..65 {
            assert_eq!(s.at(3, f), 0.0);
            assert_eq!(s.at(6, f), 0.0);
            assert_ne!(s.at(7, f), 0.0);
        }
    }

    #[test]
    fn mask_probability_monte_carlo() {
        let s = spec();
        let cfg = AugmentConfig::default();
        let mut rng = seed::rng(99, &[]);
        let mut time = 0;
        for _ in 0..1000 {
            let (out, rec) = light_spec_aug(&s, &mut rng, &cfg);
            if let Some((start, w)) = rec.time_mask {
                time += 1;
                assert!(w >= 1 && w <= 8);
                assert!(start + w <= 65);
                // Masked cells carry only the jitter.
                assert!(out.at(0, start).abs() < 0.2);
            }
            if let Some((_, h)) = rec.freq_mask {
                assert!(h >= 1 && h <= 4);
            }
        }
        let frac = time as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
    }
}
