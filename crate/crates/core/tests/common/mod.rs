//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rffi::frontend::{self, FrontendConfig, WindowKind};
use rffi::rf_sim::{self, ChannelConfig, IqBuffer};
use rffi::seed;

/// Alternates simulated LoRa packets at 20 dB with white-noise buffers of
/// random length, so pad and crop paths are both exercised.
pub fn test_packets(count: usize, base: u64) -> Vec<IqBuffer> {
    let mut rng = seed::rng(base, &[0xD5]);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                let profile = rf_sim::device_profile((i / 2 % 10) as u32, base);
                let clean = rf_sim::synth_packet(&profile, i as u64, base).unwrap();
                rf_sim::apply_channel(&clean, &ChannelConfig::awgn(20.0), seed::derive(base, &[i as u64])).unwrap()
            } else {
                let len = rng.gen_range(256..=9000);
                let samples = (0..len).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
                IqBuffer::new(samples, rf_sim::SAMPLE_RATE_HZ)
            }
        })
        .collect()
}

/// Direct O(N²) DFT of every frame, `frames × n_fft`.
pub fn naive_stft(x: &[Complex64], cfg: &FrontendConfig) -> Vec<Vec<Complex64>> {
    let n = cfg.n_fft;
    let window = cfg.window.coefficients(n);
    // Twiddles indexed by (k·t) mod N keep the phase argument exact.
    let tw: Vec<Complex64> = (0..n).map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / n as f64)).collect();
    let frames = (x.len() - n) / cfg.hop + 1;
    (0..frames)
        .map(|m| {
            let seg = &x[m * cfg.hop..m * cfg.hop + n];
            (0..n).map(|k| (0..n).map(|t| seg[t] * window[t] * tw[(k * t) % n]).sum()).collect()
        })
        .collect()
}

/// Triangular HTK-Mel filters written out from their definition.
pub fn naive_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let (n, fs) = (cfg.n_fft, cfg.sample_rate_hz);
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let points = cfg.n_mels + 2;
    let mut edges: Vec<usize> = Vec::new();
    for i in 0..points {
        let f = hz(mel(fs) * i as f64 / (points - 1) as f64);
        let b = (f * n as f64 / fs).round() as usize;
        let b = match edges.last() {
            Some(&prev) if b <= prev => prev + 1,
            _ => b,
        };
        edges.push(b);
    }
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m] as f64, edges[m + 1] as f64, edges[m + 2] as f64);
            (0..n)
                .map(|k| {
                    let k = k as f64;
                    if k > lo && k <= c {
                        (k - lo) / (c - lo)
                    } else if k > c && k < hi {
                        (hi - k) / (hi - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Whole feature pipeline from the naive pieces: triple-loop Mel energies,
/// log, centred crop or edge pad, standardization. Row-major `(mel, frame)`.
pub fn naive_featurize(x: &[Complex64], cfg: &FrontendConfig) -> Vec<f64> {
    let spec = naive_stft(x, cfg);
    let fb = naive_filterbank(cfg);
    let frames = spec.len();
    let mut logmel = vec![vec![0.0; frames]; cfg.n_mels];
    for (m, row) in logmel.iter_mut().enumerate() {
        for (f, cell) in row.iter_mut().enumerate() {
            let mut e = 0.0;
            for k in 0..cfg.n_fft {
                e += spec[f][k].norm_sqr() * fb[m][k];
            }
            *cell = (e + cfg.log_epsilon).ln();
        }
    }
    let t = cfg.target_frames;
    let source = |i: usize| -> usize {
        if frames >= t {
            i + (frames - t) / 2
        } else {
            let before = (t - frames) / 2;
            i.saturating_sub(before).min(frames - 1)
        }
    };
    let grid: Vec<f64> = logmel.iter().flat_map(|row| (0..t).map(move |i| row[source(i)])).collect();
    let mean = grid.iter().sum::<f64>() / grid.len() as f64;
    let std = (grid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / grid.len() as f64).sqrt().max(1e-8);
    grid.iter().map(|v| (v - mean) / std).collect()
}

fn rel(diff_sq: f64, ref_sq: f64) -> f64 {
    if ref_sq == 0.0 {
        diff_sq.sqrt()
    } else {
        (diff_sq / ref_sq).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DspReport {
    pub packets: usize,
    pub stft_rel: f64,
    pub featurize_rel: f64,
    pub parseval_rel: f64,
}

impl DspReport {
    pub fn pass(&self) -> bool {
        self.stft_rel <= 1e-6 && self.featurize_rel <= 1e-6 && self.parseval_rel <= 1e-6
    }
}

/// Worst relative errors of `stft` and `featurize` against the naive
/// versions, and of per-frame Parseval under a rectangular window.
pub fn dsp_oracle_report(count: usize, base: u64) -> DspReport {
    let cfg = FrontendConfig::default();
    let rect = FrontendConfig { window: WindowKind::Rectangular, ..cfg.clone() };
    let mut report = DspReport { packets: count, stft_rel: 0.0, featurize_rel: 0.0, parseval_rel: 0.0 };
    for iq in test_packets(count, base) {
        let fast = frontend::stft(&iq, &cfg).unwrap();
        let slow = naive_stft(&iq.samples, &cfg);
        let (mut d, mut r) = (0.0, 0.0);
        for (m, row) in slow.iter().enumerate() {
            for (k, want) in row.iter().enumerate() {
                d += (fast.at(m, k) - want).norm_sqr();
                r += want.norm_sqr();
            }
        }
        report.stft_rel = report.stft_rel.max(rel(d, r));

        let got = frontend::featurize(&iq, &cfg).unwrap();
        let want = naive_featurize(&iq.samples, &cfg);
        let d: f64 = got.values.iter().zip(&want).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
        let r: f64 = want.iter().map(|b| b * b).sum();
        report.featurize_rel = report.featurize_rel.max(rel(d, r));

        let xs = frontend::stft(&iq, &rect).unwrap();
        for m in 0..xs.frame_count {
            let lhs: f64 = (0..xs.bin_count).map(|k| xs.at(m, k).norm_sqr()).sum();
            let seg = &iq.samples[m * rect.hop..m * rect.hop + rect.n_fft];
            let rhs = rect.n_fft as f64 * seg.iter().map(|c| c.norm_sqr()).sum::<f64>();
            let e = if rhs == 0.0 { lhs } else { (lhs - rhs).abs() / rhs };
            report.parseval_rel = report.parseval_rel.max(e);
        }
    }
    report
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` by enumerating every positive/negative pair.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Average precision from pairwise rank comparisons: item `j` ranks ahead
/// of `i` when its score is higher, or equal with an earlier index.
pub fn brute_average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut terms: Vec<(usize, f64)> = (0..n)
        .filter(|&i| labels[i])
        .map(|i| {
            let rank = (0..n).filter(|&j| ahead(j, i)).count();
            let hits = (0..n).filter(|&j| labels[j] && (j == i || ahead(j, i))).count();
            (rank, hits as f64 / (rank + 1) as f64)
        })
        .collect();
    // Floating addition is not associative; add in rank order like a single pass would.
    terms.sort_by_key(|t| t.0);
    let pos = terms.len() as f64;
    terms.iter().map(|t| t.1).sum::<f64>() / pos
}

/// A scored instance with both classes present. Half the instances draw
/// scores from a coarse grid so ties are common.
pub fn random_instance(rng: &mut impl Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=max_n);
    let coarse = rng.gen_bool(0.5);
    let scores = (0..n)
        .map(|_| if coarse { rng.gen_range(0..6) as f64 / 4.0 } else { rng.sample(StandardNormal) })
        .collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    (scores, labels)
}

/// Instances on which either metric differs from its oracle in any bit.
pub fn metric_oracle_mismatches(instances: usize, base: u64) -> usize {
    let mut rng = seed::rng(base, &[0xA0]);
    (0..instances)
        .filter(|_| {
            let (s, l) = random_instance(&mut rng, 50);
            let a = rffi::harness::metrics::auroc(&s, &l).unwrap();
            let ap = rffi::harness::metrics::average_precision(&s, &l).unwrap();
            a.to_bits() != brute_auroc(&s, &l).to_bits() || ap.to_bits() != brute_average_precision(&s, &l).to_bits()
        })
        .count()
}
