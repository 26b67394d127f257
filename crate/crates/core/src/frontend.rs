//! Fixed STFT → Mel → log feature pipeline.
//!
//! Frequencies follow the raw DFT bin order: bin `k` sits at `k·fs/N` for
//! `k = 0..N`, with no fftshift. This convention is part of the feature
//! file contract.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rf_sim::IqBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Rectangular => vec![1.0; n],
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub n_mels: usize,
    pub log_epsilon: f64,
    pub target_frames: usize,
    pub sample_rate_hz: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_fft: 256,
            hop: 128,
            window: WindowKind::Hann,
            n_mels: 32,
            log_epsilon: 1e-6,
            target_frames: 65,
            sample_rate_hz: 1e6,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("frontend: {m}")));
        if self.n_fft == 0 || self.hop == 0 {
            return bad("n_fft and hop must be positive");
        }
        if self.hop > self.n_fft {
            return bad("hop must not exceed n_fft");
        }
        if self.n_mels < 2 {
            return bad("n_mels must be ≥ 2");
        }
        if !(self.log_epsilon > 0.0) {
            return bad("log_epsilon must be > 0");
        }
        if self.target_frames == 0 {
            return bad("target_frames must be ≥ 1");
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be > 0");
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| (len - self.n_fft) / self.hop + 1)
    }
}

/// `X(m, k)`, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub frame_count: usize,
    pub bin_count: usize,
    pub values: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.values[frame * self.bin_count + bin]
    }
}

/// `X(m,k) = Σₙ x[n + mR]·w[n]·e^{−j2πkn/N}`; frames never run past the
/// end of the signal.
pub fn stft(iq: &IqBuffer, cfg: &FrontendConfig) -> Result<ComplexSpectrogram> {
    stft_with_window(&iq.samples, cfg, &cfg.window.coefficients(cfg.n_fft))
}

fn stft_with_window(x: &[Complex64], cfg: &FrontendConfig, window: &[f64]) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.n_fft;
    let frames = cfg.frame_count(x.len()).ok_or(Error::TooShort { needed: n, got: x.len() })?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut values = Vec::with_capacity(frames * n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for m in 0..frames {
        let seg = &x[m * cfg.hop..m * cfg.hop + n];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(window) {
            *b = s * w;
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf);
    }
    Ok(ComplexSpectrogram { frame_count: frames, bin_count: n, values })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `H_m(k)` over the DFT bins.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft: usize,
    /// `n_mels × n_fft`, row-major.
    pub weights: Vec<f64>,
    /// `n_mels + 2` HTK-Mel-spaced edge frequencies over `[0, fs]`.
    pub edge_hz: Vec<f64>,
    /// Edge positions on the bin grid after the one-bin minimum spacing.
    pub edge_bins: Vec<usize>,
}

impl MelFilterbank {
    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_fft + bin]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_fft..(mel + 1) * self.n_fft]
    }
}

/// Builds the filterbank. Edge points are equally spaced on the HTK Mel
/// scale over `[0, fs]` and rounded to the nearest bin; points that land on
/// or below their predecessor are moved up one bin past it, so narrow
/// low-frequency filters degrade to one-bin triangles instead of vanishing.
/// Filter `m` rises from edge `m` to a unit peak at edge `m+1` and falls to
/// zero at edge `m+2`.
pub fn build_mel_filterbank(cfg: &FrontendConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let n = cfg.n_fft;
    let points = cfg.n_mels + 2;
    let top = hz_to_mel(cfg.sample_rate_hz);
    let edge_hz: Vec<f64> = (0..points).map(|i| mel_to_hz(top * i as f64 / (points - 1) as f64)).collect();
    let mut edge_bins = Vec::with_capacity(points);
    for (i, &f) in edge_hz.iter().enumerate() {
        let raw = (f * n as f64 / cfg.sample_rate_hz).round() as usize;
        let b = if i == 0 { raw } else { raw.max(edge_bins[i - 1] + 1) };
        edge_bins.push(b);
    }
    // The last centre must be a real bin strictly below the upper edge.
    if edge_bins[points - 2] >= n || edge_bins[points - 1] > n {
        return Err(Error::Filterbank(format!(
            "{} mel bands do not fit on a {n}-bin grid (adjacent centres collide)",
            cfg.n_mels
        )));
    }
    let mut weights = vec![0.0; cfg.n_mels * n];
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (edge_bins[m] as f64, edge_bins[m + 1] as f64, edge_bins[m + 2] as f64);
        for k in 0..n {
            let kf = k as f64;
            let w = if kf > lo && kf <= c {
                (kf - lo) / (c - lo)
            } else if kf > c && kf < hi {
                (hi - kf) / (hi - c)
            } else {
                0.0
            };
            weights[m * n + k] = w;
        }
    }
    Ok(MelFilterbank { n_mels: cfg.n_mels, n_fft: n, weights, edge_hz, edge_bins })
}

/// Real grid indexed `(row, col)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// `E_m(frame) = Σ_k |X(frame, k)|²·H_m(k)`, laid out as `(mel, frame)`.
pub fn mel_energies(cs: &ComplexSpectrogram, fb: &MelFilterbank) -> Result<RealGrid> {
    if cs.bin_count != fb.n_fft {
        return Err(Error::shape(format!("spectrogram has {} bins, filterbank {}", cs.bin_count, fb.n_fft)));
    }
    let mut data = vec![0.0; fb.n_mels * cs.frame_count];
    let mut power = vec![0.0; cs.bin_count];
    for f in 0..cs.frame_count {
        for (p, x) in power.iter_mut().zip(&cs.values[f * cs.bin_count..(f + 1) * cs.bin_count]) {
            *p = x.norm_sqr();
        }
        for m in 0..fb.n_mels {
            data[m * cs.frame_count + f] = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
        }
    }
    Ok(RealGrid { rows: fb.n_mels, cols: cs.frame_count, data })
}

/// Elementwise `log(E + ε)`.
pub fn log_compress(energies: &RealGrid, epsilon: f64) -> Result<RealGrid> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("log epsilon must be > 0, got {epsilon}")));
    }
    if let Some(&neg) = energies.data.iter().find(|&&e| e < 0.0 || e.is_nan()) {
        return Err(Error::NegativeEnergy(neg));
    }
    Ok(RealGrid { rows: energies.rows, cols: energies.cols, data: energies.data.iter().map(|e| (e + epsilon).ln()).collect() })
}

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Standardized `n_mels × frames` feature plane.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub n_mels: usize,
    pub frames: usize,
    /// Row-major `(mel, frame)`.
    pub values: Vec<f32>,
    pub normalization: Option<Normalization>,
}

impl LogMelSpectrogram {
    pub fn new(n_mels: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * frames {
            return Err(Error::shape(format!("{} values for a {n_mels}×{frames} grid", values.len())));
        }
        Ok(LogMelSpectrogram { n_mels, frames, values, normalization: None })
    }

    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.frames + frame]
    }

    pub fn set(&mut self, mel: usize, frame: usize, v: f32) {
        self.values[mel * self.frames + frame] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.frames)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn linf_distance(&self, other: &Self) -> f32 {
        self.values.iter().zip(&other.values).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Centred edge-replicate padding / centred cropping of frame columns.
fn fit_frames(grid: &RealGrid, target: usize) -> RealGrid {
    let idx = crate::nn::graph::fit_index(grid.cols, target);
    let mut data = Vec::with_capacity(grid.rows * target);
    for r in 0..grid.rows {
        data.extend(idx.iter().map(|&c| grid.at(r, c)));
    }
    RealGrid { rows: grid.rows, cols: target, data }
}

/// Runs the whole pipeline with a prebuilt filterbank.
pub fn featurize_with(iq: &IqBuffer, cfg: &FrontendConfig, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if !iq.is_finite() {
        return Err(Error::NonFinite("IQ samples".into()));
    }
    let cs = stft(iq, cfg)?;
    let logmel = log_compress(&mel_energies(&cs, fb)?, cfg.log_epsilon)?;
    let fitted = fit_frames(&logmel, cfg.target_frames);
    let n = fitted.data.len() as f64;
    let mean = fitted.data.iter().sum::<f64>() / n;
    let var = fitted.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let values = fitted.data.iter().map(|v| ((v - mean) / std) as f32).collect();
    Ok(LogMelSpectrogram {
        n_mels: fitted.rows,
        frames: fitted.cols,
        values,
        normalization: Some(Normalization { mean, std }),
    })
}

/// STFT → Mel energies → log → frame pad/crop → per-spectrogram standardization.
pub fn featurize(iq: &IqBuffer, cfg: &FrontendConfig) -> Result<LogMelSpectrogram> {
    featurize_with(iq, cfg, &build_mel_filterbank(cfg)?)
}

pub const FEATURE_MAGIC: &[u8; 4] = b"RFLM";
pub const FEATURE_VERSION: u32 = 1;

/// Feature cache file: magic, version, n_mels, frames (u32 LE each), then
/// the row-major `f32` LE grid.
pub fn encode_features(spec: &LogMelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + spec.values.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(spec.frames as u32).to_le_bytes());
    for v in &spec.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<LogMelSpectrogram, String> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    if word(4) != FEATURE_VERSION {
        return Err(format!("unsupported version {}", word(4)));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + rows * cols * 4 {
        return Err("truncated grid".into());
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    LogMelSpectrogram::new(rows, cols, values).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    fs::write(path, encode_features(spec)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<LogMelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|r| Error::format(path, r))
}
