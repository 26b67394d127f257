//! Synthetic LoRa-like transmitters.
//!
//! Each device gets a fixed set of analog impairments (CFO, I/Q imbalance,
//! PA nonlinearity, DC offset) drawn from a seeded prior. Those impairments
//! are the fingerprint the classifier learns.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tag};

pub const SAMPLE_RATE_HZ: f64 = 1e6;
pub const BANDWIDTH_HZ: f64 = 125e3;
pub const SPREADING_FACTOR: u32 = 7;
pub const PREAMBLE_CHIRPS: usize = 8;
/// `2^SF · fs / B`.
pub const SAMPLES_PER_CHIRP: usize = 1024;
pub const PREAMBLE_SAMPLES: usize = PREAMBLE_CHIRPS * SAMPLES_PER_CHIRP;
/// Preamble plus zero padding so the 256/128 STFT yields exactly 65 frames.
pub const PACKET_SAMPLES: usize = 8448;

pub const CFO_PRIOR_HZ: f64 = 20e3;
pub const CFO_DRIFT_SIGMA_HZ: f64 = 100.0;
pub const GAIN_IMBALANCE_PRIOR: f64 = 0.1;
pub const PHASE_IMBALANCE_PRIOR_RAD: f64 = 0.1;
pub const PA_A3_PRIOR: f64 = 0.05;
pub const DC_PRIOR: f64 = 0.02;

/// Per-device analog impairments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentProfile {
    pub device_id: u32,
    pub cfo_hz: f64,
    pub cfo_drift_hz_per_packet_sigma: f64,
    /// Linear Q/I gain ratio.
    pub iq_gain_imbalance: f64,
    pub iq_phase_imbalance_rad: f64,
    /// Memoryless cubic PA coefficient: `y = x + a3·x·|x|²`.
    pub pa_a3: f64,
    pub dc_offset: Complex64,
}

impl ImpairmentProfile {
    /// A transmitter with no impairments at all.
    pub fn ideal(device_id: u32) -> Self {
        ImpairmentProfile {
            device_id,
            cfo_hz: 0.0,
            cfo_drift_hz_per_packet_sigma: 0.0,
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance_rad: 0.0,
            pa_a3: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidProfile(msg));
        let finite = [
            self.cfo_hz,
            self.cfo_drift_hz_per_packet_sigma,
            self.iq_gain_imbalance,
            self.iq_phase_imbalance_rad,
            self.pa_a3,
            self.dc_offset.re,
            self.dc_offset.im,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite field".into());
        }
        if self.cfo_hz.abs() >= sample_rate_hz / 8.0 {
            return bad(format!("|cfo_hz| = {} must be below fs/8", self.cfo_hz.abs()));
        }
        if self.cfo_drift_hz_per_packet_sigma < 0.0 {
            return bad("negative CFO drift sigma".into());
        }
        if !(0.8..=1.2).contains(&self.iq_gain_imbalance) {
            return bad(format!("iq_gain_imbalance {} outside [0.8, 1.2]", self.iq_gain_imbalance));
        }
        if self.iq_phase_imbalance_rad.abs() > 0.2 {
            return bad(format!("|iq_phase_imbalance_rad| {} exceeds 0.2", self.iq_phase_imbalance_rad));
        }
        Ok(())
    }
}

/// Draws the impairment profile of one device. Pure in `(device_id, dataset_seed)`.
pub fn device_profile(device_id: u32, dataset_seed: u64) -> ImpairmentProfile {
    let mut rng = seed::rng(dataset_seed, &[tag::DEVICE, device_id as u64]);
    let mut sym = |half: f64| rng.gen_range(-half..half);
    let cfo_hz = sym(CFO_PRIOR_HZ);
    let iq_gain_imbalance = 1.0 + sym(GAIN_IMBALANCE_PRIOR);
    let iq_phase_imbalance_rad = sym(PHASE_IMBALANCE_PRIOR_RAD);
    let pa_a3 = sym(PA_A3_PRIOR);
    let dc_offset = Complex64::new(sym(DC_PRIOR), sym(DC_PRIOR));
    ImpairmentProfile {
        device_id,
        cfo_hz,
        cfo_drift_hz_per_packet_sigma: CFO_DRIFT_SIGMA_HZ,
        iq_gain_imbalance,
        iq_phase_imbalance_rad,
        pa_a3,
        dc_offset,
    }
}

/// Complex baseband samples of one packet.
#[derive(Clone, Debug, PartialEq)]
pub struct IqBuffer {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Self {
        IqBuffer { samples, sample_rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    /// Interleaved little-endian `f32` (I, Q) pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8);
        for c in &self.samples {
            out.extend_from_slice(&(c.re as f32).to_le_bytes());
            out.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], sample_rate_hz: f64) -> Option<Self> {
        if bytes.len() % 8 != 0 {
            return None;
        }
        let samples = bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Some(IqBuffer { samples, sample_rate_hz })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, sample_rate_hz: f64) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, sample_rate_hz).ok_or_else(|| Error::format(path, "length not a multiple of 8 bytes"))
    }
}

/// The ideal 8-upchirp preamble, zero padded to [`PACKET_SAMPLES`].
pub fn ideal_preamble() -> Vec<Complex64> {
    let fs = SAMPLE_RATE_HZ;
    let t_chirp = SAMPLES_PER_CHIRP as f64 / fs;
    let mut out = Vec::with_capacity(PACKET_SAMPLES);
    for _ in 0..PREAMBLE_CHIRPS {
        for n in 0..SAMPLES_PER_CHIRP {
            let t = n as f64 / fs;
            // Instantaneous frequency −B/2 + (B/T)·t.
            let phase = 2.0 * PI * (-BANDWIDTH_HZ / 2.0 * t + BANDWIDTH_HZ / (2.0 * t_chirp) * t * t);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out.resize(PACKET_SAMPLES, Complex64::new(0.0, 0.0));
    out
}

/// Synthesizes one packet: PA → I/Q imbalance → DC offset → CFO (with a
/// per-packet Gaussian drift).
pub fn synth_packet(profile: &ImpairmentProfile, packet_index: u64, rng_seed: u64) -> Result<IqBuffer> {
    profile.validate(SAMPLE_RATE_HZ)?;
    let mut rng = seed::rng(rng_seed, &[tag::PACKET, profile.device_id as u64, packet_index]);
    let drift = if profile.cfo_drift_hz_per_packet_sigma > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        z * profile.cfo_drift_hz_per_packet_sigma
    } else {
        0.0
    };
    let cfo = profile.cfo_hz + drift;
    let (sin_phi, cos_phi) = profile.iq_phase_imbalance_rad.sin_cos();
    let g = profile.iq_gain_imbalance;
    let samples = ideal_preamble()
        .into_iter()
        .enumerate()
        .map(|(n, x)| {
            let x = x + profile.pa_a3 * x * x.norm_sqr();
            let x = Complex64::new(x.re, g * (cos_phi * x.im - sin_phi * x.re));
            let x = x + profile.dc_offset;
            x * Complex64::from_polar(1.0, 2.0 * PI * cfo * n as f64 / SAMPLE_RATE_HZ)
        })
        .collect();
    Ok(IqBuffer::new(samples, SAMPLE_RATE_HZ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub delay_samples: usize,
    pub gain_re: f64,
    pub gain_im: f64,
}

impl Tap {
    pub fn gain(&self) -> Complex64 {
        Complex64::new(self.gain_re, self.gain_im)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// `None` disables noise entirely.
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub multipath_taps: Vec<Tap>,
    #[serde(default)]
    pub random_phase: bool,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        ChannelConfig { snr_db: Some(snr_db), multipath_taps: Vec::new(), random_phase: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipath_taps.len() > 4 {
            return Err(Error::InvalidConfig("at most 4 multipath taps".into()));
        }
        if self.multipath_taps.windows(2).any(|w| w[1].delay_samples <= w[0].delay_samples) {
            return Err(Error::InvalidConfig("multipath delays must be strictly increasing".into()));
        }
        if let Some(s) = self.snr_db {
            if s.is_nan() {
                return Err(Error::InvalidConfig("snr_db is NaN".into()));
            }
        }
        Ok(())
    }
}

/// Static multipath, then complex AWGN at the requested SNR (relative to the
/// post-multipath mean power), then an optional global phase rotation.
pub fn apply_channel(iq: &IqBuffer, channel: &ChannelConfig, rng_seed: u64) -> Result<IqBuffer> {
    channel.validate()?;
    if !iq.is_finite() {
        return Err(Error::NonFinite("channel input".into()));
    }
    let mut rng = seed::rng(rng_seed, &[tag::CHANNEL]);
    let mut y = if channel.multipath_taps.is_empty() {
        iq.samples.clone()
    } else {
        let mut y = vec![Complex64::new(0.0, 0.0); iq.len()];
        for tap in &channel.multipath_taps {
            let g = tap.gain();
            for n in tap.delay_samples..iq.len() {
                y[n] += g * iq.samples[n - tap.delay_samples];
            }
        }
        y
    };
    if let Some(snr_db) = channel.snr_db.filter(|s| s.is_finite()) {
        let p_sig = y.iter().map(|c| c.norm_sqr()).sum::<f64>() / y.len().max(1) as f64;
        let sigma = (p_sig / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for c in y.iter_mut() {
            *c += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    if channel.random_phase {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let rot = Complex64::from_polar(1.0, theta);
        y.iter_mut().for_each(|c| *c *= rot);
    }
    Ok(IqBuffer::new(y, iq.sample_rate_hz))
}

/// Unit-power complex white Gaussian noise of packet length.
pub fn noise_packet(index: u64, dataset_seed: u64) -> IqBuffer {
    let mut rng = seed::rng(dataset_seed, &[tag::NOISE_POOL, index]);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let samples = (0..PACKET_SAMPLES)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * s, im * s)
        })
        .collect();
    IqBuffer::new(samples, SAMPLE_RATE_HZ)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Anomaly pool: devices never seen in training.
    Unseen,
    /// Anomaly pool: pure noise.
    Noise,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unseen => "unseen",
            Split::Noise => "noise",
        }
    }

    pub fn is_anomaly(self) -> bool {
        matches!(self, Split::Unseen | Split::Noise)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub dataset_seed: u64,
    pub device_count: u32,
    /// Packets per device before the validation carve-out.
    pub train_pool_per_device: usize,
    pub val_fraction: f64,
    pub test_per_device: usize,
    pub unseen_device_count: u32,
    pub unseen_per_device: usize,
    pub noise_packets: usize,
    pub channel: ChannelConfig,
}

impl DatasetConfig {
    /// Ten enrolled devices at 20 dB SNR, five unseen devices and a pure-noise
    /// pool as anomalies.
    pub fn desk() -> Self {
        DatasetConfig {
            dataset_seed: 42,
            device_count: 10,
            train_pool_per_device: 200,
            val_fraction: 0.2,
            test_per_device: 100,
            unseen_device_count: 5,
            unseen_per_device: 100,
            noise_packets: 500,
            channel: ChannelConfig { snr_db: Some(20.0), multipath_taps: Vec::new(), random_phase: true },
        }
    }

    /// The full-size layout: 30 devices, 800 training-pool and 400 test packets each.
    pub fn full_scale() -> Self {
        DatasetConfig {
            device_count: 30,
            train_pool_per_device: 800,
            test_per_device: 400,
            unseen_device_count: 30,
            unseen_per_device: 400,
            noise_packets: 2000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_count < 2 {
            return Err(Error::InvalidConfig("device_count must be ≥ 2".into()));
        }
        if self.train_pool_per_device < 10 {
            return Err(Error::InvalidConfig("train_pool_per_device must be ≥ 10".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 1)".into()));
        }
        self.channel.validate()
    }

    pub fn val_per_device(&self) -> usize {
        (self.train_pool_per_device as f64 * self.val_fraction).round() as usize
    }

    pub fn train_per_device(&self) -> usize {
        self.train_pool_per_device - self.val_per_device()
    }
}

/// One packet in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Relative to the dataset root.
    pub path: String,
    /// `None` for pure-noise packets.
    pub device_id: Option<u32>,
    pub packet_index: u64,
    pub split: Split,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub records: Vec<PacketRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "dataset.json";

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PacketRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads `dataset.json` + `manifest.jsonl` from a dataset root.
    pub fn load(root: &Path) -> Result<Self> {
        let cfg_path = root.join(CONFIG_FILE);
        let cfg_text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: DatasetConfig = serde_json::from_str(&cfg_text)?;
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(DatasetManifest { config, records })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let cfg_path = root.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg_path, e))?;
        let path = root.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Assigns packets to splits without synthesizing anything.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<PacketRecord>> {
    cfg.validate()?;
    let snr = cfg.channel.snr_db;
    let mut records = Vec::new();
    let record = |device: Option<u32>, index: u64, split: Split| {
        let dev_tag = device.map_or(u64::MAX, u64::from);
        let name = match device {
            Some(d) => format!("dev{d:03}_pkt{index:05}.iq"),
            None => format!("noise_{index:05}.iq"),
        };
        PacketRecord {
            path: format!("iq/{}/{name}", split.name()),
            device_id: device,
            packet_index: index,
            split,
            snr_db: if split == Split::Noise { None } else { snr },
            seed: seed::derive(cfg.dataset_seed, &[tag::CHANNEL, dev_tag, index]),
        }
    };
    let n_val = cfg.val_per_device();
    for d in 0..cfg.device_count {
        let mut pool: Vec<u64> = (0..cfg.train_pool_per_device as u64).collect();
        pool.shuffle(&mut seed::rng(cfg.dataset_seed, &[tag::SHUFFLE, d as u64]));
        let mut val: Vec<u64> = pool[..n_val].to_vec();
        let mut train: Vec<u64> = pool[n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        records.extend(train.into_iter().map(|i| record(Some(d), i, Split::Train)));
        records.extend(val.into_iter().map(|i| record(Some(d), i, Split::Val)));
        let base = cfg.train_pool_per_device as u64;
        records.extend((base..base + cfg.test_per_device as u64).map(|i| record(Some(d), i, Split::Test)));
    }
    for u in 0..cfg.unseen_device_count {
        let d = cfg.device_count + u;
        records.extend((0..cfg.unseen_per_device as u64).map(|i| record(Some(d), i, Split::Unseen)));
    }
    records.extend((0..cfg.noise_packets as u64).map(|i| record(None, i, Split::Noise)));
    Ok(records)
}

/// Synthesizes the packet behind one manifest record.
pub fn render_packet(cfg: &DatasetConfig, rec: &PacketRecord) -> Result<IqBuffer> {
    match rec.device_id {
        None => Ok(noise_packet(rec.packet_index, cfg.dataset_seed)),
        Some(d) => {
            let profile = device_profile(d, cfg.dataset_seed);
            let clean = synth_packet(&profile, rec.packet_index, cfg.dataset_seed)?;
            apply_channel(&clean, &cfg.channel, rec.seed)
        }
    }
}

/// Writes every IQ file plus the manifest under `out_dir`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let records = plan_dataset(cfg)?;
    for split in [Split::Train, Split::Val, Split::Test, Split::Unseen, Split::Noise] {
        let dir = out_dir.join("iq").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for rec in &records {
        render_packet(cfg, rec)?.write(&out_dir.join(&rec.path))?;
    }
    let manifest = DatasetManifest { config: cfg.clone(), records };
    manifest.save(out_dir)?;
    Ok(manifest)
}

pub fn packet_path(root: &Path, rec: &PacketRecord) -> PathBuf {
    root.join(&rec.path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_is_deterministic_and_device_specific() {
        assert_eq!(device_profile(0, 42), device_profile(0, 42));
        assert_ne!(device_profile(0, 42).cfo_hz, device_profile(1, 42).cfo_hz);
        device_profile(0, 42).validate(SAMPLE_RATE_HZ).unwrap();
    }

    #[test]
    fn cfo_prior_range() {
        let cfos: Vec<f64> = (0..1000).map(|d| device_profile(d, 42).cfo_hz).collect();
        let min = cfos.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = cfos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= -CFO_PRIOR_HZ && max <= CFO_PRIOR_HZ);
        // A uniform prior of 1000 draws reaches within 1% of each bound.
        assert!(min < -0.98 * CFO_PRIOR_HZ && max > 0.98 * CFO_PRIOR_HZ, "{min} {max}");
        for d in 0..1000 {
            let p = device_profile(d, 7);
            assert!((0.9..=1.1).contains(&p.iq_gain_imbalance));
            assert!(p.iq_phase_imbalance_rad.abs() <= 0.1);
            assert!(p.pa_a3.abs() <= 0.05);
        }
    }

    #[test]
    fn ideal_chirp_is_constant_envelope() {
        let x = synth_packet(&ImpairmentProfile::ideal(0), 0, 1).unwrap();
        assert_eq!(x.len(), PACKET_SAMPLES);
        let dev = x.samples[..PREAMBLE_SAMPLES].iter().map(|c| (c.norm() - 1.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-9, "{dev}");
        assert!(x.samples[PREAMBLE_SAMPLES..].iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn ideal_chirp_sweeps_the_band() {
        let x = ideal_preamble();
        for chirp in 0..PREAMBLE_CHIRPS {
            let base = chirp * SAMPLES_PER_CHIRP;
            // Instantaneous frequency from the phase increment between samples.
            let inst: Vec<f64> = (base..base + SAMPLES_PER_CHIRP - 1)
                .map(|n| (x[n + 1] * x[n].conj()).arg() * SAMPLE_RATE_HZ / (2.0 * PI))
                .collect();
            assert!((inst[0] + BANDWIDTH_HZ / 2.0).abs() < 200.0, "{}", inst[0]);
            assert!((inst[inst.len() - 1] - BANDWIDTH_HZ / 2.0).abs() < 200.0);
            let step = BANDWIDTH_HZ / SAMPLES_PER_CHIRP as f64;
            assert!(inst.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-6));
        }
    }

    #[test]
    fn cfo_is_a_pure_rotation() {
        let mut p = ImpairmentProfile::ideal(3);
        p.cfo_hz = 12_345.0;
        let x = synth_packet(&p, 4, 9).unwrap();
        let ideal = ideal_preamble();
        for (n, (a, b)) in x.samples.iter().zip(&ideal).enumerate() {
            let want = b * Complex64::from_polar(1.0, 2.0 * PI * p.cfo_hz * n as f64 / SAMPLE_RATE_HZ);
            assert!((a - want).norm() < 1e-12);
        }
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = ImpairmentProfile::ideal(0);
        p.iq_gain_imbalance = 1.5;
        assert!(synth_packet(&p, 0, 0).is_err());
        let mut p = ImpairmentProfile::ideal(0);
        p.cfo_hz = SAMPLE_RATE_HZ / 8.0;
        assert!(synth_packet(&p, 0, 0).is_err());
    }

    #[test]
    fn identity_channel() {
        let x = synth_packet(&device_profile(2, 1), 0, 1).unwrap();
        let ch = ChannelConfig { snr_db: None, multipath_taps: vec![], random_phase: false };
        assert_eq!(apply_channel(&x, &ch, 5).unwrap(), x);
    }

    #[test]
    fn one_tap_channel_scales() {
        let x = synth_packet(&device_profile(2, 1), 0, 1).unwrap();
        let g = Complex64::new(0.3, -0.4);
        let ch = ChannelConfig {
            snr_db: None,
            multipath_taps: vec![Tap { delay_samples: 0, gain_re: g.re, gain_im: g.im }],
            random_phase: false,
        };
        let y = apply_channel(&x, &ch, 5).unwrap();
        for (a, b) in y.samples.iter().zip(&x.samples) {
            assert!((a - g * b).norm() < 1e-15);
        }
    }

    #[test]
    fn unit_power_at_zero_db_gives_unit_noise() {
        let n = 1_000_000;
        let x = IqBuffer::new(vec![Complex64::new(1.0, 0.0); n], SAMPLE_RATE_HZ);
        let y = apply_channel(&x, &ChannelConfig::awgn(0.0), 11).unwrap();
        let noise_power = y.samples.iter().map(|c| (c - Complex64::new(1.0, 0.0)).norm_sqr()).sum::<f64>() / n as f64;
        assert!((noise_power - 1.0).abs() < 0.02, "{noise_power}");
    }

    #[test]
    fn measured_snr_matches_request() {
        let profile = device_profile(1, 3);
        let mut sig = 0.0;
        let mut noise = 0.0;
        for i in 0..100 {
            let x = synth_packet(&profile, i, 3).unwrap();
            let y = apply_channel(&x, &ChannelConfig::awgn(20.0), 1000 + i).unwrap();
            sig += x.mean_power();
            noise += y.samples.iter().zip(&x.samples).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / x.len() as f64;
        }
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 20.0).abs() < 0.2, "{snr}");
    }

    #[test]
    fn channel_rejects_bad_taps() {
        let x = IqBuffer::new(vec![Complex64::new(1.0, 0.0); 16], SAMPLE_RATE_HZ);
        let tap = |d| Tap { delay_samples: d, gain_re: 1.0, gain_im: 0.0 };
        let ch = ChannelConfig { snr_db: None, multipath_taps: vec![tap(2), tap(1)], random_phase: false };
        assert!(apply_channel(&x, &ch, 0).is_err());
        let ch = ChannelConfig { snr_db: None, multipath_taps: (0..5).map(tap).collect(), random_phase: false };
        assert!(apply_channel(&x, &ch, 0).is_err());
    }

    #[test]
    fn desk_plan_arithmetic() {
        let cfg = DatasetConfig::desk();
        let m = DatasetManifest { config: cfg.clone(), records: plan_dataset(&cfg).unwrap() };
        assert_eq!(m.count(Split::Train), 1600);
        assert_eq!(m.count(Split::Val), 400);
        assert_eq!(m.count(Split::Test), 1000);
        assert_eq!(m.count(Split::Unseen), 500);
        assert_eq!(m.count(Split::Noise), 500);
        let mut keys: Vec<_> = m.records.iter().map(|r| (r.device_id, r.packet_index)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), m.records.len(), "a packet appears twice");
        for d in 0..10 {
            let val = m.split(Split::Val).filter(|r| r.device_id == Some(d)).count();
            assert_eq!(val, 40);
        }
    }

    #[test]
    fn full_scale_config() {
        let cfg = DatasetConfig::full_scale();
        assert_eq!(cfg.device_count, 30);
        assert_eq!(cfg.train_pool_per_device, 800);
        assert_eq!(cfg.test_per_device, 400);
        assert_eq!(cfg.val_per_device(), 160);
    }

    #[test]
    fn iq_bytes_round_trip() {
        let x = synth_packet(&device_profile(4, 4), 2, 4).unwrap();
        let back = IqBuffer::from_bytes(&x.to_bytes(), SAMPLE_RATE_HZ).unwrap();
        for (a, b) in back.samples.iter().zip(&x.samples) {
            assert_eq!(a.re, b.re as f32 as f64);
            assert_eq!(a.im, b.im as f32 as f64);
        }
        assert!(IqBuffer::from_bytes(&[0u8; 7], SAMPLE_RATE_HZ).is_none());
    }
}
