use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rffi::attacks::{run_attacks, AttackContext, AttackSpec, Sanitize};
use rffi::checkpoint::Checkpoint;
use rffi::classifier::{evaluate, ArchPreset, LabeledSet, Model};
use rffi::frontend::{FrontendConfig, LogMelSpectrogram};
use rffi::guard::{anomaly_scores, calibrate_threshold, decide, GuardCalibration, Vae};
use rffi::harness::experiment::{
    ensure_dataset, ensure_features, featurize_dataset, feature_path, load_feature_sets, load_labeled, load_split, run_experiment_with, train_classifier_stage,
    train_guard_stage, MetricsBundle, Variant,
};
use rffi::harness::{report, ExperimentConfig};
use rffi::rf_sim::{self, DatasetManifest, Split};
use rffi::seed;
use rffi::watermark::{self, gen_key, probe_indices, verify_signature, verify_trigger, VerifyMode};

#[derive(Parser)]
#[command(name = "rffi", version, about = "RF fingerprint identification with watermarking and an anomaly guard")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize IQ packets and the manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn every packet of a manifest into a log-Mel feature file.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying the front-end settings (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the watermarked classifier (simulating and featurizing as needed).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Where to copy the checkpoint (defaults to `<output_dir>/classifier.rfck`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a classifier on one split of a feature directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `manifest.jsonl` inside a feature directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Watermark key generation and ownership checks.
    Wm {
        #[command(subcommand)]
        cmd: WmCmd,
    },
    /// Anomaly guard subcommands.
    Guard {
        #[command(subcommand)]
        cmd: GuardCmd,
    },
    /// Run one attack and emit its report as JSON.
    Attack(AttackArgs),
    /// Run the whole experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the default desk config as TOML and exit.
        #[arg(long)]
        print_default_config: bool,
    },
    /// Render a metrics bundle as markdown tables.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WmCmd {
    Genkey {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        feature_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    Verify {
        #[arg(long, value_enum, default_value = "plain")]
        mode: WmMode,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Feature-directory manifest; probes come from its test split.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1.0)]
        blur_sigma: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WmMode {
    Plain,
    Adv,
    Sanitized,
    Signature,
}

#[derive(Subcommand)]
enum GuardCmd {
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick τ from the validation split at the requested false-positive rate.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        fpr: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One JSON line per input: path, score, decision.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one split; all records otherwise.
        #[arg(long)]
        split: Option<SplitArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    Unseen,
    Noise,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::Unseen => Split::Unseen,
            SplitArg::Noise => Split::Noise,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_parser = ["prune", "quantize", "finetune", "sanitize", "evade"])]
    kind: String,
    /// JSON object with the attack's parameters, e.g. `{"rho": 0.3}`.
    #[arg(long, default_value = "{}")]
    params: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    guard_ckpt: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn feature_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_vae(path: &Path) -> Result<Vae> {
    Ok(Vae::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn probes_from(manifest: &Path, key: &watermark::WatermarkKey, count: usize) -> Result<(LabeledSet, Vec<LogMelSpectrogram>)> {
    let root = feature_root(manifest);
    let m = DatasetManifest::load(&root)?;
    let test = load_labeled(&root, &m, Split::Test)?;
    let idx = probe_indices(key, test.len(), count)?;
    let probes = idx.iter().map(|&i| test.specs[i].clone()).collect();
    Ok((test, probes))
}

fn prepared(config: &Path) -> Result<(ExperimentConfig, String, PathBuf)> {
    let cfg = ExperimentConfig::load(config)?;
    let ((dd, data_dir), _) = ensure_dataset(&cfg)?;
    let ((fd, feat_dir), _) = ensure_features(&cfg, &dd, &data_dir)?;
    Ok((cfg, fd, feat_dir))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Simulate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = rf_sim::build_dataset(&cfg.dataset, &out)?;
            log(&format!("wrote {} packets to {}", m.records.len(), out.display()));
        }
        Cmd::Featurize { manifest, out, config } => {
            let frontend = match config {
                Some(p) => ExperimentConfig::load(&p)?.frontend,
                None => FrontendConfig::default(),
            };
            let root = feature_root(&manifest);
            let m = DatasetManifest::load(&root)?;
            featurize_dataset(&root, &m, &frontend, &out)?;
            log(&format!("featurized {} packets into {}", m.records.len(), out.display()));
        }
        Cmd::Train { config, out } => {
            let (cfg, fd, feat_dir) = prepared(&config)?;
            let sets = load_feature_sets(&feat_dir)?;
            let fdim = ArchPreset::named(cfg.classifier.preset).feature_dim;
            let key = gen_key(cfg.classifier.key_seed, cfg.dataset.device_count as usize, fdim)?;
            let ((model, metrics), _) = train_classifier_stage(&cfg, &fd, &sets, &key, Variant::Main, &mut log)?;
            let dest = out.unwrap_or_else(|| cfg.output_dir.join("classifier.rfck"));
            let mut m = std::collections::BTreeMap::new();
            m.insert("test_accuracy".to_string(), metrics.eval.accuracy);
            model.to_checkpoint(&metrics.stage_digest, metrics.best_epoch as u32, m).save(&dest)?;
            let key_path = dest.with_extension("rfwk");
            watermark::save_key(&key, &key_path)?;
            log(&format!("test accuracy {:.4}; checkpoint {} key {}", metrics.eval.accuracy, dest.display(), key_path.display()));
            log(&format!("features: {}", feat_dir.join(rf_sim::MANIFEST_FILE).display()));
        }
        Cmd::Eval { ckpt, manifest, split, report } => {
            let model = load_model(&ckpt)?;
            let root = feature_root(&manifest);
            let set = load_labeled(&root, &DatasetManifest::load(&root)?, split.into())?;
            emit_json(&evaluate(&model, &set)?, report.as_deref())?;
        }
        Cmd::Wm { cmd } => match cmd {
            WmCmd::Genkey { seed, classes, feature_dim, out } => {
                let key = gen_key(seed, classes, feature_dim)?;
                watermark::save_key(&key, &out)?;
                log(&format!("key: trigger at ({}, {}), y_wm {}", key.trigger.mel, key.trigger.frame, key.y_wm));
            }
            WmCmd::Verify { mode, ckpt, key, manifest, probes, blur_sigma, noise_sigma, seed } => {
                let model = load_model(&ckpt)?;
                let key = watermark::load_key(&key)?;
                let (_, probes) = probes_from(&manifest, &key, probes)?;
                let result = match mode {
                    WmMode::Plain => verify_trigger(&model, &key, &probes, &VerifyMode::Plain)?,
                    WmMode::Adv => verify_trigger(&model, &key, &probes, &VerifyMode::Adversarial)?,
                    WmMode::Sanitized => {
                        let steps = vec![Sanitize::GaussianBlur { sigma: blur_sigma }, Sanitize::Noise { sigma: noise_sigma }];
                        verify_trigger(&model, &key, &probes, &VerifyMode::Sanitized { steps, seed })?
                    }
                    WmMode::Signature => verify_signature(&model, &key, &probes)?,
                };
                emit_json(&result, None)?;
                if !result.pass {
                    std::process::exit(2);
                }
            }
        },
        Cmd::Guard { cmd } => match cmd {
            GuardCmd::Train { config, out } => {
                let (cfg, fd, feat_dir) = prepared(&config)?;
                let sets = load_feature_sets(&feat_dir)?;
                let ((vae, best_epoch, initial, _, digest), _) = train_guard_stage(&cfg, &fd, &sets, &mut log)?;
                let dest = out.unwrap_or_else(|| cfg.output_dir.join("vae.rfck"));
                let mut m = std::collections::BTreeMap::new();
                m.insert("initial_val_mse".to_string(), initial);
                vae.to_checkpoint(&digest, best_epoch as u32, m).save(&dest)?;
                log(&format!("guard checkpoint {}; features: {}", dest.display(), feat_dir.join(rf_sim::MANIFEST_FILE).display()));
            }
            GuardCmd::Calibrate { ckpt, manifest, fpr, alpha, out } => {
                let vae = load_vae(&ckpt)?;
                let root = feature_root(&manifest);
                let val = load_split(&root, &DatasetManifest::load(&root)?, Split::Val)?;
                let refs: Vec<_> = val.iter().map(|(x, _)| x).collect();
                let cal = calibrate_threshold(&anomaly_scores(&vae, &refs, alpha)?, fpr, alpha)?;
                emit_json(&cal, Some(&out))?;
                log(&format!("τ = {:.5} (calibration FPR {:.4})", cal.tau, cal.achieved_fpr));
            }
            GuardCmd::Score { ckpt, calibration, manifest, split } => {
                let vae = load_vae(&ckpt)?;
                let cal: GuardCalibration = serde_json::from_str(&fs::read_to_string(&calibration)?)?;
                let root = feature_root(&manifest);
                let m = DatasetManifest::load(&root)?;
                let records: Vec<_> = m.records.iter().filter(|r| split.map_or(true, |s| r.split == Split::from(s))).collect();
                let specs = records.iter().map(|r| rffi::frontend::read_features(&feature_path(&root, r))).collect::<rffi::Result<Vec<_>>>()?;
                let scores = anomaly_scores(&vae, &specs.iter().collect::<Vec<_>>(), cal.alpha)?;
                let mut stdout = std::io::stdout().lock();
                for (r, s) in records.iter().zip(scores) {
                    let line = serde_json::json!({ "path": r.path, "score": s, "decision": decide(s, &cal) });
                    writeln!(stdout, "{line}")?;
                }
            }
        },
        Cmd::Attack(a) => {
            let mut params: serde_json::Value = serde_json::from_str(&a.params).context("--params must be a JSON object")?;
            let Some(obj) = params.as_object_mut() else { bail!("--params must be a JSON object") };
            obj.insert("kind".into(), a.kind.clone().into());
            let spec: AttackSpec = serde_json::from_value(params).context("attack parameters")?;
            let model = load_model(&a.ckpt)?;
            let key = a.key.as_deref().map(watermark::load_key).transpose()?;
            let root = feature_root(&a.manifest);
            let m = DatasetManifest::load(&root)?;
            let test = load_labeled(&root, &m, Split::Test)?;
            let val = load_labeled(&root, &m, Split::Val)?;
            let probes = match &key {
                Some(k) => probe_indices(k, test.len(), a.probes)?.iter().map(|&i| test.specs[i].clone()).collect(),
                None => Vec::new(),
            };
            let guard = match (&a.guard_ckpt, &a.calibration) {
                (Some(g), Some(c)) => Some((load_vae(g)?, serde_json::from_str::<GuardCalibration>(&fs::read_to_string(c)?)?)),
                (None, None) => None,
                _ => bail!("--guard-ckpt and --calibration go together"),
            };
            let ctx = AttackContext {
                model: &model,
                key: key.as_ref(),
                eval_set: &test,
                probes: &probes,
                finetune_set: &val,
                guard: guard.as_ref().map(|(v, c)| (v, c)),
                seed: seed::derive(a.seed, &[seed::tag::ATTACK]),
            };
            let report = run_attacks(&ctx, std::slice::from_ref(&spec))?;
            emit_json(&report[0], a.out.as_deref())?;
        }
        Cmd::Run { config, out, print_default_config } => {
            if print_default_config {
                print!("{}", ExperimentConfig::desk("runs/desk").to_toml()?);
                return Ok(());
            }
            let Some(config) = config else { bail!("--config is required") };
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let bundle = run_experiment_with(&cfg, &mut log)?;
            print!("{}", report::render(&bundle));
            log(&format!("bundle: {}", cfg.output_dir.join(rffi::harness::experiment::BUNDLE_FILE).display()));
        }
        Cmd::Report { bundle, out } => {
            let text = report::render(&MetricsBundle::load(&bundle)?);
            match out {
                Some(p) => fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}
