//! Markdown rendering of a [`MetricsBundle`].

use std::fmt::Write;

use super::experiment::MetricsBundle;
use crate::watermark::VerificationResult;

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn verdict(r: &VerificationResult) -> &'static str {
    if r.pass {
        "pass"
    } else {
        "fail"
    }
}

/// Guard table (AUROC / AP / keep rate), per-class classifier table and
/// watermark/attack table.
pub fn render(b: &MetricsBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Experiment report\n\nConfig digest `{}`\n", b.config_digest);
    let d = &b.dataset;
    let _ = writeln!(s, "Dataset: {} train, {} val, {} test, {} unseen-device and {} noise packets.\n", d.train, d.val, d.test, d.unseen, d.noise);

    let g = &b.guard;
    let _ = writeln!(s, "## Anomaly guard\n");
    let _ = writeln!(s, "| Model | Pool | AUROC | AP | Keep Rate(%) | Flag Rate(%) |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for p in g.pools.iter().chain(std::iter::once(&g.pooled)) {
        let _ = writeln!(s, "| ConvVAE | {} | {:.4} | {:.4} | {} | {} |", p.pool, p.auroc, p.average_precision, pct(g.keep_rate), pct(p.flag_rate));
    }
    let c = &g.calibration;
    let _ = writeln!(
        s,
        "\nThreshold τ = {:.4} (target FPR {}%, calibration FPR {}%, held-out FPR {}% over {} clean scores). Validation MSE {:.4} → {:.4}, best epoch {}.\n",
        c.tau,
        pct(c.target_fpr),
        pct(c.achieved_fpr),
        pct(g.test_fpr),
        g.test_count,
        g.initial_val_mse,
        g.best_val_mse,
        g.best_epoch
    );

    let e = &b.classifier.eval;
    let _ = writeln!(s, "## Classifier\n\nTest accuracy {}% over {} packets (best epoch {}, val {}%).\n", pct(e.accuracy), e.total, b.classifier.best_epoch, pct(b.classifier.best_val_accuracy));
    let _ = writeln!(s, "| Class | Precision | Recall | F1-Score | Support |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for (i, k) in e.per_class.iter().enumerate() {
        let _ = writeln!(s, "| {i} | {:.4} | {:.4} | {:.4} | {} |", k.precision, k.recall, k.f1, k.support);
    }
    for (name, a) in [("Macro Avg.", &e.macro_avg), ("Weighted Avg.", &e.weighted_avg), ("Min", &e.min_class), ("Max", &e.max_class)] {
        let _ = writeln!(s, "| {name} | {:.4} | {:.4} | {:.4} | |", a.precision, a.recall, a.f1);
    }
    if let Some(nw) = &b.baselines.no_watermark {
        let _ = writeln!(s, "\nNo-watermark twin: {}% test accuracy.", pct(nw.eval.accuracy));
    }
    if let Some(pt) = &b.baselines.plain_trigger {
        let _ = writeln!(s, "Plain-trigger twin: {}% test accuracy, ASR {}% plain / {}% sanitized.", pct(pt.classifier.eval.accuracy), pct(pt.trigger.score), pct(pt.sanitized.score));
    }

    let w = &b.watermark;
    let _ = writeln!(s, "\n## Watermarks\n");
    let _ = writeln!(s, "| Method | Verification | Score | Threshold | Probes | Result |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for (name, how, r) in [
        ("Trigger", "Query with trigger", &w.trigger),
        ("Adversarial trigger", "Query with perturbed trigger", &w.adversarial),
        ("Trigger (sanitized)", "Query after blur + noise", &w.sanitized),
        ("Signature", "Penultimate feature check", &w.signature),
    ] {
        let _ = writeln!(s, "| {name} | {how} | {:.4} | {:.2} | {} | {} |", r.score, r.threshold, r.probe_count, verdict(r));
    }
    let _ = writeln!(
        s,
        "\nClean-set watermark-class rate {}%. Wrong keys ({}): signature pass {}%, trigger pass {}%.\n",
        pct(w.clean_wm_rate),
        w.wrong_keys,
        pct(w.wrong_key_signature_pass_rate),
        pct(w.wrong_key_trigger_pass_rate)
    );

    let _ = writeln!(s, "## Attacks\n");
    if b.attacks.is_empty() {
        let _ = writeln!(s, "No attacks configured.");
    } else {
        let _ = writeln!(s, "| Attack | Accuracy pre → post | ASR pre → post | Cosine pre → post | Guard flag(%) | Misclassified(%) |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let opt = |x: Option<f64>| x.map_or("–".to_string(), pct);
        for a in &b.attacks {
            let asr = a.trigger_asr.map_or("–".into(), |p| format!("{} → {}", pct(p.pre), pct(p.post)));
            let cos = a.signature_cosine.map_or("–".into(), |p| format!("{:.3} → {:.3}", p.pre, p.post));
            let params = serde_json::to_string(&a.attack).unwrap_or_default();
            let _ = writeln!(
                s,
                "| `{params}` | {} → {} | {asr} | {cos} | {} | {} |",
                pct(a.clean_accuracy.pre),
                pct(a.clean_accuracy.post),
                opt(a.guard_flag_rate),
                opt(a.misclassification_rate)
            );
        }
    }

    if !b.timings.is_empty() {
        let _ = writeln!(s, "\n## Timings\n\n| Stage | Seconds | Cached |\n|---|---|---|");
        for t in &b.timings {
            let _ = writeln!(s, "| {} | {:.1} | {} |", t.stage, t.seconds, t.cached);
        }
    }
    s
}
