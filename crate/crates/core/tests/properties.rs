mod common;

use proptest::prelude::*;
use rffi::attacks::{dequantize, gaussian_blur, prune, quant_level, quant_scale, quantize};
use rffi::checkpoint::Checkpoint;
use rffi::classifier::{build_model, report_from_predictions, ArchPreset, Model, PresetName};
use rffi::frontend::LogMelSpectrogram;
use rffi::guard::{beta_schedule, calibrate_threshold, decide, elbo_loss, Decision, GuardTrainConfig};
use rffi::harness::metrics::{auroc, average_precision};
use rffi::nn::{ParamKind, Graph, Tensor};
use rffi::watermark::{apply_trigger, decode_key, encode_key, gen_key};

fn small_model(seed: u64) -> Model {
    build_model(&ArchPreset::named(PresetName::MiniResnet), 3, seed).unwrap()
}

fn spec_strategy() -> impl Strategy<Value = LogMelSpectrogram> {
    prop::collection::vec(-4.0f32..4.0, 32 * 65).prop_map(|v| LogMelSpectrogram::new(32, 65, v).unwrap())
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50).prop_flat_map(|n| {
        let score = prop_oneof![(0u8..6).prop_map(|k| k as f64 / 4.0), -5.0f64..5.0];
        (prop::collection::vec(score, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            let n = l.len();
            l[0] = true;
            l[n - 1] = false;
            (s, l)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_equal_enumeration((s, l) in scored()) {
        prop_assert_eq!(auroc(&s, &l).unwrap().to_bits(), common::brute_auroc(&s, &l).to_bits());
        prop_assert_eq!(average_precision(&s, &l).unwrap().to_bits(), common::brute_average_precision(&s, &l).to_bits());
    }
}

proptest! {
    #[test]
    fn auroc_ignores_order((s, l) in scored(), rot in 0usize..50, rev in any::<bool>()) {
        let mut pairs: Vec<(f64, bool)> = s.iter().copied().zip(l.iter().copied()).collect();
        let k = rot % pairs.len();
        pairs.rotate_left(k);
        if rev {
            pairs.reverse();
        }
        let (s2, l2): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&s2, &l2).unwrap());
    }

    #[test]
    fn ap_ignores_order_of_distinct_scores(n in 2usize..50, seed in any::<u64>(), rot in 0usize..50) {
        use rand::seq::SliceRandom;
        let mut rng = rffi::seed::rng(seed, &[]);
        let mut s: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 3.0).collect();
        s.shuffle(&mut rng);
        let mut l: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        l.shuffle(&mut rng);
        let base = average_precision(&s, &l).unwrap();
        s.rotate_left(rot % n);
        l.rotate_left(rot % n);
        prop_assert_eq!(base, average_precision(&s, &l).unwrap());
    }

    #[test]
    fn quantized_values_sit_on_grid(ws in prop::collection::vec(-3.0f32..3.0, 1..200), bits in 2u32..=16) {
        let scale = quant_scale(&ws, bits);
        prop_assume!(scale > 0.0);
        let levels = ((1u32 << (bits - 1)) - 1) as f64;
        for &w in &ws {
            let q = quant_level(w, scale, levels);
            prop_assert_eq!(q, q.round());
            prop_assert!(q.abs() <= levels);
            // Half a grid step, plus the f32 store of the dequantized value.
            let err = (dequantize(q, scale) as f64 - w as f64).abs();
            prop_assert!(err <= scale as f64 / 2.0 + 1e-6 * w.abs() as f64, "w {} err {} scale {}", w, err, scale);
        }
    }

    #[test]
    fn beta_schedule_endpoints_and_monotone(beta_max in 0.0f64..4.0, warmup in 0usize..30, epoch in 0usize..60) {
        let cfg = GuardTrainConfig { beta_max, warmup_epochs: warmup, ..GuardTrainConfig::robust() };
        if warmup > 0 {
            prop_assert_eq!(beta_schedule(0, &cfg), 0.0);
        }
        prop_assert_eq!(beta_schedule(warmup, &cfg), beta_max);
        prop_assert!(beta_schedule(epoch, &cfg) <= beta_schedule(epoch + 1, &cfg));
        prop_assert!(beta_schedule(epoch, &cfg) <= beta_max);
    }

    #[test]
    fn free_bits_floor_holds(
        mu in prop::collection::vec(-2.0f32..2.0, 24),
        logvar in prop::collection::vec(-3.0f32..1.0, 24),
        beta in 0.01f64..2.0,
        tau in 0.0f64..0.5,
    ) {
        let x = vec![0.0f32; 6];
        let t = elbo_loss(&x, &x, &mu, &logvar, 3, beta, tau).unwrap();
        let kl_part = t.total - t.recon;
        let floors: Vec<f64> = t.kl_per_dim.iter().map(|&k| beta * k.max(tau)).collect();
        for f in &floors {
            prop_assert!(*f >= beta * tau);
        }
        prop_assert!((kl_part - floors.iter().sum::<f64>()).abs() <= 1e-9 * kl_part.abs().max(1.0));

        // The graph op used in training enforces the same floor.
        let mut g = Graph::frozen();
        let m = g.constant(Tensor::new(vec![3, 8], mu.clone()).unwrap());
        let lv = g.constant(Tensor::new(vec![3, 8], logvar.clone()).unwrap());
        let k = g.kl_free_bits(m, lv, tau as f32).unwrap();
        prop_assert!(g.value(k).item() as f64 >= 8.0 * tau as f32 as f64 * (1.0 - 1e-6));
    }

    #[test]
    fn calibration_threshold_orders_and_ties_keep(scores in prop::collection::vec(0.0f64..100.0, 200..400), fpr in 0.0f64..0.5) {
        let c = calibrate_threshold(&scores, fpr, 0.5).unwrap();
        let looser = calibrate_threshold(&scores, (fpr + 0.1).min(0.99), 0.5).unwrap();
        prop_assert!(looser.tau <= c.tau);
        let flagged = scores.iter().filter(|&&s| decide(s, &c) == Decision::Flag).count();
        prop_assert_eq!(flagged as f64 / scores.len() as f64, c.achieved_fpr);
        prop_assert!(c.achieved_fpr <= fpr + 1.0 / scores.len() as f64);
        prop_assert_eq!(decide(c.tau, &c), Decision::Keep);
    }

    #[test]
    fn trigger_touches_exactly_its_block(spec in spec_strategy(), key_seed in any::<u64>()) {
        let key = gen_key(key_seed, 10, 64).unwrap();
        let out = apply_trigger(&spec, &key).unwrap();
        let changed: Vec<usize> = (0..spec.values.len()).filter(|&i| spec.values[i] != out.values[i]).collect();
        prop_assert_eq!(changed.len(), 16);
        for i in changed {
            prop_assert!(key.block_contains(i / 65, i % 65));
        }
    }

    #[test]
    fn keys_are_deterministic_and_round_trip(key_seed in any::<u64>(), classes in 2usize..40) {
        let key = gen_key(key_seed, classes, 64).unwrap();
        prop_assert_eq!(&key, &gen_key(key_seed, classes, 64).unwrap());
        let norm = key.v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
        prop_assert_eq!(key.y_wm, classes);
        prop_assert!(key.trigger.mel + key.trigger.size <= 32 && key.trigger.frame + key.trigger.size <= 65);
        prop_assert_eq!(decode_key(&encode_key(&key)).unwrap(), key);
    }

    #[test]
    fn weighted_recall_is_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..7), 1..300)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = report_from_predictions(&preds, &labels, 6).unwrap();
        prop_assert_eq!(r.weighted_avg.recall, r.accuracy);
        for c in &r.per_class {
            prop_assert!((0.0..=1.0).contains(&c.precision) && (0.0..=1.0).contains(&c.recall));
        }
    }

    #[test]
    fn tiny_blur_is_identity(spec in spec_strategy(), sigma in 1e-6f64..0.1) {
        prop_assert!(gaussian_blur(&spec, sigma).linf_distance(&spec) <= 1e-6);
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy(logits in prop::collection::vec(-6.0f32..6.0, 20), labels in prop::collection::vec(0usize..5, 4)) {
        let mut g = Graph::frozen();
        let x = g.constant(Tensor::new(vec![4, 5], logits).unwrap());
        let focal = g.focal(x, &labels, 0.0).unwrap();
        let ce = g.smooth_ce(x, &labels, 0.0).unwrap();
        let (a, b) = (g.value(focal).item() as f64, g.value(ce).item() as f64);
        prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn replayed_gates_reproduce_the_recorded_pass(xs in prop::collection::vec(-1.0f32..1.0, 12)) {
        let run = |mut g: Graph| {
            let x = g.constant(Tensor::new(vec![3, 4], xs.clone()).unwrap());
            let y = g.relu(x);
            let y = g.relu(y);
            let out = g.value(y).clone();
            (out, g.take_gates())
        };
        let (live, _) = run(Graph::frozen());
        let (recorded, gates) = run(Graph::frozen().recording_gates());
        let (replayed, _) = run(Graph::frozen().replaying_gates(gates));
        prop_assert_eq!(&live, &recorded);
        prop_assert_eq!(&live, &replayed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pruning_only_removes_weights(seed in any::<u64>(), a in 0.0f64..0.9, b in 0.0f64..0.9) {
        let m = small_model(seed);
        prop_assert_eq!(&prune(&m, 0.0).unwrap(), &m);
        let nonzero = |m: &Model| m.params.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(_, p)| p.value.data().iter().filter(|&&w| w != 0.0).count()).sum::<usize>();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nonzero(&prune(&m, hi).unwrap()) <= nonzero(&prune(&m, lo).unwrap()));
        // Norm and bias parameters are exempt.
        let p = prune(&m, hi).unwrap();
        for ((_, x), (_, y)) in p.params.iter().zip(m.params.iter()) {
            if x.kind != ParamKind::Weight {
                prop_assert_eq!(&x.value, &y.value);
            }
        }
    }

    #[test]
    fn quantized_model_weights_lie_on_their_grid(seed in any::<u64>(), bits in 2u32..=16) {
        let m = small_model(seed);
        let q = quantize(&m, bits).unwrap();
        let levels = ((1u32 << (bits - 1)) - 1) as f64;
        for ((name, before), (_, after)) in m.params.iter().zip(q.params.iter()) {
            if before.kind != ParamKind::Weight {
                prop_assert_eq!(&before.value, &after.value);
                continue;
            }
            let scale = quant_scale(before.value.data(), bits);
            for &w in after.value.data() {
                let level = (w as f64 / scale as f64).round();
                prop_assert!(level.abs() <= levels);
                prop_assert_eq!(w, dequantize(level, scale), "{} off grid", name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), spec in spec_strategy()) {
        let m = small_model(seed);
        let bytes = m.to_checkpoint("digest", 3, Default::default()).encode();
        let back = Model::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        let (a, b) = (m.predict(&spec).unwrap(), back.predict(&spec).unwrap());
        prop_assert_eq!(a.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    // Stage caches store metrics as JSON; a cached rerun must read back the same bits.
    #[test]
    fn json_floats_round_trip_bit_exact(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..64)) {
        let back: Vec<f64> = serde_json::from_str(&serde_json::to_string(&xs).unwrap()).unwrap();
        prop_assert_eq!(xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
