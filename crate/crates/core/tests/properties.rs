use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsa_core::attention::{AttentionConfig, Scenario};
use tsa_core::backbones::{ForwardCtx, Mode, ModelConfig, SpeakerModel};
use tsa_core::cli::{parse_gamma, parse_results, GammaRow, ResultRow};
use tsa_core::dataset::{synthetic_noise_source, synthetic_utterances, SyntheticSpeakerSpec};
use tsa_core::features::{FeatureKind, FeatureMatrix, Waveform};
use tsa_core::metrics::{eer, top1};
use tsa_core::noise::{mix, mix_components, MixSpec, NoiseKind, NoiseSource};
use tsa_core::objectives::{am_softmax, cosine_logits, cross_entropy, AmSoftmaxConfig};
use tsa_core::tensor::{Binder, Tape, Tensor};

fn scenario() -> impl Strategy<Value = Scenario> {
    prop::sample::select(vec![
        Scenario::None,
        Scenario::TimeOnly,
        Scenario::FreqOnly,
        Scenario::FreqTime,
        Scenario::TimeFreq,
        Scenario::Parallel,
    ])
}

fn toy_model(s: Scenario) -> SpeakerModel {
    let att = if s == Scenario::Parallel {
        AttentionConfig::parallel(0.5)
    } else {
        AttentionConfig::scenario(s)
    };
    SpeakerModel::new(ModelConfig::toy_tdnn(4).with_attention(att.unwrap())).unwrap()
}

fn features(frames: usize, seed: u64, spread: f64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(Tensor::uniform(&[frames, 40], spread, &mut rng), FeatureKind::LogMel40).unwrap()
}

fn speech() -> &'static Waveform {
    static SPEECH: std::sync::OnceLock<Waveform> = std::sync::OnceLock::new();
    SPEECH.get_or_init(|| {
        synthetic_utterances(&SyntheticSpeakerSpec::new(2, 1, 1.5, 8).unwrap()).unwrap()[0]
            .wave
            .clone()
    })
}

fn sources() -> &'static Vec<NoiseSource> {
    static SOURCES: std::sync::OnceLock<Vec<NoiseSource>> = std::sync::OnceLock::new();
    SOURCES.get_or_init(|| {
        NoiseKind::ALL
            .iter()
            .map(|&k| synthetic_noise_source(k, 8).unwrap())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn tdnn_frame_output_is_input_minus_fourteen(frames in 15usize..=200, s in scenario()) {
        let model = toy_model(s);
        let tape = Tape::new();
        let binder = Binder::new(&tape, model.store(), false);
        let x = tape.constant(features(frames, frames as u64, 1.0).frames().reshape(&[1, frames, 40]).unwrap());
        let out = model.forward(&binder, &x, &ForwardCtx::new(Mode::Eval)).unwrap();
        prop_assert_eq!(out.frames.shape()[1], frames - 14);
    }

    #[test]
    fn short_inputs_are_rejected(frames in 1usize..15) {
        prop_assert!(toy_model(Scenario::FreqTime).embed(&features(frames, 0, 1.0)).is_err());
    }

    #[test]
    fn mixing_hits_any_target_snr(target in -5.0f64..=30.0, seed: u64, kind in 0usize..5) {
        let source = &sources()[kind];
        let spec = MixSpec::new(target, source.kind(), seed).unwrap();
        let parts = mix_components(speech(), source, &spec).unwrap();
        prop_assert!((parts.snr_db() - target).abs() <= 0.05);
        let out = mix(speech(), source, &spec).unwrap();
        prop_assert_eq!(out.len(), speech().len());
        prop_assert_eq!(out, mix(speech(), source, &spec).unwrap());
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        row in prop::collection::vec(-15.0f64..15.0, 1..30),
        shift in -100.0f64..100.0,
    ) {
        let tape = Tape::new();
        let n = row.len();
        let p = tape.constant(Tensor::new(&[1, n], row.clone()).unwrap()).softmax(1).unwrap().value();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = tape.constant(Tensor::new(&[1, n], shifted).unwrap()).softmax(1).unwrap().value();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0 || n == 1));
        prop_assert!(p.max_abs_diff(&q).unwrap() <= 1e-9);
    }

    #[test]
    fn cross_entropy_bounds_and_am_softmax_reduction(
        seed: u64,
        batch in 1usize..6,
        classes in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let labels: Vec<usize> = (0..batch).map(|i| (seed as usize + i) % classes).collect();
        let logits = tape.constant(Tensor::uniform(&[batch, classes], 5.0, &mut rng));
        prop_assert!(cross_entropy(&logits, &labels).unwrap().value().item() >= 0.0);
        let emb = tape.constant(Tensor::uniform(&[batch, 6], 1.0, &mut rng));
        let w = tape.constant(Tensor::uniform(&[classes, 6], 1.0, &mut rng));
        let plain = cross_entropy(&cosine_logits(&emb, &w).unwrap(), &labels).unwrap().value().item();
        let am = am_softmax(&emb, &labels, &w, &AmSoftmaxConfig::new(0.0, 1.0).unwrap()).unwrap().value().item();
        prop_assert!((plain - am).abs() <= 1e-9);
    }

    #[test]
    fn top1_ignores_a_constant_logit_shift(
        cells in prop::collection::vec(-64i32..64, 12),
        shift in -20i32..20,
    ) {
        let (n, c) = (3, 4);
        let logits: Vec<f64> = cells.iter().map(|&k| f64::from(k) / 8.0).collect();
        let moved: Vec<f64> = logits.iter().map(|v| v + f64::from(shift)).collect();
        let labels = [0, 1, 2];
        prop_assert_eq!(
            top1(&Tensor::new(&[n, c], logits).unwrap(), &labels).unwrap(),
            top1(&Tensor::new(&[n, c], moved).unwrap(), &labels).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn embeddings_are_finite(frames in 15usize..40, seed: u64, spread in 0.0f64..100.0, s in scenario()) {
        let emb = toy_model(s).embed(&features(frames, seed, spread)).unwrap();
        prop_assert!(emb.is_finite());
    }
}

fn trials() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-64i32..64, any::<bool>()), 2..80).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v.into_iter().map(|(k, s)| (f64::from(k) / 16.0, s)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn eer_lies_in_the_unit_interval_and_ignores_monotone_maps(t in trials()) {
        let e = eer(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let mapped: Vec<(f64, bool)> = t.iter().map(|&(s, l)| (s.exp() * 3.0, l)).collect();
        prop_assert!((eer(&mapped).unwrap() - e).abs() <= 1e-12);
    }

    #[test]
    fn eer_is_at_most_half_when_same_scores_dominate(
        pairs in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..60),
    ) {
        // Each same-speaker score sits above its paired different-speaker
        // score, so at every threshold FAR ≤ 1 − FRR.
        let mut t = Vec::new();
        for &(d, lift) in &pairs {
            t.push((d, false));
            t.push((d + lift, true));
        }
        prop_assert!(eer(&t).unwrap() <= 0.5 + 1e-12);
    }

    #[test]
    fn result_tables_round_trip(
        rows in prop::collection::vec(
            (
                "[a-z]{1,8}",
                prop::option::of(-5.0f64..30.0),
                prop::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())),
                prop::option::of(0.0f64..1.0),
                0.0f64..1.0,
            ),
            0..12,
        ),
    ) {
        let results: Vec<ResultRow> = rows
            .iter()
            .map(|(noise, snr, top1, eer, _)| ResultRow { noise: noise.clone(), snr: *snr, top1: *top1, eer: *eer })
            .collect();
        prop_assert_eq!(parse_results(&tsa_core::cli::results_to_tsv(&results)).unwrap(), results.clone());
        let gamma: Vec<GammaRow> = rows
            .iter()
            .zip(results)
            .map(|(r, result)| GammaRow { gamma: r.4, result })
            .collect();
        prop_assert_eq!(parse_gamma(&tsa_core::cli::gamma_to_tsv(&gamma)).unwrap(), gamma);
    }
}
