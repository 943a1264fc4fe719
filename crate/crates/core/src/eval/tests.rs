use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::Chunk;
use crate::rrcommnet::ModelConfig;

fn chunk_of(t: usize, h: usize, w: usize, fill: impl Fn(usize, usize, usize, usize) -> f32) -> Chunk {
    let c = 3;
    let mut frames = Vec::with_capacity(t * c * h * w);
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    frames.push(fill(ti, ci, y, x));
                }
            }
        }
    }
    Chunk {
        frames,
        t,
        c,
        h,
        w,
        source: String::new(),
        start: 0,
        skip: false,
    }
}

#[test]
fn full_size_crop_is_identity_then_mirror() {
    let ch = chunk_of(2, 5, 7, |t, c, y, x| (t * 1000 + c * 100 + y * 10 + x) as f32);
    let crops = ten_crop(&ch, (5, 7)).unwrap();
    assert_eq!(crops.len(), 10);
    for c in &crops[..5] {
        assert_eq!(c.frames, ch.frames);
    }
    for c in &crops[5..] {
        for t in 0..2 {
            for k in 0..3 {
                for y in 0..5 {
                    for x in 0..7 {
                        assert_eq!(c.at(t, k, y, x), ch.at(t, k, y, 6 - x));
                    }
                }
            }
        }
    }
}

#[test]
fn corner_markers_land_in_their_crops() {
    let (h, w) = (40, 36);
    let markers = [(0, 0, 1.0), (0, w - 1, 2.0), (h - 1, 0, 3.0), (h - 1, w - 1, 4.0)];
    let ch = chunk_of(1, h, w, |_, _, y, x| {
        markers.iter().find(|m| m.0 == y && m.1 == x).map_or(0.0, |m| m.2)
    });
    let crops = ten_crop(&ch, (32, 30)).unwrap();
    let expect = [(0, 0), (0, 29), (31, 0), (31, 29)];
    for (k, &(y, x)) in expect.iter().enumerate() {
        assert_eq!(crops[k].at(0, 0, y, x), markers[k].2, "crop {k}");
        assert_eq!(crops[k].frames.iter().filter(|&&v| v != 0.0).count(), 3);
        // The mirrored crop holds the same marker at the reflected column.
        assert_eq!(crops[k + 5].at(0, 0, y, 29 - x), markers[k].2);
    }
    assert!(crops[4].frames.iter().all(|&v| v == 0.0));
    assert!(crops[9].frames.iter().all(|&v| v == 0.0));
}

/// Brute force over every in-bounds placement: the corner crops are the
/// extreme placements and the center crop is the one whose center is
/// nearest the frame center (rounding toward the origin).
fn offsets_oracle(full: (usize, usize), size: (usize, usize)) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for y in 0..=full.0 - size.0 {
        for x in 0..=full.1 - size.1 {
            all.push((y, x));
        }
    }
    let ymax = all.iter().map(|p| p.0).max().unwrap();
    let xmax = all.iter().map(|p| p.1).max().unwrap();
    let center = *all
        .iter()
        .min_by_key(|&&(y, x)| {
            let dy = (2 * y + size.0) as i64 - full.0 as i64;
            let dx = (2 * x + size.1) as i64 - full.1 as i64;
            (dy.abs() + dx.abs(), dy.signum(), dx.signum())
        })
        .unwrap();
    vec![(0, 0), (0, xmax), (ymax, 0), (ymax, xmax), center]
}

#[test]
fn offsets_match_brute_force() {
    let got = ten_crop_offsets((256, 320), (112, 112)).unwrap();
    assert_eq!(got.to_vec(), offsets_oracle((256, 320), (112, 112)));
    assert_eq!(got, [(0, 0), (0, 208), (144, 0), (144, 208), (72, 104)]);
    for (full, size) in [((40, 40), (32, 32)), ((9, 7), (4, 4)), ((5, 6), (5, 6)), ((33, 40), (32, 31))] {
        assert_eq!(ten_crop_offsets(full, size).unwrap().to_vec(), offsets_oracle(full, size), "{full:?} {size:?}");
    }
}

#[test]
fn oversized_crop_is_rejected() {
    let ch = chunk_of(1, 8, 8, |_, _, _, _| 0.0);
    assert!(matches!(ten_crop(&ch, (9, 8)), Err(EvalError::CropTooLarge { .. })));
    assert!(matches!(ten_crop_offsets((8, 8), (8, 9)), Err(EvalError::CropTooLarge { .. })));
}

#[test]
fn uniform_logits_give_uniform_probabilities() {
    let p = softmax(&[0.3; 15]);
    for v in p {
        assert!((v - 1.0 / 15.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let x: Vec<f64> = (0..15).map(|_| rng.random_range(-8.0..8.0)).collect();
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        for (p, v) in softmax(&x).iter().zip(&x) {
            assert!((p - v.exp() / denom).abs() < 1e-7);
        }
    }
}

proptest! {
    #[test]
    fn probabilities_sum_to_one_and_ignore_shifts(
        x in prop::collection::vec(-30.0f64..30.0, 15),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert_eq!(argmax(&p), argmax(&q));
        prop_assert_eq!(argmax(&p), argmax(&x));
    }

    #[test]
    fn confusion_rows_conserve_counts(pairs in prop::collection::vec((0usize..15, 0usize..15), 1..60)) {
        let clips: Vec<ClipOutcome> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| outcome(i, t, p, 0.5))
            .collect();
        let r = MetricsReport::from_outcomes(clips).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, pairs.len());
        for c in &r.classes {
            let want = pairs.iter().filter(|p| p.0 == c.message.code()).count();
            prop_assert_eq!(r.confusion[c.message.code()].iter().sum::<usize>(), want);
            prop_assert_eq!(c.count, want);
            prop_assert!((0.0..=1.0).contains(&c.accuracy));
        }
    }
}

fn outcome(i: usize, truth: usize, predicted: usize, confidence: f64) -> ClipOutcome {
    let mut probabilities = vec![(1.0 - confidence) / 14.0; 15];
    probabilities[predicted] = confidence;
    ClipOutcome {
        clip: format!("clips/c{i}.clip"),
        truth: MessageId::from_code(truth).unwrap(),
        predicted: MessageId::from_code(predicted).unwrap(),
        probabilities,
        inference_time: 0.1 * (i + 1) as f64,
    }
}

#[test]
fn perfect_predictions_fill_the_diagonal() {
    let clips: Vec<ClipOutcome> = (0..30).map(|i| outcome(i, i % 15, i % 15, 0.9)).collect();
    let r = MetricsReport::from_outcomes(clips).unwrap();
    assert_eq!(r.overall_accuracy, 1.0);
    for (i, row) in r.confusion.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == j { 2 } else { 0 });
        }
    }
    assert!((r.overall_probability.unwrap() - 0.9).abs() < 1e-12);
    let csv = r.confusion_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 16);
    assert!(lines[0].starts_with("truth\\predicted,BATTERY_LOW,"));
    assert!(lines[3].starts_with("ASCEND,0,0,2,0"));
}

#[test]
fn metrics_follow_their_definitions() {
    let clips = vec![
        outcome(0, 2, 2, 0.8),
        outcome(1, 2, 2, 0.6),
        outcome(2, 2, 5, 0.7),
        outcome(3, 5, 2, 0.9),
    ];
    let r = MetricsReport::from_outcomes(clips).unwrap();
    let ascend = r.class(MessageId::Ascend).unwrap();
    assert_eq!((ascend.count, ascend.correct), (3, 2));
    assert!((ascend.accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert!((ascend.avg_probability.unwrap() - 0.7).abs() < 1e-12);
    assert!((ascend.avg_time - 0.2).abs() < 1e-12);
    let danger = r.class(MessageId::Danger).unwrap();
    assert_eq!(danger.avg_probability, None);
    assert_eq!(r.overall_accuracy, 0.5);
    assert!((r.overall_time - 0.25).abs() < 1e-12);
    assert_eq!(r.classes.len(), 2);
    assert!(matches!(MetricsReport::from_outcomes(Vec::new()), Err(EvalError::EmptyTestSet)));
}

#[test]
fn identical_reports_compare_to_nothing() {
    let clips: Vec<ClipOutcome> = (0..20).map(|i| outcome(i, i % 15, (i * 7) % 15, 0.6)).collect();
    let r = MetricsReport::from_outcomes(clips).unwrap();
    let t = compare_variants(&r, &r).unwrap();
    assert_eq!(t.speedup, 1.0);
    assert_eq!((t.accuracy, t.probability), (0.0, 0.0));
    assert!(t.classes.iter().all(|c| c.accuracy == 0.0 && c.probability.is_none_or(|p| p == 0.0)));

    let mut other = r.clone();
    other.clips[3].clip = "clips/elsewhere.clip".into();
    assert!(matches!(compare_variants(&r, &other), Err(EvalError::MismatchedTestSets(_))));
}

#[test]
fn reference_pair_trade_off() {
    assert_eq!((REFERENCE_FULL.probability, REFERENCE_SKIP.probability), (0.7897, 0.7888));
    let s = REFERENCE_FULL.speedup_of(&REFERENCE_SKIP);
    assert!((s - 1.8125).abs() < 1e-12);
    assert!((s - 1.81).abs() < 0.01);
}

fn small_net() -> RrCommNet {
    let config = ModelConfig {
        t: 8,
        height: 12,
        width: 12,
        encoder_widths: vec![4, 8, 16],
        pffn_hidden: 16,
        ..ModelConfig::default()
    };
    RrCommNet::init(config, 21).unwrap()
}

fn noise_clip(t: usize, seed: u64) -> VideoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 14);
    VideoClip::new((0..t * 3 * h * w).map(|_| rng.random()).collect(), [t, 3, h, w], 5.0, None).unwrap()
}

#[test]
fn prediction_is_deterministic_and_consistent() {
    let net = small_net();
    let norm = NormStats {
        mean: [0.5; 3],
        std: [0.3; 3],
    };
    let clip = noise_clip(19, 4);
    let a = predict(&clip, &net, &norm).unwrap();
    let b = predict(&clip, &net, &norm).unwrap();
    assert_eq!(a.x_preds.len(), 10);
    assert_eq!((a.x_preds.clone(), a.x_mean.clone(), a.probabilities.clone()), (b.x_preds, b.x_mean, b.probabilities));
    assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(a.predicted.code(), argmax(&a.probabilities));
    assert!(a.inference_time > 0.0);

    // Three chunks (8 + 8 + 3 padded); each crop row is the mean of the chunks.
    let chunks = chunk(&clip, 8, false, "");
    assert_eq!(chunks.len(), 3);
    let mut want = vec![0.0f64; 15];
    for ch in &chunks {
        let mut c = crop(ch, 2, 1, (12, 12), true);
        dataset::normalize(&mut c, &norm);
        for (wv, v) in want.iter_mut().zip(net.logits(&c).unwrap()) {
            *wv += v as f64 / 3.0;
        }
    }
    // The mirrored center crop of a 16x14 frame sits at (2, 1).
    for (g, w) in a.x_preds[9].iter().zip(&want) {
        assert!((g - w).abs() < 1e-9);
    }
    for j in 0..15 {
        let m = a.x_preds.iter().map(|r| r[j]).sum::<f64>() / 10.0;
        assert!((m - a.x_mean[j]).abs() < 1e-12);
    }
}

#[test]
fn wrong_frame_size_propagates() {
    let net = small_net();
    let clip = VideoClip::new(vec![0.0; 8 * 3 * 10 * 10], [8, 3, 10, 10], 5.0, None).unwrap();
    assert!(matches!(predict(&clip, &net, &NormStats::IDENTITY), Err(EvalError::CropTooLarge { .. })));
}
