use std::path::Path;

use rrcomm::clip::VideoClip;
use rrcomm::dataset::{DatasetManifest, ManifestEntry, NormStats, Split};
use rrcomm::dsl::MessageId;
use rrcomm::nn::load_checkpoint;
use rrcomm::render::ViewAngle;
use rrcomm::rrcommnet::{train, ModelConfig, TrainOptions};

fn toy_config() -> ModelConfig {
    ModelConfig {
        t: 4,
        height: 8,
        width: 8,
        encoder_widths: vec![4, 8, 8],
        temporal_strides: vec![1, 2, 2],
        pffn_hidden: 16,
        num_classes: 2,
        dropout: 0.0,
        epochs: 5,
        ..ModelConfig::default()
    }
}

/// Two classes of flat-colored clips, two clips each, all in TRAIN.
fn toy_set(dir: &Path) -> DatasetManifest {
    std::fs::create_dir_all(dir.join("clips")).unwrap();
    let mut entries = Vec::new();
    for (k, (message, rgb)) in [(MessageId::BatteryLow, [0.9, 0.2, 0.1]), (MessageId::StartCommunication, [0.1, 0.3, 0.9])]
        .into_iter()
        .enumerate()
    {
        for i in 0..2 {
            let (t, h, w) = (6 + i, 10, 10);
            let mut frames = Vec::new();
            for f in 0..t {
                for value in rgb {
                    frames.extend(std::iter::repeat_n(value + 0.01 * f as f32, h * w));
                }
            }
            let clip = VideoClip::new(frames, [t, 3, h, w], 5.0, Some(message)).unwrap();
            let clip_path = format!("clips/toy{k}_{i}.clip");
            clip.save(&dir.join(&clip_path)).unwrap();
            entries.push(ManifestEntry {
                clip_path,
                message,
                env: 0,
                viewpoint: ViewAngle::HeadOn,
                split: Some(Split::Train),
                seed: i as u64,
            });
        }
    }
    DatasetManifest {
        fps: 5.0,
        resolution: [10, 10],
        seed: 0,
        train_fraction: Some(1.0),
        norm: Some(NormStats {
            mean: [0.5; 3],
            std: [0.3; 3],
        }),
        entries,
    }
}

#[test]
fn toy_loss_decreases_and_history_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_set(dir.path());
    let config = toy_config();
    assert_eq!(config.lr, 1e-4);
    let history_path = dir.path().join("history.jsonl");
    let checkpoint = dir.path().join("best.ckpt");
    let opts = TrainOptions {
        seed: 3,
        checkpoint: Some(checkpoint.clone()),
        history: Some(history_path.clone()),
        ..TrainOptions::default()
    };
    let first = train(&manifest, dir.path(), &config, &opts).unwrap();
    let losses: Vec<f64> = first.history.iter().map(|h| h.loss).collect();
    assert_eq!(losses.len(), 5);
    for pair in losses.windows(2) {
        assert!(pair[1] < pair[0], "{losses:?}");
    }
    for h in &first.history {
        assert!(h.top3 >= h.top1);
        assert!((0.0..=1.0).contains(&h.top1));
    }

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&history_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for key in ["epoch", "loss", "top1", "top3", "lr"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    assert_eq!(load_checkpoint(&checkpoint).unwrap(), first.params);

    let second = train(&manifest, dir.path(), &config, &TrainOptions { checkpoint: None, history: None, ..opts }).unwrap();
    let strip = |o: &rrcomm::rrcommnet::TrainOutcome| {
        o.history.iter().map(|h| (h.loss, h.val_loss, h.top1, h.top3, h.lr)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&first), strip(&second));
    assert_eq!(first.final_params, second.final_params);
}

#[test]
fn single_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = toy_set(dir.path());
    manifest.entries.retain(|e| e.message == MessageId::BatteryLow);
    let err = train(&manifest, dir.path(), &toy_config(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, rrcomm::rrcommnet::ModelError::TooFewInstances(_)), "{err}");
}
