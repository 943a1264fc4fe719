use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{chunk_tensor, forward_vars, Mode, ModelConfig, ModelError};
use crate::clip::VideoClip;
use crate::dataset::{self, augment, chunk, crop, load_entry, window, DatasetManifest, NormStats, Split};
use crate::derive_seed;
use crate::nn::{save_checkpoint, AdamW, AdamWConfig, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    /// Random windows drawn from every training clip per epoch.
    pub windows_per_clip: usize,
    /// Fraction of training clips per class held out for validation. With
    /// zero, validation runs on the (unaugmented) training clips.
    pub val_fraction: f64,
    pub checkpoint: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            windows_per_clip: 2,
            val_fraction: 0.0,
            checkpoint: None,
            history: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub loss: f64,
    /// Validation cross-entropy of clip-averaged logits.
    pub val_loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation top-1 accuracy.
    pub params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    pub norm: NormStats,
}

struct Sample {
    clip: VideoClip,
    label: usize,
    source: String,
}

fn load_split(manifest: &DatasetManifest, dir: &Path, split: Split) -> Result<Vec<Sample>, ModelError> {
    manifest
        .entries_in(split)
        .map(|e| {
            Ok(Sample {
                clip: load_entry(dir, e)?,
                label: e.message.code(),
                source: e.clip_path.clone(),
            })
        })
        .collect()
}

/// Stratified holdout of `fraction` of each class, at least one clip per
/// class when the class has two or more.
fn hold_out(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    if fraction <= 0.0 {
        return (samples, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.label).or_default().push(s);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut group) in by_class {
        group.shuffle(&mut rng);
        let n = group.len();
        let k = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
        val.extend(group.drain(..k));
        train.extend(group);
    }
    (train, val)
}

/// Logits averaged over the center-cropped chunks of a clip.
pub(crate) fn clip_logits(
    params: &ParamStore<f32>,
    config: &ModelConfig,
    clip: &VideoClip,
    norm: &NormStats,
    g: &mut Graph<f32>,
) -> Result<Vec<f64>, ModelError> {
    let (h, w) = (config.height, config.width);
    let y0 = (clip.h - h.min(clip.h)) / 2;
    let x0 = (clip.w - w.min(clip.w)) / 2;
    let chunks = chunk(clip, config.t, config.skip, "");
    let mut mean = vec![0.0f64; config.num_classes];
    for ch in &chunks {
        let mut c = crop(ch, y0, x0, (h, w), false);
        dataset::normalize(&mut c, norm);
        g.reset();
        let fv = forward_vars(g, params, config, chunk_tensor(&c)?, &mut Mode::Eval)?;
        for (m, &v) in mean.iter_mut().zip(g.value(fv.logits).data()) {
            *m += v as f64 / chunks.len() as f64;
        }
    }
    Ok(mean)
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Rank of `target` among `logits` (0 = top prediction).
fn rank_of(logits: &[f64], target: usize) -> usize {
    logits.iter().filter(|&&v| v > logits[target]).count()
}

/// Trains from scratch on the TRAIN entries of `manifest`.
pub fn train(
    manifest: &DatasetManifest,
    dir: &Path,
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let all = load_split(manifest, dir, Split::Train)?;
    let classes: BTreeSet<usize> = all.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(ModelError::TooFewInstances(format!(
            "{} class(es) in the training split",
            classes.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= config.num_classes) {
        return Err(ModelError::InvalidConfig(format!("label {bad} exceeds num_classes")));
    }
    let norm = match manifest.norm {
        Some(n) => n,
        None => dataset::compute_norm_stats(manifest, dir)?,
    };
    let (train_set, val_set) = hold_out(all, opts.val_fraction, derive_seed(opts.seed, &[0x7a1]));
    let val_set = if val_set.is_empty() { &train_set } else { &val_set };
    log::info!(
        "training on {} clips, validating on {} ({} parameters)",
        train_set.len(),
        val_set.len(),
        config.init_params(0)?.num_values()
    );

    let mut params = config.init_params(derive_seed(opts.seed, &[0x1417]))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            decay_every: config.lr_decay_every,
            decay_factor: config.lr_decay_factor,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut history_out = match &opts.history {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let shapes = params.shapes();
    let mut g = Graph::<f32>::new();
    let mut history = Vec::new();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY, f64::INFINITY);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        opt.set_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xe90c, epoch as u64]));
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (i, s) in train_set.iter().enumerate() {
            // Same range as the chunk starts seen at evaluation, so padded
            // tail windows are part of training too.
            let max_start = (s.clip.t.div_ceil(config.t).max(1) - 1) * config.t;
            for _ in 0..opts.windows_per_clip.max(1) {
                order.push((i, rng.random_range(0..=max_start)));
            }
        }
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            for (k, &(i, start)) in batch.iter().enumerate() {
                let s = &train_set[i];
                let sample_seed = derive_seed(opts.seed, &[epoch as u64, b as u64, k as u64]);
                let raw = window(&s.clip, start, config.t, config.skip, &s.source);
                let x = augment(&raw, (config.height, config.width), &norm, sample_seed);
                let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, &[1]));
                g.reset();
                let fv = forward_vars(&mut g, &params, config, chunk_tensor(&x)?, &mut Mode::Train(&mut mask_rng))?;
                let loss = g.cross_entropy(fv.logits, s.label)?;
                loss_sum += g.value(loss).item() as f64;
                g.backward(loss)?;
                for (acc, gr) in grads.iter_mut().zip(g.param_grads(&shapes)) {
                    acc.add_assign(&gr);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for gr in &mut grads {
                gr.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(&mut params, &grads)?;
        }

        let (mut val_loss, mut top1, mut top3) = (0.0, 0.0, 0.0);
        for s in val_set.iter() {
            let logits = clip_logits(&params, config, &s.clip, &norm, &mut g)?;
            val_loss += cross_entropy(&logits, s.label);
            let r = rank_of(&logits, s.label);
            top1 += (r == 0) as u8 as f64;
            top3 += (r < 3) as u8 as f64;
        }
        let n = val_set.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / order.len() as f64,
            val_loss: val_loss / n,
            top1: top1 / n,
            top3: top3 / n,
            lr: opt.lr(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val_loss {:.4} top1 {:.3} top3 {:.3} ({:.1}s)",
            stats.loss,
            stats.val_loss,
            stats.top1,
            stats.top3,
            stats.seconds
        );
        if let Some(out) = &mut history_out {
            writeln!(out, "{}", serde_json::to_string(&stats).expect("stats serialize"))?;
            out.flush()?;
        }
        if stats.top1 > best.2 || (stats.top1 == best.2 && stats.val_loss < best.3) {
            best = (params.clone(), epoch, stats.top1, stats.val_loss);
            if let Some(path) = &opts.checkpoint {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                save_checkpoint(&params, path)?;
            }
        }
        history.push(stats);
    }
    Ok(TrainOutcome {
        params: best.0,
        final_params: params,
        best_epoch: best.1,
        history,
        norm,
    })
}
