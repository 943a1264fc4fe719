//! Ten-crop prediction, softmax confidences, per-class metrics and
//! confusion matrices, and full-vs-skip comparisons.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::VideoClip;
use crate::dataset::{self, chunk, crop, load_entry, DatasetError, DatasetManifest, ManifestEntry, NormStats, Split};
use crate::dsl::MessageId;
use crate::rrcommnet::{ModelError, RrCommNet};

/// Runs per prediction when measuring inference time.
pub const TIMING_RUNS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("crop {crop:?} does not fit in frames of {full:?}")]
    CropTooLarge { crop: (usize, usize), full: (usize, usize) },
    #[error("no TEST entries to evaluate")]
    EmptyTestSet,
    #[error("reports cover different test sets: {0}")]
    MismatchedTestSets(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Top-left offsets `(y, x)` of the four corner crops and the center crop,
/// in the order TL, TR, BL, BR, C.
pub fn ten_crop_offsets(full: (usize, usize), size: (usize, usize)) -> Result<[(usize, usize); 5], EvalError> {
    let (fh, fw) = full;
    let (h, w) = size;
    if h > fh || w > fw || h == 0 || w == 0 {
        return Err(EvalError::CropTooLarge { crop: size, full });
    }
    let (dy, dx) = (fh - h, fw - w);
    Ok([(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)])
}

/// The five crops of [`ten_crop_offsets`] followed by the horizontal
/// mirror of each, in the same order.
pub fn ten_crop(chunk: &dataset::Chunk, size: (usize, usize)) -> Result<Vec<dataset::Chunk>, EvalError> {
    let offsets = ten_crop_offsets((chunk.h, chunk.w), size)?;
    Ok([false, true]
        .into_iter()
        .flat_map(|flip| offsets.iter().map(move |&(y, x)| crop(chunk, y, x, size, flip)))
        .collect())
}

/// Softmax probabilities of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Logits for each of the ten crops, averaged over the clip's chunks.
    pub x_preds: Vec<Vec<f64>>,
    pub x_mean: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: MessageId,
    /// Median wall-clock seconds of the whole prediction.
    pub inference_time: f64,
    pub inference_time_mean: f64,
}

impl PredictionResult {
    /// Builds the probabilities and prediction from per-crop logits.
    pub fn from_crops(x_preds: Vec<Vec<f64>>) -> Self {
        let n = x_preds.first().map_or(0, Vec::len);
        let mut x_mean = vec![0.0; n];
        for row in &x_preds {
            for (m, v) in x_mean.iter_mut().zip(row) {
                *m += v / x_preds.len() as f64;
            }
        }
        let probabilities = softmax(&x_mean);
        let predicted = MessageId::from_code(argmax(&probabilities)).expect("one logit per message");
        PredictionResult {
            x_preds,
            x_mean,
            probabilities,
            predicted,
            inference_time: 0.0,
            inference_time_mean: 0.0,
        }
    }

    pub fn probability_of(&self, message: MessageId) -> f64 {
        self.probabilities[message.code()]
    }
}

fn crop_logits(clip: &VideoClip, net: &RrCommNet, norm: &NormStats) -> Result<Vec<Vec<f64>>, EvalError> {
    let config = &net.config;
    let chunks = chunk(clip, config.t, config.skip, "");
    let mut x_preds = vec![vec![0.0; config.num_classes]; 10];
    for ch in &chunks {
        for (row, mut c) in x_preds.iter_mut().zip(ten_crop(ch, (config.height, config.width))?) {
            dataset::normalize(&mut c, norm);
            for (r, v) in row.iter_mut().zip(net.logits(&c)?) {
                *r += v as f64 / chunks.len() as f64;
            }
        }
    }
    Ok(x_preds)
}

/// Ten-crop prediction for a whole clip. Multi-chunk clips average their
/// per-chunk crop logits. The computation is repeated [`TIMING_RUNS`]
/// times for timing; the outputs of every run are identical.
pub fn predict(clip: &VideoClip, net: &RrCommNet, norm: &NormStats) -> Result<PredictionResult, EvalError> {
    if net.config.num_classes != MessageId::COUNT {
        return Err(ModelError::InvalidConfig(format!(
            "prediction needs {} classes, model has {}",
            MessageId::COUNT,
            net.config.num_classes
        ))
        .into());
    }
    let mut times = Vec::with_capacity(TIMING_RUNS);
    let mut result = None;
    for _ in 0..TIMING_RUNS {
        let started = Instant::now();
        let crops = crop_logits(clip, net, norm)?;
        let r = PredictionResult::from_crops(crops);
        times.push(started.elapsed().as_secs_f64());
        result.get_or_insert(r);
    }
    let mut result = result.expect("at least one run");
    result.inference_time_mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    result.inference_time = times[times.len() / 2];
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub message: MessageId,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean softmax probability of the true class over correct predictions;
    /// `None` when nothing was recognized.
    pub avg_probability: Option<f64>,
    pub avg_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOutcome {
    pub clip: String,
    pub truth: MessageId,
    pub predicted: MessageId,
    pub probabilities: Vec<f64>,
    pub inference_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Only messages present in the test set.
    pub classes: Vec<ClassMetrics>,
    pub overall_accuracy: f64,
    pub overall_probability: Option<f64>,
    pub overall_time: f64,
    /// `confusion[truth][predicted]`, indexed by message code.
    pub confusion: Vec<Vec<usize>>,
    pub clips: Vec<ClipOutcome>,
}

impl MetricsReport {
    pub fn from_outcomes(clips: Vec<ClipOutcome>) -> Result<Self, EvalError> {
        if clips.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let n = MessageId::COUNT;
        let mut confusion = vec![vec![0usize; n]; n];
        for c in &clips {
            confusion[c.truth.code()][c.predicted.code()] += 1;
        }
        let classes = MessageId::ALL
            .into_iter()
            .filter_map(|m| {
                let mine: Vec<&ClipOutcome> = clips.iter().filter(|c| c.truth == m).collect();
                if mine.is_empty() {
                    return None;
                }
                let hits: Vec<f64> = mine.iter().filter(|c| c.predicted == m).map(|c| c.probabilities[m.code()]).collect();
                Some(ClassMetrics {
                    message: m,
                    count: mine.len(),
                    correct: hits.len(),
                    accuracy: hits.len() as f64 / mine.len() as f64,
                    avg_probability: mean(&hits),
                    avg_time: mine.iter().map(|c| c.inference_time).sum::<f64>() / mine.len() as f64,
                })
            })
            .collect();
        let hits: Vec<f64> = clips
            .iter()
            .filter(|c| c.truth == c.predicted)
            .map(|c| c.probabilities[c.truth.code()])
            .collect();
        Ok(MetricsReport {
            classes,
            overall_accuracy: hits.len() as f64 / clips.len() as f64,
            overall_probability: mean(&hits),
            overall_time: clips.iter().map(|c| c.inference_time).sum::<f64>() / clips.len() as f64,
            confusion,
            clips,
        })
    }

    /// The report with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.overall_time = 0.0;
        r.classes.iter_mut().for_each(|c| c.avg_time = 0.0);
        r.clips.iter_mut().for_each(|c| c.inference_time = 0.0);
        r
    }

    pub fn class(&self, message: MessageId) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.message == message)
    }

    /// Confusion matrix with message names along both axes.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for m in MessageId::ALL {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for (m, row) in MessageId::ALL.into_iter().zip(&self.confusion) {
            out.push_str(m.name());
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `metrics.json` and `confusion.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(io::Error::from)?;
        fs::write(dir.join("metrics.json"), json)?;
        fs::write(dir.join("confusion.csv"), self.confusion_csv())?;
        Ok(())
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Evaluates the given entries, in order.
pub fn evaluate_entries<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
    dir: &Path,
    net: &RrCommNet,
    norm: &NormStats,
) -> Result<MetricsReport, EvalError> {
    let mut clips = Vec::new();
    for e in entries {
        let clip = load_entry(dir, e)?;
        let p = predict(&clip, net, norm)?;
        clips.push(ClipOutcome {
            clip: e.clip_path.clone(),
            truth: e.message,
            predicted: p.predicted,
            probabilities: p.probabilities,
            inference_time: p.inference_time,
        });
    }
    MetricsReport::from_outcomes(clips)
}

/// Evaluates every TEST entry of `manifest`, normalizing with the
/// manifest's stored statistics.
pub fn evaluate(manifest: &DatasetManifest, dir: &Path, net: &RrCommNet) -> Result<MetricsReport, EvalError> {
    let norm = match manifest.norm {
        Some(n) => n,
        None => dataset::compute_norm_stats(manifest, dir)?,
    };
    evaluate_entries(manifest.entries_in(Split::Test), dir, net, &norm)
}

/// Headline figures of one model variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub accuracy: f64,
    pub probability: f64,
    /// Seconds per clip.
    pub time: f64,
}

/// Published figures of the full network on real footage.
pub const REFERENCE_FULL: Headline = Headline {
    accuracy: 0.9467,
    probability: 0.7897,
    time: 1.45,
};

/// Published figures of the skip variant on real footage.
pub const REFERENCE_SKIP: Headline = Headline {
    accuracy: 0.88,
    probability: 0.7888,
    time: 0.80,
};

impl Headline {
    pub fn of(report: &MetricsReport) -> Self {
        Headline {
            accuracy: report.overall_accuracy,
            probability: report.overall_probability.unwrap_or(0.0),
            time: report.overall_time,
        }
    }

    /// How many times faster `other` runs than `self`.
    pub fn speedup_of(&self, other: &Headline) -> f64 {
        self.time / other.time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub message: MessageId,
    /// Second minus first.
    pub accuracy: f64,
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeOff {
    pub classes: Vec<ClassDelta>,
    pub accuracy: f64,
    pub probability: f64,
    /// First report's mean time over the second's.
    pub speedup: f64,
    pub first: Headline,
    pub second: Headline,
}

/// Per-class and overall differences from `a` to `b`, which must cover
/// the same clips.
pub fn compare_variants(a: &MetricsReport, b: &MetricsReport) -> Result<TradeOff, EvalError> {
    let names = |r: &MetricsReport| {
        let mut v: Vec<(String, MessageId)> = r.clips.iter().map(|c| (c.clip.clone(), c.truth)).collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    if na != nb {
        let missing = na.iter().chain(&nb).find(|c| !na.contains(c) || !nb.contains(c));
        return Err(EvalError::MismatchedTestSets(match missing {
            Some((clip, _)) => format!("`{clip}` is in only one report"),
            None => "clip labels differ".into(),
        }));
    }
    let classes = a
        .classes
        .iter()
        .map(|ca| {
            let cb = b.class(ca.message).expect("same clips give the same classes");
            ClassDelta {
                message: ca.message,
                accuracy: cb.accuracy - ca.accuracy,
                probability: ca.avg_probability.zip(cb.avg_probability).map(|(p, q)| q - p),
            }
        })
        .collect();
    let (first, second) = (Headline::of(a), Headline::of(b));
    Ok(TradeOff {
        classes,
        accuracy: second.accuracy - first.accuracy,
        probability: second.probability - first.probability,
        speedup: first.speedup_of(&second),
        first,
        second,
    })
}

#[cfg(test)]
mod tests;
