//! Labeled clip corpus: generation, stratified splitting, chunking and
//! training-time augmentation.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::{ClipError, VideoClip};
use crate::derive_seed;
use crate::dsl::{Library, MessageId};
use crate::kinematics::{simulate, KinematicsError, RobotProfile};
use crate::render::{render_clip, EnvCondition, RenderError, ViewAngle, Viewpoint};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".generate.lock";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.73;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("library is missing {0}")]
    IncompleteLibrary(MessageId),
    #[error("no conditions given")]
    NoConditions,
    #[error("class {0} has {1} clips; need at least one for training and one for testing")]
    TooFewInstances(MessageId, usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("dataset directory {0} is locked by another generator")]
    Locked(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Clip { path: PathBuf, source: ClipError },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset directory.
    pub clip_path: String,
    pub message: MessageId,
    pub env: u32,
    pub viewpoint: ViewAngle,
    pub split: Option<Split>,
    pub seed: u64,
}

/// Per-channel mean and standard deviation of the training frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fps: f64,
    pub resolution: [usize; 2],
    pub seed: u64,
    pub train_fraction: Option<f64>,
    pub norm: Option<NormStats>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn count_by_class(&self, split: Option<Split>) -> BTreeMap<MessageId, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if split.is_none() || e.split == split {
                *out.entry(e.message).or_insert(0) += 1;
            }
        }
        out
    }

    /// Checks that paths are unique and every clip exists and parses.
    pub fn verify(&self, dir: &Path) -> Result<(), DatasetError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clip_path) {
                return Err(DatasetError::Manifest(format!("duplicate path {}", e.clip_path)));
            }
            load_entry(dir, e)?;
        }
        Ok(())
    }
}

pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<VideoClip, DatasetError> {
    let path = dir.join(&entry.clip_path);
    VideoClip::load(&path).map_err(|source| DatasetError::Clip { path, source })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub conditions: Vec<EnvCondition>,
    pub instances_per_class: usize,
    pub fps: f64,
    /// Rendered frame size `[height, width]`.
    pub resolution: [usize; 2],
    pub seed: u64,
    pub viewpoint: ViewAngle,
    pub profile: RobotProfile,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl GenerateConfig {
    pub fn new(conditions: Vec<EnvCondition>, instances_per_class: usize, seed: u64) -> Self {
        GenerateConfig {
            conditions,
            instances_per_class,
            fps: 5.0,
            resolution: [40, 40],
            seed,
            viewpoint: ViewAngle::HeadOn,
            profile: RobotProfile::default(),
            threads: 0,
        }
    }
}

struct Job {
    message: MessageId,
    condition: EnvCondition,
    seed: u64,
    clip_path: String,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Renders `15 x conditions x instances` clips into `dir` and writes the
/// manifest. Output is a pure function of the library and `config`.
pub fn generate_dataset(library: &Library, config: &GenerateConfig, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    if let Some(&m) = MessageId::ALL.iter().find(|m| !library.contains_key(m)) {
        return Err(DatasetError::IncompleteLibrary(m));
    }
    if config.conditions.is_empty() {
        return Err(DatasetError::NoConditions);
    }
    fs::create_dir_all(dir)?;
    let lock_path = dir.join(LOCK_FILE);
    OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => DatasetError::Locked(dir.to_path_buf()),
            _ => DatasetError::Io(e),
        })?;
    let _lock = LockGuard(lock_path);
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir)?;

    let view = config.viewpoint.name().to_ascii_lowercase();
    let mut jobs = Vec::new();
    for &message in &MessageId::ALL {
        for condition in &config.conditions {
            for instance in 0..config.instances_per_class {
                let seed = derive_seed(
                    config.seed,
                    &[message.code() as u64, condition.condition_id as u64, instance as u64],
                );
                let clip_path = format!(
                    "clips/{}_{view}_c{:03}_i{instance}.clip",
                    message.file_stem(),
                    condition.condition_id
                );
                jobs.push(Job {
                    message,
                    condition: *condition,
                    seed,
                    clip_path,
                });
            }
        }
    }

    let threads = match config.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len())
    .max(1);
    let run = |job: &Job| -> Result<(), DatasetError> {
        let profile = config.profile.with_controller(job.condition.controller);
        let traj = simulate(&library[&job.message], &profile, config.fps, job.seed)?;
        let [h, w] = config.resolution;
        let viewpoint = Viewpoint::new(config.viewpoint);
        let mut rendered = render_clip(&traj, &viewpoint, &job.condition, (h, w), derive_seed(job.seed, &[1]))?;
        rendered.clip.label = Some(job.message);
        let path = dir.join(&job.clip_path);
        rendered.clip.save(&path).map_err(|source| DatasetError::Clip { path, source })?;
        log::debug!("rendered {} ({} frames)", job.clip_path, rendered.clip.t);
        Ok(())
    };
    if threads == 1 {
        jobs.iter().try_for_each(run)?;
    } else {
        std::thread::scope(|s| -> Result<(), DatasetError> {
            let handles: Vec<_> = (0..threads)
                .map(|k| {
                    let jobs = &jobs;
                    let run = &run;
                    s.spawn(move || jobs.iter().skip(k).step_by(threads).try_for_each(run))
                })
                .collect();
            for h in handles {
                h.join().expect("generation worker panicked")?;
            }
            Ok(())
        })?;
    }

    let manifest = DatasetManifest {
        fps: config.fps,
        resolution: config.resolution,
        seed: config.seed,
        train_fraction: None,
        norm: None,
        entries: jobs
            .into_iter()
            .map(|j| ManifestEntry {
                clip_path: j.clip_path,
                message: j.message,
                env: j.condition.condition_id,
                viewpoint: config.viewpoint,
                split: None,
                seed: j.seed,
            })
            .collect(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Stratified random split. Each class gets `floor(n * fraction)` training
/// clips; the shortfall against `round(total * fraction)` goes one clip at
/// a time to the classes with the largest fractional remainders. Every
/// class keeps at least one clip on each side.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let mut by_class: BTreeMap<MessageId, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_class.entry(e.message).or_default().push(i);
    }
    for (&m, idx) in &by_class {
        if idx.len() < 2 {
            return Err(DatasetError::TooFewInstances(m, idx.len()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quota: BTreeMap<MessageId, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&m, idx) in &by_class {
        let exact = idx.len() as f64 * train_fraction;
        let q = (exact.floor() as usize).clamp(1, idx.len() - 1);
        quota.insert(m, q);
        // The random key breaks ties between equal remainders.
        remainders.push((exact - exact.floor(), rng.random::<u64>(), m));
    }
    let target = (manifest.entries.len() as f64 * train_fraction).round() as usize;
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned: usize = quota.values().sum();
    for &(_, _, m) in &remainders {
        if assigned >= target {
            break;
        }
        let q = quota.get_mut(&m).expect("class present");
        if *q + 1 < by_class[&m].len() {
            *q += 1;
            assigned += 1;
        }
    }

    let mut out = manifest.clone();
    out.train_fraction = Some(train_fraction);
    out.norm = None;
    for (m, mut idx) in by_class {
        idx.shuffle(&mut rng);
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = Some(if k < quota[&m] { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// Per-channel statistics over every pixel of every training frame.
pub fn compute_norm_stats(manifest: &DatasetManifest, dir: &Path) -> Result<NormStats, DatasetError> {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut count = 0f64;
    for e in manifest.entries_in(Split::Train) {
        let clip = load_entry(dir, e)?;
        accumulate_stats(&clip, &mut sum, &mut sq, &mut count);
    }
    if count == 0.0 {
        return Err(DatasetError::Manifest("no training clips to compute statistics from".into()));
    }
    Ok(finish_stats(sum, sq, count))
}

pub(crate) fn accumulate_stats(clip: &VideoClip, sum: &mut [f64; 3], sq: &mut [f64; 3], count: &mut f64) {
    let plane = clip.h * clip.w;
    for t in 0..clip.t {
        let frame = clip.frame(t);
        for c in 0..clip.c.min(3) {
            for &v in &frame[c * plane..(c + 1) * plane] {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    *count += (clip.t * plane) as f64;
}

pub(crate) fn finish_stats(sum: [f64; 3], sq: [f64; 3], count: f64) -> NormStats {
    let mean: [f64; 3] = std::array::from_fn(|c| sum[c] / count);
    NormStats {
        mean: std::array::from_fn(|c| mean[c] as f32),
        std: std::array::from_fn(|c| ((sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6)) as f32),
    }
}

/// A fixed-length window of a clip, frames `T x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub frames: Vec<f32>,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub source: String,
    pub start: usize,
    pub skip: bool,
}

impl Chunk {
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn at(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.frames[((t * self.c + c) * self.h + y) * self.w + x]
    }

    /// Rearranges to the `[C, T, H, W]` layout the encoder consumes.
    pub fn to_channels_first(&self) -> Vec<f32> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; self.frames.len()];
        for t in 0..self.t {
            for c in 0..self.c {
                let src = &self.frames[(t * self.c + c) * plane..(t * self.c + c + 1) * plane];
                out[(c * self.t + t) * plane..(c * self.t + t + 1) * plane].copy_from_slice(src);
            }
        }
        out
    }
}

/// Splits `clip` into windows of `t_in` frames with stride `t_in`. The last
/// window is padded by repeating the final frame. With `skip`, each window
/// keeps only its even-indexed frames.
pub fn chunk(clip: &VideoClip, t_in: usize, skip: bool, source: &str) -> Vec<Chunk> {
    assert!(t_in > 0, "chunk length must be positive");
    let count = clip.t.div_ceil(t_in).max(1);
    (0..count).map(|k| window(clip, k * t_in, t_in, skip, source)).collect()
}

/// The `t_in` frames starting at `start`, repeating the final frame past
/// the end of the clip.
pub fn window(clip: &VideoClip, start: usize, t_in: usize, skip: bool, source: &str) -> Chunk {
    let n = clip.frame_len();
    let step = if skip { 2 } else { 1 };
    let mut frames = Vec::with_capacity(t_in.div_ceil(step) * n);
    for i in (0..t_in).step_by(step) {
        let src = (start + i).min(clip.t - 1);
        frames.extend_from_slice(clip.frame(src));
    }
    Chunk {
        t: frames.len() / n,
        frames,
        c: clip.c,
        h: clip.h,
        w: clip.w,
        source: source.to_string(),
        start,
        skip,
    }
}

/// Plain `h x w` crop at `(y0, x0)`, mirrored horizontally when `flip`.
pub fn crop(chunk: &Chunk, y0: usize, x0: usize, (h, w): (usize, usize), flip: bool) -> Chunk {
    assert!(y0 + h <= chunk.h && x0 + w <= chunk.w, "crop window outside the frame");
    let plane = chunk.h * chunk.w;
    let mut frames = Vec::with_capacity(chunk.t * chunk.c * h * w);
    for tc in 0..chunk.t * chunk.c {
        let src = &chunk.frames[tc * plane..(tc + 1) * plane];
        for y in 0..h {
            let row = &src[(y0 + y) * chunk.w + x0..(y0 + y) * chunk.w + x0 + w];
            if flip {
                frames.extend(row.iter().rev());
            } else {
                frames.extend_from_slice(row);
            }
        }
    }
    Chunk {
        frames,
        t: chunk.t,
        c: chunk.c,
        h,
        w,
        source: chunk.source.clone(),
        start: chunk.start,
        skip: chunk.skip,
    }
}

pub const CROP_SCALES: [f64; 3] = [1.0, 0.875, 0.75];

/// The random choices [`augment`] makes for one chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    /// Square crop side in source pixels.
    pub side: usize,
    pub y0: usize,
    pub x0: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn sample(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let scale = CROP_SCALES[rng.random_range(0..CROP_SCALES.len())];
        let side = ((h.min(w) as f64 * scale).round() as usize).max(1);
        CropParams {
            side,
            y0: rng.random_range(0..=h - side),
            x0: rng.random_range(0..=w - side),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Multi-scale random crop resized to `out`, random horizontal flip, then
/// per-channel standardization with `norm`.
pub fn augment(chunk: &Chunk, out: (usize, usize), norm: &NormStats, seed: u64) -> Chunk {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = CropParams::sample(&mut rng, chunk.h, chunk.w);
    let mut res = crop_resize(chunk, p, out);
    normalize(&mut res, norm);
    res
}

/// Crops the square window described by `p` from every frame and resizes it
/// bilinearly to `out`, mirroring horizontally when `p.flip`.
pub fn crop_resize(chunk: &Chunk, p: CropParams, (oh, ow): (usize, usize)) -> Chunk {
    let plane_in = chunk.h * chunk.w;
    let mut frames = vec![0.0f32; chunk.t * chunk.c * oh * ow];
    let sy = p.side as f64 / oh as f64;
    let sx = p.side as f64 / ow as f64;
    let taps = |o: usize, scale: f64, origin: usize, limit: usize| -> (usize, usize, f32) {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (p.side - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(p.side - 1);
        let f = (src - i0 as f64) as f32;
        ((origin + i0).min(limit - 1), (origin + i1).min(limit - 1), f)
    };
    let ys: Vec<_> = (0..oh).map(|y| taps(y, sy, p.y0, chunk.h)).collect();
    let xs: Vec<_> = (0..ow).map(|x| taps(x, sx, p.x0, chunk.w)).collect();
    for t in 0..chunk.t {
        for c in 0..chunk.c {
            let src = &chunk.frames[(t * chunk.c + c) * plane_in..(t * chunk.c + c + 1) * plane_in];
            let dst = &mut frames[(t * chunk.c + c) * oh * ow..(t * chunk.c + c + 1) * oh * ow];
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * chunk.w + x0] * (1.0 - fx) + src[y0 * chunk.w + x1] * fx;
                    let bot = src[y1 * chunk.w + x0] * (1.0 - fx) + src[y1 * chunk.w + x1] * fx;
                    let xo = if p.flip { ow - 1 - x } else { x };
                    dst[y * ow + xo] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Chunk {
        frames,
        t: chunk.t,
        c: chunk.c,
        h: oh,
        w: ow,
        source: chunk.source.clone(),
        start: chunk.start,
        skip: chunk.skip,
    }
}

/// Standardizes each channel in place: `(v - mean) / std`.
pub fn normalize(chunk: &mut Chunk, norm: &NormStats) {
    let plane = chunk.h * chunk.w;
    for t in 0..chunk.t {
        for c in 0..chunk.c {
            let (m, s) = (norm.mean[c.min(2)], norm.std[c.min(2)]);
            for v in &mut chunk.frames[(t * chunk.c + c) * plane..(t * chunk.c + c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_clip(t: usize, h: usize, w: usize) -> VideoClip {
        let frames = (0..t * 3 * h * w).map(|i| i as f32).collect();
        VideoClip::new(frames, [t, 3, h, w], 10.0, None).unwrap()
    }

    fn fake_manifest(per_class: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for m in MessageId::ALL {
            for i in 0..per_class {
                entries.push(ManifestEntry {
                    clip_path: format!("{}_{i}.clip", m.file_stem()),
                    message: m,
                    env: i as u32,
                    viewpoint: ViewAngle::HeadOn,
                    split: None,
                    seed: i as u64,
                });
            }
        }
        DatasetManifest {
            fps: 5.0,
            resolution: [40, 40],
            seed: 0,
            train_fraction: None,
            norm: None,
            entries,
        }
    }

    #[test]
    fn split_counts_for_full_corpus() {
        let m = split(&fake_manifest(25), 0.73, 4).unwrap();
        let train = m.entries_in(Split::Train).count();
        assert!((273..=275).contains(&train), "{train}");
        for (_, n) in m.count_by_class(Some(Split::Train)) {
            assert!(n == 18 || n == 19);
        }
        for (_, n) in m.count_by_class(Some(Split::Test)) {
            assert!(n >= 1);
        }
    }

    #[test]
    fn split_half_of_two() {
        let m = split(&fake_manifest(2), 0.5, 1).unwrap();
        assert!(m.count_by_class(Some(Split::Train)).values().all(|&n| n == 1));
        assert!(m.count_by_class(Some(Split::Test)).values().all(|&n| n == 1));
    }

    #[test]
    fn split_rejects_singletons_and_bad_fractions() {
        assert!(matches!(split(&fake_manifest(1), 0.73, 0), Err(DatasetError::TooFewInstances(..))));
        assert!(matches!(split(&fake_manifest(4), 1.0, 0), Err(DatasetError::InvalidFraction(_))));
        assert!(split(&fake_manifest(4), 0.0, 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(&fake_manifest(6), 0.73, 9).unwrap();
        assert_eq!(a, split(&fake_manifest(6), 0.73, 9).unwrap());
        assert_ne!(a, split(&fake_manifest(6), 0.73, 10).unwrap());
    }

    #[test]
    fn chunk_exact_multiple() {
        let clip = ramp_clip(128, 2, 2);
        let chunks = chunk(&clip, 64, false, "x");
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.t == 64));
        assert_eq!(chunks[1].frame(0), clip.frame(64));
    }

    #[test]
    fn chunk_skip_keeps_even_frames() {
        let clip = ramp_clip(64, 2, 2);
        let chunks = chunk(&clip, 64, true, "x");
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].t, 32);
        for k in 0..32 {
            assert_eq!(chunks[0].frame(k), clip.frame(2 * k));
        }
    }

    #[test]
    fn chunk_pads_with_last_frame() {
        let clip = ramp_clip(70, 2, 2);
        let chunks = chunk(&clip, 64, false, "x");
        assert_eq!(chunks.len(), 2);
        for k in 0..6 {
            assert_eq!(chunks[1].frame(k), clip.frame(64 + k));
        }
        for k in 6..64 {
            assert_eq!(chunks[1].frame(k), clip.frame(69));
        }
    }

    #[test]
    fn crop_at_full_scale_without_flip_is_subwindow_resize() {
        let clip = ramp_clip(2, 8, 8);
        let ch = &chunk(&clip, 2, false, "x")[0];
        let p = CropParams { side: 4, y0: 2, x0: 3, flip: false };
        let out = crop_resize(ch, p, (4, 4));
        for t in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(out.at(t, c, y, x), ch.at(t, c, y + 2, x + 3));
                    }
                }
            }
        }
        let flipped = crop_resize(ch, CropParams { flip: true, ..p }, (4, 4));
        assert_eq!(flipped.at(1, 2, 3, 0), out.at(1, 2, 3, 3));
    }

    #[test]
    fn augment_is_deterministic() {
        let clip = ramp_clip(4, 10, 10);
        let ch = &chunk(&clip, 4, false, "x")[0];
        let a = augment(ch, (8, 8), &NormStats::IDENTITY, 5);
        assert_eq!(a, augment(ch, (8, 8), &NormStats::IDENTITY, 5));
        assert_eq!((a.h, a.w, a.t), (8, 8, 4));
    }

    #[test]
    fn plain_crop_and_flip() {
        let clip = ramp_clip(1, 4, 5);
        let ch = &chunk(&clip, 1, false, "x")[0];
        let c = crop(ch, 1, 2, (2, 3), false);
        assert_eq!(c.at(0, 1, 0, 0), ch.at(0, 1, 1, 2));
        assert_eq!(c.at(0, 2, 1, 2), ch.at(0, 2, 2, 4));
        let f = crop(ch, 1, 2, (2, 3), true);
        assert_eq!(f.at(0, 2, 1, 0), ch.at(0, 2, 2, 4));
    }

    #[test]
    fn channels_first_layout() {
        let clip = ramp_clip(3, 2, 2);
        let ch = &chunk(&clip, 3, false, "x")[0];
        let cf = ch.to_channels_first();
        assert_eq!(cf[(2 * 3 + 1) * 4 + 3], ch.at(1, 2, 1, 1));
    }

    proptest! {
        #[test]
        fn chunks_concatenate_to_clip(k in 1usize..5, t_in in 1usize..9) {
            let clip = ramp_clip(k * t_in, 2, 3);
            let chunks = chunk(&clip, t_in, false, "x");
            let joined: Vec<f32> = chunks.iter().flat_map(|c| c.frames.iter().copied()).collect();
            prop_assert_eq!(joined, clip.frames);
        }

        #[test]
        fn split_is_stratified(per_class in 2usize..12, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let m = split(&fake_manifest(per_class), frac, seed).unwrap();
            for (_, n) in m.count_by_class(Some(Split::Train)) {
                let exact = per_class as f64 * frac;
                prop_assert!((n as f64 - exact).abs() < 1.0 + 1e-9 || n == 1 || n == per_class - 1);
                prop_assert!(n >= 1 && n < per_class);
            }
        }
    }
}
