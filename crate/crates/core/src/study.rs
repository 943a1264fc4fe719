//! Human transcription study: session assignment, answer collection with an
//! append-only log, and the per-participant report.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip::VideoClip;
use crate::dataset::{generate_dataset, DatasetError, DatasetManifest, GenerateConfig};
use crate::derive_seed;
use crate::dsl::{Library, MessageId};
use crate::render::{EnvCondition, ViewAngle};

pub const CONVERSATIONS: usize = 10;
pub const MIN_TURNS: usize = 2;
pub const MAX_TURNS: usize = 5;
pub const MAX_CONFIDENCE: i64 = 10;

/// Published overall transcription accuracy, for report footnotes.
pub const REFERENCE_ACCURACY: f64 = 0.882;
/// Published overall confidence out of ten.
pub const REFERENCE_CONFIDENCE: f64 = 7.90;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study content is missing {0}")]
    ContentMissing(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("session `{session}` has no item {item}")]
    UnknownItem { session: String, item: usize },
    #[error("unknown clip `{0}`")]
    UnknownClip(String),
    #[error("item {item} of session `{session}` was already answered")]
    DuplicateAnswer { session: String, item: usize },
    #[error("confidence {0} is outside 0..=10")]
    ConfidenceOutOfRange(i64),
    #[error("session `{session}` has {remaining} teaching clip(s) left to view")]
    TeachingIncomplete { session: String, remaining: usize },
    #[error("no transcriptions recorded")]
    NoData,
    #[error("study log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn view_index(v: ViewAngle) -> usize {
    ViewAngle::ALL.iter().position(|&a| a == v).expect("listed viewpoint")
}

/// Clips of every message as seen from every viewpoint.
#[derive(Debug, Clone)]
pub struct StudyContent {
    pub dir: PathBuf,
    clips: BTreeMap<(usize, MessageId), PathBuf>,
}

impl StudyContent {
    /// Content from explicit clip paths relative to `dir`.
    pub fn new(dir: &Path, clips: impl IntoIterator<Item = (ViewAngle, MessageId, PathBuf)>) -> Self {
        StudyContent {
            dir: dir.to_path_buf(),
            clips: clips.into_iter().map(|(v, m, p)| ((view_index(v), m), p)).collect(),
        }
    }

    /// Renders one clear-water clip per message and viewpoint into
    /// `dir/<viewpoint>/`.
    pub fn generate(
        library: &Library,
        dir: &Path,
        seed: u64,
        fps: f64,
        resolution: [usize; 2],
    ) -> Result<Self, StudyError> {
        for view in ViewAngle::ALL {
            let mut config = GenerateConfig::new(vec![EnvCondition::clear()], 1, seed);
            config.viewpoint = view;
            config.fps = fps;
            config.resolution = resolution;
            generate_dataset(library, &config, &dir.join(view.name().to_ascii_lowercase()))?;
        }
        Self::load(dir)
    }

    /// Reads the per-viewpoint manifests under `dir`; whatever is absent is
    /// reported by [`StudyContent::check`].
    pub fn load(dir: &Path) -> Result<Self, StudyError> {
        let mut clips = Vec::new();
        for view in ViewAngle::ALL {
            let sub = view.name().to_ascii_lowercase();
            let manifest = match DatasetManifest::load(&dir.join(&sub)) {
                Ok(m) => m,
                Err(DatasetError::Io(e)) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            for e in manifest.entries {
                clips.push((view, e.message, Path::new(&sub).join(&e.clip_path)));
            }
        }
        Ok(Self::new(dir, clips))
    }

    pub fn check(&self) -> Result<(), StudyError> {
        for view in ViewAngle::ALL {
            let missing: Vec<&str> = MessageId::ALL
                .iter()
                .filter(|m| !self.clips.contains_key(&(view_index(view), **m)))
                .map(|m| m.name())
                .collect();
            if !missing.is_empty() {
                return Err(StudyError::ContentMissing(format!("{} clips for {}", view.name(), missing.join(", "))));
            }
        }
        Ok(())
    }

    pub fn clip_path(&self, view: ViewAngle, message: MessageId) -> Option<PathBuf> {
        self.clips.get(&(view_index(view), message)).map(|p| self.dir.join(p))
    }

    pub fn load_clip(&self, view: ViewAngle, message: MessageId) -> Result<VideoClip, StudyError> {
        let path = self
            .clip_path(view, message)
            .ok_or_else(|| StudyError::ContentMissing(format!("{} {}", view.name(), message.name())))?;
        VideoClip::load(&path).map_err(|source| DatasetError::Clip { path, source }.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaylistItem {
    /// Index across the whole playlist.
    pub item: usize,
    pub clip_id: String,
    pub truth: MessageId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub session_id: String,
    pub seed: u64,
    pub viewpoint: ViewAngle,
    pub teaching_order: Vec<MessageId>,
    pub conversations: Vec<Vec<PlaylistItem>>,
}

/// What a participant's browser receives: no labels on playlist items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub viewpoint: ViewAngle,
    pub teaching: Vec<TeachingItem>,
    pub conversations: Vec<Vec<ItemView>>,
    pub options: Vec<MessageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeachingItem {
    pub message: MessageId,
    pub clip_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item: usize,
    pub clip_id: String,
}

/// What a clip id refers to within its session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipRef {
    Teaching(usize),
    Item(usize),
}

impl StudySession {
    /// Draws a viewpoint, a teaching order and ten conversations of two to
    /// five gestures that together use every message.
    pub fn create(content: &StudyContent, seed: u64) -> Result<Self, StudyError> {
        content.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e55]));
        let viewpoint = ViewAngle::ALL[rng.random_range(0..ViewAngle::ALL.len())];
        let mut teaching_order = MessageId::ALL.to_vec();
        teaching_order.shuffle(&mut rng);

        let lengths: Vec<usize> = (0..CONVERSATIONS).map(|_| rng.random_range(MIN_TURNS..=MAX_TURNS)).collect();
        let total: usize = lengths.iter().sum();
        let mut messages = MessageId::ALL.to_vec();
        while messages.len() < total {
            messages.push(MessageId::ALL[rng.random_range(0..MessageId::COUNT)]);
        }
        messages.shuffle(&mut rng);

        let session_id = format!("s{:016x}", derive_seed(seed, &[0x1d]));
        let mut next = messages.into_iter().enumerate();
        let conversations = lengths
            .iter()
            .map(|&n| {
                next.by_ref()
                    .take(n)
                    .map(|(item, truth)| PlaylistItem {
                        item,
                        clip_id: format!("{session_id}-i{item}"),
                        truth,
                    })
                    .collect()
            })
            .collect();
        Ok(StudySession {
            session_id,
            seed,
            viewpoint,
            teaching_order,
            conversations,
        })
    }

    pub fn items(&self) -> impl Iterator<Item = &PlaylistItem> {
        self.conversations.iter().flatten()
    }

    pub fn item(&self, item: usize) -> Option<&PlaylistItem> {
        self.items().find(|p| p.item == item)
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            viewpoint: self.viewpoint,
            teaching: self
                .teaching_order
                .iter()
                .enumerate()
                .map(|(k, &message)| TeachingItem {
                    message,
                    clip_id: format!("{}-t{k}", self.session_id),
                })
                .collect(),
            conversations: self
                .conversations
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|p| ItemView {
                            item: p.item,
                            clip_id: p.clip_id.clone(),
                        })
                        .collect()
                })
                .collect(),
            options: MessageId::ALL.to_vec(),
        }
    }

    /// Decodes a clip id issued by this session.
    pub fn resolve(&self, clip_id: &str) -> Option<(ClipRef, MessageId)> {
        let rest = clip_id.strip_prefix(&self.session_id)?.strip_prefix('-')?;
        if let Some(k) = rest.strip_prefix('t') {
            let k: usize = k.parse().ok()?;
            return Some((ClipRef::Teaching(k), *self.teaching_order.get(k)?));
        }
        let item: usize = rest.strip_prefix('i')?.parse().ok()?;
        self.item(item).map(|p| (ClipRef::Item(item), p.truth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionRecord {
    pub session_id: String,
    pub item: usize,
    pub choice: MessageId,
    pub confidence: i64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// One answer with its truth, keyed by participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub participant: String,
    pub truth: MessageId,
    pub choice: MessageId,
    pub confidence: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageScore {
    pub message: MessageId,
    pub accuracy: f64,
    pub confidence: f64,
    pub participants: usize,
    pub shown: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub participants: usize,
    pub records: usize,
    /// Only messages that were shown at least once.
    pub messages: Vec<MessageScore>,
    pub overall_accuracy: f64,
    pub overall_confidence: f64,
    pub reference_accuracy: f64,
    pub reference_confidence: f64,
}

#[derive(Default)]
struct Tally {
    shown: usize,
    correct: usize,
    confidence: u64,
}

impl Tally {
    fn add(&mut self, r: &ScoredRecord) {
        self.shown += 1;
        self.correct += (r.truth == r.choice) as usize;
        self.confidence += r.confidence as u64;
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.shown as f64
    }

    fn confidence(&self) -> f64 {
        self.confidence as f64 / self.shown as f64
    }
}

/// Accuracy and confidence averaged per participant first, then across
/// participants, both overall and per message.
pub fn compute_report(records: &[ScoredRecord]) -> Result<StudyReport, StudyError> {
    if records.is_empty() {
        return Err(StudyError::NoData);
    }
    let mut overall: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut per_message: BTreeMap<MessageId, BTreeMap<&str, Tally>> = BTreeMap::new();
    for r in records {
        overall.entry(&r.participant).or_default().add(r);
        per_message.entry(r.truth).or_default().entry(&r.participant).or_default().add(r);
    }
    let average = |tallies: &BTreeMap<&str, Tally>, f: fn(&Tally) -> f64| {
        tallies.values().map(f).sum::<f64>() / tallies.len() as f64
    };
    let messages = per_message
        .iter()
        .map(|(&message, tallies)| MessageScore {
            message,
            accuracy: average(tallies, Tally::accuracy),
            confidence: average(tallies, Tally::confidence),
            participants: tallies.len(),
            shown: tallies.values().map(|t| t.shown).sum(),
        })
        .collect();
    Ok(StudyReport {
        participants: overall.len(),
        records: records.len(),
        messages,
        overall_accuracy: average(&overall, Tally::accuracy),
        overall_confidence: average(&overall, Tally::confidence),
        reference_accuracy: REFERENCE_ACCURACY,
        reference_confidence: REFERENCE_CONFIDENCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEvent {
    Session(StudySession),
    Taught { session_id: String, index: usize },
    Transcription(TranscriptionRecord),
}

#[derive(Debug, Clone, PartialEq)]
struct SessionState {
    session: StudySession,
    taught: BTreeSet<usize>,
    answers: BTreeMap<usize, TranscriptionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub item: usize,
    pub answered: usize,
    pub remaining: usize,
}

/// Study state backed by an append-only JSON-lines log. Every change is
/// written to the log before it takes effect in memory.
#[derive(Debug)]
pub struct Study {
    content: StudyContent,
    log_path: PathBuf,
    log: File,
    sessions: BTreeMap<String, SessionState>,
}

impl Study {
    /// Opens (or creates) the log at `log_path` and replays it.
    pub fn open(content: StudyContent, log_path: &Path) -> Result<Self, StudyError> {
        if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut sessions = BTreeMap::new();
        if log_path.exists() {
            for (i, line) in BufReader::new(File::open(log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| StudyError::CorruptLog { line: i + 1, message };
                let event: LogEvent = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                apply(&mut sessions, event).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(Study {
            content,
            log_path: log_path.to_path_buf(),
            log,
            sessions,
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn content(&self) -> &StudyContent {
        &self.content
    }

    fn commit(&mut self, event: LogEvent) -> Result<(), StudyError> {
        let line = serde_json::to_string(&event).map_err(io::Error::from)?;
        writeln!(self.log, "{line}")?;
        self.log.flush()?;
        apply(&mut self.sessions, event)
    }

    pub fn create_session(&mut self, seed: u64) -> Result<&StudySession, StudyError> {
        let session = StudySession::create(&self.content, seed)?;
        if self.sessions.contains_key(&session.session_id) {
            return Err(StudyError::SessionExists(session.session_id));
        }
        let id = session.session_id.clone();
        self.commit(LogEvent::Session(session))?;
        Ok(&self.sessions[&id].session)
    }

    pub fn session(&self, id: &str) -> Result<&StudySession, StudyError> {
        self.state(id).map(|s| &s.session)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    fn state(&self, id: &str) -> Result<&SessionState, StudyError> {
        self.sessions.get(id).ok_or_else(|| StudyError::UnknownSession(id.to_string()))
    }

    fn teaching_left(&self, id: &str) -> Result<usize, StudyError> {
        let s = self.state(id)?;
        Ok(s.session.teaching_order.len() - s.taught.len())
    }

    /// The clip behind `clip_id`. Serving a teaching clip marks it viewed;
    /// playlist clips stay locked until every teaching clip was viewed.
    pub fn clip(&mut self, clip_id: &str) -> Result<VideoClip, StudyError> {
        let unknown = || StudyError::UnknownClip(clip_id.to_string());
        let session_id = clip_id.rsplit_once('-').ok_or_else(unknown)?.0.to_string();
        let state = self.sessions.get(&session_id).ok_or_else(unknown)?;
        let (what, message) = state.session.resolve(clip_id).ok_or_else(unknown)?;
        let view = state.session.viewpoint;
        match what {
            ClipRef::Teaching(index) => {
                let clip = self.content.load_clip(view, message)?;
                if !state.taught.contains(&index) {
                    self.commit(LogEvent::Taught { session_id, index })?;
                }
                Ok(clip)
            }
            ClipRef::Item(_) => {
                let remaining = self.teaching_left(&session_id)?;
                if remaining > 0 {
                    return Err(StudyError::TeachingIncomplete { session: session_id, remaining });
                }
                self.content.load_clip(view, message)
            }
        }
    }

    /// Marks every teaching clip of a session viewed.
    pub fn complete_teaching(&mut self, session_id: &str) -> Result<(), StudyError> {
        let state = self.state(session_id)?;
        let pending: Vec<usize> = (0..state.session.teaching_order.len()).filter(|k| !state.taught.contains(k)).collect();
        for index in pending {
            self.commit(LogEvent::Taught {
                session_id: session_id.to_string(),
                index,
            })?;
        }
        Ok(())
    }

    pub fn submit(&mut self, record: TranscriptionRecord) -> Result<Ack, StudyError> {
        validate(&self.sessions, &record)?;
        let remaining = self.teaching_left(&record.session_id)?;
        if remaining > 0 {
            return Err(StudyError::TeachingIncomplete {
                session: record.session_id,
                remaining,
            });
        }
        let (session_id, item) = (record.session_id.clone(), record.item);
        self.commit(LogEvent::Transcription(record))?;
        let state = &self.sessions[&session_id];
        Ok(Ack {
            session_id,
            item,
            answered: state.answers.len(),
            remaining: state.session.items().count() - state.answers.len(),
        })
    }

    pub fn scored_records(&self) -> Vec<ScoredRecord> {
        self.sessions
            .values()
            .flat_map(|s| {
                s.answers.values().map(|r| ScoredRecord {
                    participant: s.session.session_id.clone(),
                    truth: s.session.item(r.item).expect("validated item").truth,
                    choice: r.choice,
                    confidence: r.confidence as u8,
                })
            })
            .collect()
    }

    pub fn record_count(&self) -> usize {
        self.sessions.values().map(|s| s.answers.len()).sum()
    }

    pub fn report(&self) -> Result<StudyReport, StudyError> {
        compute_report(&self.scored_records())
    }
}

fn validate(sessions: &BTreeMap<String, SessionState>, r: &TranscriptionRecord) -> Result<(), StudyError> {
    if !(0..=MAX_CONFIDENCE).contains(&r.confidence) {
        return Err(StudyError::ConfidenceOutOfRange(r.confidence));
    }
    let state = sessions
        .get(&r.session_id)
        .ok_or_else(|| StudyError::UnknownSession(r.session_id.clone()))?;
    if state.session.item(r.item).is_none() {
        return Err(StudyError::UnknownItem {
            session: r.session_id.clone(),
            item: r.item,
        });
    }
    if state.answers.contains_key(&r.item) {
        return Err(StudyError::DuplicateAnswer {
            session: r.session_id.clone(),
            item: r.item,
        });
    }
    Ok(())
}

fn apply(sessions: &mut BTreeMap<String, SessionState>, event: LogEvent) -> Result<(), StudyError> {
    match event {
        LogEvent::Session(session) => {
            if sessions.contains_key(&session.session_id) {
                return Err(StudyError::SessionExists(session.session_id));
            }
            sessions.insert(
                session.session_id.clone(),
                SessionState {
                    session,
                    taught: BTreeSet::new(),
                    answers: BTreeMap::new(),
                },
            );
        }
        LogEvent::Taught { session_id, index } => {
            let state = sessions
                .get_mut(&session_id)
                .ok_or_else(|| StudyError::UnknownSession(session_id.clone()))?;
            if index >= state.session.teaching_order.len() {
                return Err(StudyError::UnknownClip(format!("{session_id}-t{index}")));
            }
            state.taught.insert(index);
        }
        LogEvent::Transcription(record) => {
            validate(sessions, &record)?;
            let state = sessions.get_mut(&record.session_id).expect("validated session");
            state.answers.insert(record.item, record);
        }
    }
    Ok(())
}
