//! Gesture scripting language.
//!
//! A gesture script is a line-oriented text document:
//!
//! ```text
//! # comments start with a hash
//! message ASCEND
//! description Pitch up 90 degrees vertically and go up
//! segment dur=0.7854 pitch=100
//! segment dur=2.3946 surge=30
//! ```
//!
//! Each `segment` line is one timed motion command. Channels are
//! percentages of the executing robot's maximum rate on that axis; any
//! channel left out is zero. `dur` is mandatory and in seconds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the fifteen communication messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageId {
    BatteryLow,
    StartCommunication,
    Ascend,
    Descend,
    FollowMe,
    Danger,
    CollectData,
    StartMapping,
    GoToLocation,
    UTurn,
    Help,
    EmergencySurfacing,
    Stop,
    No,
    Yes,
}

impl MessageId {
    pub const COUNT: usize = 15;

    pub const ALL: [MessageId; Self::COUNT] = [
        MessageId::BatteryLow,
        MessageId::StartCommunication,
        MessageId::Ascend,
        MessageId::Descend,
        MessageId::FollowMe,
        MessageId::Danger,
        MessageId::CollectData,
        MessageId::StartMapping,
        MessageId::GoToLocation,
        MessageId::UTurn,
        MessageId::Help,
        MessageId::EmergencySurfacing,
        MessageId::Stop,
        MessageId::No,
        MessageId::Yes,
    ];

    /// Stable label code in `0..15`.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Canonical upper-case name, as written in scripts.
    pub fn name(self) -> &'static str {
        match self {
            MessageId::BatteryLow => "BATTERY_LOW",
            MessageId::StartCommunication => "START_COMMUNICATION",
            MessageId::Ascend => "ASCEND",
            MessageId::Descend => "DESCEND",
            MessageId::FollowMe => "FOLLOW_ME",
            MessageId::Danger => "DANGER",
            MessageId::CollectData => "COLLECT_DATA",
            MessageId::StartMapping => "START_MAPPING",
            MessageId::GoToLocation => "GO_TO_LOCATION",
            MessageId::UTurn => "U_TURN",
            MessageId::Help => "HELP",
            MessageId::EmergencySurfacing => "EMERGENCY_SURFACING",
            MessageId::Stop => "STOP",
            MessageId::No => "NO",
            MessageId::Yes => "YES",
        }
    }

    /// File stem used in a library directory (`ascend`, `u_turn`, ...).
    pub fn file_stem(self) -> String {
        self.name().to_ascii_lowercase()
    }

    /// Average gesture duration in seconds from the reference message table.
    pub fn reference_duration(self) -> f64 {
        match self {
            MessageId::BatteryLow => 4.28,
            MessageId::StartCommunication => 16.71,
            MessageId::Ascend => 3.18,
            MessageId::Descend => 3.28,
            MessageId::FollowMe => 6.93,
            MessageId::Danger => 7.44,
            MessageId::CollectData => 8.32,
            MessageId::StartMapping => 4.32,
            MessageId::GoToLocation => 7.48,
            MessageId::UTurn => 4.22,
            MessageId::Help => 19.95,
            MessageId::EmergencySurfacing => 3.46,
            MessageId::Stop => 6.52,
            MessageId::No => 4.31,
            MessageId::Yes => 4.26,
        }
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MessageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', ' '], "_");
        MessageId::ALL
            .iter()
            .copied()
            .find(|m| m.name() == norm)
            .ok_or_else(|| s.to_string())
    }
}

/// The five commanded motion channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Roll,
    Pitch,
    Yaw,
    Surge,
    Heave,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Roll,
        Channel::Pitch,
        Channel::Yaw,
        Channel::Surge,
        Channel::Heave,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Channel::Roll => "roll",
            Channel::Pitch => "pitch",
            Channel::Yaw => "yaw",
            Channel::Surge => "surge",
            Channel::Heave => "heave",
        }
    }
}

/// A timed motion command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub duration: f64,
    pub roll_pct: f64,
    pub pitch_pct: f64,
    pub yaw_pct: f64,
    pub surge_pct: f64,
    pub heave_pct: f64,
}

impl MotionSegment {
    pub fn hold(duration: f64) -> Self {
        MotionSegment {
            duration,
            roll_pct: 0.0,
            pitch_pct: 0.0,
            yaw_pct: 0.0,
            surge_pct: 0.0,
            heave_pct: 0.0,
        }
    }

    pub fn channel(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Roll => self.roll_pct,
            Channel::Pitch => self.pitch_pct,
            Channel::Yaw => self.yaw_pct,
            Channel::Surge => self.surge_pct,
            Channel::Heave => self.heave_pct,
        }
    }

    fn channel_mut(&mut self, channel: Channel) -> &mut f64 {
        match channel {
            Channel::Roll => &mut self.roll_pct,
            Channel::Pitch => &mut self.pitch_pct,
            Channel::Yaw => &mut self.yaw_pct,
            Channel::Surge => &mut self.surge_pct,
            Channel::Heave => &mut self.heave_pct,
        }
    }

    /// Checks the duration and channel bounds, naming the first offending field.
    pub fn validate(&self) -> Result<(), (&'static str, f64)> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(("dur", self.duration));
        }
        for ch in Channel::ALL {
            let v = self.channel(ch);
            if !(v.is_finite() && (-100.0..=100.0).contains(&v)) {
                return Err((ch.key(), v));
            }
        }
        Ok(())
    }
}

/// A message together with the timed motions that perform it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureScript {
    pub message: MessageId,
    pub segments: Vec<MotionSegment>,
    pub description: Option<String>,
}

impl GestureScript {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Start time of every segment, plus the end time as the last element.
    pub fn segment_boundaries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut t = 0.0;
        out.push(t);
        for s in &self.segments {
            t += s.duration;
            out.push(t);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScriptError {
    #[error("line {line}, column {column}: unknown message `{name}`")]
    UnknownMessage {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("line {line}: missing field `{field}`")]
    MissingField { field: &'static str, line: usize },
    #[error("line {line}, column {column}: `{field}` = {value} is out of range")]
    ValueOutOfRange {
        field: String,
        value: f64,
        line: usize,
        column: usize,
    },
    #[error("line {line}, column {column}: {message}")]
    SyntaxError {
        message: String,
        line: usize,
        column: usize,
    },
    #[error("script declares no segments")]
    EmptyScript,
}

impl ScriptError {
    /// 1-based line of the error, if it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            ScriptError::UnknownMessage { line, .. }
            | ScriptError::MissingField { line, .. }
            | ScriptError::ValueOutOfRange { line, .. }
            | ScriptError::SyntaxError { line, .. } => Some(*line),
            ScriptError::EmptyScript => None,
        }
    }
}

fn syntax(message: impl Into<String>, line: usize, column: usize) -> ScriptError {
    ScriptError::SyntaxError {
        message: message.into(),
        line,
        column,
    }
}

/// Splits a line into whitespace-separated tokens with their 1-based columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out.into_iter()
        .map(|(byte, tok)| (line[..byte].chars().count() + 1, tok))
        .collect()
}

fn parse_segment(rest: &[(usize, &str)], lineno: usize) -> Result<MotionSegment, ScriptError> {
    let mut seg = MotionSegment::hold(f64::NAN);
    let mut seen_dur = false;
    let mut seen = [false; 5];
    for &(col, tok) in rest {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| syntax(format!("expected key=value, found `{tok}`"), lineno, col))?;
        let value_col = col + key.chars().count() + 1;
        let parsed: f64 = value
            .parse()
            .map_err(|_| syntax(format!("`{value}` is not a number"), lineno, value_col))?;
        let out_of_range = || ScriptError::ValueOutOfRange {
            field: key.to_string(),
            value: parsed,
            line: lineno,
            column: value_col,
        };
        if key == "dur" {
            if seen_dur {
                return Err(syntax("duplicate key `dur`", lineno, col));
            }
            seen_dur = true;
            if !(parsed.is_finite() && parsed > 0.0) {
                return Err(out_of_range());
            }
            seg.duration = parsed;
            continue;
        }
        let idx = Channel::ALL
            .iter()
            .position(|c| c.key() == key)
            .ok_or_else(|| syntax(format!("unknown key `{key}`"), lineno, col))?;
        if seen[idx] {
            return Err(syntax(format!("duplicate key `{key}`"), lineno, col));
        }
        seen[idx] = true;
        if !(parsed.is_finite() && (-100.0..=100.0).contains(&parsed)) {
            return Err(out_of_range());
        }
        *seg.channel_mut(Channel::ALL[idx]) = parsed;
    }
    if !seen_dur {
        return Err(ScriptError::MissingField {
            field: "dur",
            line: lineno,
        });
    }
    Ok(seg)
}

/// Parses and validates a script document.
pub fn parse_script(text: &str) -> Result<GestureScript, ScriptError> {
    let mut message: Option<MessageId> = None;
    let mut description = None;
    let mut segments = Vec::new();
    let mut first_content_line = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokens(line);
        let Some(&(col, keyword)) = toks.first() else {
            continue;
        };
        first_content_line.get_or_insert(lineno);
        match keyword {
            "message" => {
                if message.is_some() {
                    return Err(syntax("duplicate `message` header", lineno, col));
                }
                let &(ncol, name) = toks.get(1).ok_or(ScriptError::MissingField {
                    field: "message",
                    line: lineno,
                })?;
                if toks.len() > 2 {
                    return Err(syntax("unexpected token after message name", lineno, toks[2].0));
                }
                let id = name.parse().map_err(|_| ScriptError::UnknownMessage {
                    name: name.to_string(),
                    line: lineno,
                    column: ncol,
                })?;
                message = Some(id);
            }
            "description" => {
                // Free text runs to end of line; `#` still starts a comment.
                let text = line.trim_start()["description".len()..].trim();
                description = Some(text.to_string());
            }
            "segment" => segments.push(parse_segment(&toks[1..], lineno)?),
            other => {
                return Err(syntax(format!("unknown directive `{other}`"), lineno, col));
            }
        }
    }

    let message = message.ok_or(ScriptError::MissingField {
        field: "message",
        line: first_content_line.unwrap_or(1),
    })?;
    if segments.is_empty() {
        return Err(ScriptError::EmptyScript);
    }
    Ok(GestureScript {
        message,
        segments,
        description,
    })
}

/// Writes a script back to its text form.
///
/// Every channel is written explicitly; floats use the shortest
/// representation that round-trips.
pub fn serialize_script(script: &GestureScript) -> String {
    let mut out = String::new();
    out.push_str(&format!("message {}\n", script.message.name()));
    if let Some(desc) = &script.description {
        // A `#` would start a comment on re-parse.
        let desc = desc.replace(['#', '\n', '\r'], " ");
        let desc = desc.trim();
        if !desc.is_empty() {
            out.push_str(&format!("description {desc}\n"));
        }
    }
    for s in &script.segments {
        out.push_str(&format!(
            "segment dur={:?} roll={:?} pitch={:?} yaw={:?} surge={:?} heave={:?}\n",
            s.duration, s.roll_pct, s.pitch_pct, s.yaw_pct, s.surge_pct, s.heave_pct
        ));
    }
    out
}

pub fn total_duration(script: &GestureScript) -> f64 {
    script.total_duration()
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("library is missing message {0}")]
    MissingMessage(MessageId),
    #[error("library defines message {0} more than once")]
    DuplicateMessage(MessageId),
    #[error("{path}: {source}")]
    Script {
        path: PathBuf,
        #[source]
        source: ScriptError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// All fifteen scripts keyed by message.
pub type Library = BTreeMap<MessageId, GestureScript>;

/// Loads every `.gest` file in `dir`; the library must cover each message exactly once.
pub fn load_library(dir: &Path) -> Result<Library, LibraryError> {
    let io = |source| LibraryError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "gest"))
        .collect();
    paths.sort();

    let mut lib = Library::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|source| LibraryError::Io {
            path: path.clone(),
            source,
        })?;
        let script =
            parse_script(&text).map_err(|source| LibraryError::Script { path, source })?;
        let id = script.message;
        if lib.insert(id, script).is_some() {
            return Err(LibraryError::DuplicateMessage(id));
        }
    }
    check_complete(&lib)?;
    Ok(lib)
}

fn check_complete(lib: &Library) -> Result<(), LibraryError> {
    match MessageId::ALL.iter().find(|m| !lib.contains_key(m)) {
        Some(&missing) => Err(LibraryError::MissingMessage(missing)),
        None => Ok(()),
    }
}

const BUNDLED: [(MessageId, &str); MessageId::COUNT] = [
    (MessageId::BatteryLow, include_str!("../library/battery_low.gest")),
    (MessageId::StartCommunication, include_str!("../library/start_communication.gest")),
    (MessageId::Ascend, include_str!("../library/ascend.gest")),
    (MessageId::Descend, include_str!("../library/descend.gest")),
    (MessageId::FollowMe, include_str!("../library/follow_me.gest")),
    (MessageId::Danger, include_str!("../library/danger.gest")),
    (MessageId::CollectData, include_str!("../library/collect_data.gest")),
    (MessageId::StartMapping, include_str!("../library/start_mapping.gest")),
    (MessageId::GoToLocation, include_str!("../library/go_to_location.gest")),
    (MessageId::UTurn, include_str!("../library/u_turn.gest")),
    (MessageId::Help, include_str!("../library/help.gest")),
    (MessageId::EmergencySurfacing, include_str!("../library/emergency_surfacing.gest")),
    (MessageId::Stop, include_str!("../library/stop.gest")),
    (MessageId::No, include_str!("../library/no.gest")),
    (MessageId::Yes, include_str!("../library/yes.gest")),
];

/// Source text of the bundled script for `id`.
pub fn bundled_source(id: MessageId) -> &'static str {
    BUNDLED[id.code()].1
}

/// The library compiled into the crate.
pub fn bundled_library() -> Library {
    BUNDLED
        .iter()
        .map(|&(id, src)| {
            let script = parse_script(src).expect("bundled script parses");
            debug_assert_eq!(script.message, id);
            (id, script)
        })
        .collect()
}

/// Writes the bundled scripts as `<dir>/<message_name>.gest`.
pub fn write_bundled_library(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (id, src) in BUNDLED {
        fs::write(dir.join(format!("{}.gest", id.file_stem())), src)?;
    }
    Ok(())
}

/// Path of the library directory shipped in the source tree.
pub fn source_library_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("library")
}
