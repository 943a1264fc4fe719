use std::fmt;
use std::io;

use rrcomm::clip::ClipError;
use rrcomm::dataset::DatasetError;
use rrcomm::dsl::{LibraryError, ScriptError};
use rrcomm::eval::EvalError;
use rrcomm::kinematics::KinematicsError;
use rrcomm::nn::NnError;
use rrcomm::render::RenderError;
use rrcomm::rrcommnet::ModelError;
use rrcomm::study::StudyError;
use serde_json::json;

pub const EXIT_USER: i32 = 2;
pub const EXIT_ENV: i32 = 3;

/// A failure with its exit code and a machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub line: Option<usize>,
}

impl CliError {
    pub fn user(kind: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_USER,
            kind,
            message: message.to_string(),
            line: None,
        }
    }

    pub fn env(kind: &'static str, message: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_ENV,
            kind,
            message: message.to_string(),
            line: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = json!({ "error": self.kind, "message": self.message, "exit_code": self.code });
        if let Some(line) = self.line {
            v["line"] = json!(line);
        }
        v.to_string()
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::env("io", e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::user("json", e)
    }
}

impl From<ScriptError> for CliError {
    fn from(e: ScriptError) -> Self {
        CliError {
            line: e.line(),
            ..CliError::user("script", &e)
        }
    }
}

impl From<LibraryError> for CliError {
    fn from(e: LibraryError) -> Self {
        match &e {
            LibraryError::Script { source, .. } => CliError {
                line: source.line(),
                ..CliError::user("script", &e)
            },
            LibraryError::Io { .. } => CliError::env("io", e),
            _ => CliError::user("library", e),
        }
    }
}

impl From<KinematicsError> for CliError {
    fn from(e: KinematicsError) -> Self {
        CliError::user("kinematics", e)
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::user("render", e)
    }
}

impl From<ClipError> for CliError {
    fn from(e: ClipError) -> Self {
        CliError::env("clip", e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => e.into(),
            DatasetError::Kinematics(e) => e.into(),
            DatasetError::Render(e) => e.into(),
            DatasetError::Locked(_) | DatasetError::Manifest(_) | DatasetError::Clip { .. } => {
                CliError::env("dataset", e)
            }
            _ => CliError::user("dataset", e),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(e) => e.into(),
            NnError::Checkpoint(_) => CliError::env("checkpoint", e),
            _ => CliError::user("model", e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(e) => e.into(),
            ModelError::Nn(e) => e.into(),
            ModelError::Dataset(e) => e.into(),
            _ => CliError::user("model", e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::Dataset(e) => e.into(),
            _ => CliError::user("eval", e),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Io(e) => e.into(),
            StudyError::Dataset(e) => e.into(),
            StudyError::CorruptLog { .. } | StudyError::ContentMissing(_) => CliError::env("study", e),
            _ => CliError::user("study", e),
        }
    }
}
