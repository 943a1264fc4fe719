//! HTTP JSON API for the transcription study.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rrcomm::derive_seed;
use rrcomm::dsl::MessageId;
use rrcomm::study::{Study, StudyError, TranscriptionRecord};
use serde::Deserialize;
use serde_json::json;

use crate::error::CliError;

struct AppState {
    study: Mutex<Study>,
    seed: u64,
}

type Shared = Arc<AppState>;

struct ApiError(StudyError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            StudyError::UnknownSession(_) | StudyError::UnknownItem { .. } | StudyError::UnknownClip(_) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            StudyError::NoData => (StatusCode::NOT_FOUND, "no_data"),
            StudyError::DuplicateAnswer { .. } => (StatusCode::CONFLICT, "duplicate_answer"),
            StudyError::SessionExists(_) => (StatusCode::CONFLICT, "session_exists"),
            StudyError::ConfidenceOutOfRange(_) => (StatusCode::UNPROCESSABLE_ENTITY, "confidence_out_of_range"),
            StudyError::TeachingIncomplete { .. } => (StatusCode::FORBIDDEN, "teaching_incomplete"),
            StudyError::ContentMissing(_) => (StatusCode::SERVICE_UNAVAILABLE, "content_missing"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": kind, "message": self.0.to_string() }))).into_response()
    }
}

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        ApiError(e)
    }
}

#[derive(Deserialize, Default)]
struct SessionRequest {
    seed: Option<u64>,
}

async fn create_session(State(app): State<Shared>, body: Option<Json<SessionRequest>>) -> Result<impl IntoResponse, ApiError> {
    let mut study = app.study.lock().expect("study lock");
    let requested = body.and_then(|Json(b)| b.seed);
    let mut k = study.session_ids().count() as u64;
    loop {
        let seed = requested.unwrap_or_else(|| derive_seed(app.seed, &[k]));
        match study.create_session(seed) {
            Ok(s) => return Ok((StatusCode::CREATED, Json(s.view()))),
            Err(StudyError::SessionExists(_)) if requested.is_none() => k += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

async fn clip(State(app): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let clip = app.study.lock().expect("study lock").clip(&id)?;
    let frames: Vec<String> = (0..clip.t)
        .map(|i| {
            // Planar floats to interleaved RGB bytes.
            let f = clip.frame(i);
            let plane = clip.h * clip.w;
            let bytes: Vec<u8> = (0..plane)
                .flat_map(|p| (0..clip.c).map(move |c| (f[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8))
                .collect();
            STANDARD.encode(bytes)
        })
        .collect();
    Ok(Json(json!({
        "clip_id": id,
        "fps": clip.fps,
        "width": clip.w,
        "height": clip.h,
        "encoding": "rgb8-base64",
        "frames": frames,
    })))
}

#[derive(Deserialize)]
struct Submission {
    session_id: String,
    item: usize,
    choice: MessageId,
    confidence: i64,
}

async fn transcription(State(app): State<Shared>, Json(s): Json<Submission>) -> Result<impl IntoResponse, ApiError> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let ack = app.study.lock().expect("study lock").submit(TranscriptionRecord {
        session_id: s.session_id,
        item: s.item,
        choice: s.choice,
        confidence: s.confidence,
        timestamp,
    })?;
    Ok((StatusCode::CREATED, Json(ack)))
}

async fn report(State(app): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(app.study.lock().expect("study lock").report()?))
}

fn router(study: Study, seed: u64) -> Router {
    let state = Arc::new(AppState {
        study: Mutex::new(study),
        seed,
    });
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/clip/{id}", get(clip))
        .route("/api/transcription", post(transcription))
        .route("/api/report", get(report))
        .with_state(state)
}

/// Serves until the process is stopped. The bound address is printed on
/// stdout as a JSON line, so `--addr 127.0.0.1:0` works.
pub fn serve(study: Study, addr: &str, seed: u64) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("{}", json!({ "listening": listener.local_addr()?.to_string() }));
        axum::serve(listener, router(study, seed)).await?;
        Ok(())
    })
}
