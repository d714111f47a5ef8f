//! Local HTTP API behind the rating harness.
//!
//! `GET /api/session` describes the batch, `GET /api/pair/{i}/original` and
//! `/transformed` return PNG bytes, `POST /api/score` records one score. All
//! score writes go through the session mutex, so the ratings file has a
//! single writer; image rendering runs on the blocking pool and is cached.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use powerhue::study::ControlKind;
use powerhue::transform::PreparedTransform;
use powerhue::{ColorSpace, DistanceMetric, ImageBuffer, PowerModel};

use crate::session::{Pair, ScoreError, SessionState, StudyManifest, ADVISORY_SECONDS, SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Original,
    Transformed,
}

/// Renders and caches the images of a session's pairs.
pub struct Renderer {
    manifest: StudyManifest,
    model: PowerModel,
    prepared: Mutex<HashMap<(DistanceMetric, ColorSpace), Arc<PreparedTransform>>>,
    cache: Mutex<HashMap<(usize, Side), Arc<Vec<u8>>>>,
}

impl Renderer {
    pub fn new(manifest: StudyManifest, model: PowerModel) -> Self {
        Renderer {
            manifest,
            model,
            prepared: Mutex::default(),
            cache: Mutex::default(),
        }
    }

    fn original(&self, pair: &Pair) -> anyhow::Result<ImageBuffer> {
        let id = &pair.stimulus.image;
        let path = self
            .manifest
            .image_path(id)
            .with_context(|| format!("image `{id}` is not in the manifest"))?;
        Ok(ImageBuffer::read_png(path)?)
    }

    fn prepared(&self, metric: DistanceMetric, space: ColorSpace) -> anyhow::Result<Arc<PreparedTransform>> {
        if let Some(p) = self.prepared.lock().unwrap().get(&(metric, space)) {
            return Ok(p.clone());
        }
        let p = Arc::new(PreparedTransform::new(metric, space, &self.model)?);
        self.prepared.lock().unwrap().insert((metric, space), p.clone());
        Ok(p)
    }

    pub fn render(&self, index: usize, pair: &Pair, side: Side) -> anyhow::Result<Arc<Vec<u8>>> {
        if let Some(bytes) = self.cache.lock().unwrap().get(&(index, side)) {
            return Ok(bytes.clone());
        }
        let original = self.original(pair)?;
        let img = match (side, pair.control) {
            (Side::Original, _) | (Side::Transformed, ControlKind::Identical) => original,
            (Side::Transformed, ControlKind::Black) => {
                ImageBuffer::uniform(original.width(), original.height(), ColorSpace::Srgb, [0.0; 3])
            }
            (Side::Transformed, ControlKind::None) => {
                let s = &pair.stimulus;
                self.prepared(s.setting.metric, s.setting.space)?
                    .run(&original, s.lambda_norm)?
                    .output
            }
        };
        let bytes = Arc::new(img.encode_png()?);
        self.cache.lock().unwrap().insert((index, side), bytes.clone());
        Ok(bytes)
    }
}

pub struct AppState {
    pub session: Mutex<SessionState>,
    pub renderer: Renderer,
}

#[derive(Debug, Serialize)]
struct PairView {
    index: usize,
    left: String,
    right: String,
    scored: bool,
}

fn descriptor(s: &SessionState) -> serde_json::Value {
    let pairs: Vec<PairView> = s
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (o, t) = (format!("/api/pair/{i}/original"), format!("/api/pair/{i}/transformed"));
            let (left, right) = if p.transformed_left { (t, o) } else { (o, t) };
            PairView {
                index: i,
                left,
                right,
                scored: s.scores[i].is_some(),
            }
        })
        .collect();
    json!({
        "participant": s.participant,
        "batch": s.batch(),
        "seed": s.seed,
        "total": s.pairs.len(),
        "scored": s.scored(),
        "rows_written": s.rows_written,
        "complete": s.complete(),
        "advisory_seconds": ADVISORY_SECONDS,
        "scale": SCALE.iter().map(|(v, l)| json!({"score": v, "label": l})).collect::<Vec<_>>(),
        "pairs": pairs,
    })
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn get_session(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(descriptor(&st.session.lock().unwrap()))
}

async fn get_pair(State(st): State<Arc<AppState>>, Path((index, which)): Path<(usize, String)>) -> Response {
    let side = match which.as_str() {
        "original" => Side::Original,
        "transformed" => Side::Transformed,
        _ => return error(StatusCode::NOT_FOUND, format!("unknown image `{which}`")),
    };
    let pair = match st.session.lock().unwrap().pairs.get(index) {
        Some(p) => p.clone(),
        None => return error(StatusCode::NOT_FOUND, ScoreError::NoSuchPair(index)),
    };
    let st2 = st.clone();
    match tokio::task::spawn_blocking(move || st2.renderer.render(index, &pair, side)).await {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "image/png")], bytes.to_vec()).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

#[derive(Debug, Deserialize)]
pub struct ScoreBody {
    pub pair: usize,
    pub score: i64,
}

async fn post_score(State(st): State<Arc<AppState>>, body: Result<Json<ScoreBody>, JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let mut s = st.session.lock().unwrap();
    match s.submit(body.pair, body.score) {
        Ok(Ok(())) => Json(json!({
            "accepted": true,
            "pair": body.pair,
            "scored": s.scored(),
            "total": s.pairs.len(),
            "rows_written": s.rows_written,
            "complete": s.complete(),
        }))
        .into_response(),
        Ok(Err(e @ ScoreError::OutOfRange(_))) => error(StatusCode::BAD_REQUEST, e),
        Ok(Err(e @ ScoreError::NoSuchPair(_))) => error(StatusCode::NOT_FOUND, e),
        Ok(Err(e @ ScoreError::Duplicate(_))) => error(StatusCode::CONFLICT, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")),
    }
}

const FALLBACK_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>rating study</title></head>\n<body><p>No harness assets were configured. Start the server with <code>--assets DIR</code> to serve the rating UI.</p>\n<p>API: <code>GET /api/session</code>, <code>GET /api/pair/{i}/original</code>, <code>GET /api/pair/{i}/transformed</code>, <code>POST /api/score</code>.</p></body></html>\n";

pub fn router(state: Arc<AppState>, assets: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/pair/{index}/{which}", get(get_pair))
        .route("/api/score", post(post_score))
        .with_state(state);
    match assets {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(FALLBACK_PAGE) })),
    }
}
