use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use powerhue::study::{self, ControlKind, ControlRule, Selection};
use powerhue::{ColorSpace, ImageBuffer, PowerModel};
use powerhue_cli::server::{router, AppState, Renderer};
use powerhue_cli::session::{plan_batch, SessionState, StudyManifest};

fn manifest() -> StudyManifest {
    StudyManifest::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest.json")).unwrap()
}

fn app(participant: &str, seed: u64, out: PathBuf) -> Router {
    let m = manifest();
    let model = PowerModel::load(&m.model).unwrap();
    let pairs = plan_batch(&m, 1, seed).unwrap();
    let state = AppState {
        session: Mutex::new(SessionState::new(participant.into(), 1, seed, pairs, out)),
        renderer: Renderer::new(m, model),
    };
    router(Arc::new(state), None)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: &str) -> (StatusCode, Value) {
    let req = Request::post("/api/score")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, bytes) = call(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn session(app: &Router) -> Value {
    let (status, bytes) = get(app, "/api/session").await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

fn decode(bytes: &[u8]) -> ImageBuffer {
    ImageBuffer::decode_png(bytes, Path::new("response.png")).unwrap()
}

/// Scores the way an attentive rater would: 5 when the two images are the
/// same, 1 when one is black, otherwise a score derived from the mean
/// absolute difference.
async fn rate(app: &Router, pair: &Value) -> i64 {
    let (_, left) = get(app, pair["left"].as_str().unwrap()).await;
    let (_, right) = get(app, pair["right"].as_str().unwrap()).await;
    let (l, r) = (decode(&left), decode(&right));
    let black = |img: &ImageBuffer| img.pixels().iter().all(|p| *p == [0.0; 3]);
    if l == r {
        return 5;
    }
    if black(&l) || black(&r) {
        return 1;
    }
    let diff: f64 = l
        .pixels()
        .iter()
        .zip(r.pixels())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
        .sum::<f64>()
        / (3 * l.len()) as f64;
    (5 - (diff * 40.0) as i64).clamp(1, 5)
}

async fn complete_session(app: &Router) {
    let desc = session(app).await;
    let pairs = desc["pairs"].as_array().unwrap().clone();
    for pair in &pairs {
        let score = rate(app, pair).await;
        let (status, body) = post(app, &json!({"pair": pair["index"], "score": score}).to_string()).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
}

#[tokio::test]
async fn scripted_sessions_feed_the_fitter() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratings.csv");
    for (who, seed) in [("alice", 11), ("bob", 12)] {
        let app = app(who, seed, csv.clone());
        let desc = session(&app).await;
        assert_eq!(desc["total"], 22);
        assert_eq!(desc["batch"], "b1");
        complete_session(&app).await;
        let desc = session(&app).await;
        assert_eq!(desc["scored"], 22);
        assert_eq!(desc["rows_written"], 22);
        assert_eq!(desc["complete"], true);
    }

    let records = study::read_ratings_csv(&csv).unwrap();
    assert_eq!(records.len(), 44);
    for who in ["alice", "bob"] {
        let mine: Vec<_> = records.iter().filter(|r| r.participant == who).collect();
        let controls = mine.iter().filter(|r| r.control != ControlKind::None).count();
        assert_eq!((controls, mine.len() - controls), (2, 20));
        for r in &mine {
            match r.control {
                ControlKind::Identical => assert_eq!(r.score, 5),
                ControlKind::Black => assert_eq!(r.score, 1),
                ControlKind::None => {}
            }
        }
    }
    let out = study::fit_lower_bound(&records, ControlRule::default(), &Selection::default()).unwrap();
    assert_eq!(out.filtered.kept.len(), 2);
    assert!(out.fit.k > 0.0);
}

#[tokio::test]
async fn rejected_scores_leave_the_file_alone() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ratings.csv");
    let app = app("carol", 3, csv.clone());

    let (status, _) = post(&app, r#"{"pair": 0, "score": 7}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, r#"{"pair": 0, "score": 0}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, r#"{"pair": 0, "score": "five"}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = post(&app, r#"{"pair": 99, "score": 3}"#).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(!csv.exists() || std::fs::read_to_string(&csv).unwrap().is_empty());

    let (status, body) = post(&app, r#"{"pair": 0, "score": 3}"#).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["rows_written"], 1);
    let before = std::fs::read(&csv).unwrap();
    let (status, _) = post(&app, r#"{"pair": 0, "score": 4}"#).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = post(&app, r#"{"pair": 1, "score": 9}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(std::fs::read(&csv).unwrap(), before);
    assert_eq!(study::read_ratings_csv(&csv).unwrap().len(), 1);
    assert_eq!(session(&app).await["scored"], 1);
}

#[tokio::test]
async fn pair_images_and_fallback_page() {
    let dir = tempfile::tempdir().unwrap();
    let app = app("dana", 5, dir.path().join("r.csv"));
    let desc = session(&app).await;
    let first = &desc["pairs"][0];
    let (status, bytes) = get(&app, first["left"].as_str().unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let img = decode(&bytes);
    assert_eq!(img.space(), ColorSpace::Srgb);
    assert_eq!((img.width(), img.height()), (48, 32));
    // Cached renders are byte-identical.
    assert_eq!(get(&app, first["left"].as_str().unwrap()).await.1, bytes);

    assert_eq!(get(&app, "/api/pair/0/sideways").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/pair/500/original").await.0, StatusCode::NOT_FOUND);
    let (status, page) = get(&app, "/").await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(page).unwrap().contains("/api/session"));
}

#[tokio::test]
async fn descriptor_hides_controls() {
    let dir = tempfile::tempdir().unwrap();
    let app = app("erin", 5, dir.path().join("r.csv"));
    let text = session(&app).await.to_string();
    assert!(!text.contains("identical") && !text.contains("black") && !text.contains("lambda"));
}
