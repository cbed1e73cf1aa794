mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tigmt::cli::serve::{router, AppState, TranslateResponse};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, bytes.to_vec())
}

fn ready_app() -> Router {
    router(AppState::ready(common::toy_translator(1), 2), None)
}

fn translate_body(text: &str) -> String {
    serde_json::json!({ "text": text }).to_string()
}

#[tokio::test]
async fn translate_returns_the_full_contract() {
    let app = ready_app();
    let (status, body) = call(&app, "POST", "/translate", &translate_body(&common::toy_sentence(1, 3))).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    for field in ["translation", "tokens", "model_id", "latency_ms"] {
        assert!(v.get(field).is_some(), "missing {field}");
    }
    let parsed: TranslateResponse = serde_json::from_value(v).unwrap();
    assert_eq!(parsed.model_id, common::toy_translator(1).model_id());
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = ready_app();
    for body in [translate_body(""), translate_body("   "), "{not json".into(), r#"{"txt":"x"}"#.into()] {
        let (status, body) = call(&app, "POST", "/translate", &body).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn over_length_input_is_413() {
    let app = ready_app();
    let (status, _) = call(&app, "POST", "/translate", &translate_body(&common::toy_sentence(1, 40))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn health_reports_loading_then_ready() {
    let state = AppState::loading(1);
    let app = router(state.clone(), None);
    let (status, body) = call(&app, "GET", "/health", "").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["status"], "loading");
    let (status, _) = call(&app, "POST", "/translate", &translate_body("ሰላም")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let translator = common::toy_translator(1);
    let id = translator.model_id().to_owned();
    state.set_translator(translator);
    let (status, body) = call(&app, "GET", "/health", "").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_id"], id.as_str());
}

#[tokio::test]
async fn concurrent_requests_match_serial_ones() {
    let app = ready_app();
    let texts: Vec<String> = (1..6).map(|n| common::toy_sentence(1, n)).collect();
    let mut serial = Vec::new();
    for t in &texts {
        let (_, body) = call(&app, "POST", "/translate", &translate_body(t)).await;
        serial.push(serde_json::from_slice::<TranslateResponse>(&body).unwrap().tokens);
    }
    let handles: Vec<_> = texts
        .iter()
        .map(|t| {
            let app = app.clone();
            let body = translate_body(t);
            tokio::spawn(async move { call(&app, "POST", "/translate", &body).await })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(serial) {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(serde_json::from_slice::<TranslateResponse>(&body).unwrap().tokens, expected);
    }
}

#[tokio::test]
async fn static_files_are_served_at_root() {
    let (status, body) = call(&ready_app(), "GET", "/", "").await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/translate"));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>custom page</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = router(AppState::ready(common::toy_translator(1), 1), Some(dir.path()));
    let (status, body) = call(&app, "GET", "/", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>custom page</p>");
    let (status, _) = call(&app, "GET", "/app.js", "").await;
    assert_eq!(status, StatusCode::OK);
}
