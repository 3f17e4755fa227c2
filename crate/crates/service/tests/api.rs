use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use espresso_core::numerics::{train_model, ProjectionConfig};
use espresso_core::retrieval::{query_response, QueryResponse};
use espresso_core::synthetic::{generate, SyntheticConfig};
use espresso_core::WordEmbeddingTable;
use espresso_service::{router, ErrorBody, Health, PerformanceSummary, PieceSummary, ServiceState};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn state() -> Arc<ServiceState> {
    let world = generate(&SyntheticConfig::default());
    // extend the vocabulary with a few descriptive words of known latent
    let mut entries: Vec<(String, Vec<f32>)> = world
        .words
        .iter()
        .map(|w| (w.clone(), world.table.get(w).unwrap().to_vec()))
        .collect();
    for (name, source) in [("shy", 0), ("magical", 1), ("deep", 2), ("delicate", 3)] {
        entries.push((name.to_string(), world.table.get(&world.words[source]).unwrap().to_vec()));
    }
    let table = WordEmbeddingTable::from_entries(world.table.dimension(), entries).unwrap();
    let model = train_model(&table, &world.pairs, &ProjectionConfig::default()).unwrap();
    Arc::new(ServiceState::new(world.catalog, model, table).unwrap())
}

async fn call(state: &Arc<ServiceState>, req: Request<Body>) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_query(body: &str) -> Request<Body> {
    Request::post("/query")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn health_reports_model_fingerprint() {
    let s = state();
    let (status, body, _) = call(&s, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_fingerprint, s.model.config_fingerprint);
    assert_eq!(h.version, env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn lists_pieces_and_performances() {
    let s = state();
    let (status, body, _) = call(&s, get("/pieces")).await;
    assert_eq!(status, StatusCode::OK);
    let pieces: Vec<PieceSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(pieces.len(), 6);
    assert!(pieces.iter().all(|p| p.performance_count == 5));

    let (status, body, _) = call(&s, get("/pieces/piece02/performances")).await;
    assert_eq!(status, StatusCode::OK);
    let perfs: Vec<PerformanceSummary> = serde_json::from_slice(&body).unwrap();
    assert_eq!(perfs.len(), 5);
    assert_eq!(perfs[0].performance_id, "piece02-perf1");
}

#[tokio::test]
async fn unknown_piece_is_404() {
    let s = state();
    let (status, body, _) = call(&s, get("/pieces/xyz/performances")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.code, "unknown_piece");
    assert_eq!(e.details["piece_id"], "xyz");

    let (status, body, _) = call(&s, post_query(r#"{"piece_id":"xyz","text":"shy"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().code, "unknown_piece");
}

#[tokio::test]
async fn query_ranks_all_performances() {
    let s = state();
    let (status, body, _) = call(&s, post_query(r#"{"piece_id":"piece01","text":"shy magical deep delicate"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.results.len(), 5);
    assert!(r.results.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(r.results.iter().map(|x| x.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    assert!(r.oov_tokens.is_empty());
}

#[tokio::test]
async fn oov_words_become_warnings() {
    let s = state();
    let (status, body, _) = call(&s, post_query(r#"{"piece_id":"piece01","text":"shy qwerty"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let r: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.oov_tokens, ["qwerty"]);
    assert_eq!(r.warnings.len(), 1);
}

#[tokio::test]
async fn all_oov_is_400() {
    let s = state();
    let (status, body, _) = call(&s, post_query(r#"{"piece_id":"piece01","text":"zzzz"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.code, "unencodable_query");
    assert_eq!(e.details["oov_tokens"], serde_json::json!(["zzzz"]));
}

#[tokio::test]
async fn malformed_bodies_are_422() {
    let s = state();
    for body in [r#"{"text":"shy"}"#, "not json", r#"{"piece_id":3,"text":"shy"}"#, ""] {
        let (status, bytes, _) = call(&s, post_query(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(serde_json::from_slice::<ErrorBody>(&bytes).unwrap().code, "malformed_body");
    }
}

#[tokio::test]
async fn query_matches_library_call() {
    let s = state();
    let text = "shy magical deep delicate";
    let (_, body, _) = call(&s, post_query(&format!(r#"{{"piece_id":"piece03","text":"{text}"}}"#))).await;
    let direct = query_response(&s.index, &s.model, &s.table, "piece03", text).unwrap();
    assert_eq!(body, serde_json::to_vec(&direct).unwrap());
}

#[tokio::test]
async fn repeated_requests_are_identical() {
    let s = state();
    let req = r#"{"piece_id":"piece04","text":"deep delicate"}"#;
    let (_, a, _) = call(&s, post_query(req)).await;
    let (_, b, _) = call(&s, post_query(req)).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn cors_is_permissive() {
    let s = state();
    let req = Request::get("/pieces").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = call(&s, req).await;
    assert_eq!(headers.get("access-control-allow-origin").unwrap(), "*");
}

#[tokio::test]
async fn unknown_route_uses_error_envelope() {
    let s = state();
    let (status, body, _) = call(&s, get("/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["code"], "not_found");
}

#[test]
fn mismatched_table_is_rejected() {
    let world = generate(&SyntheticConfig::default());
    let model = train_model(&world.table, &world.pairs, &ProjectionConfig::default()).unwrap();
    let small = WordEmbeddingTable::from_entries(3, [("a".to_string(), vec![1.0f32, 0.0, 0.0])]).unwrap();
    assert!(ServiceState::new(world.catalog, model, small).is_err());
}

#[test]
fn loads_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let world = generate(&SyntheticConfig::default());
    espresso_core::synthetic::write_world(&world, dir.path()).unwrap();
    let model = train_model(&world.table, &world.pairs, &ProjectionConfig::default()).unwrap();
    espresso_core::numerics::save_model(&model, dir.path().join("model.json")).unwrap();
    let s = ServiceState::load(
        dir.path().join("catalog.json"),
        dir.path().join("model.json"),
        dir.path().join("embeddings.txt"),
    )
    .unwrap();
    assert_eq!(s.index.model_fingerprint(), model.config_fingerprint);
}
