use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cntf_core::config::ModelConfig;
use cntf_core::corpus::Vocabulary;
use cntf_core::decoder::TraceRecord;
use cntf_core::model::{build_entity_vocab, Model};
use cntf_core::text::tokenize;
use cntf_core::triples::{Triple, TripleSource, TripleStore};
use cntf_service::{router, AppState, ChatResponse};

const DOC: [&str; 3] = [
    "The Last of the Mohicans is a film directed by Micheal Mann.",
    "Morgan Creek Pictures produced the movie in 1992.",
    "The score was written by Trevor Jones.",
];

fn model() -> Model {
    let text = format!("{} i love that movie who made it what about the music", DOC.join(" "));
    let vocab = Vocabulary::from_tokens(tokenize(&text));
    let store = TripleStore::from_triples([
        Triple::new("Micheal Mann", "RelatedTo", "The Last of the Mohicans", TripleSource::EntityPair),
        Triple::new("movie", "RelatedTo", "film", TripleSource::Conceptnet),
    ]);
    let entities = build_entity_vocab([&store], 50);
    let config = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        encoder_layers: 1,
        encoder_heads: 2,
        vocab_size: vocab.len(),
        triple_vocab_size: entities.len(),
        ..ModelConfig::default()
    };
    Model::new(config, vocab, entities, 21).unwrap()
}

fn app(seed: u64) -> (Router, AppState) {
    let state = AppState::new(Some(model()), None, seed);
    (router(state.clone(), None), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn session(app: &Router, config: Value) -> String {
    let (status, body) = call(app, "POST", "/session", Some(json!({"knowledge": DOC, "config": config}))).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    parse(&body)["session_id"].as_str().unwrap().to_string()
}

async fn chat(app: &Router, id: &str, utterance: &str) -> (ChatResponse, Vec<u8>) {
    let (status, body) = call(app, "POST", &format!("/session/{id}/chat"), Some(json!({ "utterance": utterance }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    (serde_json::from_slice(&body).unwrap(), body)
}

#[tokio::test]
async fn create_returns_a_uuid() {
    let (app, state) = app(1);
    let id = session(&app, json!({})).await;
    assert!(uuid::Uuid::parse_str(&id).is_ok());
    assert_eq!(state.session_count(), 1);
    let other = session(&app, json!({})).await;
    assert_ne!(id, other);
}

#[tokio::test]
async fn create_error_contract() {
    let (app, _) = app(1);
    let (status, body) = call(&app, "POST", "/session", Some(json!({"knowledge": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(parse(&body)["error"].as_str().unwrap().contains("empty"));

    let (status, _) = call(&app, "POST", "/session", Some(json!({"knowledge": ["  ", ""], "triples_inline": ""}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let tsv = "movie\tRelatedTo\tfilm\nbroken line\n";
    let (status, body) = call(&app, "POST", "/session", Some(json!({"knowledge": [], "triples_inline": tsv}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(parse(&body)["error"].as_str().unwrap().contains("line 2"));

    let (status, _) = call(&app, "POST", "/session", Some(json!({"knowledge": DOC, "config": {"beam": 3}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/session", Some(json!({"knowledge": DOC, "config": {"window": 0}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(&app, "POST", "/session", Some(json!({"triples_inline": "movie\tRelatedTo\tfilm"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
}

#[tokio::test]
async fn no_model_is_503() {
    let app = router(AppState::new(None, None, 0), None);
    let (status, _) = call(&app, "POST", "/session", Some(json!({"knowledge": DOC}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn chat_error_contract() {
    let (app, _) = app(1);
    let (status, _) = call(&app, "POST", "/session/nope/chat", Some(json!({"utterance": "hi"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let id = session(&app, json!({})).await;
    let (status, _) = call(&app, "POST", &format!("/session/{id}/chat"), Some(json!({"utterance": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", &format!("/session/{id}/chat"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/trace/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn trace_matches_reply() {
    let (app, state) = app(2);
    let id = session(&app, json!({"max_len": 8})).await;
    let (reply, _) = chat(&app, &id, "i love that movie").await;
    assert!(!reply.trace.is_empty());
    let emitted: Vec<String> = reply.trace.iter().map(|r| r.token.clone()).collect();
    assert_eq!(cntf_core::text::detokenize(&emitted), reply.response);
    assert_eq!(reply.dialogue_tokens, tokenize("i love that movie"));
    for rec in &reply.trace {
        assert_eq!(rec.alpha_d.len(), reply.dialogue_tokens.len());
        assert_eq!(rec.alpha_kb.len(), reply.knowledge_tokens.len());
        assert!((rec.alpha_d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((rec.alpha_kb.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((rec.alpha_t.iter().map(|t| t.3).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let (status, body) = call(&app, "GET", &format!("/trace/{}", reply.trace_id), None).await;
    assert_eq!(status, StatusCode::OK);
    let records: Vec<TraceRecord> = serde_json::from_slice(&body).unwrap();
    assert_eq!(records, reply.trace);
    let again = serde_json::to_vec(&records).unwrap();
    assert_eq!(serde_json::from_slice::<Vec<TraceRecord>>(&again).unwrap(), records);

    let log = state.transcript(&id).unwrap();
    assert_eq!(log, vec![("i love that movie".to_string(), reply.response.clone(), reply.trace_id.clone())]);
}

#[tokio::test]
async fn knowledge_follows_the_latest_utterance() {
    let (app, _) = app(2);
    let id = session(&app, json!({"max_len": 4, "knowledge_topk": 1})).await;
    let (reply, _) = chat(&app, &id, "who wrote the score").await;
    assert_eq!(reply.knowledge_tokens, tokenize(DOC[2]));
    let (reply, _) = chat(&app, &id, "which company produced it").await;
    assert_eq!(reply.knowledge_tokens, tokenize(DOC[1]));
}

#[tokio::test]
async fn window_one_keeps_only_the_current_turn() {
    let (app, _) = app(3);
    let id = session(&app, json!({"window": 1, "max_len": 6})).await;
    let (first, _) = chat(&app, &id, "i love that movie").await;
    let (second, _) = chat(&app, &id, "who made it").await;
    let mut expected = tokenize(&first.response);
    expected.extend(tokenize("who made it"));
    assert_eq!(second.dialogue_tokens, expected);
    for rec in &second.trace {
        assert_eq!(rec.alpha_d.len(), expected.len());
    }

    let id = session(&app, json!({"window": 2, "max_len": 6})).await;
    let (first, _) = chat(&app, &id, "i love that movie").await;
    let (second, _) = chat(&app, &id, "who made it").await;
    let mut expected = tokenize("i love that movie");
    expected.extend(tokenize(&first.response));
    expected.extend(tokenize("who made it"));
    assert_eq!(second.dialogue_tokens, expected);
}

const SCRIPT: [&str; 3] = ["i love that movie", "who made it", "what about the music"];

async fn replay(seed: u64) -> Vec<Vec<u8>> {
    let (app, _) = app(seed);
    let mut out = Vec::new();
    let (_, body) = call(&app, "POST", "/session", Some(json!({"knowledge": DOC, "config": {"max_len": 6}}))).await;
    let id = parse(&body)["session_id"].as_str().unwrap().to_string();
    out.push(body);
    for u in SCRIPT {
        let (reply, body) = chat(&app, &id, u).await;
        out.push(body);
        out.push(call(&app, "GET", &format!("/trace/{}", reply.trace_id), None).await.1);
    }
    out
}

#[tokio::test]
async fn fresh_server_replays_byte_identically() {
    assert_eq!(replay(9).await, replay(9).await);
    assert_ne!(replay(9).await[0], replay(10).await[0]);
}

#[tokio::test]
async fn interleaved_sessions_match_serial_runs() {
    let serial = {
        let (app, _) = app(5);
        let a = session(&app, json!({"max_len": 6})).await;
        let b = session(&app, json!({"max_len": 6, "window": 1})).await;
        let mut ra = Vec::new();
        let mut rb = Vec::new();
        for u in SCRIPT {
            ra.push(chat(&app, &a, u).await.1);
        }
        for u in SCRIPT.iter().rev() {
            rb.push(chat(&app, &b, u).await.1);
        }
        (ra, rb)
    };
    let interleaved = {
        let (app, _) = app(5);
        let a = session(&app, json!({"max_len": 6})).await;
        let b = session(&app, json!({"max_len": 6, "window": 1})).await;
        let mut ra = Vec::new();
        let mut rb = Vec::new();
        for (u, v) in SCRIPT.iter().zip(SCRIPT.iter().rev()) {
            let (x, y) = tokio::join!(chat(&app, &a, u), chat(&app, &b, v));
            ra.push(x.1);
            rb.push(y.1);
        }
        (ra, rb)
    };
    assert_eq!(serial, interleaved);
}

#[tokio::test]
async fn chatting_leaves_parameters_untouched() {
    let (app, state) = app(4);
    let snapshot = |s: &AppState| {
        let m = s.model().unwrap();
        m.store.ids().flat_map(|id| m.store.get(id).iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let before = snapshot(&state);
    let id = session(&app, json!({"max_len": 5})).await;
    for u in SCRIPT {
        chat(&app, &id, u).await;
    }
    assert_eq!(before, snapshot(&state));
}

#[tokio::test]
async fn serves_static_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>inspector</html>").unwrap();
    let state = AppState::new(Some(model()), None, 0);
    let app = router(state, Some(dir.path()));
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>inspector</html>");
    let (status, _) = call(&app, "POST", "/session", Some(json!({"knowledge": DOC}))).await;
    assert_eq!(status, StatusCode::CREATED);
}
