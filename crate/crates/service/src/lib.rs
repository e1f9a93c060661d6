//! HTTP chat service over a trained model.
//!
//! ```text
//! POST /session             {knowledge, triples_inline?, config?} -> 201 {session_id}
//! POST /session/{id}/chat   {utterance}                          -> ChatResponse
//! GET  /trace/{trace_id}                                         -> [TraceRecord]
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use cntf_core::corpus::{select_knowledge, Dialogue, Speaker, Turn};
use cntf_core::decoder::TraceRecord;
use cntf_core::encoder::{KnowledgeStates, StateBank};
use cntf_core::model::{DecodeOptions, Model, TripleContext};
use cntf_core::text::{tokenize, truncate_head, truncate_tail};
use cntf_core::triples::{
    parse_triple_tsv, ConceptLexicon, CorefAnnotator, TripleBuilder, TripleConfig, TripleSource, TripleStore,
    RuleBasedAnnotator,
};

pub const DEFAULT_BEAM_WIDTH: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 40;
pub const DEFAULT_KNOWLEDGE_TOPK: usize = 2;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Per-session overrides of the decoding defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionOverrides {
    pub window: Option<usize>,
    pub beam_width: Option<usize>,
    pub max_len: Option<usize>,
    pub knowledge_topk: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub knowledge: Vec<String>,
    #[serde(default)]
    pub triples_inline: Option<String>,
    #[serde(default)]
    pub config: Option<SessionOverrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub response: String,
    pub trace_id: String,
    pub trace: Vec<TraceRecord>,
    /// Tokens indexed by each record's `alpha_d`.
    pub dialogue_tokens: Vec<String>,
    /// Tokens indexed by each record's `alpha_kb`.
    pub knowledge_tokens: Vec<String>,
}

#[derive(Debug, Clone)]
struct Exchange {
    utterance: String,
    response: String,
    trace_id: String,
}

struct Session {
    knowledge: Vec<Vec<String>>,
    triples: TripleContext,
    bank: StateBank,
    kb: KnowledgeStates,
    previous_reply: Vec<String>,
    transcript: Vec<Exchange>,
    options: DecodeOptions,
    topk: usize,
    rng: ChaCha8Rng,
}

impl Session {
    fn chat(&mut self, model: &Model, utterance: &str, words: Vec<String>) -> ApiResult<ChatResponse> {
        let mut input = std::mem::take(&mut self.previous_reply);
        input.extend(words.iter().cloned());
        let input = truncate_tail(&input, model.config.max_dialogue_tokens);
        let selected: Vec<String> = select_knowledge(&words, &self.knowledge, self.topk).concat();
        let selected = truncate_head(&selected, model.config.max_knowledge_tokens);

        let reply = model
            .respond(&mut self.bank, &mut self.kb, &input, &selected, &self.triples, self.options)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let trace_id = uuid_from(&mut self.rng);
        self.previous_reply = tokenize(&reply.text);
        self.transcript.push(Exchange {
            utterance: utterance.to_string(),
            response: reply.text.clone(),
            trace_id: trace_id.clone(),
        });
        Ok(ChatResponse {
            response: reply.text,
            trace_id,
            trace: reply.trace,
            dialogue_tokens: self.bank.tokens(),
            knowledge_tokens: self.kb.tokens.clone(),
        })
    }
}

fn uuid_from(rng: &mut impl RngCore) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

struct Inner {
    model: Option<Arc<Model>>,
    builder: Option<TripleBuilder>,
    rng: Mutex<ChaCha8Rng>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    traces: RwLock<HashMap<String, Arc<Vec<TraceRecord>>>>,
}

/// Shared server state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// `lexicon` feeds commonsense triples into new sessions; named-entity
    /// triples come from the rule-based annotator either way.
    pub fn new(model: Option<Model>, lexicon: Option<&ConceptLexicon>, seed: u64) -> Self {
        let builder = model.as_ref().map(|m| {
            let empty = ConceptLexicon::default();
            TripleBuilder::new(lexicon.unwrap_or(&empty), &m.vocab, TripleConfig {
                cap: m.config.triple_cap,
                ..TripleConfig::default()
            })
        });
        AppState {
            inner: Arc::new(Inner {
                model: model.map(Arc::new),
                builder,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                sessions: Mutex::new(HashMap::new()),
                traces: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn model(&self) -> Option<&Model> {
        self.inner.model.as_deref()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session table").len()
    }

    /// Utterances, replies and trace ids of a session so far.
    pub fn transcript(&self, session_id: &str) -> Option<Vec<(String, String, String)>> {
        let session = self.inner.sessions.lock().expect("session table").get(session_id)?.clone();
        let s = session.try_lock().ok()?;
        Some(
            s.transcript
                .iter()
                .map(|e| (e.utterance.clone(), e.response.clone(), e.trace_id.clone()))
                .collect(),
        )
    }

    fn require_model(&self) -> ApiResult<Arc<Model>> {
        self.inner
            .model
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))
    }

    fn create_session(&self, req: CreateSession) -> ApiResult<String> {
        let model = self.require_model()?;
        let overrides = req.config.unwrap_or_default();
        let options = DecodeOptions {
            beam_width: overrides.beam_width.unwrap_or(DEFAULT_BEAM_WIDTH),
            max_len: overrides.max_len.unwrap_or(DEFAULT_MAX_LEN),
            window: overrides.window.unwrap_or(model.config.window),
        };
        let topk = overrides.knowledge_topk.unwrap_or(DEFAULT_KNOWLEDGE_TOPK);
        for (name, v) in [
            ("window", options.window),
            ("beam_width", options.beam_width),
            ("max_len", options.max_len),
            ("knowledge_topk", topk),
        ] {
            if v == 0 {
                return Err(ApiError::bad_request(format!("config.{name} must be positive")));
            }
        }

        let sentences: Vec<String> = req.knowledge.into_iter().filter(|s| !tokenize(s).is_empty()).collect();
        let inline = req.triples_inline.unwrap_or_default();
        if sentences.is_empty() && inline.trim().is_empty() {
            return Err(ApiError::bad_request("knowledge and triples_inline are both empty"));
        }
        let inline = parse_triple_tsv(&inline, TripleSource::Conceptnet)
            .map_err(|(line, msg)| ApiError::bad_request(format!("triples_inline line {line}: {msg}")))?;

        let document = Dialogue {
            dialogue_id: String::new(),
            topic: String::new(),
            turns: sentences.iter().map(|s| Turn::new(Speaker::Agent1, s.clone(), Vec::new())).collect(),
        };
        let builder = self.inner.builder.as_ref().expect("builder exists with a model");
        let annotator = RuleBasedAnnotator;
        let coref = annotator
            .coreference(&document)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let built = builder
            .collect(&document, &coref, &annotator)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let store = TripleStore::from_triples(inline)
            .merge(&built)
            .capped(model.config.triple_cap);

        let (id, rng) = {
            let mut rng = self.inner.rng.lock().expect("id generator");
            (uuid_from(&mut *rng), ChaCha8Rng::seed_from_u64(rng.random()))
        };
        let hidden = model.hidden();
        let session = Session {
            knowledge: sentences.iter().map(|s| tokenize(s)).collect(),
            triples: model.triple_context(&store),
            bank: StateBank::empty(hidden),
            kb: KnowledgeStates::empty(hidden),
            previous_reply: Vec::new(),
            transcript: Vec::new(),
            options,
            topk,
            rng,
        };
        tracing::info!(session = %id, triples = store.len(), sentences = sentences.len(), "session created");
        self.inner
            .sessions
            .lock()
            .expect("session table")
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(id)
    }
}

async fn create_session(
    State(state): State<AppState>,
    body: std::result::Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let Json(req) = body?;
    let session_id = state.create_session(req)?;
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })))
}

async fn chat(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: std::result::Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<Json<ChatResponse>> {
    let session = state
        .inner
        .sessions
        .lock()
        .expect("session table")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
    let Json(req) = body?;
    let words = tokenize(&req.utterance);
    if words.is_empty() {
        return Err(ApiError::bad_request("utterance is empty"));
    }
    let model = state.require_model()?;
    let mut guard = session.lock_owned().await;
    let response = tokio::task::spawn_blocking(move || guard.chat(&model, &req.utterance, words))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    tracing::info!(session = %id, trace = %response.trace_id, tokens = response.trace.len(), "reply");
    state
        .inner
        .traces
        .write()
        .expect("trace archive")
        .insert(response.trace_id.clone(), Arc::new(response.trace.clone()));
    Ok(Json(response))
}

async fn trace(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<TraceRecord>>> {
    let records = state
        .inner
        .traces
        .read()
        .expect("trace archive")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown trace {id}")))?;
    Ok(Json(records.as_ref().clone()))
}

/// Routes for the three endpoints, plus static files from `ui` if given.
pub fn router(state: AppState, ui: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/chat", post(chat))
        .route("/trace/{id}", get(trace))
        .with_state(state);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: AppState, addr: SocketAddr, ui: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state, ui)).await
}
