//! Synchronous inspection API over loaded models and one corpus.
//!
//! Everything is loaded at startup and never mutated; the only shared state
//! is a bounded cache of response bodies keyed by request hash. Bodies are
//! canonical JSON, so the cache cannot change what a client sees.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use graphoscope::canonical;
use graphoscope::corpus::{Corpus, Snippet, SnippetId};
use graphoscope::faithfulness::{aggregate_report, score_snippet, ScoreConfig};
use graphoscope::jobs::{load_corpus, scoring_map, Technique};
use graphoscope::model::Provenance;
use graphoscope::saliency::{overall_saliency_pair, Decomposition, PixelwiseConfig, SaliencyMap};
use graphoscope::training::grid_snippets;
use graphoscope::{EmbeddingNetwork, Error};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const CACHE_CAPACITY: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub id: String,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub downsampling: usize,
    pub parameter_count: usize,
    pub checksum: String,
    pub provenance: Provenance,
}

pub struct AppState {
    models: BTreeMap<String, EmbeddingNetwork>,
    corpus: Corpus,
    cache: Mutex<ResponseCache>,
}

#[derive(Default)]
struct ResponseCache {
    bodies: HashMap<Vec<u8>, Arc<String>>,
    order: VecDeque<Vec<u8>>,
}

impl ResponseCache {
    fn get(&self, key: &[u8]) -> Option<Arc<String>> {
        self.bodies.get(key).cloned()
    }

    fn insert(&mut self, key: Vec<u8>, body: Arc<String>) {
        if self.bodies.insert(key.clone(), body).is_none() {
            self.order.push_back(key);
            if self.order.len() > CACHE_CAPACITY {
                let old = self.order.pop_front().expect("non-empty");
                self.bodies.remove(&old);
            }
        }
    }
}

impl AppState {
    pub fn new(models: BTreeMap<String, EmbeddingNetwork>, corpus: Corpus) -> graphoscope::Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("the service needs at least one model".into()));
        }
        Ok(Self {
            models,
            corpus,
            cache: Mutex::new(ResponseCache::default()),
        })
    }

    /// Loads each model under its file stem, and the corpus directory.
    pub fn load(model_paths: &[PathBuf], corpus: &std::path::Path) -> graphoscope::Result<Self> {
        let mut models = BTreeMap::new();
        for p in model_paths {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Config(format!("model path {} has no file name", p.display())))?;
            if models.insert(id.clone(), EmbeddingNetwork::load(p)?).is_some() {
                return Err(Error::Config(format!("two models share the id {id:?}")));
            }
        }
        Self::new(models, load_corpus(corpus)?)
    }

    pub fn descriptors(&self) -> Vec<ModelDescriptor> {
        self.models
            .iter()
            .map(|(id, m)| ModelDescriptor {
                id: id.clone(),
                input_size: m.input_size(),
                embedding_dim: m.embedding_dim(),
                downsampling: m.downsampling(),
                parameter_count: m.parameter_count(),
                checksum: format!("{:016x}", m.checksum()),
                provenance: m.provenance().clone(),
            })
            .collect()
    }

    fn model(&self, id: &str) -> Result<&EmbeddingNetwork, ApiError> {
        self.models
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model {id:?}")))
    }

    fn snippet(&self, id: &str) -> Result<Snippet, ApiError> {
        let parsed: SnippetId = id.parse().map_err(|e: Error| ApiError::bad_request(e.to_string()))?;
        Ok(self.corpus.snippet(&parsed)?)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    diagnostic: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            diagnostic: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Precondition(_) | Error::Shape(_) | Error::Config(_) | Error::Data(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    status: u16,
    diagnostic_id: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.message,
            status: self.status.as_u16(),
            diagnostic_id: self.diagnostic.as_deref(),
        };
        let json = canonical::to_string(&body).unwrap_or_else(|_| "{}".into());
        (self.status, [(header::CONTENT_TYPE, "application/json")], json).into_response()
    }
}

fn json_response(body: Arc<String>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body.as_ref().clone()).into_response()
}

fn canonical_body<T: Serialize>(value: &T) -> Result<String, ApiError> {
    Ok(canonical::to_string(value)?)
}

/// Parses the body, answers from the cache or computes on the blocking pool.
async fn post_json<T, F>(state: Arc<AppState>, route: &'static str, body: Bytes, compute: F) -> Response
where
    T: DeserializeOwned + Send + 'static,
    F: FnOnce(&AppState, T) -> Result<String, ApiError> + Send + 'static,
{
    let request: T = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request(format!("malformed request: {e}")).into_response(),
    };
    let mut keyed = route.as_bytes().to_vec();
    keyed.push(0);
    keyed.extend_from_slice(&body);
    let key = canonical::checksum(&keyed);
    if let Some(hit) = state.cache.lock().expect("cache lock").get(&keyed) {
        return json_response(hit);
    }
    let worker = state.clone();
    let outcome = tokio::task::spawn_blocking(move || compute(&worker, request)).await;
    match outcome {
        Ok(Ok(body)) => {
            let body = Arc::new(body);
            state.cache.lock().expect("cache lock").insert(keyed, body.clone());
            json_response(body)
        }
        Ok(Err(mut e)) => {
            if e.status == StatusCode::INTERNAL_SERVER_ERROR {
                let id = format!("{key:016x}");
                eprintln!("[{id}] {route}: {}", e.message);
                e.diagnostic = Some(id);
            }
            e.into_response()
        }
        Err(join) => {
            let id = format!("{key:016x}");
            eprintln!("[{id}] {route}: worker failed: {join}");
            ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: "internal failure".into(),
                diagnostic: Some(id),
            }
            .into_response()
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/models", get(models))
        .route("/api/snippets", get(snippets))
        .route("/api/snippet/{file}", get(snippet_png))
        .route("/api/embed", post(embed))
        .route("/api/saliency/pixelwise", post(pixelwise))
        .route("/api/saliency/overall", post(overall))
        .route("/api/saliency/point", post(point))
        .route("/api/score", post(score))
        .with_state(state)
}

pub async fn serve(state: AppState, bind: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn models(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    Ok(json_response(Arc::new(canonical_body(&state.descriptors())?)))
}

#[derive(Deserialize)]
struct SnippetQuery {
    page: String,
    size: Option<usize>,
    min_ink: Option<f64>,
}

#[derive(Serialize)]
struct SnippetEntry {
    id: String,
    row: usize,
    col: usize,
    ink_fraction: f64,
}

#[derive(Serialize)]
struct SnippetIndex {
    page: String,
    writer_id: String,
    size: usize,
    snippets: Vec<SnippetEntry>,
}

/// Grid snippets of one page; the size defaults to the first model's input.
async fn snippets(
    State(state): State<Arc<AppState>>,
    query: Result<Query<SnippetQuery>, axum::extract::rejection::QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let page = state
        .corpus
        .page(&q.page)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown page {:?}", q.page)))?;
    let size = q
        .size
        .unwrap_or_else(|| state.models.values().next().expect("at least one model").input_size());
    let min_ink = q.min_ink.unwrap_or(0.0);
    let grid = grid_snippets(&state.corpus, std::slice::from_ref(&page.writer_id), size, min_ink)?;
    let index = SnippetIndex {
        page: page.page_id.clone(),
        writer_id: page.writer_id.clone(),
        size,
        snippets: grid
            .iter()
            .filter(|s| s.page_id == page.page_id)
            .map(|s| SnippetEntry {
                id: s.id().to_string(),
                row: s.origin.0,
                col: s.origin.1,
                ink_fraction: s.ink_fraction,
            })
            .collect(),
    };
    Ok(json_response(Arc::new(canonical_body(&index)?)))
}

async fn snippet_png(State(state): State<Arc<AppState>>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no resource {file:?}")))?;
    let snippet = state.snippet(id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], snippet.png_bytes()?).into_response())
}

#[derive(Deserialize)]
struct EmbedRequest {
    model: String,
    snippet: String,
}

#[derive(Serialize)]
struct EmbedResponse {
    model: String,
    snippet: String,
    embedding: Vec<f32>,
    norm: f64,
}

async fn embed(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    post_json(state, "embed", body, |s, r: EmbedRequest| {
        let model = s.model(&r.model)?;
        let e = model.embed(&s.snippet(&r.snippet)?)?;
        let norm = e.data().iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        canonical_body(&EmbedResponse {
            model: r.model,
            snippet: r.snippet,
            embedding: e.data().to_vec(),
            norm,
        })
    })
    .await
}

/// A map as JSON: its 16-bit PNG (base64) plus the sidecar metadata.
#[derive(Serialize)]
pub struct MapPayload {
    pub height: usize,
    pub width: usize,
    pub png: String,
    pub metadata: serde_json::Value,
}

impl MapPayload {
    fn of(map: &SaliencyMap) -> Result<Self, ApiError> {
        Ok(Self {
            height: map.height,
            width: map.width,
            png: STANDARD.encode(map.png_bytes()?),
            metadata: serde_json::to_value(&map.metadata).map_err(Error::from)?,
        })
    }
}

#[derive(Deserialize)]
struct PixelwiseRequest {
    model: String,
    snippet: String,
    n: Option<usize>,
    p: Option<f64>,
    seed: Option<u64>,
    signed: Option<bool>,
}

#[derive(Serialize)]
struct PixelwiseResponse {
    model: String,
    map: MapPayload,
}

async fn pixelwise(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    post_json(state, "saliency/pixelwise", body, |s, r: PixelwiseRequest| {
        let model = s.model(&r.model)?;
        let snippet = s.snippet(&r.snippet)?;
        let d = PixelwiseConfig::default();
        let config = PixelwiseConfig {
            n: r.n.unwrap_or(d.n),
            mask_probability: r.p.unwrap_or(d.mask_probability),
            seed: r.seed.unwrap_or(d.seed),
            signed: r.signed.unwrap_or(d.signed),
        };
        let map = graphoscope::saliency::pixelwise_saliency(model, &snippet, &config)?;
        canonical_body(&PixelwiseResponse {
            model: r.model,
            map: MapPayload::of(&map)?,
        })
    })
    .await
}

#[derive(Deserialize)]
struct PairRequest {
    model: String,
    q: String,
    r: String,
}

#[derive(Serialize)]
struct OverallResponse {
    model: String,
    query: MapPayload,
    reference: MapPayload,
    similarity: f64,
}

async fn overall(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    post_json(state, "saliency/overall", body, |s, r: PairRequest| {
        let model = s.model(&r.model)?;
        let (mq, mr, sim) = overall_saliency_pair(model, &s.snippet(&r.q)?, &s.snippet(&r.r)?)?;
        canonical_body(&OverallResponse {
            model: r.model,
            query: MapPayload::of(&mq)?,
            reference: MapPayload::of(&mr)?,
            similarity: sim,
        })
    })
    .await
}

#[derive(Deserialize)]
struct PointRequest {
    model: String,
    q: String,
    r: String,
    row: usize,
    col: usize,
}

#[derive(Serialize)]
struct PointResponse {
    model: String,
    point: (usize, usize),
    coarse_cell: (usize, usize),
    similarity: f64,
    map: MapPayload,
}

async fn point(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    post_json(state, "saliency/point", body, |s, r: PointRequest| {
        let model = s.model(&r.model)?;
        let d = Decomposition::new(model, &s.snippet(&r.q)?, &s.snippet(&r.r)?)?;
        let cell = d.cell_of(r.row, r.col)?;
        let map = d.point_map(r.row, r.col)?;
        canonical_body(&PointResponse {
            model: r.model,
            point: (r.row, r.col),
            coarse_cell: cell,
            similarity: d.similarity(),
            map: MapPayload::of(&map)?,
        })
    })
    .await
}

#[derive(Deserialize)]
struct ScoreRequest {
    model: String,
    snippet: String,
    technique: Option<Technique>,
    steps: Option<usize>,
    /// Number of random orderings averaged.
    seeds: Option<usize>,
    random_seed: Option<u64>,
    map_seed: Option<u64>,
}

async fn score(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    post_json(state, "score", body, |s, r: ScoreRequest| {
        let model = s.model(&r.model)?;
        let snippet = s.snippet(&r.snippet)?;
        let d = ScoreConfig::default();
        let config = ScoreConfig {
            steps: r.steps.unwrap_or(d.steps),
            random_seed: r.random_seed.unwrap_or(d.random_seed),
            random_repeats: r.seeds.unwrap_or(d.random_repeats),
            clamp_negative: true,
        };
        config.validate()?;
        let technique = r.technique.unwrap_or(Technique::Pixelwise);
        if technique == Technique::Point {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "point-specific maps are not scored; use pixelwise, overall or random",
            ));
        }
        let pixelwise = PixelwiseConfig {
            seed: r.map_seed.unwrap_or(0),
            ..PixelwiseConfig::default()
        };
        let id = snippet.id().to_string();
        if !snippet.pixels.data().contains(&0.0) {
            return Err(Error::Precondition(format!("snippet {id} has no ink pixels")).into());
        }
        let map = scoring_map(model, &snippet, technique, &pixelwise, pixelwise.seed)?;
        let scored = score_snippet(model, &id, &snippet.pixels, &map.values, &config)?;
        let report = aggregate_report(
            vec![scored],
            Vec::new(),
            graphoscope::faithfulness::ReportConfig {
                steps: config.steps,
                random_seed: config.random_seed,
                random_repeats: config.random_repeats,
                clamp_negative: config.clamp_negative,
                technique: technique.name().into(),
                model_id: format!("{:016x}", model.checksum()),
            },
        )?;
        canonical_body(&report)
    })
    .await
}
