//! HTTP service for the interactive loop: tokenize a prompt against a
//! store, then re-rank the store as token weights change.
//!
//! Endpoints:
//! - `POST /sessions` `{prompt, store_id}` → 201 with tokens and the all-ones ranking
//! - `POST /sessions/{id}/weights` `{weights: {position: w}, base_revision?}` → new ranking
//! - `GET /sessions/{id}`, `GET /stores`, `GET /health`
//!
//! Anything else falls through to the static asset directory, if one is set.

pub mod api;
mod error;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use sha2::{Digest, Sha256};
use stori_core::encoder::{EncoderConfig, EncoderModel};
use stori_core::metrics::{CategoryCurve, RankedRetrieval};
use stori_core::store::{self, AttributeTable, CategoryPartition, EmbeddingStore};
use stori_core::sweep::{retrieve, Retrieval};
use stori_core::tokenizer::{tokenize, TokenSequence, TokenWeights, Vocabulary};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

pub use error::ApiError;

use api::*;

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_CURVE_POINTS: usize = 200;

/// A loaded store and the partition its AUC snapshots use.
#[derive(Debug)]
pub struct StoreHandle {
    pub id: String,
    pub store: EmbeddingStore,
    pub table: AttributeTable,
    pub partition: Option<CategoryPartition>,
}

impl StoreHandle {
    /// Partition by `attributes`; with none, rankings carry no curves.
    pub fn new(
        id: impl Into<String>,
        store: EmbeddingStore,
        table: AttributeTable,
        attributes: &[String],
    ) -> stori_core::Result<Self> {
        let partition = if attributes.is_empty() {
            None
        } else {
            Some(store::partition(&table, attributes, None, 0, true)?)
        };
        Ok(Self {
            id: id.into(),
            store,
            table,
            partition,
        })
    }

    pub fn load(
        id: impl Into<String>,
        embeddings: &Path,
        metadata: &Path,
        attributes: &[String],
        dim: Option<usize>,
    ) -> stori_core::Result<Self> {
        let (store, table, report) = store::ingest(embeddings, metadata, dim)?;
        if report.renormalized > 0 {
            log::info!(
                "{}: renormalized {} of {} rows (max deviation {:.2e})",
                embeddings.display(),
                report.renormalized,
                report.items,
                report.max_norm_deviation
            );
        }
        Self::new(id, store, table, attributes)
    }

    fn info(&self) -> StoreInfo {
        let (partition, categories) = match &self.partition {
            Some(p) => {
                let mut sizes = vec![0usize; p.num_categories()];
                for &c in p.categories() {
                    sizes[c] += 1;
                }
                let cats = p
                    .labels()
                    .iter()
                    .zip(sizes)
                    .map(|(label, size)| Category {
                        label: label.clone(),
                        size,
                    })
                    .collect();
                (p.attributes().to_vec(), cats)
            }
            None => (Vec::new(), Vec::new()),
        };
        StoreInfo {
            id: self.id.clone(),
            items: self.store.len(),
            dim: self.store.dim(),
            attributes: self.table.names().to_vec(),
            partition,
            categories,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub top_k: usize,
    /// Points per curve in responses; AUC always uses the full curve.
    pub curve_points: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            curve_points: DEFAULT_CURVE_POINTS,
            static_dir: None,
        }
    }
}

struct Session {
    id: String,
    store_id: String,
    seq: TokenSequence,
    weights: TokenWeights,
    revision: u64,
    digest: String,
}

/// Model, vocabulary and stores are shared read-only; each session is
/// behind its own lock so its encodes run one at a time.
pub struct AppState {
    model: EncoderModel<f32>,
    cfg: EncoderConfig,
    vocab: Vocabulary,
    stores: BTreeMap<String, Arc<StoreHandle>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(
        model: EncoderModel<f32>,
        cfg: EncoderConfig,
        vocab: Vocabulary,
        stores: Vec<StoreHandle>,
        config: ServiceConfig,
    ) -> stori_core::Result<Self> {
        cfg.validate()?;
        model.check_shapes(&cfg)?;
        let mut map = BTreeMap::new();
        for s in stores {
            if s.store.dim() != cfg.projection_dim {
                return Err(stori_core::Error::DimensionMismatch {
                    expected: cfg.projection_dim,
                    actual: s.store.dim(),
                });
            }
            if map.contains_key(&s.id) {
                return Err(stori_core::Error::DuplicateId(s.id));
            }
            map.insert(s.id.clone(), Arc::new(s));
        }
        Ok(Self {
            model,
            cfg,
            vocab,
            stores: map,
            sessions: RwLock::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            config,
        })
    }

    fn store(&self, id: &str) -> Result<Arc<StoreHandle>, ApiError> {
        self.stores
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("store {id:?}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id:?}")))
    }

    fn retrieve(&self, seq: &TokenSequence, weights: &TokenWeights, store: &StoreHandle) -> stori_core::Result<Retrieval> {
        retrieve(seq, weights, &self.model, &self.cfg, &store.store, store.partition.as_ref())
    }
}

/// SHA-256 over the ranked item ids, newline separated.
pub fn ranking_digest(ranking: &RankedRetrieval, store: &EmbeddingStore) -> String {
    let mut h = Sha256::new();
    for &i in &ranking.order {
        h.update(store.id(i).as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

fn tokens(seq: &TokenSequence) -> Vec<Token> {
    seq.word_groups()
        .into_iter()
        .enumerate()
        .map(|(i, word)| {
            let src = &seq.source_spans()[i];
            Token {
                index: i + 1,
                text: seq.token_text(i + 1),
                word,
                start: src.start,
                end: src.end,
            }
        })
        .collect()
}

/// Evenly spaced `(n, fraction)` samples, always ending at the full length.
fn sample_curve(curve: &CategoryCurve, points: usize) -> Vec<(usize, f64)> {
    let n = curve.fraction.len();
    if n <= points || points == 0 {
        return curve.fraction.iter().enumerate().map(|(i, &f)| (i + 1, f)).collect();
    }
    let mut out: Vec<(usize, f64)> = (1..=points)
        .map(|j| {
            let at = (j * n).div_ceil(points);
            (at, curve.fraction[at - 1])
        })
        .collect();
    out.dedup_by_key(|p| p.0);
    out
}

fn snapshot(
    state: &AppState,
    session: &Session,
    store: &StoreHandle,
    r: &Retrieval,
    started: Instant,
) -> Snapshot {
    let ranking = r
        .ranking
        .top(state.config.top_k)
        .enumerate()
        .map(|(rank, (index, score))| RankedItem {
            rank: rank + 1,
            index,
            id: store.store.id(index).to_string(),
            score,
            thumbnail: store.store.thumbnail(index).map(str::to_string),
        })
        .collect();
    let curves = r
        .curves
        .iter()
        .map(|c| Curve {
            category: c.category,
            label: c.label.clone(),
            size: c.size,
            auc: c.auc,
            points: sample_curve(c, state.config.curve_points),
        })
        .collect();
    Snapshot {
        session_id: session.id.clone(),
        revision: session.revision,
        weights: session.weights.content().to_vec(),
        total: r.ranking.len(),
        ranking,
        curves,
        digest: session.digest.clone(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let started = Instant::now();
    let store = state.store(&req.store_id)?;
    let st = state.clone();
    let created = blocking(move || {
        let seq = tokenize(&req.prompt, &st.vocab)?;
        let weights = TokenWeights::neutral(seq.len());
        let r = st.retrieve(&seq, &weights, &store)?;
        let id = format!("s{:x}", st.next_session.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            id: id.clone(),
            store_id: store.id.clone(),
            digest: ranking_digest(&r.ranking, &store.store),
            seq,
            weights,
            revision: 0,
        };
        let body = SessionCreated {
            store_id: store.id.clone(),
            prompt: req.prompt,
            tokens: tokens(&session.seq),
            default_weights: session.weights.content().to_vec(),
            snapshot: snapshot(&st, &session, &store, &r, started),
        };
        st.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(body)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn update_weights(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<UpdateWeights>,
) -> Result<Json<Snapshot>, ApiError> {
    let started = Instant::now();
    let handle = state.session(&id)?;
    let mut session = handle.lock_owned().await;
    if let Some(given) = req.base_revision {
        if given < session.revision {
            return Err(ApiError::Stale {
                current: session.revision,
                given,
            });
        }
    }
    let mut weights = session.weights.clone();
    for (&pos, &w) in &req.weights {
        weights.set(pos, w)?;
    }
    let store = state.store(&session.store_id)?;
    let st = state.clone();
    let seq = session.seq.clone();
    let (r, weights, store) = blocking(move || {
        let r = st.retrieve(&seq, &weights, &store)?;
        Ok((r, weights, store))
    })
    .await?;
    session.weights = weights;
    session.revision += 1;
    session.digest = ranking_digest(&r.ranking, &store.store);
    Ok(Json(snapshot(&state, &session, &store, &r, started)))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionInfo>, ApiError> {
    let handle = state.session(&id)?;
    let s = handle.lock().await;
    Ok(Json(SessionInfo {
        session_id: s.id.clone(),
        store_id: s.store_id.clone(),
        prompt: s.seq.source().to_string(),
        revision: s.revision,
        tokens: tokens(&s.seq),
        weights: s.weights.content().to_vec(),
        digest: s.digest.clone(),
    }))
}

async fn list_stores(State(state): State<Arc<AppState>>) -> Json<StoreList> {
    Json(StoreList {
        stores: state.stores.values().map(|s| s.info()).collect(),
    })
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/weights", post(update_weights))
        .route("/stores", get(list_stores))
        .route("/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Bind `addr` and serve until the process ends.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
