//! HTTP session service. Each session encodes its image once; prompt rounds
//! run only the fusion and decoder stages over the cached embedding.

pub mod cache;
pub mod config;
pub mod error;
pub mod scale;

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use promptseg::eval::iou;
use promptseg::model::{ImageEmbedding, Model};
use promptseg::preprocess::{decode_image, model_input};
use promptseg::tensor::Tensor;
use promptseg::{Mask, PromptSet, Rle};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::EmbeddingCache;
pub use config::ServiceConfig;
pub use error::ServiceError;
pub use scale::{scale_coord, Scaler};

/// Upload limit for images and masks.
pub const MAX_BODY_BYTES: usize = 32 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub encode_ms: f64,
    pub height: usize,
    pub width: usize,
    pub model_size: usize,
    pub image_hash: String,
}

/// Masks are at model resolution (`model_size × model_size`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask: Rle,
    pub iou: Option<f64>,
    pub decode_ms: f64,
    /// The prompts as submitted, in original-image coordinates.
    pub prompts: PromptSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    /// SHA-256 of the checkpoint file, or of the weights when none was read.
    pub fingerprint: String,
    pub config_fingerprint: String,
    pub sessions: usize,
    pub cached_embeddings: usize,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub original: (usize, usize),
    pub image_hash: String,
    /// Normalized model input, kept so an evicted embedding can be rebuilt.
    input: Arc<Tensor<f32>>,
    pub prompts: PromptSet,
    pub last: Option<MaskResponse>,
    pub gt: Option<Mask>,
    pub encode_ms: f64,
    pub created: SystemTime,
    pub accessed: SystemTime,
}

impl Session {
    pub fn last_mask(&self) -> Option<Mask> {
        self.last.as_ref().and_then(|r| r.mask.decode().ok())
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

struct Inner {
    model: Option<Arc<Model>>,
    fingerprint: String,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    cache: Mutex<EmbeddingCache>,
    reencodes: Mutex<u64>,
}

/// Shared server state. Cloning is cheap.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(model: Model, fingerprint: impl Into<String>, cache_bytes: usize) -> Self {
        Self::build(Some(Arc::new(model)), fingerprint.into(), cache_bytes)
    }

    /// Fingerprint is the SHA-256 of the checkpoint file.
    pub fn from_checkpoint(path: &Path, cache_bytes: usize) -> Result<Self, ServiceError> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let ckpt = promptseg::model::Checkpoint::from_bytes(&bytes)?;
        Ok(Self::new(ckpt.model, hex::encode(Sha256::digest(&bytes)), cache_bytes))
    }

    /// A server with no model; every model-backed route answers 503.
    pub fn unloaded(cache_bytes: usize) -> Self {
        Self::build(None, String::new(), cache_bytes)
    }

    fn build(model: Option<Arc<Model>>, fingerprint: String, cache_bytes: usize) -> Self {
        Self {
            inner: Arc::new(Inner {
                model,
                fingerprint,
                sessions: Mutex::new(HashMap::new()),
                cache: Mutex::new(EmbeddingCache::new(cache_bytes)),
                reencodes: Mutex::new(0),
            }),
        }
    }

    pub fn model(&self) -> Result<Arc<Model>, ServiceError> {
        self.inner.model.clone().ok_or(ServiceError::ModelUnavailable)
    }

    pub fn fingerprint(&self) -> &str {
        &self.inner.fingerprint
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    pub fn is_cached(&self, id: &str) -> bool {
        self.inner.cache.lock().unwrap().contains(id)
    }

    pub fn cache_stats(&self) -> (usize, usize, u64) {
        let c = self.inner.cache.lock().unwrap();
        (c.len(), c.used_bytes(), c.evictions())
    }

    /// Embeddings rebuilt after eviction.
    pub fn reencodes(&self) -> u64 {
        *self.inner.reencodes.lock().unwrap()
    }

    pub fn evict(&self, id: &str) -> bool {
        self.inner.cache.lock().unwrap().remove(id)
    }

    fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.inner.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ServiceError::unknown_session(id))
    }

    /// The cached embedding, or a fresh encode of the stored input.
    pub async fn embedding(&self, id: &str) -> Result<Arc<ImageEmbedding>, ServiceError> {
        let handle = self.session(id)?;
        let session = handle.lock().await;
        self.embedding_for(&session).await
    }

    async fn embedding_for(&self, s: &Session) -> Result<Arc<ImageEmbedding>, ServiceError> {
        if let Some(emb) = self.inner.cache.lock().unwrap().get(&s.id) {
            return Ok(emb);
        }
        let model = self.model()?;
        let input = s.input.clone();
        let emb = blocking(move || model.encode_image(&input)).await?;
        let emb = Arc::new(emb);
        self.inner.cache.lock().unwrap().insert(&s.id, emb.clone());
        *self.inner.reencodes.lock().unwrap() += 1;
        Ok(emb)
    }

    pub async fn create_session(&self, image: Bytes) -> Result<CreatedSession, ServiceError> {
        let model = self.model()?;
        let size = model.config().input_size;
        let image_hash = hex::encode(Sha256::digest(&image));
        let (input, original, emb, encode_ms) = blocking(move || {
            let img = decode_image(&image)?;
            let original = (img.shape()[1], img.shape()[2]);
            let input = model_input(&img, size)?;
            let start = Instant::now();
            let emb = model.encode_image(&input)?;
            Ok((input, original, emb, start.elapsed().as_secs_f64() * 1e3))
        })
        .await?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let now = SystemTime::now();
        let session = Session {
            id: id.clone(),
            original,
            image_hash: image_hash.clone(),
            input: Arc::new(input),
            prompts: PromptSet::default(),
            last: None,
            gt: None,
            encode_ms,
            created: now,
            accessed: now,
        };
        self.inner.cache.lock().unwrap().insert(&id, Arc::new(emb));
        self.inner.sessions.lock().unwrap().insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        log::info!("session {id}: {}×{} encoded in {encode_ms:.1} ms", original.0, original.1);
        Ok(CreatedSession { id, encode_ms, height: original.0, width: original.1, model_size: size, image_hash })
    }

    /// With `feedback`, a set without a mask is seeded with the session's last
    /// mask.
    pub async fn submit_prompts(
        &self,
        id: &str,
        prompts: PromptSet,
        feedback: bool,
    ) -> Result<MaskResponse, ServiceError> {
        let model = self.model()?;
        let handle = self.session(id)?;
        let mut session = handle.lock().await;
        let size = model.config().input_size;
        let scaler = Scaler { original: session.original, model: (size, size) };
        let mut scaled = scaler.to_model(&prompts)?;
        if feedback && scaled.mask.is_none() {
            scaled.mask = session.last_mask();
        }
        let emb = self.embedding_for(&session).await?;
        let (mask, decode_ms) = blocking(move || {
            let start = Instant::now();
            let logits = model.predict(&emb, &scaled)?;
            Ok((logits.to_mask(), start.elapsed().as_secs_f64() * 1e3))
        })
        .await?;
        let score = session.gt.as_ref().map(|gt| iou(&mask, gt)).transpose()?;
        let response = MaskResponse { mask: mask.to_rle(), iou: score, decode_ms, prompts: prompts.clone() };
        session.prompts = prompts;
        session.last = Some(response.clone());
        session.accessed = SystemTime::now();
        Ok(response)
    }

    pub async fn get_mask(&self, id: &str) -> Result<MaskResponse, ServiceError> {
        let handle = self.session(id)?;
        let mut session = handle.lock().await;
        session.accessed = SystemTime::now();
        session.last.clone().ok_or_else(|| ServiceError::NotFound(format!("session {id} has no mask yet")))
    }

    /// Attaches a ground-truth mask (original or model resolution) for IoU
    /// reporting.
    pub async fn set_gt(&self, id: &str, png: Bytes) -> Result<(), ServiceError> {
        let model = self.model()?;
        let handle = self.session(id)?;
        let mut session = handle.lock().await;
        let size = model.config().input_size;
        let gt = Mask::decode_png(&png)?;
        let scaler = Scaler { original: session.original, model: (size, size) };
        session.gt = Some(scaler.mask_to_model(&gt).map_err(|_| {
            ServiceError::BadRequest(format!("gt mask {:?} does not match image {:?}", gt.shape(), session.original))
        })?);
        Ok(())
    }

    pub async fn delete_session(&self, id: &str) -> Result<(), ServiceError> {
        let removed = self.inner.sessions.lock().unwrap().remove(id);
        if removed.is_none() {
            return Err(ServiceError::unknown_session(id));
        }
        self.inner.cache.lock().unwrap().remove(id);
        Ok(())
    }

    pub fn health(&self) -> Result<Health, ServiceError> {
        let model = self.model()?;
        Ok(Health {
            status: "ok".into(),
            fingerprint: self.inner.fingerprint.clone(),
            config_fingerprint: model.config().fingerprint(),
            sessions: self.session_count(),
            cached_embeddings: self.inner.cache.lock().unwrap().len(),
        })
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> promptseg::Result<T> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?.map_err(Into::into)
}

#[derive(Debug, Default, Deserialize)]
struct PromptQuery {
    #[serde(default)]
    feedback: bool,
}

async fn create(State(s): State<AppState>, body: Bytes) -> Result<Json<CreatedSession>, ServiceError> {
    Ok(Json(s.create_session(body).await?))
}

async fn prompts(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<PromptQuery>,
    body: Bytes,
) -> Result<Json<MaskResponse>, ServiceError> {
    let doc = std::str::from_utf8(&body).map_err(|_| ServiceError::BadRequest("prompt set is not UTF-8".into()))?;
    let set = PromptSet::from_json(doc).map_err(|e| ServiceError::BadRequest(format!("invalid prompt set: {e}")))?;
    Ok(Json(s.submit_prompts(&id, set, q.feedback).await?))
}

async fn mask(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<MaskResponse>, ServiceError> {
    Ok(Json(s.get_mask(&id).await?))
}

async fn gt(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ServiceError> {
    s.set_gt(&id, body).await?;
    Ok(Json(serde_json::json!({ "id": id, "gt": true })))
}

async fn delete(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<serde_json::Value>, ServiceError> {
    s.delete_session(&id).await?;
    Ok(Json(serde_json::json!({ "deleted": id })))
}

async fn healthz(State(s): State<AppState>) -> Result<Json<Health>, ServiceError> {
    Ok(Json(s.health()?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/:id", axum::routing::delete(delete))
        .route("/sessions/:id/prompts", post(prompts))
        .route("/sessions/:id/mask", get(mask))
        .route("/sessions/:id/gt", put(gt))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Loads the checkpoint and serves until the process is stopped.
pub async fn serve(cfg: &ServiceConfig) -> Result<(), ServiceError> {
    let ckpt = cfg.ckpt.as_deref().ok_or_else(|| ServiceError::Config("no checkpoint configured".into()))?;
    let state = AppState::from_checkpoint(ckpt, cfg.cache_bytes)?;
    let listener = tokio::net::TcpListener::bind(&cfg.addr)
        .await
        .map_err(|e| ServiceError::Config(format!("bind {}: {e}", cfg.addr)))?;
    log::info!("serving {} on {}", ckpt.display(), cfg.addr);
    axum::serve(listener, router(state)).await.map_err(|e| ServiceError::Internal(e.to_string()))
}

