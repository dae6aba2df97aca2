//! JSON-over-HTTP access to a catalog directory for the review console and
//! scripted clients.
//!
//! The last loaded catalog is kept in memory and reloaded whenever
//! `catalog.json` changes on disk, so decisions made through the CLI show up
//! on the next request. A decision takes the catalog lock, is applied to a
//! copy, committed, and only then replaces the served state.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use mcforge_core::catalog::{Catalog, CatalogLock, Decision, McRecord, McStatus, PatchRef, ReviewItem, ReviewState};
use mcforge_core::edlclassify::RankedPrediction;

pub const VERSION_HEADER: &str = "x-catalog-version";
pub const DEFAULT_BIND: &str = "127.0.0.1:8077";
/// Candidates shown per queue entry; the item view carries all K′.
pub const QUEUE_CANDIDATES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    Conflict,
    Invalid,
    Io,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::Invalid => StatusCode::BAD_REQUEST,
            ErrorCode::Io => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            status: code.status().as_u16(),
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Invalid, message)
    }
}

impl From<mcforge_core::Error> for ApiError {
    fn from(e: mcforge_core::Error) -> Self {
        use mcforge_core::Error::*;
        let code = match &e {
            NotFound(_) => ErrorCode::NotFound,
            Conflict(_) => ErrorCode::Conflict,
            InvalidArgument(_) => ErrorCode::Invalid,
            _ => ErrorCode::Io,
        };
        ApiError::new(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Identifies one committed state of `catalog.json`.
type Stamp = Option<(SystemTime, u64)>;

fn stamp(root: &Path) -> Stamp {
    let meta = std::fs::metadata(root.join("catalog.json")).ok()?;
    Some((meta.modified().ok()?, meta.len()))
}

struct Served {
    catalog: Catalog,
    stamp: Stamp,
}

pub struct AppState {
    root: PathBuf,
    served: RwLock<Served>,
}

impl AppState {
    pub fn open(root: impl Into<PathBuf>) -> mcforge_core::Result<Self> {
        let root = root.into();
        let catalog = Catalog::load(&root)?;
        Ok(AppState {
            served: RwLock::new(Served {
                catalog,
                stamp: stamp(&root),
            }),
            root,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Version of the catalog currently served.
    pub fn version(&self) -> u64 {
        self.served.read().unwrap().catalog.version()
    }

    fn refresh(&self) -> ApiResult<()> {
        let now = stamp(&self.root);
        if self.served.read().unwrap().stamp == now {
            return Ok(());
        }
        let mut served = self.served.write().unwrap();
        if served.stamp != now {
            served.catalog = Catalog::load(&self.root)?;
            served.stamp = now;
        }
        Ok(())
    }

    fn with_catalog<T>(&self, f: impl FnOnce(&Catalog) -> ApiResult<T>) -> ApiResult<T> {
        self.refresh()?;
        f(&self.served.read().unwrap().catalog)
    }

    /// Applies one review decision and commits it to disk.
    pub fn decide(&self, item: u64, body: DecisionBody) -> ApiResult<DecisionResponse> {
        let decision = body.decision()?;
        let _lock = CatalogLock::acquire(&self.root)?;
        self.refresh()?;
        let mut served = self.served.write().unwrap();
        let current = served
            .catalog
            .item(item)
            .ok_or_else(|| ApiError::not_found(format!("review item {item}")))?;
        if current.state == ReviewState::Decided {
            return Err(ApiError::new(ErrorCode::Conflict, format!("review item {item} already decided")));
        }
        if let Decision::Assign { class_id } = decision {
            if served.catalog.record(class_id).is_none() {
                return Err(ApiError::invalid(format!("unknown class id {class_id}")));
            }
        }
        let mut next = served.catalog.clone();
        let (updated, created) = next.decide_review(item, decision, body.decided_by.trim())?;
        next.commit(&self.root)?;
        let response = DecisionResponse {
            item: item_view(&next, &updated),
            created: created.as_ref().map(|r| mc_view(r)),
        };
        served.catalog = next;
        served.stamp = stamp(&self.root);
        Ok(response)
    }
}

pub fn patch_url(patch: &str) -> String {
    format!("/api/patches/{patch}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub class_id: u32,
    pub name: Option<String>,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: u64,
    pub patch_url: String,
    pub candidates: Vec<CandidateView>,
    pub uncertainty: f64,
    pub novel: bool,
    pub enqueued_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub id: u64,
    pub state: ReviewState,
    pub patch: PatchRef,
    pub patch_url: String,
    pub candidates: Vec<CandidateView>,
    pub uncertainty: f64,
    pub novel: bool,
    pub prediction: RankedPrediction,
    pub decision: Option<Decision>,
    pub decided_by: Option<String>,
    pub enqueued_at: DateTime<Utc>,
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McView {
    pub id: u32,
    pub name: String,
    pub status: McStatus,
    pub created_at: DateTime<Utc>,
    pub exemplar_count: usize,
    pub exemplars: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub item: ItemView,
    /// The class created by a `create_new` decision.
    pub created: Option<McView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub action: String,
    #[serde(default)]
    pub class_id: Option<u32>,
    #[serde(default)]
    pub name: Option<String>,
    pub decided_by: String,
}

impl DecisionBody {
    fn decision(&self) -> ApiResult<Decision> {
        if self.decided_by.trim().is_empty() {
            return Err(ApiError::invalid("decided_by is required"));
        }
        match (self.action.as_str(), self.class_id, &self.name) {
            ("assign", Some(class_id), None) => Ok(Decision::Assign { class_id }),
            ("create_new", None, Some(name)) if !name.trim().is_empty() => Ok(Decision::CreateNew {
                name: name.trim().to_string(),
            }),
            ("assign", ..) => Err(ApiError::invalid("assign takes class_id and no name")),
            ("create_new", ..) => Err(ApiError::invalid("create_new takes a non-empty name and no class_id")),
            (other, ..) => Err(ApiError::invalid(format!("unknown action '{other}'"))),
        }
    }
}

fn candidates(c: &Catalog, pred: &RankedPrediction, limit: usize) -> Vec<CandidateView> {
    pred.candidates
        .iter()
        .take(limit)
        .map(|cand| CandidateView {
            class_id: cand.class,
            name: c.record(cand.class).map(|r| r.name.clone()),
            p: cand.p,
        })
        .collect()
}

fn queue_entry(c: &Catalog, item: &ReviewItem) -> QueueEntry {
    QueueEntry {
        id: item.id,
        patch_url: patch_url(&item.patch.patch),
        candidates: candidates(c, &item.prediction, QUEUE_CANDIDATES),
        uncertainty: item.prediction.uncertainty,
        novel: item.prediction.novel,
        enqueued_at: item.enqueued_at,
    }
}

fn item_view(c: &Catalog, item: &ReviewItem) -> ItemView {
    ItemView {
        id: item.id,
        state: item.state,
        patch: item.patch.clone(),
        patch_url: patch_url(&item.patch.patch),
        candidates: candidates(c, &item.prediction, usize::MAX),
        uncertainty: item.prediction.uncertainty,
        novel: item.prediction.novel,
        prediction: item.prediction.clone(),
        decision: item.decision.clone(),
        decided_by: item.decided_by.clone(),
        enqueued_at: item.enqueued_at,
        decided_at: item.decided_at,
    }
}

fn mc_view(r: &McRecord) -> McView {
    McView {
        id: r.id,
        name: r.name.clone(),
        status: r.status,
        created_at: r.created_at,
        exemplar_count: r.exemplars.len(),
        exemplars: r.exemplars.iter().map(|e| patch_url(&e.patch)).collect(),
    }
}

#[derive(Deserialize)]
struct QueueQuery {
    sort: Option<String>,
}

async fn queue(State(s): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> ApiResult<Json<Vec<QueueEntry>>> {
    let by_uncertainty = match q.sort.as_deref() {
        None | Some("fifo") => false,
        Some("uncertainty") => true,
        Some(other) => return Err(ApiError::invalid(format!("unknown sort '{other}'"))),
    };
    s.with_catalog(|c| {
        let items = if by_uncertainty { c.pending_by_uncertainty() } else { c.pending() };
        Ok(Json(items.into_iter().map(|i| queue_entry(c, i)).collect()))
    })
}

fn parse_id(raw: &str) -> ApiResult<u64> {
    raw.parse().map_err(|_| ApiError::not_found(format!("review item {raw}")))
}

async fn item(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ItemView>> {
    let id = parse_id(&id)?;
    s.with_catalog(|c| {
        let item = c.item(id).ok_or_else(|| ApiError::not_found(format!("review item {id}")))?;
        Ok(Json(item_view(c, item)))
    })
}

async fn patch_png(State(s): State<Arc<AppState>>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::not_found(format!("patch {file}")))?;
    let png = s.with_catalog(|c| Ok(c.patch_png(id)?))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn mcs(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<McView>>> {
    s.with_catalog(|c| Ok(Json(c.records().iter().map(mc_view).collect())))
}

async fn decide(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<DecisionResponse>> {
    let body: DecisionBody = serde_json::from_slice(&body).map_err(|e| ApiError::invalid(format!("decision body: {e}")))?;
    let id = parse_id(&id)?;
    let state = s.clone();
    // Commit does blocking file I/O.
    tokio::task::spawn_blocking(move || state.decide(id, body))
        .await
        .map_err(|e| ApiError::new(ErrorCode::Io, e.to_string()))?
        .map(Json)
}

async fn stamp_version(State(s): State<Arc<AppState>>, mut res: Response) -> Response {
    if let Ok(v) = HeaderValue::from_str(&s.version().to_string()) {
        res.headers_mut().insert(VERSION_HEADER, v);
    }
    res
}

async fn unknown_route() -> ApiError {
    ApiError::not_found("no such endpoint")
}

/// The API routes, every response stamped with the catalog version.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/decision", post(decide))
        .route("/api/patches/{file}", get(patch_png))
        .route("/api/mcs", get(mcs))
        .route("/api/{*rest}", get(unknown_route).post(unknown_route))
        .layer(axum::middleware::map_response_with_state(state.clone(), stamp_version))
        .with_state(state)
}

/// Serves the API, plus static console assets from `static_dir` if given,
/// until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let mut app = router(state);
    if let Some(dir) = static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
