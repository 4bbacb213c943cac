use axum::body::{Body, Bytes};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tilescope_core::assistant::ChatSession;
use tilescope_core::cbir::{self, SearchConfig};
use tilescope_core::pyramid::{self, LevelSpec, Rect};
use tilescope_core::store::validate_slide_id;
use tilescope_core::{raster, Error, ErrorCode, SlideMetadata, TileAddress, TileCodec};

use crate::error::{ApiError, ApiResult};
use crate::AppState;

/// Tiles are immutable for a given metadata digest; a re-ingest changes
/// their ETag, so a modest max-age plus revalidation is safe.
const TILE_CACHE_CONTROL: &str = "public, max-age=3600";
pub const MAX_PREFETCH_RING: u32 = 4;
pub const X_CACHE: &str = "x-cache";

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> tilescope_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::IoError, format!("worker task failed: {e}")))?
        .map_err(ApiError::from)
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

fn json_body<T>(b: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    b.map(|Json(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

/// Parses an optional JSON body; an empty body yields the default.
fn optional_json<T: Default + for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("malformed JSON body: {e}")))
}

fn slide_id(id: &str) -> ApiResult<()> {
    validate_slide_id(id).map_err(|_| ApiError::from(Error::SlideNotFound(id.to_string())))
}

fn etag_of(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    format!("\"{}\"", hex::encode(&digest[..16]))
}

fn not_modified(headers: &HeaderMap, etag: &str) -> bool {
    headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"))
}

fn header_value(s: &str) -> HeaderValue {
    HeaderValue::from_str(s).expect("ASCII header value")
}

pub async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn stats(State(st): State<AppState>) -> Json<tilescope_core::store::StoreStats> {
    Json(st.store.stats())
}

pub async fn list_slides(State(st): State<AppState>) -> ApiResult<Json<Vec<SlideMetadata>>> {
    let store = st.store.clone();
    let (ok, failed) = blocking(move || store.list_slides()).await?;
    for (id, e) in failed {
        tracing::warn!(slide = %id, code = %e.code(), error = %e, "omitting unreadable slide from listing");
    }
    Ok(Json(ok))
}

#[derive(Serialize)]
struct SlideDetail {
    #[serde(flatten)]
    meta: SlideMetadata,
    levels: Vec<LevelSpec>,
    total_tiles: u64,
}

pub async fn get_slide(State(st): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    slide_id(&id)?;
    let store = st.store.clone();
    let handle = blocking(move || store.open_slide(&id)).await?;
    let etag = format!("\"{}\"", hex::encode(&handle.meta_digest[..16]));
    if not_modified(&headers, &etag) {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, header_value(&etag))]).into_response());
    }
    let detail = SlideDetail {
        meta: handle.meta.clone(),
        levels: handle.meta.levels().collect(),
        total_tiles: handle.meta.total_tiles(),
    };
    Ok(([(header::ETAG, header_value(&etag))], Json(detail)).into_response())
}

/// `<col>_<row>.<ext>`
fn parse_tile_name(name: &str) -> Option<(u64, u64, TileCodec)> {
    let (stem, ext) = name.rsplit_once('.')?;
    let (col, row) = stem.split_once('_')?;
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(col) || !digits(row) {
        return None;
    }
    Some((col.parse().ok()?, row.parse().ok()?, TileCodec::from_ext(ext)?))
}

pub async fn get_tile(
    State(st): State<AppState>,
    Path((id, level, name)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    slide_id(&id)?;
    let level: u32 = level
        .parse()
        .map_err(|_| ApiError::invalid(format!("level '{level}' is not a non-negative integer")))?;
    let (col, row, want) = parse_tile_name(&name)
        .ok_or_else(|| ApiError::invalid(format!("tile name '{name}' is not <col>_<row>.<png|jpg|jpeg>")))?;
    let store = st.store.clone();
    let addr = TileAddress::new(id, level, col, row);
    let (payload, cache_hit) = blocking(move || {
        let handle = store.open_slide(&addr.slide_id)?;
        let fetch = store.get_tile(&addr)?;
        let payload = if handle.meta.codec == want {
            fetch.payload
        } else {
            let pixels = raster::decode(&fetch.payload)
                .map_err(|e| Error::corrupt(&addr.slide_id, format!("tile {addr}: {e}")))?;
            Bytes::from(raster::encode(&pixels, want)?)
        };
        Ok((payload, fetch.cache_hit))
    })
    .await?;
    let etag = etag_of(&payload);
    let cache = if cache_hit { "hit" } else { "miss" };
    let common = [
        (header::ETAG, header_value(&etag)),
        (header::CACHE_CONTROL, HeaderValue::from_static(TILE_CACHE_CONTROL)),
        (
            header::HeaderName::from_static(X_CACHE),
            HeaderValue::from_static(cache),
        ),
    ];
    if not_modified(&headers, &etag) {
        return Ok((StatusCode::NOT_MODIFIED, common).into_response());
    }
    Ok((
        common,
        [(header::CONTENT_TYPE, HeaderValue::from_static(want.content_type()))],
        Body::from(payload),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionQuery {
    level: u32,
    x: u64,
    y: u64,
    w: u64,
    h: u64,
    #[serde(default)]
    fmt: Option<String>,
}

pub async fn get_region(
    State(st): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<RegionQuery>, QueryRejection>,
) -> ApiResult<Response> {
    slide_id(&id)?;
    let q = query(q)?;
    let codec = match q.fmt.as_deref() {
        None => TileCodec::Png,
        Some(f) => TileCodec::from_ext(f).ok_or_else(|| {
            ApiError::new(
                ErrorCode::Unsupported,
                format!("region format '{f}' is not supported; use png or jpg"),
            )
        })?,
    };
    let region = Rect::new(q.level, q.x, q.y, q.w, q.h);
    let store = st.store.clone();
    let limit = st.cfg.region_limit_px;
    let bytes = blocking(move || {
        let pixels = store.render_region(&id, &region, limit)?;
        raster::encode(&pixels, codec)
    })
    .await?;
    Ok((
        [(header::CONTENT_TYPE, HeaderValue::from_static(codec.content_type()))],
        Body::from(bytes),
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewportQuery {
    level: u32,
    x: u64,
    y: u64,
    w: u64,
    h: u64,
    #[serde(default)]
    ring: u32,
}

#[derive(Serialize)]
struct TileRef {
    col: u64,
    row: u64,
    url: String,
}

/// The tiles covering a viewport (plus an optional ring), in row-major
/// order, with their URLs: what a thin client needs to render it.
pub async fn viewport_tiles(
    State(st): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<ViewportQuery>, QueryRejection>,
) -> ApiResult<Response> {
    slide_id(&id)?;
    let q = query(q)?;
    if q.ring > MAX_PREFETCH_RING {
        return Err(ApiError::invalid(format!("ring must be in [0, {MAX_PREFETCH_RING}]")));
    }
    let store = st.store.clone();
    let vp = Rect::new(q.level, q.x, q.y, q.w, q.h);
    let (meta, clamped, tiles) = blocking(move || {
        let handle = store.open_slide(&id)?;
        let spec = pyramid::level_spec(&handle.meta, vp.level)?;
        let clamped = vp.clamp_to(&spec)?;
        let tiles = pyramid::tiles_with_ring(&handle.meta, &vp, q.ring)?;
        Ok((handle.meta.clone(), clamped, tiles))
    })
    .await?;
    let ext = meta.codec.ext();
    let tiles: Vec<TileRef> = tiles
        .into_iter()
        .map(|t| TileRef {
            url: format!(
                "/api/v1/slides/{}/tiles/{}/{}_{}.{ext}",
                meta.slide_id, t.level, t.col, t.row
            ),
            col: t.col,
            row: t.row,
        })
        .collect();
    Ok(Json(json!({ "level": clamped.level, "clamped": clamped, "tiles": tiles })).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefetchRequest {
    level: u32,
    x: u64,
    y: u64,
    w: u64,
    h: u64,
    #[serde(default)]
    ring: u32,
}

/// Schedules the viewport's tiles (plus a ring of neighbours) to be read
/// into the tile cache in the background. Warming does not count as a
/// cache lookup.
pub async fn prefetch(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PrefetchRequest>, JsonRejection>,
) -> ApiResult<Response> {
    slide_id(&id)?;
    let req = json_body(body)?;
    if req.ring > MAX_PREFETCH_RING {
        return Err(ApiError::invalid(format!("ring must be in [0, {MAX_PREFETCH_RING}]")));
    }
    let store = st.store.clone();
    let vp = Rect::new(req.level, req.x, req.y, req.w, req.h);
    let tiles = blocking(move || {
        let handle = store.open_slide(&id)?;
        pyramid::tiles_with_ring(&handle.meta, &vp, req.ring)
    })
    .await?;
    let scheduled = tiles.len();
    let store = st.store.clone();
    let workers = st.prefetch.clone();
    tokio::spawn(async move {
        for addr in tiles {
            let Ok(permit) = workers.clone().acquire_owned().await else {
                return;
            };
            let store = store.clone();
            tokio::task::spawn_blocking(move || {
                if let Err(e) = store.warm_tile(&addr) {
                    tracing::debug!(tile = %addr, error = %e, "prefetch failed");
                }
                drop(permit);
            });
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "scheduled": scheduled }))).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    region: Option<Rect>,
}

#[derive(Serialize)]
struct HitView {
    slide_id: String,
    score: f64,
    #[serde(rename = "self")]
    is_self: bool,
    thumbnail_url: Option<String>,
}

pub async fn search(State(st): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    slide_id(&id)?;
    let req: SearchRequest = optional_json(&body)?;
    let cfg = SearchConfig {
        k: req.k.unwrap_or(cbir::DEFAULT_K),
    };
    let store = st.store.clone();
    let index = st.index.clone();
    let limit = st.cfg.region_limit_px;
    let (result, thumbs) = blocking(move || {
        cfg.validate()?;
        store.open_slide(&id)?;
        let idx = index.fresh(&store)?;
        let result = cbir::search_slide(&store, &idx, &id, req.region, &cfg, limit)?;
        let thumbs: Vec<Option<String>> = result
            .hits
            .iter()
            .map(|h| {
                store.open_slide(&h.slide_id).ok().map(|handle| {
                    let r = cbir::thumbnail_region(&handle.meta);
                    format!(
                        "/api/v1/slides/{}/region?level={}&x=0&y=0&w={}&h={}",
                        h.slide_id, r.level, r.width, r.height
                    )
                })
            })
            .collect();
        Ok((result, thumbs))
    })
    .await?;
    let hits: Vec<HitView> = result
        .hits
        .iter()
        .zip(thumbs)
        .map(|(h, thumbnail_url)| HitView {
            slide_id: h.slide_id.clone(),
            score: h.score,
            is_self: h.slide_id == result.query.slide_id,
            thumbnail_url,
        })
        .collect();
    Ok(Json(json!({ "query": result.query, "hits": hits })).into_response())
}

/// Rebuilds the similarity index from the current store and persists it.
pub async fn rebuild_index(State(st): State<AppState>) -> ApiResult<Response> {
    let store = st.store.clone();
    let index = st.index.clone();
    let idx = blocking(move || index.rebuild(&store)).await?;
    Ok(Json(json!({ "indexed": idx.len(), "dim": idx.dim() })).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    slide_id: Option<String>,
}

pub async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = optional_json(&body)?;
    if let Some(id) = &req.slide_id {
        slide_id(id)?;
    }
    let gw = st.assistant.clone();
    let session_id = blocking(move || gw.create_session(req.slide_id.as_deref())).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "session_id": session_id, "backend": st.assistant.backend_name() })),
    )
        .into_response())
}

pub async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ChatSession>> {
    Ok(Json(st.assistant.get_session(&id).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AskRequest {
    text: String,
    #[serde(default)]
    viewport: Option<Rect>,
}

pub async fn ask(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<AskRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = json_body(body)?;
    let turn = st.assistant.ask(&id, &req.text, req.viewport).await?;
    Ok(Json(turn).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextQuery {
    level: Option<u32>,
    x: Option<u64>,
    y: Option<u64>,
    w: Option<u64>,
    h: Option<u64>,
}

/// The prompt the next question would be sent with, for inspection.
pub async fn session_context(
    State(st): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<ContextQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let q = query(q)?;
    let viewport = match (q.level, q.x, q.y, q.w, q.h) {
        (None, None, None, None, None) => None,
        (Some(level), Some(x), Some(y), Some(w), Some(h)) => Some(Rect::new(level, x, y, w, h)),
        _ => return Err(ApiError::invalid("viewport needs all of level, x, y, w, h")),
    };
    let doc = st.assistant.context_for(&id, viewport.as_ref()).await?;
    Ok(Json(doc).into_response())
}

pub async fn fallback() -> ApiError {
    ApiError::new(ErrorCode::RouteNotFound, "no such route")
}

pub const UI_PLACEHOLDER: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>tilescope</title></head>\n<body><p>No viewer bundle is installed. Set <code>ui_dir</code> in the server configuration to serve one here; the JSON API is under <code>/api/v1/</code>.</p></body></html>\n";

pub async fn ui_placeholder() -> Response {
    (
        [(
            header::CONTENT_TYPE,
            HeaderValue::from_static("text/html; charset=utf-8"),
        )],
        UI_PLACEHOLDER,
    )
        .into_response()
}
