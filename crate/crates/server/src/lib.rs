//! HTTP service over a tile pyramid store: tiles, regions, prefetch hints,
//! similarity search and the assistant gateway, plus static viewer files.

pub mod config;
pub mod error;
pub mod routes;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::Request;
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use tilescope_core::assistant::AssistantGateway;
use tilescope_core::cbir::IndexHandle;
use tilescope_core::store::PyramidStore;
use tilescope_core::{Error, Result};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

pub use config::ServerConfig;

#[derive(Clone)]
pub struct AppState {
    pub cfg: Arc<ServerConfig>,
    pub store: Arc<PyramidStore>,
    pub index: Arc<IndexHandle>,
    pub assistant: Arc<AssistantGateway>,
    pub prefetch: Arc<Semaphore>,
}

impl AppState {
    /// Opens the store and instantiates the assistant backend. Missing
    /// credentials or fixtures fail here rather than on first use.
    pub fn new(cfg: ServerConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.store_root).map_err(|e| Error::io(&cfg.store_root, e))?;
        let store = Arc::new(PyramidStore::open(&cfg.store_root, cfg.cache)?);
        let backend = cfg.assistant.build()?;
        let assistant = Arc::new(AssistantGateway::new(backend, store.clone(), &cfg.assistant)?);
        Ok(AppState {
            index: Arc::new(IndexHandle::new(cfg.index_auto_refresh)),
            prefetch: Arc::new(Semaphore::new(cfg.prefetch_workers)),
            cfg: Arc::new(cfg),
            store,
            assistant,
        })
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/healthz", get(routes::health))
        .route("/stats", get(routes::stats))
        .route("/index", post(routes::rebuild_index))
        .route("/slides", get(routes::list_slides))
        .route("/slides/{id}", get(routes::get_slide))
        .route("/slides/{id}/tiles/{level}/{tile}", get(routes::get_tile))
        .route("/slides/{id}/region", get(routes::get_region))
        .route("/slides/{id}/viewport", get(routes::viewport_tiles))
        .route("/slides/{id}/prefetch", post(routes::prefetch))
        .route("/slides/{id}/search", post(routes::search))
        .route("/sessions", post(routes::create_session))
        .route("/sessions/{id}", get(routes::get_session))
        .route("/sessions/{id}/ask", post(routes::ask))
        .route("/sessions/{id}/context", get(routes::session_context));

    let app = Router::new().nest("/api/v1", api);
    let app = match &state.cfg.ui_dir {
        Some(dir) => app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app
            .route("/ui", get(routes::ui_placeholder))
            .route("/ui/", get(routes::ui_placeholder)),
    };
    app.fallback(routes::fallback)
        .layer(middleware::from_fn(access_log))
        .with_state(state)
}

/// One line per request: method, path, status, duration and cache outcome.
async fn access_log(req: Request, next: Next) -> Response {
    let started = Instant::now();
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    let cache = resp
        .headers()
        .get(routes::X_CACHE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("-");
    tracing::info!(
        target: "access",
        %method,
        path = %path,
        status = resp.status().as_u16(),
        ms = format!("{:.3}", started.elapsed().as_secs_f64() * 1e3),
        cache,
        "request"
    );
    resp
}

/// Binds the configured address and serves until ctrl-c or SIGTERM.
/// `on_ready` receives the bound address (useful with port 0).
pub async fn serve(cfg: ServerConfig, on_ready: impl FnOnce(SocketAddr)) -> Result<()> {
    let listen = cfg.listen.clone();
    let state = AppState::new(cfg)?;
    let listener = tokio::net::TcpListener::bind(&listen)
        .await
        .map_err(|e| Error::Config(format!("cannot listen on {listen}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Config(format!("cannot listen on {listen}: {e}")))?;
    tracing::info!(%addr, backend = state.assistant.backend_name(), "serving");
    on_ready(addr);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))?;
    tracing::info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
