use std::path::Path;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tilescope_core::ingest::{ingest, IngestJob, IngestSource};
use tilescope_core::raster;
use tilescope_core::synth::SyntheticSlide;
use tilescope_server::{router, AppState, ServerConfig};
use tower::ServiceExt;

struct Resp {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Resp {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body)
            .unwrap_or_else(|e| panic!("body is not JSON ({e}): {}", String::from_utf8_lossy(&self.body)))
    }

    fn code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap().to_string()
    }

    fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).and_then(|v| v.to_str().ok())
    }
}

async fn send(app: &Router, req: Request<Body>) -> Resp {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Resp { status, headers, body }
}

async fn get(app: &Router, uri: &str) -> Resp {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> Resp {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

fn synth(root: &Path, id: &str, w: u64, h: u64, seed: u64) {
    synth_mpp(root, id, w, h, seed, 0.5);
}

fn synth_mpp(root: &Path, id: &str, w: u64, h: u64, seed: u64, mpp: f64) {
    let mut job = IngestJob::new(
        IngestSource::Synthetic {
            width: w,
            height: h,
            seed,
        },
        id,
    );
    job.mpp = Some(mpp);
    ingest(root, &job).unwrap();
}

fn app_with(root: &Path, tweak: impl FnOnce(&mut ServerConfig)) -> Router {
    let mut cfg = ServerConfig {
        store_root: root.to_path_buf(),
        ..ServerConfig::default()
    };
    tweak(&mut cfg);
    router(AppState::new(cfg).unwrap())
}

fn app(root: &Path) -> Router {
    app_with(root, |_| {})
}

#[tokio::test]
async fn slide_listing_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "beta", 700, 300, 2);
    synth(dir.path(), "alpha", 300, 700, 1);
    // A corrupt slide is left out of the listing but reported per id.
    std::fs::create_dir_all(dir.path().join("broken")).unwrap();
    std::fs::write(dir.path().join("broken/meta"), "width_px = \"wide\"\n").unwrap();
    let app = app(dir.path());

    let r = get(&app, "/api/v1/slides").await;
    assert_eq!(r.status, StatusCode::OK);
    let ids: Vec<_> = r
        .json()
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["slide_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(ids, ["alpha", "beta"]);

    let r = get(&app, "/api/v1/slides/beta").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["width_px"], 700);
    assert_eq!(v["max_level"], 10);
    assert_eq!(v["levels"].as_array().unwrap().len(), 11);
    assert_eq!(v["levels"][10]["cols"], 3);
    assert_eq!(v["levels"][10]["rows"], 2);
    let etag = r.header("etag").unwrap().to_string();
    let again = send(
        &app,
        Request::get("/api/v1/slides/beta")
            .header(header::IF_NONE_MATCH, &etag)
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(again.status, StatusCode::NOT_MODIFIED);

    let r = get(&app, "/api/v1/slides/broken").await;
    assert_eq!(r.status, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(r.code(), "STORE_CORRUPT");
    assert!(r.json()["error"]["message"].as_str().unwrap().contains("broken"));

    for missing in ["/api/v1/slides/nope", "/api/v1/slides/BAD..ID"] {
        let r = get(&app, missing).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{missing}");
        assert_eq!(r.code(), "SLIDE_NOT_FOUND");
    }
}

#[tokio::test]
async fn tiles_carry_cache_headers_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s1", 600, 400, 9);
    let app = app(dir.path());
    let expected = SyntheticSlide::new(600, 400, 9).unwrap().render();

    let uri = "/api/v1/slides/s1/tiles/10/2_1.png";
    let first = get(&app, uri).await;
    assert_eq!(first.status, StatusCode::OK);
    assert_eq!(first.header("content-type"), Some("image/png"));
    assert_eq!(first.header("x-cache"), Some("miss"));
    assert!(first.header("cache-control").is_some());
    let tile = raster::decode(&first.body).unwrap();
    assert_eq!((tile.width, tile.height), (88, 144));
    assert_eq!(tile, expected.crop(512, 256, 88, 144));

    let second = get(&app, uri).await;
    assert_eq!(second.header("x-cache"), Some("hit"));
    assert_eq!(second.body, first.body);
    let etag = first.header("etag").unwrap();
    assert_eq!(second.header("etag"), Some(etag));

    let cond = send(
        &app,
        Request::get(uri)
            .header(header::IF_NONE_MATCH, etag)
            .body(Body::empty())
            .unwrap(),
    )
    .await;
    assert_eq!(cond.status, StatusCode::NOT_MODIFIED);
    assert!(cond.body.is_empty());

    let jpg = get(&app, "/api/v1/slides/s1/tiles/10/2_1.jpg").await;
    assert_eq!(jpg.status, StatusCode::OK);
    assert_eq!(jpg.header("content-type"), Some("image/jpeg"));
    let decoded = raster::decode(&jpg.body).unwrap();
    assert_eq!((decoded.width, decoded.height), (88, 144));

    let stats = get(&app, "/api/v1/stats").await.json();
    assert_eq!(stats["tiles"]["misses"], 1);
    assert_eq!(stats["tiles"]["hits"], 3);
}

#[tokio::test]
async fn tile_errors_name_the_valid_range() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s1", 600, 400, 9);
    let app = app(dir.path());

    let r = get(&app, "/api/v1/slides/s1/tiles/11/0_0.png").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.code(), "LEVEL_OUT_OF_RANGE");
    assert_eq!(r.json()["error"]["detail"]["valid"], json!([0, 10]));

    let r = get(&app, "/api/v1/slides/s1/tiles/10/3_0.png").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.code(), "TILE_OUT_OF_RANGE");
    assert_eq!(r.json()["error"]["detail"]["cols"], 3);

    for bad in [
        "/api/v1/slides/s1/tiles/x/0_0.png",
        "/api/v1/slides/s1/tiles/1/0-0.png",
        "/api/v1/slides/s1/tiles/1/0_0.gif",
    ] {
        let r = get(&app, bad).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(r.code(), "INVALID_REQUEST");
    }

    let r = get(&app, "/api/v1/nothing/here").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.code(), "ROUTE_NOT_FOUND");
}

#[tokio::test]
async fn regions_are_exact_crops_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s1", 600, 400, 9);
    let app = app_with(dir.path(), |c| c.region_limit_px = 50_000);
    let expected = SyntheticSlide::new(600, 400, 9).unwrap().render();

    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=200&y=230&w=100&h=90").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.header("content-type"), Some("image/png"));
    assert_eq!(raster::decode(&r.body).unwrap(), expected.crop(200, 230, 100, 90));

    // Clamped at the right/bottom edges.
    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=550&y=380&w=100&h=100").await;
    assert_eq!(raster::decode(&r.body).unwrap(), expected.crop(550, 380, 50, 20));

    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=0&y=0&w=600&h=400").await;
    assert_eq!(r.status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(r.code(), "REGION_TOO_LARGE");
    assert_eq!(r.json()["error"]["detail"]["limit"], 50_000);

    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=600&y=0&w=10&h=10").await;
    assert_eq!(r.code(), "REGION_OUT_OF_BOUNDS");
    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=0&y=0&w=0&h=10").await;
    assert_eq!(r.code(), "INVALID_REQUEST");
    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=0&y=0").await;
    assert_eq!(r.code(), "INVALID_REQUEST");
    let r = get(&app, "/api/v1/slides/s1/region?level=10&x=0&y=0&w=8&h=8&fmt=webp").await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.code(), "UNSUPPORTED");
}

#[tokio::test]
async fn prefetch_warms_without_counting_lookups() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s1", 1024, 1024, 3);
    let app = app(dir.path());

    let r = post(
        &app,
        "/api/v1/slides/s1/prefetch",
        json!({"level": 10, "x": 256, "y": 256, "w": 256, "h": 256, "ring": 1}),
    )
    .await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    assert_eq!(r.json()["scheduled"], 9);

    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(20);
    loop {
        let s = get(&app, "/api/v1/stats").await.json();
        if s["tiles"]["current_entries"] == 9 {
            assert_eq!(s["tiles"]["hits"], 0);
            assert_eq!(s["tiles"]["misses"], 0);
            break;
        }
        assert!(std::time::Instant::now() < deadline, "prefetch did not finish: {s}");
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    let r = get(&app, "/api/v1/slides/s1/tiles/10/0_0.png").await;
    assert_eq!(r.header("x-cache"), Some("hit"));

    let r = post(
        &app,
        "/api/v1/slides/s1/prefetch",
        json!({"level": 10, "x": 0, "y": 0, "w": 1, "h": 1, "ring": 5}),
    )
    .await;
    assert_eq!(r.code(), "INVALID_REQUEST");
    let r = post(&app, "/api/v1/slides/s1/prefetch", json!({"level": 10})).await;
    assert_eq!(r.code(), "INVALID_REQUEST");
}

#[tokio::test]
async fn search_requires_an_index_then_ranks_self_first() {
    let dir = tempfile::tempdir().unwrap();
    for (i, id) in ["a", "b", "c"].iter().enumerate() {
        synth(dir.path(), id, 512, 384, i as u64 + 1);
    }
    let app = app(dir.path());

    let r = post(&app, "/api/v1/slides/a/search", json!({})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.code(), "INDEX_REQUIRED");

    let r = send(&app, Request::post("/api/v1/index").body(Body::empty()).unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["indexed"], 3);

    // Empty body: defaults apply.
    let r = send(
        &app,
        Request::post("/api/v1/slides/a/search").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    assert_eq!(v["query"]["k"], 5);
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["slide_id"], "a");
    assert_eq!(hits[0]["self"], true);
    assert!((hits[0]["score"].as_f64().unwrap() - 1.0).abs() <= 1e-6);
    let thumb = hits[1]["thumbnail_url"].as_str().unwrap().to_string();
    let t = get(&app, &thumb).await;
    assert_eq!(t.status, StatusCode::OK, "{thumb}");
    assert_eq!(raster::decode(&t.body).unwrap().width, 512);

    let r = post(
        &app,
        "/api/v1/slides/b/search",
        json!({"k": 1, "region": {"level": 9, "x": 0, "y": 0, "w": 128, "h": 96}}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["hits"].as_array().unwrap().len(), 1);
    assert_eq!(r.json()["query"]["region"]["w"], 128);

    let r = post(&app, "/api/v1/slides/a/search", json!({"k": 0})).await;
    assert_eq!(r.code(), "INVALID_REQUEST");
    let r = post(&app, "/api/v1/slides/a/search", json!({"kk": 2})).await;
    assert_eq!(r.code(), "INVALID_REQUEST");

    // Adding a slide makes the index stale.
    synth(dir.path(), "d", 256, 256, 4);
    let r = post(&app, "/api/v1/slides/a/search", json!({})).await;
    assert_eq!(r.code(), "INDEX_REQUIRED");
    assert!(r.json()["error"]["message"].as_str().unwrap().contains("d"));
}

#[tokio::test]
async fn auto_refresh_rebuilds_stale_index() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", 256, 256, 1);
    let app = app_with(dir.path(), |c| c.index_auto_refresh = true);
    let r = post(&app, "/api/v1/slides/a/search", json!({})).await;
    assert_eq!(r.status, StatusCode::OK);
    synth(dir.path(), "b", 256, 256, 2);
    let r = post(&app, "/api/v1/slides/a/search", json!({})).await;
    assert_eq!(r.json()["hits"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn assistant_sessions() {
    let dir = tempfile::tempdir().unwrap();
    synth_mpp(dir.path(), "s1", 2_000, 1_600, 1, 2.5);
    let app = app(dir.path());

    let r = post(&app, "/api/v1/sessions", json!({"slide_id": "s1"})).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let sid = r.json()["session_id"].as_str().unwrap().to_string();
    assert_eq!(r.json()["backend"], "echo");

    let vp = json!({"level": 11, "x": 0, "y": 0, "w": 2000, "h": 1600});
    let r = post(
        &app,
        &format!("/api/v1/sessions/{sid}/ask"),
        json!({"text": "what is here?", "viewport": vp}),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let turn = r.json();
    assert_eq!(turn["status"], "completed");
    let text = turn["assistant_text"].as_str().unwrap();
    assert!(text.contains("what is here?"));
    assert!(text.ends_with(tilescope_core::assistant::ADVISORY_FOOTER));
    assert_eq!(turn["viewport_context"]["extent_um"], json!([5000.0, 4000.0]));

    let ctx = get(
        &app,
        &format!("/api/v1/sessions/{sid}/context?level=11&x=0&y=0&w=2000&h=1600"),
    )
    .await
    .json();
    let system = ctx["messages"][0]["content"].as_str().unwrap();
    assert!(system.contains("5.0 mm × 4.0 mm"), "{system}");

    let r = post(&app, &format!("/api/v1/sessions/{sid}/ask"), json!({"text": "   "})).await;
    assert_eq!(r.code(), "INVALID_REQUEST");

    let s = get(&app, &format!("/api/v1/sessions/{sid}")).await.json();
    assert_eq!(s["turns"].as_array().unwrap().len(), 1);
    assert_eq!(s["slide"]["slide_id"], "s1");

    let r = post(&app, "/api/v1/sessions/nope/ask", json!({"text": "hi"})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.code(), "SESSION_NOT_FOUND");
    let r = post(&app, "/api/v1/sessions", json!({"slide_id": "missing"})).await;
    assert_eq!(r.code(), "SLIDE_NOT_FOUND");

    // Unbound session with a viewport is rejected; without one it works.
    let sid2 = send(&app, Request::post("/api/v1/sessions").body(Body::empty()).unwrap())
        .await
        .json()["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let r = post(
        &app,
        &format!("/api/v1/sessions/{sid2}/ask"),
        json!({"text": "hi", "viewport": vp}),
    )
    .await;
    assert_eq!(r.code(), "INVALID_REQUEST");
    let r = post(&app, &format!("/api/v1/sessions/{sid2}/ask"), json!({"text": "hi"})).await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn recorded_backend_failures_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("rec.json");
    std::fs::write(
        &fixture,
        json!([
            {"status": 200, "body": {"choices": [{"message": {"role": "assistant", "content": "Canned answer."}}]}},
            {"status": 503, "body": {"error": {"message": "overloaded"}}}
        ])
        .to_string(),
    )
    .unwrap();
    let store = dir.path().join("store");
    let app = app_with(&store, |c| {
        c.assistant.kind = tilescope_core::assistant::BackendKind::Recorded;
        c.assistant.fixture = Some(fixture.clone());
    });
    let sid = send(&app, Request::post("/api/v1/sessions").body(Body::empty()).unwrap())
        .await
        .json()["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let ask = format!("/api/v1/sessions/{sid}/ask");
    let r = post(&app, &ask, json!({"text": "one"})).await;
    assert_eq!(
        r.json()["assistant_text"].as_str().unwrap(),
        format!("Canned answer.{}", tilescope_core::assistant::ADVISORY_FOOTER)
    );
    let r = post(&app, &ask, json!({"text": "two"})).await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
    assert_eq!(r.code(), "UPSTREAM_ERROR");
    let s = get(&app, &format!("/api/v1/sessions/{sid}")).await.json();
    assert_eq!(s["turns"][1]["status"], "failed");
    assert_eq!(s["turns"][1]["retryable"], true);
}

#[tokio::test]
async fn ui_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let r = get(&app(dir.path()), "/ui/").await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.header("content-type").unwrap().starts_with("text/html"));

    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<p>viewer</p>").unwrap();
    std::fs::write(ui.join("app.js"), "console.log(1)").unwrap();
    let app = app_with(&dir.path().join("store"), |c| c.ui_dir = Some(ui.clone()));
    let r = get(&app, "/ui/").await;
    assert_eq!(r.body, b"<p>viewer</p>");
    let r = get(&app, "/ui/app.js").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(get(&app, "/api/v1/healthz").await.json()["status"], "ok");
}

#[test]
fn missing_http_credential_fails_at_startup_without_echoing_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ServerConfig {
        store_root: dir.path().to_path_buf(),
        ..ServerConfig::default()
    };
    cfg.assistant.kind = tilescope_core::assistant::BackendKind::Http;
    cfg.assistant.endpoint = Some("http://127.0.0.1:9/v1/chat/completions".into());
    cfg.assistant.credential_env = "TILESCOPE_TEST_UNSET_CREDENTIAL".into();
    let err = AppState::new(cfg).err().unwrap();
    assert_eq!(err.code(), tilescope_core::ErrorCode::ConfigError);
    assert!(err.to_string().contains("TILESCOPE_TEST_UNSET_CREDENTIAL"));
}

#[tokio::test]
async fn viewport_lists_covering_tiles() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s1", 600, 400, 9);
    let app = app(dir.path());
    let r = get(&app, "/api/v1/slides/s1/viewport?level=10&x=250&y=250&w=300&h=500").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(
        v["clamped"],
        json!({"level": 10, "x": 250, "y": 250, "w": 300, "h": 150})
    );
    let tiles: Vec<(u64, u64)> = v["tiles"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| (t["col"].as_u64().unwrap(), t["row"].as_u64().unwrap()))
        .collect();
    assert_eq!(tiles, [(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1)]);
    let url = v["tiles"][4]["url"].as_str().unwrap();
    assert_eq!(url, "/api/v1/slides/s1/tiles/10/1_1.png");
    assert_eq!(get(&app, url).await.status, StatusCode::OK);

    let ring = get(&app, "/api/v1/slides/s1/viewport?level=10&x=300&y=300&w=1&h=1&ring=1")
        .await
        .json();
    assert_eq!(ring["tiles"].as_array().unwrap().len(), 6);
    let r = get(&app, "/api/v1/slides/s1/viewport?level=10&x=700&y=0&w=1&h=1").await;
    assert_eq!(r.code(), "REGION_OUT_OF_BOUNDS");
}
