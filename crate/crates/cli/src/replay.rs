//! Replays a navigation trace against a running server and reports tile
//! latency and cache behaviour.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tilescope_core::pyramid;
use tilescope_core::trace::{percentile, NavTrace};
use tilescope_core::{SlideMetadata, TileAddress};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::failure::{CliResult, Failure};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub base_url: String,
    pub slide_id: Option<String>,
    pub parallelism: usize,
    /// Timestamp scale: 1.0 honours the trace timing, 0 replays as fast as
    /// possible.
    pub speed: f64,
    /// Ring of neighbouring tiles to request as prefetch hints per viewport.
    pub prefetch_ring: Option<u32>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Percentiles {
    pub samples: usize,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
}

impl Percentiles {
    fn of(samples: &[f64]) -> Self {
        Percentiles {
            samples: samples.len(),
            p50: percentile(samples, 50.0),
            p95: percentile(samples, 95.0),
            p99: percentile(samples, 99.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct CacheCounts {
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub slide_id: String,
    pub viewports: usize,
    pub requests: usize,
    pub errors: usize,
    pub bytes: u64,
    pub wall_ms: f64,
    /// Per-tile latency in milliseconds, all successful requests.
    pub latency_ms: Percentiles,
    /// Latency of requests the server answered from its tile cache.
    pub cached_latency_ms: Percentiles,
    /// Hit/miss as reported per response by the server.
    pub client: CacheCounts,
    /// Delta of the server's tile-cache counters over the replay.
    pub server: CacheCounts,
    /// Server-side hit rate over the replay.
    pub hit_rate: f64,
    /// Whether client and server counts agree exactly.
    pub reconciled: bool,
}

#[derive(Deserialize)]
struct StatsDoc {
    tiles: TileStats,
}

#[derive(Deserialize)]
struct TileStats {
    hits: u64,
    misses: u64,
}

struct Sample {
    latency_ms: f64,
    bytes: u64,
    cache_hit: Option<bool>,
}

pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base_url: &str) -> CliResult<Self> {
        let http = reqwest::Client::builder()
            .pool_max_idle_per_host(64)
            .build()
            .map_err(|e| Failure::connection(format!("cannot build HTTP client: {e}")))?;
        Ok(Client {
            http,
            base: base_url.trim_end_matches('/').to_string(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn unreachable(&self, e: reqwest::Error) -> Failure {
        Failure::connection(format!("cannot reach {}: {e}", self.base))
    }

    /// Turns an error response into a failure carrying the server's code.
    async fn error_from(resp: reqwest::Response) -> Failure {
        let status = resp.status();
        let body: serde_json::Value = resp.json().await.unwrap_or_default();
        let code = body["error"]["code"].as_str().unwrap_or("UPSTREAM_ERROR");
        let message = body["error"]["message"]
            .as_str()
            .map(str::to_string)
            .unwrap_or_else(|| format!("server answered {status}"));
        Failure::new(code, message)
    }

    pub async fn get_json<T: for<'de> Deserialize<'de>>(&self, path: &str) -> CliResult<T> {
        let resp = self
            .http
            .get(self.url(path))
            .send()
            .await
            .map_err(|e| self.unreachable(e))?;
        if !resp.status().is_success() {
            return Err(Self::error_from(resp).await);
        }
        resp.json()
            .await
            .map_err(|e| Failure::connection(format!("malformed response from {path}: {e}")))
    }

    /// Slide metadata, without the derived level table the server adds.
    pub async fn slide_meta(&self, slide_id: &str) -> CliResult<SlideMetadata> {
        let mut doc: serde_json::Value = self.get_json(&format!("/api/v1/slides/{slide_id}")).await?;
        if let Some(obj) = doc.as_object_mut() {
            obj.remove("levels");
            obj.remove("total_tiles");
        }
        serde_json::from_value(doc)
            .map_err(|e| Failure::connection(format!("malformed slide metadata from server: {e}")))
    }

    async fn tile_stats(&self) -> CliResult<CacheCounts> {
        let s: StatsDoc = self.get_json("/api/v1/stats").await?;
        Ok(CacheCounts {
            hits: s.tiles.hits,
            misses: s.tiles.misses,
        })
    }
}

async fn fetch_tile(http: reqwest::Client, url: String) -> Result<Sample, String> {
    let started = Instant::now();
    let resp = http.get(&url).send().await.map_err(|e| e.to_string())?;
    let status = resp.status();
    let cache_hit = resp
        .headers()
        .get("x-cache")
        .and_then(|v| v.to_str().ok())
        .map(|v| v == "hit");
    let body = resp.bytes().await.map_err(|e| e.to_string())?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
    if !status.is_success() {
        return Err(format!("{url}: {status}"));
    }
    Ok(Sample {
        latency_ms,
        bytes: body.len() as u64,
        cache_hit,
    })
}

pub async fn replay(trace: &NavTrace, opts: &ReplayOptions) -> CliResult<ReplayReport> {
    if opts.parallelism == 0 {
        return Err(Failure::invalid("parallelism must be at least 1"));
    }
    if !(opts.speed.is_finite() && opts.speed >= 0.0) {
        return Err(Failure::invalid("speed must be a non-negative number"));
    }
    let slide_id = opts
        .slide_id
        .clone()
        .or_else(|| trace.slide_id.clone())
        .ok_or_else(|| Failure::invalid("no slide given: pass --slide or add a `# slide <id>` header to the trace"))?;
    if trace.records.is_empty() {
        return Err(Failure::invalid("trace has no records"));
    }

    let client = Client::new(&opts.base_url)?;
    let meta = client.slide_meta(&slide_id).await?;
    trace.validate_for(&meta)?;

    let before = client.tile_stats().await?;
    let permits = Arc::new(Semaphore::new(opts.parallelism));
    let ext = meta.codec.ext();
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let started = Instant::now();

    for record in &trace.records {
        if opts.speed > 0.0 {
            let due = Duration::from_secs_f64(record.offset_ms as f64 / 1e3 / opts.speed);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                tokio::time::sleep(wait).await;
            }
        }
        if let Some(ring) = opts.prefetch_ring {
            let v = record.viewport;
            let body =
                serde_json::json!({"level": v.level, "x": v.x, "y": v.y, "w": v.width, "h": v.height, "ring": ring});
            let resp = client
                .http
                .post(client.url(&format!("/api/v1/slides/{slide_id}/prefetch")))
                .json(&body)
                .send()
                .await
                .map_err(|e| client.unreachable(e))?;
            if !resp.status().is_success() {
                return Err(Client::error_from(resp).await);
            }
        }
        // One viewport at a time, its tiles with bounded parallelism, the
        // way a single viewer renders.
        let tiles = pyramid::tiles_for_viewport(&meta, &record.viewport)?;
        let mut set = JoinSet::new();
        for TileAddress { level, col, row, .. } in tiles {
            let url = client.url(&format!("/api/v1/slides/{slide_id}/tiles/{level}/{col}_{row}.{ext}"));
            let http = client.http.clone();
            let permits = permits.clone();
            set.spawn(async move {
                let _permit = permits.acquire_owned().await.expect("semaphore open");
                fetch_tile(http, url).await
            });
        }
        while let Some(joined) = set.join_next().await {
            match joined.expect("tile task") {
                Ok(s) => samples.push(s),
                Err(e) => errors.push(e),
            }
        }
    }
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let after = client.tile_stats().await?;

    if samples.is_empty() && !errors.is_empty() {
        return Err(Failure::connection(format!(
            "every tile request failed; first: {}",
            errors[0]
        )));
    }
    for e in errors.iter().take(5) {
        tracing::warn!(error = %e, "tile request failed");
    }

    let all: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();
    let cached: Vec<f64> = samples
        .iter()
        .filter(|s| s.cache_hit == Some(true))
        .map(|s| s.latency_ms)
        .collect();
    let client_counts = CacheCounts {
        hits: samples.iter().filter(|s| s.cache_hit == Some(true)).count() as u64,
        misses: samples.iter().filter(|s| s.cache_hit == Some(false)).count() as u64,
    };
    let server = CacheCounts {
        hits: after.hits - before.hits,
        misses: after.misses - before.misses,
    };
    let lookups = server.hits + server.misses;
    Ok(ReplayReport {
        slide_id,
        viewports: trace.records.len(),
        requests: samples.len() + errors.len(),
        errors: errors.len(),
        bytes: samples.iter().map(|s| s.bytes).sum(),
        wall_ms,
        latency_ms: Percentiles::of(&all),
        cached_latency_ms: Percentiles::of(&cached),
        client: client_counts,
        server,
        hit_rate: if lookups == 0 {
            0.0
        } else {
            server.hits as f64 / lookups as f64
        },
        reconciled: client_counts == server && errors.is_empty(),
    })
}

fn fmt_ms(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2} ms")).unwrap_or_else(|| "-".into())
}

impl ReplayReport {
    pub fn to_text(&self) -> String {
        format!(
            "slide            {}\n\
             viewports        {}\n\
             tile requests    {} ({} failed)\n\
             bytes            {}\n\
             wall time        {:.1} ms\n\
             latency          p50 {}  p95 {}  p99 {}\n\
             cached latency   p50 {}  p95 {}  p99 {}  (n={})\n\
             hit rate         {:.1}% (server: {} hits, {} misses)\n\
             reconciled       {} (client: {} hits, {} misses)\n",
            self.slide_id,
            self.viewports,
            self.requests,
            self.errors,
            self.bytes,
            self.wall_ms,
            fmt_ms(self.latency_ms.p50),
            fmt_ms(self.latency_ms.p95),
            fmt_ms(self.latency_ms.p99),
            fmt_ms(self.cached_latency_ms.p50),
            fmt_ms(self.cached_latency_ms.p95),
            fmt_ms(self.cached_latency_ms.p99),
            self.cached_latency_ms.samples,
            self.hit_rate * 100.0,
            self.server.hits,
            self.server.misses,
            if self.reconciled { "yes" } else { "NO" },
            self.client.hits,
            self.client.misses,
        )
    }
}
