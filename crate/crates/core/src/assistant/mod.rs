//! Conversational assistant gateway.
//!
//! Sessions hold an append-only list of turns and optionally a bound slide.
//! Each question is sent together with a deterministic context document:
//! a fixed preamble, the slide's metadata, the current viewport and its
//! physical size, and the most recent turns.

pub mod backend;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use serde::Serialize;
use tokio::sync::{Mutex, Semaphore};

pub use backend::{
    ApiKey, BackendConfig, BackendKind, ChatBackend, ChatMessage, EchoBackend, HttpBackend, RecordedBackend,
    RecordedExchange, Role,
};

use crate::error::{Error, ErrorCode, Result};
use crate::pyramid::{self, SlideMetadata, Viewport};
use crate::store::PyramidStore;

pub const PREAMBLE: &str = "You are a workflow co-pilot inside a whole-slide image viewer. \
You provide decision support, not primary diagnosis: help with information retrieval about \
visual features, scoring protocols and differential diagnoses, and say so when a question \
needs a pathologist's judgement. The user's current slide and field of view are described \
below; assume questions refer to them unless stated otherwise.";

pub const ADVISORY_FOOTER: &str = "\n\n---\nDecision support only, not a primary diagnosis. \
Verify against the slide and current guidelines.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewportContext {
    pub slide_id: String,
    pub viewport: Viewport,
    pub downsample: u64,
    /// Physical width and height in microns, when the slide is calibrated.
    pub extent_um: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TurnStatus {
    Completed,
    Failed {
        code: ErrorCode,
        message: String,
        retryable: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatTurn {
    pub index: usize,
    pub user_text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub viewport_context: Option<ViewportContext>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assistant_text: Option<String>,
    #[serde(flatten)]
    pub status: TurnStatus,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatSession {
    pub session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slide: Option<SlideMetadata>,
    pub turns: Vec<ChatTurn>,
    pub created_at_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptDocument {
    pub messages: Vec<ChatMessage>,
}

/// "5.0 mm" from 1 mm up, whole microns below.
pub fn format_length_um(um: f64) -> String {
    if um >= 1000.0 {
        format!("{:.1} mm", um / 1000.0)
    } else {
        format!("{um:.0} µm")
    }
}

fn viewport_context(meta: &SlideMetadata, vp: &Viewport) -> Result<ViewportContext> {
    let spec = pyramid::level_spec(meta, vp.level)?;
    let clamped = vp.clamp_to(&spec)?;
    let extent_um = pyramid::viewport_physical_extent(meta, &clamped).ok();
    Ok(ViewportContext {
        slide_id: meta.slide_id.clone(),
        viewport: clamped,
        downsample: spec.downsample,
        extent_um,
    })
}

fn describe_viewport(out: &mut String, meta: &SlideMetadata, ctx: &ViewportContext) {
    let v = ctx.viewport;
    let _ = write!(
        out,
        "\nViewport: level {} of {} (downsample {}), x={} y={} width={} height={} px",
        v.level, meta.max_level, ctx.downsample, v.x, v.y, v.width, v.height
    );
    match ctx.extent_um {
        Some((w, h)) => {
            let _ = write!(
                out,
                "; field of view ≈ {} × {}",
                format_length_um(w),
                format_length_um(h)
            );
        }
        None => out.push_str("; field of view unknown (no microns-per-pixel calibration)"),
    }
}

/// Deterministic prompt for `session`: system context followed by the last
/// `max_turns` completed turns. A viewport is ignored when no slide is bound.
pub fn build_context(session: &ChatSession, viewport: Option<&Viewport>, max_turns: usize) -> PromptDocument {
    let mut system = String::from(PREAMBLE);
    match &session.slide {
        Some(meta) => {
            let _ = write!(
                system,
                "\n\nSlide: {} ({} × {} px at full resolution, {} pyramid levels, tile size {})",
                meta.slide_id,
                meta.width_px,
                meta.height_px,
                meta.max_level + 1,
                meta.tile_size
            );
            match meta.mpp {
                Some(mpp) => {
                    let _ = write!(system, "\nResolution: {mpp} µm per pixel at full resolution");
                }
                None => system.push_str("\nResolution: uncalibrated"),
            }
            if let Some(ctx) = viewport.and_then(|vp| viewport_context(meta, vp).ok()) {
                describe_viewport(&mut system, meta, &ctx);
            }
        }
        None => system.push_str("\n\nNo slide is bound to this session."),
    }
    let mut messages = vec![ChatMessage::new(Role::System, system)];
    let completed: Vec<&ChatTurn> = session
        .turns
        .iter()
        .filter(|t| t.status == TurnStatus::Completed)
        .collect();
    let skip = completed.len().saturating_sub(max_turns);
    for turn in &completed[skip..] {
        messages.push(ChatMessage::new(Role::User, turn.user_text.clone()));
        if let Some(text) = &turn.assistant_text {
            messages.push(ChatMessage::new(Role::Assistant, text.clone()));
        }
    }
    PromptDocument { messages }
}

pub struct AssistantGateway {
    backend: Arc<dyn ChatBackend>,
    store: Arc<PyramidStore>,
    timeout: Duration,
    max_context_turns: usize,
    sessions: RwLock<HashMap<String, Arc<Mutex<ChatSession>>>>,
    in_flight: Semaphore,
}

impl AssistantGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, store: Arc<PyramidStore>, cfg: &BackendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AssistantGateway {
            backend,
            store,
            timeout: cfg.timeout(),
            max_context_turns: cfg.max_context_turns,
            sessions: RwLock::new(HashMap::new()),
            in_flight: Semaphore::new(cfg.max_in_flight),
        })
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    pub fn create_session(&self, slide_id: Option<&str>) -> Result<String> {
        let slide = match slide_id {
            Some(id) => Some(self.store.open_slide(id)?.meta.clone()),
            None => None,
        };
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let session = ChatSession {
            session_id: session_id.clone(),
            slide,
            turns: Vec::new(),
            created_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        self.sessions
            .write()
            .insert(session_id.clone(), Arc::new(Mutex::new(session)));
        Ok(session_id)
    }

    fn session(&self, session_id: &str) -> Result<Arc<Mutex<ChatSession>>> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| Error::SessionNotFound(session_id.to_string()))
    }

    /// Snapshot of a session. Waits for an in-progress ask to finish.
    pub async fn get_session(&self, session_id: &str) -> Result<ChatSession> {
        let s = self.session(session_id)?;
        let guard = s.lock().await;
        Ok(guard.clone())
    }

    pub async fn context_for(&self, session_id: &str, viewport: Option<&Viewport>) -> Result<PromptDocument> {
        let s = self.session(session_id)?;
        let guard = s.lock().await;
        Ok(build_context(&guard, viewport, self.max_context_turns))
    }

    /// Sends a question and records the turn. Concurrent asks on one
    /// session run one after another. On backend failure the turn is kept
    /// with a failed status and the error is returned.
    pub async fn ask(&self, session_id: &str, user_text: &str, viewport: Option<Viewport>) -> Result<ChatTurn> {
        let user_text = user_text.trim();
        if user_text.is_empty() {
            return Err(Error::Invalid("question text is empty".into()));
        }
        let s = self.session(session_id)?;
        let mut session = s.lock().await;
        let viewport_context = match (&viewport, &session.slide) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Invalid(
                    "viewport given but the session has no slide bound".into(),
                ))
            }
            (Some(vp), Some(meta)) => Some(viewport_context(meta, vp)?),
        };
        let mut prompt = build_context(&session, viewport.as_ref(), self.max_context_turns);
        prompt
            .messages
            .push(ChatMessage::new(Role::User, user_text.to_string()));

        let started = Instant::now();
        let outcome = {
            let _permit = self
                .in_flight
                .acquire()
                .await
                .map_err(|_| Error::Config("assistant gateway shut down".into()))?;
            match tokio::time::timeout(self.timeout, self.backend.complete(&prompt.messages)).await {
                Ok(r) => r,
                Err(_) => Err(Error::UpstreamTimeout {
                    after_ms: self.timeout.as_millis() as u64,
                }),
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let index = session.turns.len();
        let (turn, result) = match outcome {
            Ok(text) => {
                let turn = ChatTurn {
                    index,
                    user_text: user_text.to_string(),
                    viewport_context,
                    assistant_text: Some(format!("{text}{ADVISORY_FOOTER}")),
                    status: TurnStatus::Completed,
                    latency_ms,
                };
                (turn.clone(), Ok(turn))
            }
            Err(e) => {
                tracing::warn!(session = %session_id, backend = self.backend.name(), code = %e.code(), "assistant request failed");
                let turn = ChatTurn {
                    index,
                    user_text: user_text.to_string(),
                    viewport_context,
                    assistant_text: None,
                    status: TurnStatus::Failed {
                        code: e.code(),
                        message: e.to_string(),
                        retryable: e.is_retryable(),
                    },
                    latency_ms,
                };
                (turn, Err(e))
            }
        };
        session.turns.push(turn);
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::Rect;

    fn session_with(meta: Option<SlideMetadata>, turns: usize) -> ChatSession {
        ChatSession {
            session_id: "s".into(),
            slide: meta,
            turns: (0..turns)
                .map(|i| ChatTurn {
                    index: i,
                    user_text: format!("q{i}"),
                    viewport_context: None,
                    assistant_text: Some(format!("a{i}")),
                    status: TurnStatus::Completed,
                    latency_ms: 1,
                })
                .collect(),
            created_at_unix: 0,
        }
    }

    fn calibrated() -> SlideMetadata {
        SlideMetadata::new("slide-a", 100_000, 80_000, 256, Some(0.25)).unwrap()
    }

    #[test]
    fn empty_session_context() {
        let doc = build_context(&session_with(None, 0), None, 4);
        assert_eq!(doc.messages.len(), 1);
        assert!(doc.messages[0].content.starts_with(PREAMBLE));
        assert!(doc.messages[0]
            .content
            .contains("decision support, not primary diagnosis"));
        let doc = build_context(&session_with(Some(calibrated()), 0), None, 4);
        assert_eq!(doc.messages.len(), 1);
        assert!(doc.messages[0].content.contains("slide-a (100000 × 80000 px"));
        assert!(!doc.messages[0].content.contains("Viewport"));
    }

    #[test]
    fn five_millimetre_field_of_view() {
        let meta = calibrated();
        let vp = Rect::new(meta.max_level - 4, 0, 0, 1250, 1000);
        let doc = build_context(&session_with(Some(meta), 0), Some(&vp), 4);
        let sys = &doc.messages[0].content;
        assert!(sys.contains("field of view ≈ 5.0 mm × 4.0 mm"), "{sys}");
        assert!(sys.contains("downsample 16"));
    }

    #[test]
    fn truncates_to_last_turns() {
        let doc = build_context(&session_with(None, 10), None, 4);
        let users: Vec<_> = doc
            .messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect();
        assert_eq!(users, ["q6", "q7", "q8", "q9"]);
        assert_eq!(doc.messages.len(), 1 + 8);
        assert_eq!(build_context(&session_with(None, 3), None, 0).messages.len(), 1);
    }

    #[test]
    fn context_is_deterministic() {
        let s = session_with(Some(calibrated()), 5);
        let vp = Rect::new(12, 10, 20, 300, 200);
        assert_eq!(build_context(&s, Some(&vp), 3), build_context(&s, Some(&vp), 3));
    }

    #[test]
    fn lengths() {
        assert_eq!(format_length_um(5000.0), "5.0 mm");
        assert_eq!(format_length_um(250.0), "250 µm");
    }
}
