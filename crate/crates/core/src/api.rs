//! HTTP service. Endpoint shapes are documented in `docs/api.md`.

use std::convert::Infallible;
use std::future::Future;
use std::path::PathBuf;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use chrono::{DateTime, Utc};
use futures::StreamExt;
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::catch_panic::CatchPanicLayer;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::conversation::{Engine, EngineError, Reply, TurnEvent};
use crate::cues::EmotionalCue;
use crate::feedback::FeedbackReport;
use crate::persona::PersonaProfile;
use crate::session::{Modality, Session, SessionStatus, Speaker, Turn};

/// Response header carrying the clinician's transcribed speech,
/// percent-encoded UTF-8.
pub const TRANSCRIPT_HEADER: &str = "x-pal-transcript";
/// Largest accepted audio upload.
pub const MAX_UPLOAD_BYTES: usize = 25 * 1024 * 1024;

/// Every error code the service emits, with its HTTP status.
pub const ERROR_CODES: &[(&str, u16)] = &[
    ("invalid_request", 422),
    ("invalid_stage", 422),
    ("unsupported_media_type", 415),
    ("payload_too_large", 413),
    ("not_found", 404),
    ("method_not_allowed", 405),
    ("persona_not_found", 404),
    ("image_not_found", 404),
    ("session_not_found", 404),
    ("user_not_found", 404),
    ("audio_not_found", 404),
    ("session_finished", 409),
    ("out_of_turn", 409),
    ("nothing_to_retry", 409),
    ("session_busy", 409),
    ("modality_mismatch", 409),
    ("nothing_to_analyze", 409),
    ("provider_error", 502),
    ("feedback_unparseable", 502),
    ("internal", 500),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retryable: bool,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        let status = ERROR_CODES
            .iter()
            .find(|(c, _)| *c == code)
            .map(|(_, s)| StatusCode::from_u16(*s).expect("valid status"))
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                retryable: false,
            },
        }
    }

    fn retryable(mut self, retryable: bool) -> Self {
        self.body.retryable = retryable;
        self
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let retryable = e.is_retryable();
        let message = e.to_string();
        let code = match &e {
            EngineError::PersonaNotFound(_) => "persona_not_found",
            EngineError::SessionNotFound(_) => "session_not_found",
            EngineError::UserNotFound(_) => "user_not_found",
            EngineError::SessionFinished => "session_finished",
            EngineError::OutOfTurn => "out_of_turn",
            EngineError::NothingToRetry => "nothing_to_retry",
            EngineError::Busy => "session_busy",
            EngineError::ModalityMismatch { .. } => "modality_mismatch",
            EngineError::NothingToAnalyze => "nothing_to_analyze",
            EngineError::InvalidStage { .. } => "invalid_stage",
            EngineError::InvalidInput(_) => "invalid_request",
            EngineError::UnsupportedMediaType(_) => "unsupported_media_type",
            EngineError::Provider(_) => "provider_error",
            EngineError::FeedbackUnparseable { .. } => "feedback_unparseable",
            EngineError::Store(_) => {
                tracing::error!(error = %e, "storage failure");
                "internal"
            }
        };
        ApiError::new(code, message).retryable(retryable)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        match r {
            JsonRejection::MissingJsonContentType(_) => ApiError::new(
                "unsupported_media_type",
                "expected Content-Type: application/json",
            ),
            other if other.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                ApiError::new("payload_too_large", other.body_text())
            }
            other => ApiError::new("invalid_request", other.body_text()),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::new("invalid_request", r.body_text())
    }
}

/// JSON body extractor whose rejections are [`ApiError`]s.
struct ApiJson<T>(T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let Json(value) = Json::<T>::from_request(req, state).await?;
        Ok(ApiJson(value))
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone)]
struct AppState {
    engine: Engine,
}

/// Persona entry in `GET /personas`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSummary {
    pub id: String,
    pub display_name: String,
    pub age: i64,
    pub gender: String,
    pub image_url: Option<String>,
    pub setting: String,
    pub stages: Vec<String>,
}

impl PersonaSummary {
    pub fn new(p: &PersonaProfile) -> Self {
        Self {
            id: p.id.clone(),
            display_name: p.display_name.clone(),
            age: p.age,
            gender: p.gender.clone(),
            image_url: p
                .profile_image
                .as_ref()
                .map(|_| format!("/personas/{}/image", p.id)),
            setting: p.case.setting.clone(),
            stages: p.stages.iter().map(|s| s.name.clone()).collect(),
        }
    }
}

/// A turn as shown to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnView {
    pub index: usize,
    pub role: Speaker,
    /// Absent for patient turns of an active voice session.
    pub text: Option<String>,
    #[serde(default)]
    pub cues: Vec<EmotionalCue>,
    pub audio_url: Option<String>,
    pub started_at: DateTime<Utc>,
    pub completed_at: DateTime<Utc>,
}

/// A session as shown to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub user_id: String,
    pub persona_id: String,
    pub modality: Modality,
    pub created_at: DateTime<Utc>,
    pub stage_index: usize,
    pub status: SessionStatus,
    /// Patient speech is withheld while a voice session is active.
    pub transcript_hidden: bool,
    pub turns: Vec<TurnView>,
    pub feedback: Option<FeedbackReport>,
}

impl SessionView {
    pub fn new(s: &Session) -> Self {
        let hidden = s.modality == Modality::Voice && s.is_active();
        let turn = |t: &Turn| {
            let embargoed = hidden && t.role == Speaker::Patient;
            TurnView {
                index: t.index,
                role: t.role,
                text: (!embargoed).then(|| t.text.clone()),
                cues: if embargoed {
                    Vec::new()
                } else {
                    t.cues.clone()
                },
                audio_url: t
                    .audio_ref
                    .as_ref()
                    .map(|_| format!("/sessions/{}/turns/{}/audio", s.id, t.index)),
                started_at: t.started_at,
                completed_at: t.completed_at,
            }
        };
        Self {
            id: s.id.clone(),
            user_id: s.user_id.clone(),
            persona_id: s.persona_id.clone(),
            modality: s.modality,
            created_at: s.created_at,
            stage_index: s.stage_index,
            status: s.status,
            transcript_hidden: hidden,
            turns: s.turns.iter().map(turn).collect(),
            feedback: s.feedback.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    user_id: String,
    persona_id: String,
    modality: Modality,
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    user_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageBody {
    stage_index: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageBody {
    text: String,
}

/// Build the router. `static_dir`, when set, is served for paths that match
/// no endpoint.
pub fn router(engine: Engine, static_dir: Option<PathBuf>) -> Router {
    let state = AppState { engine };
    let api = Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/users", post(create_user))
        .route("/personas", get(list_personas))
        .route("/personas/{id}", get(get_persona))
        .route("/personas/{id}/image", get(persona_image))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stage", post(set_stage))
        .route("/sessions/{id}/message", post(send_message))
        .route("/sessions/{id}/audio", post(send_audio))
        .route("/sessions/{id}/retry", post(retry_reply))
        .route("/sessions/{id}/finish", post(finish_session))
        .route("/sessions/{id}/turns/{index}/audio", get(turn_audio))
        .method_not_allowed_fallback(|| async {
            ApiError::new("method_not_allowed", "method not allowed for this path")
        })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    let api = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).fallback(get(not_found))),
        None => api.fallback(not_found),
    };
    api.layer(CatchPanicLayer::custom(
        |_: Box<dyn std::any::Any + Send>| {
            ApiError::new("internal", "internal error").into_response()
        },
    ))
    .layer(
        CorsLayer::new()
            .allow_origin(Any)
            .allow_methods(Any)
            .allow_headers(Any)
            .expose_headers([HeaderName::from_static(TRANSCRIPT_HEADER)]),
    )
}

async fn not_found() -> ApiError {
    ApiError::new("not_found", "no such endpoint")
}

/// Serve `app` on `listener` until `shutdown` resolves, then let open
/// streams finish.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}

async fn create_user(State(st): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(st.engine.create_user()?)))
}

async fn list_personas(State(st): State<AppState>) -> Json<Vec<PersonaSummary>> {
    Json(
        st.engine
            .library()
            .personas()
            .iter()
            .map(PersonaSummary::new)
            .collect(),
    )
}

async fn get_persona(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<PersonaProfile>> {
    st.engine
        .library()
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| EngineError::PersonaNotFound(id).into())
}

fn image_media_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn persona_image(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    if st.engine.library().get(&id).is_none() {
        return Err(EngineError::PersonaNotFound(id).into());
    }
    let path =
        st.engine.library().image_path(&id).ok_or_else(|| {
            ApiError::new("image_not_found", format!("persona {id:?} has no image"))
        })?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| {
        ApiError::new(
            "image_not_found",
            format!("image for persona {id:?} is missing"),
        )
    })?;
    Ok(([(header::CONTENT_TYPE, image_media_type(&path))], bytes).into_response())
}

async fn create_session(
    State(st): State<AppState>,
    ApiJson(body): ApiJson<NewSession>,
) -> ApiResult<impl IntoResponse> {
    let session = st
        .engine
        .start_session(&body.user_id, &body.persona_id, body.modality)?;
    Ok((StatusCode::CREATED, Json(st.engine.summarize(&session))))
}

async fn list_sessions(
    State(st): State<AppState>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = query?;
    Ok(Json(st.engine.list_sessions(&q.user_id)?))
}

async fn get_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    Ok(Json(SessionView::new(&st.engine.get_session(&id)?)))
}

async fn set_stage(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<StageBody>,
) -> ApiResult<impl IntoResponse> {
    let session = st.engine.set_stage(&id, body.stage_index)?;
    Ok(Json(st.engine.summarize(&session)))
}

fn sse_event(event: TurnEvent) -> Option<Event> {
    let e = match event {
        TurnEvent::Cue(action) => Event::default()
            .event("cue")
            .json_data(json!({ "action": action })),
        TurnEvent::Text(text) => Event::default()
            .event("text")
            .json_data(json!({ "text": text })),
        TurnEvent::Audio(_) => return None,
        TurnEvent::Done(summary) => Event::default().event("done").json_data(summary),
        TurnEvent::Error(e) => Event::default()
            .event("error")
            .json_data(ApiError::from(e).body),
    };
    Some(e.expect("event payloads serialize"))
}

fn sse_response(reply: Reply) -> Response {
    let stream = reply
        .events
        .filter_map(|e| async move { sse_event(e).map(Ok::<_, Infallible>) });
    Sse::new(stream)
        .keep_alive(KeepAlive::default())
        .into_response()
}

fn audio_response(reply: Reply) -> Response {
    let media_type = reply
        .media_type
        .clone()
        .unwrap_or_else(|| "application/octet-stream".into());
    // An error ends the body early; the client sees a truncated transfer.
    let body = reply.events.filter_map(|e| async move {
        match e {
            TurnEvent::Audio(b) => Some(Ok::<Bytes, std::io::Error>(b)),
            TurnEvent::Error(e) => Some(Err(std::io::Error::other(e.to_string()))),
            _ => None,
        }
    });
    let mut resp = axum::body::Body::from_stream(body).into_response();
    let headers = resp.headers_mut();
    if let Ok(v) = HeaderValue::from_str(&media_type) {
        headers.insert(header::CONTENT_TYPE, v);
    }
    headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    if let Some(t) = &reply.transcript {
        let encoded = utf8_percent_encode(t, NON_ALPHANUMERIC).to_string();
        headers.insert(
            HeaderName::from_static(TRANSCRIPT_HEADER),
            HeaderValue::from_str(&encoded).expect("percent-encoded text is a valid header"),
        );
    }
    resp
}

async fn send_message(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<MessageBody>,
) -> ApiResult<Response> {
    Ok(sse_response(st.engine.submit_text(&id, &body.text).await?))
}

async fn send_audio(
    State(st): State<AppState>,
    Path(id): Path<String>,
    multipart: Result<Multipart, axum::extract::multipart::MultipartRejection>,
) -> ApiResult<Response> {
    let mut multipart = multipart.map_err(|r| {
        ApiError::new(
            "unsupported_media_type",
            format!("expected a multipart/form-data upload: {}", r.body_text()),
        )
    })?;
    // Check session state before reading the upload.
    let session = st.engine.get_session(&id)?;
    if session.modality != Modality::Voice {
        return Err(EngineError::ModalityMismatch {
            actual: session.modality,
            requested: Modality::Voice,
        }
        .into());
    }
    let mut upload = None;
    while let Some(field) = multipart.next_field().await.map_err(multipart_error)? {
        if field.name() == Some("audio") || (upload.is_none() && field.file_name().is_some()) {
            let media_type = field
                .content_type()
                .unwrap_or("application/octet-stream")
                .to_string();
            let bytes = field.bytes().await.map_err(multipart_error)?;
            upload = Some((bytes, media_type));
        }
    }
    let (bytes, media_type) = upload
        .ok_or_else(|| ApiError::new("invalid_request", "multipart body has no \"audio\" part"))?;
    Ok(audio_response(
        st.engine.submit_voice(&id, &bytes, &media_type).await?,
    ))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new("payload_too_large", e.body_text())
    } else {
        ApiError::new("invalid_request", e.body_text())
    }
}

async fn retry_reply(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let reply = st.engine.retry_reply(&id).await?;
    Ok(if reply.media_type.is_some() {
        audio_response(reply)
    } else {
        sse_response(reply)
    })
}

async fn finish_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<FeedbackReport>> {
    Ok(Json(st.engine.finish_session(&id).await?))
}

async fn turn_audio(
    State(st): State<AppState>,
    Path((id, index)): Path<(String, String)>,
) -> ApiResult<Response> {
    let index: usize = index.parse().map_err(|_| {
        ApiError::new(
            "invalid_request",
            format!("turn index {index:?} is not a number"),
        )
    })?;
    let session = st.engine.get_session(&id)?;
    let audio_ref = session
        .turns
        .get(index)
        .and_then(|t| t.audio_ref.clone())
        .ok_or_else(|| ApiError::new("audio_not_found", format!("turn {index} has no audio")))?;
    let (bytes, media_type) = st
        .engine
        .store()
        .get_audio(&audio_ref)
        .map_err(|e| ApiError::new("audio_not_found", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, media_type)], bytes).into_response())
}
