//! The session state machine.
//!
//! Operations on one session are serialized by a per-session lock that is
//! acquired without waiting: a second operation while a reply is still
//! streaming fails with [`EngineError::Busy`]. Clinician turns are stored
//! before any provider call, and a patient turn is stored only once its
//! reply has completed, so a failed reply leaves the clinician turn waiting
//! for [`Engine::retry_reply`].

use std::sync::Arc;

use bytes::Bytes;
use dashmap::DashMap;
use futures::stream::BoxStream;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{mpsc, Mutex, OwnedMutexGuard};
use tokio_stream::wrappers::ReceiverStream;

use crate::cues::{self, CueEvent, CueMarkup, CueStreamParser, EmotionalCue};
use crate::feedback::{self, FeedbackConfig, FeedbackError, FeedbackReport};
use crate::persona::{self, PersonaLibrary, PersonaProfile};
use crate::providers::{
    AudioFormat, CallContext, ChatMessage, ChatParams, MeteredAudioStream, MeteredChatStream,
    ProviderError, Providers, StreamItem,
};
use crate::session::{Modality, Session, SessionStatus, Speaker, Turn};
use crate::store::{new_id, SessionStore, SessionSummary, StoreError, UserRecord};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("persona {0:?} not found")]
    PersonaNotFound(String),
    #[error("session {0:?} not found")]
    SessionNotFound(String),
    #[error("user {0:?} not found")]
    UserNotFound(String),
    #[error("session is finished")]
    SessionFinished,
    #[error("it is not the clinician's turn")]
    OutOfTurn,
    #[error("the patient has already replied to the last clinician turn")]
    NothingToRetry,
    #[error("another operation on this session is in progress")]
    Busy,
    #[error("session modality is {actual}, not {requested}")]
    ModalityMismatch {
        actual: Modality,
        requested: Modality,
    },
    #[error("nothing to analyze: the session has no clinician turns")]
    NothingToAnalyze,
    #[error("stage index {index} is out of range for {count} stage(s)")]
    InvalidStage { index: usize, count: usize },
    #[error("invalid request: {0}")]
    InvalidInput(String),
    #[error("unsupported media type {0:?}")]
    UnsupportedMediaType(String),
    #[error(transparent)]
    Provider(ProviderError),
    #[error("feedback response could not be parsed after {attempts} attempt(s)")]
    FeedbackUnparseable { raw_response: String, attempts: u32 },
    #[error(transparent)]
    Store(StoreError),
}

impl EngineError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EngineError::Provider(e) => e.is_retryable(),
            EngineError::Busy | EngineError::FeedbackUnparseable { .. } => true,
            _ => false,
        }
    }
}

impl From<ProviderError> for EngineError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::InvalidInput(m) | ProviderError::CorruptAudio(m) => {
                EngineError::InvalidInput(m)
            }
            ProviderError::UnsupportedMediaType(t) => EngineError::UnsupportedMediaType(t),
            other => EngineError::Provider(other),
        }
    }
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound {
                kind: "session",
                id,
            } => EngineError::SessionNotFound(id),
            StoreError::UnknownUser(id) => EngineError::UserNotFound(id),
            StoreError::InvalidId(id) => EngineError::InvalidInput(format!("malformed id {id:?}")),
            other => EngineError::Store(other),
        }
    }
}

impl From<FeedbackError> for EngineError {
    fn from(e: FeedbackError) -> Self {
        match e {
            FeedbackError::NothingToAnalyze => EngineError::NothingToAnalyze,
            FeedbackError::Provider(p) => EngineError::Provider(p),
            FeedbackError::Unparseable {
                raw_response,
                attempts,
            } => EngineError::FeedbackUnparseable {
                raw_response,
                attempts,
            },
        }
    }
}

/// Result of a completed reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub session_id: String,
    pub clinician_index: usize,
    pub patient_index: usize,
    pub turn_count: usize,
    /// Patient speech, for text sessions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<EmotionalCue>,
    /// Usage record ids for the calls that produced the reply.
    pub usage: Vec<String>,
}

/// One event of a streamed patient reply. A stream ends with exactly one
/// `Done` or `Error`.
#[derive(Debug)]
pub enum TurnEvent {
    Cue(String),
    Text(String),
    Audio(Bytes),
    Done(TurnSummary),
    Error(EngineError),
}

pub type TurnEventStream = BoxStream<'static, TurnEvent>;

/// A reply being produced in the background.
pub struct Reply {
    /// What the clinician's audio was transcribed as (voice sessions).
    pub transcript: Option<String>,
    /// Media type of the `Audio` events (voice sessions).
    pub media_type: Option<String>,
    pub events: TurnEventStream,
}

impl std::fmt::Debug for Reply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reply")
            .field("transcript", &self.transcript)
            .field("media_type", &self.media_type)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub voice: String,
    pub silence_placeholder: String,
    pub chat_params: ChatParams,
    pub feedback: FeedbackConfig,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            voice: "alloy".into(),
            silence_placeholder: "\u{2026}".into(),
            chat_params: ChatParams::default(),
            feedback: FeedbackConfig::default(),
        }
    }
}

struct Inner {
    library: Arc<PersonaLibrary>,
    store: Arc<dyn SessionStore>,
    providers: Providers,
    options: EngineOptions,
    locks: DashMap<String, Arc<Mutex<()>>>,
}

/// Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("personas", &self.inner.library.len())
            .field("providers", &self.inner.providers)
            .finish_non_exhaustive()
    }
}

const EVENT_BUFFER: usize = 64;

/// Chat history for the patient model: system prompt, then every turn's raw
/// text, clinician as user and patient as assistant.
pub fn assemble_context(
    persona: &PersonaProfile,
    session: &Session,
) -> Result<Vec<ChatMessage>, EngineError> {
    let system =
        persona::render_patient_system_prompt(persona, session.stage_index).map_err(|_| {
            EngineError::InvalidStage {
                index: session.stage_index,
                count: persona.stages.len(),
            }
        })?;
    let mut messages = Vec::with_capacity(session.turns.len() + 1);
    messages.push(ChatMessage::system(system));
    for turn in &session.turns {
        messages.push(match turn.role {
            Speaker::Clinician => ChatMessage::user(turn.raw_text.clone()),
            Speaker::Patient => ChatMessage::assistant(turn.raw_text.clone()),
        });
    }
    Ok(messages)
}

impl Engine {
    pub fn new(
        library: Arc<PersonaLibrary>,
        store: Arc<dyn SessionStore>,
        providers: Providers,
        options: EngineOptions,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                library,
                store,
                providers,
                options,
                locks: DashMap::new(),
            }),
        }
    }

    pub fn library(&self) -> &PersonaLibrary {
        &self.inner.library
    }

    pub fn store(&self) -> &Arc<dyn SessionStore> {
        &self.inner.store
    }

    pub fn providers(&self) -> &Providers {
        &self.inner.providers
    }

    pub fn options(&self) -> &EngineOptions {
        &self.inner.options
    }

    fn try_lock(&self, session_id: &str) -> Result<OwnedMutexGuard<()>, EngineError> {
        let lock = self
            .inner
            .locks
            .entry(session_id.to_string())
            .or_default()
            .clone();
        lock.try_lock_owned().map_err(|_| EngineError::Busy)
    }

    fn persona(&self, id: &str) -> Result<&PersonaProfile, EngineError> {
        self.inner
            .library
            .get(id)
            .ok_or_else(|| EngineError::PersonaNotFound(id.to_string()))
    }

    pub fn create_user(&self) -> Result<UserRecord, EngineError> {
        Ok(self.inner.store.create_user()?)
    }

    pub fn start_session(
        &self,
        user_id: &str,
        persona_id: &str,
        modality: Modality,
    ) -> Result<Session, EngineError> {
        self.inner.store.get_user(user_id)?;
        let persona = self.persona(persona_id)?;
        let session = Session {
            id: new_id(),
            user_id: user_id.to_string(),
            persona_id: persona.id.clone(),
            modality,
            created_at: crate::now(),
            turns: Vec::new(),
            stage_index: persona.initial_stage,
            status: SessionStatus::Active,
            feedback: None,
        };
        self.inner.store.save_session(&session)?;
        Ok(session)
    }

    pub fn get_session(&self, session_id: &str) -> Result<Session, EngineError> {
        Ok(self.inner.store.load_session(session_id)?)
    }

    pub fn list_sessions(&self, user_id: &str) -> Result<Vec<SessionSummary>, EngineError> {
        Ok(self
            .inner
            .store
            .list_sessions(user_id)?
            .iter()
            .map(|s| SessionSummary::new(s, &self.inner.library))
            .collect())
    }

    pub fn summarize(&self, session: &Session) -> SessionSummary {
        SessionSummary::new(session, &self.inner.library)
    }

    pub fn set_stage(&self, session_id: &str, stage_index: usize) -> Result<Session, EngineError> {
        let _guard = self.try_lock(session_id)?;
        let mut session = self.inner.store.load_session(session_id)?;
        if !session.is_active() {
            return Err(EngineError::SessionFinished);
        }
        let count = self.persona(&session.persona_id)?.stages.len();
        if stage_index >= count {
            return Err(EngineError::InvalidStage {
                index: stage_index,
                count,
            });
        }
        session.stage_index = stage_index;
        self.inner.store.save_session(&session)?;
        Ok(session)
    }

    /// Load an active session that expects `modality`, under its lock.
    fn open_for_turn(
        &self,
        session_id: &str,
        modality: Modality,
    ) -> Result<(OwnedMutexGuard<()>, Session), EngineError> {
        let guard = self.try_lock(session_id)?;
        let session = self.inner.store.load_session(session_id)?;
        if !session.is_active() {
            return Err(EngineError::SessionFinished);
        }
        if session.modality != modality {
            return Err(EngineError::ModalityMismatch {
                actual: session.modality,
                requested: modality,
            });
        }
        Ok((guard, session))
    }

    /// Add a typed clinician turn and stream the patient's reply.
    pub async fn submit_text(&self, session_id: &str, text: &str) -> Result<Reply, EngineError> {
        let (guard, mut session) = self.open_for_turn(session_id, Modality::Text)?;
        if !session.awaiting_clinician() {
            return Err(EngineError::OutOfTurn);
        }
        let text = text.trim();
        if text.is_empty() {
            return Err(EngineError::InvalidInput("message text is empty".into()));
        }
        let index = session.turns.len();
        session
            .turns
            .push(Turn::clinician(index, text, crate::now()));
        self.inner.store.save_session(&session)?;
        self.reply_text(guard, session, Vec::new()).await
    }

    /// Transcribe a spoken clinician turn, then stream the spoken reply.
    pub async fn submit_voice(
        &self,
        session_id: &str,
        audio: &[u8],
        media_type: &str,
    ) -> Result<Reply, EngineError> {
        let (guard, mut session) = self.open_for_turn(session_id, Modality::Voice)?;
        if !session.awaiting_clinician() {
            return Err(EngineError::OutOfTurn);
        }
        let format = AudioFormat::from_media_type(media_type)?;
        if audio.is_empty() {
            return Err(EngineError::InvalidInput("audio is empty".into()));
        }
        let started = crate::now();
        let index = session.turns.len();
        let audio_ref =
            self.inner
                .store
                .put_audio(&session.id, index, audio, format.media_type())?;
        let ctx = CallContext::session(&session.id);
        let (transcript, record) = self
            .inner
            .providers
            .transcribe(&ctx, audio, format.media_type())
            .await?;
        let transcript = transcript.trim().to_string();
        if transcript.is_empty() {
            return Err(EngineError::InvalidInput("no speech was recognized".into()));
        }
        let mut turn = Turn::clinician(index, transcript.clone(), started);
        turn.completed_at = crate::now();
        turn.audio_ref = Some(audio_ref);
        turn.usage.push(record.id);
        session.turns.push(turn);
        self.inner.store.save_session(&session)?;
        let mut reply = self.reply_voice(guard, session).await?;
        reply.transcript = Some(transcript);
        Ok(reply)
    }

    /// Produce the patient reply to a clinician turn whose reply failed.
    pub async fn retry_reply(&self, session_id: &str) -> Result<Reply, EngineError> {
        let guard = self.try_lock(session_id)?;
        let session = self.inner.store.load_session(session_id)?;
        if !session.is_active() {
            return Err(EngineError::SessionFinished);
        }
        if session.awaiting_clinician() {
            return Err(EngineError::NothingToRetry);
        }
        match session.modality {
            Modality::Text => self.reply_text(guard, session, Vec::new()).await,
            Modality::Voice => {
                let transcript = session.turns.last().map(|t| t.text.clone());
                let mut reply = self.reply_voice(guard, session).await?;
                reply.transcript = transcript;
                Ok(reply)
            }
        }
    }

    async fn open_chat(&self, session: &Session) -> Result<MeteredChatStream, EngineError> {
        let persona = self.persona(&session.persona_id)?;
        let messages = assemble_context(persona, session)?;
        Ok(self
            .inner
            .providers
            .chat_stream(
                &CallContext::session(&session.id),
                &messages,
                &self.inner.options.chat_params,
            )
            .await?)
    }

    async fn reply_text(
        &self,
        guard: OwnedMutexGuard<()>,
        session: Session,
        usage: Vec<String>,
    ) -> Result<Reply, EngineError> {
        let stream = self.open_chat(&session).await?;
        let (tx, rx) = mpsc::channel(EVENT_BUFFER);
        let store = self.inner.store.clone();
        tokio::spawn(run_text_reply(guard, store, session, stream, usage, tx));
        Ok(Reply {
            transcript: None,
            media_type: None,
            events: ReceiverStream::new(rx).boxed(),
        })
    }

    async fn reply_voice(
        &self,
        guard: OwnedMutexGuard<()>,
        session: Session,
    ) -> Result<Reply, EngineError> {
        let started = crate::now();
        let persona = self.persona(&session.persona_id)?;
        let messages = assemble_context(persona, &session)?;
        let ctx = CallContext::session(&session.id);
        let providers = &self.inner.providers;
        let (raw, chat_record) = providers
            .chat_complete(&ctx, &messages, &self.inner.options.chat_params)
            .await?;
        let mut speech = cues::strip_cues_for_tts(&raw);
        if speech.is_empty() {
            speech = self.inner.options.silence_placeholder.clone();
        }
        let (media_type, audio) = providers
            .synthesize_stream(&ctx, &speech, &self.inner.options.voice)
            .await?;
        let (tx, rx) = mpsc::channel(EVENT_BUFFER);
        let pending = PendingPatientTurn {
            raw,
            started,
            usage: vec![chat_record.id],
        };
        tokio::spawn(run_voice_reply(
            guard,
            self.inner.store.clone(),
            session,
            pending,
            media_type.clone(),
            audio,
            tx,
        ));
        Ok(Reply {
            transcript: None,
            media_type: Some(media_type),
            events: ReceiverStream::new(rx).boxed(),
        })
    }

    /// End the session and attach feedback. Calling again returns the
    /// stored report without another model call.
    pub async fn finish_session(&self, session_id: &str) -> Result<FeedbackReport, EngineError> {
        let _guard = self.try_lock(session_id)?;
        let mut session = self.inner.store.load_session(session_id)?;
        if let Some(report) = &session.feedback {
            return Ok(report.clone());
        }
        if session.clinician_turns().next().is_none() {
            return Err(EngineError::NothingToAnalyze);
        }
        let report = feedback::generate_feedback(
            &self.inner.providers,
            Some(&session.id),
            &session.turns,
            &self.inner.options.feedback,
        )
        .await?;
        session.status = SessionStatus::Finished;
        session.feedback = Some(report.clone());
        self.inner.store.save_session(&session)?;
        Ok(report)
    }
}

struct PendingPatientTurn {
    raw: String,
    started: chrono::DateTime<chrono::Utc>,
    usage: Vec<String>,
}

/// Send without caring whether the client is still listening: the reply is
/// completed and stored either way.
async fn emit(tx: &mpsc::Sender<TurnEvent>, event: TurnEvent) {
    let _ = tx.send(event).await;
}

fn cue_event(e: CueEvent) -> TurnEvent {
    match e {
        CueEvent::Cue(c) => TurnEvent::Cue(c),
        CueEvent::Text(t) => TurnEvent::Text(t),
    }
}

async fn run_text_reply(
    guard: OwnedMutexGuard<()>,
    store: Arc<dyn SessionStore>,
    mut session: Session,
    mut stream: MeteredChatStream,
    mut usage: Vec<String>,
    tx: mpsc::Sender<TurnEvent>,
) {
    let started = crate::now();
    let mut parser = CueStreamParser::new(CueMarkup::Asterisk);
    while let Some(item) = stream.next().await {
        match item {
            Ok(StreamItem::Chunk(chunk)) => {
                for e in parser.push(&chunk) {
                    emit(&tx, cue_event(e)).await;
                }
            }
            Ok(StreamItem::Done(record)) => {
                let raw = parser.raw().to_string();
                let (rest, _) = parser.finish();
                for e in rest {
                    emit(&tx, cue_event(e)).await;
                }
                usage.push(record.id);
                let index = session.turns.len();
                let mut turn = Turn::patient(index, raw, started, crate::now());
                turn.usage = usage;
                let summary = TurnSummary {
                    session_id: session.id.clone(),
                    clinician_index: index - 1,
                    patient_index: index,
                    turn_count: index + 1,
                    text: Some(turn.text.clone()),
                    cues: turn.cues.clone(),
                    usage: turn.usage.clone(),
                };
                session.turns.push(turn);
                let event = match store.save_session(&session) {
                    Ok(()) => TurnEvent::Done(summary),
                    Err(e) => TurnEvent::Error(e.into()),
                };
                drop(guard);
                emit(&tx, event).await;
                return;
            }
            Err(e) => {
                tracing::warn!(session = %session.id, error = %e, "patient reply failed");
                drop(guard);
                emit(&tx, TurnEvent::Error(EngineError::Provider(e))).await;
                return;
            }
        }
    }
}

async fn run_voice_reply(
    guard: OwnedMutexGuard<()>,
    store: Arc<dyn SessionStore>,
    mut session: Session,
    mut pending: PendingPatientTurn,
    media_type: String,
    mut audio: MeteredAudioStream,
    tx: mpsc::Sender<TurnEvent>,
) {
    let mut bytes = Vec::new();
    while let Some(item) = audio.next().await {
        match item {
            Ok(StreamItem::Chunk(chunk)) => {
                bytes.extend_from_slice(&chunk);
                emit(&tx, TurnEvent::Audio(chunk)).await;
            }
            Ok(StreamItem::Done(record)) => {
                pending.usage.push(record.id);
                let index = session.turns.len();
                let result = store
                    .put_audio(&session.id, index, &bytes, &media_type)
                    .and_then(|audio_ref| {
                        let mut turn = Turn::patient(
                            index,
                            pending.raw.clone(),
                            pending.started,
                            crate::now(),
                        );
                        turn.audio_ref = Some(audio_ref);
                        turn.usage = pending.usage.clone();
                        session.turns.push(turn);
                        store.save_session(&session)
                    });
                let event = match result {
                    Ok(()) => TurnEvent::Done(TurnSummary {
                        session_id: session.id.clone(),
                        clinician_index: index - 1,
                        patient_index: index,
                        turn_count: index + 1,
                        text: None,
                        cues: Vec::new(),
                        usage: pending.usage,
                    }),
                    Err(e) => TurnEvent::Error(e.into()),
                };
                drop(guard);
                emit(&tx, event).await;
                return;
            }
            Err(e) => {
                tracing::warn!(session = %session.id, error = %e, "spoken reply failed");
                drop(guard);
                emit(&tx, TurnEvent::Error(EngineError::Provider(e))).await;
                return;
            }
        }
    }
}

/// Drain a reply, returning its text and the terminal event.
pub async fn collect_reply(
    mut events: TurnEventStream,
) -> (
    String,
    Vec<String>,
    Vec<u8>,
    Result<TurnSummary, EngineError>,
) {
    let mut text = String::new();
    let mut cues = Vec::new();
    let mut audio = Vec::new();
    while let Some(e) = events.next().await {
        match e {
            TurnEvent::Text(t) => text.push_str(&t),
            TurnEvent::Cue(c) => cues.push(c),
            TurnEvent::Audio(b) => audio.extend_from_slice(&b),
            TurnEvent::Done(s) => return (text, cues, audio, Ok(s)),
            TurnEvent::Error(e) => return (text, cues, audio, Err(e)),
        }
    }
    (
        text,
        cues,
        audio,
        Err(EngineError::Provider(ProviderError::Transport(
            "reply ended without a result".into(),
        ))),
    )
}
