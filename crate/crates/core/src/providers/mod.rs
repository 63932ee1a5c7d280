//! Chat, speech-to-text and text-to-speech adapters behind one metered front.
//!
//! Adapters implement [`ChatProvider`], [`SttProvider`] and [`TtsProvider`].
//! Callers go through [`Providers`], which checks inputs, prices every call
//! and writes exactly one [`UsageRecord`] per adapter invocation, whether it
//! succeeds, fails or is abandoned mid-stream.

pub mod audio;
pub mod mock;
pub mod remote;
pub mod usage;

use std::fmt;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::stream::{BoxStream, Stream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use audio::AudioFormat;
pub use usage::{CallKind, Quantities, Rates, UsageRecord, UsageSink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChatParams {
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
}

/// Token counts as reported by a provider, when it reports them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReportedTokens {
    pub input: Option<u64>,
    pub output: Option<u64>,
}

/// What a chat adapter stream yields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatEvent {
    Delta(String),
    Usage(ReportedTokens),
}

pub type ChatEventStream = BoxStream<'static, Result<ChatEvent, ProviderError>>;
pub type AudioByteStream = BoxStream<'static, Result<Bytes, ProviderError>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatCompletion {
    pub text: String,
    pub tokens: ReportedTokens,
}

/// Synthesized audio: the media type and a stream of its bytes.
pub struct AudioOutput {
    pub media_type: String,
    pub stream: AudioByteStream,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported media type {0:?}")]
    UnsupportedMediaType(String),
    #[error("audio could not be decoded: {0}")]
    CorruptAudio(String),
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("provider not configured: {0}")]
    NotConfigured(String),
}

impl ProviderError {
    /// Whether repeating the same call may succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Timeout(_) | ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => {
                *status == 408 || *status == 429 || *status >= 500
            }
            ProviderError::InvalidInput(_)
            | ProviderError::UnsupportedMediaType(_)
            | ProviderError::CorruptAudio(_)
            | ProviderError::Protocol(_)
            | ProviderError::NotConfigured(_) => false,
        }
    }
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;

    async fn chat_stream(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<ChatEventStream, ProviderError>;

    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<ChatCompletion, ProviderError>;
}

#[async_trait]
pub trait SttProvider: Send + Sync {
    fn model_id(&self) -> &str;

    async fn transcribe(&self, audio: &[u8], format: AudioFormat) -> Result<String, ProviderError>;
}

#[async_trait]
pub trait TtsProvider: Send + Sync {
    fn model_id(&self) -> &str;

    async fn synthesize_stream(
        &self,
        text: &str,
        voice: &str,
    ) -> Result<AudioOutput, ProviderError>;
}

/// Who a call is made on behalf of.
#[derive(Debug, Clone, Default)]
pub struct CallContext {
    pub session_id: Option<String>,
}

impl CallContext {
    pub fn session(id: impl Into<String>) -> Self {
        Self {
            session_id: Some(id.into()),
        }
    }
}

/// An item of a metered stream: data, then one final usage record.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem<T> {
    Chunk(T),
    Done(UsageRecord),
}

#[doc(hidden)]
pub struct Meter {
    sink: Arc<dyn UsageSink>,
    rates: Rates,
    kind: CallKind,
    model: String,
    session_id: Option<String>,
    input_chars: usize,
    output_chars: usize,
    reported: ReportedTokens,
    audio_ms: u64,
    characters: u64,
}

impl Meter {
    fn finish(self, failed: bool) -> UsageRecord {
        let (input_tokens, output_tokens, estimated) = match self.kind {
            CallKind::Chat => {
                let estimated = self.reported.input.is_none() || self.reported.output.is_none();
                (
                    self.reported
                        .input
                        .unwrap_or_else(|| usage::estimate_tokens(self.input_chars)),
                    self.reported
                        .output
                        .unwrap_or_else(|| usage::estimate_tokens(self.output_chars)),
                    estimated,
                )
            }
            CallKind::Stt | CallKind::Tts => (0, 0, false),
        };
        let q = Quantities {
            input_tokens,
            output_tokens,
            audio_ms: self.audio_ms,
            characters: self.characters,
        };
        let record = UsageRecord {
            id: uuid::Uuid::new_v4().to_string(),
            kind: self.kind,
            model: self.model,
            input_tokens,
            output_tokens,
            audio_ms: self.audio_ms,
            characters: self.characters,
            estimated,
            failed,
            cost: self.rates.cost(&q),
            timestamp: crate::now(),
            session_id: self.session_id,
        };
        if let Err(e) = self.sink.record(&record) {
            tracing::error!(error = %e, record = %record.id, "failed to persist usage record");
        }
        record
    }
}

/// Stream items that the meter can account for. Implemented for
/// [`ChatEvent`] and [`Bytes`] only.
pub trait Metered: Sized {
    /// What the metered stream yields for each item.
    type Out;
    #[doc(hidden)]
    fn observe(self, meter: &mut Meter) -> Option<Self::Out>;
}

impl Metered for ChatEvent {
    type Out = String;

    fn observe(self, meter: &mut Meter) -> Option<String> {
        match self {
            ChatEvent::Delta(s) => {
                meter.output_chars += s.chars().count();
                Some(s)
            }
            ChatEvent::Usage(t) => {
                meter.reported.input = t.input.or(meter.reported.input);
                meter.reported.output = t.output.or(meter.reported.output);
                None
            }
        }
    }
}

impl Metered for Bytes {
    type Out = Bytes;

    fn observe(self, _meter: &mut Meter) -> Option<Bytes> {
        Some(self)
    }
}

/// A provider stream that records its usage when it ends, fails or is
/// dropped early.
pub struct MeteredStream<T: Metered> {
    inner: BoxStream<'static, Result<T, ProviderError>>,
    meter: Option<Meter>,
}

pub type MeteredChatStream = MeteredStream<ChatEvent>;
pub type MeteredAudioStream = MeteredStream<Bytes>;

impl<T: Metered> fmt::Debug for MeteredStream<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeteredStream")
            .field("finished", &self.meter.is_none())
            .finish()
    }
}

impl<T: Metered + Unpin> Stream for MeteredStream<T> {
    type Item = Result<StreamItem<T::Out>, ProviderError>;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        let this = &mut *self;
        loop {
            let Some(meter) = this.meter.as_mut() else {
                return Poll::Ready(None);
            };
            match this.inner.as_mut().poll_next(cx) {
                Poll::Pending => return Poll::Pending,
                Poll::Ready(Some(Ok(item))) => {
                    if let Some(out) = item.observe(meter) {
                        return Poll::Ready(Some(Ok(StreamItem::Chunk(out))));
                    }
                }
                Poll::Ready(Some(Err(e))) => {
                    this.meter.take().expect("meter present").finish(true);
                    return Poll::Ready(Some(Err(e)));
                }
                Poll::Ready(None) => {
                    let record = this.meter.take().expect("meter present").finish(false);
                    return Poll::Ready(Some(Ok(StreamItem::Done(record))));
                }
            }
        }
    }
}

impl<T: Metered> Drop for MeteredStream<T> {
    fn drop(&mut self) {
        if let Some(meter) = self.meter.take() {
            meter.finish(true);
        }
    }
}

/// The set of adapters in use plus pricing and the usage sink.
#[derive(Clone)]
pub struct Providers {
    chat: Arc<dyn ChatProvider>,
    stt: Arc<dyn SttProvider>,
    tts: Arc<dyn TtsProvider>,
    rates: Rates,
    sink: Arc<dyn UsageSink>,
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers")
            .field("chat", &self.chat.model_id())
            .field("stt", &self.stt.model_id())
            .field("tts", &self.tts.model_id())
            .finish()
    }
}

fn total_chars(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| m.content.chars().count()).sum()
}

impl Providers {
    pub fn new(
        chat: Arc<dyn ChatProvider>,
        stt: Arc<dyn SttProvider>,
        tts: Arc<dyn TtsProvider>,
        rates: Rates,
        sink: Arc<dyn UsageSink>,
    ) -> Self {
        Self {
            chat,
            stt,
            tts,
            rates,
            sink,
        }
    }

    /// All three roles served by one adapter.
    pub fn single<P>(provider: Arc<P>, rates: Rates, sink: Arc<dyn UsageSink>) -> Self
    where
        P: ChatProvider + SttProvider + TtsProvider + 'static,
    {
        Self::new(provider.clone(), provider.clone(), provider, rates, sink)
    }

    pub fn with_sink(mut self, sink: Arc<dyn UsageSink>) -> Self {
        self.sink = sink;
        self
    }

    pub fn chat_model(&self) -> &str {
        self.chat.model_id()
    }

    pub fn rates(&self) -> &Rates {
        &self.rates
    }

    fn meter(&self, ctx: &CallContext, kind: CallKind, model: &str) -> Meter {
        Meter {
            sink: self.sink.clone(),
            rates: self.rates.clone(),
            kind,
            model: model.to_string(),
            session_id: ctx.session_id.clone(),
            input_chars: 0,
            output_chars: 0,
            reported: ReportedTokens::default(),
            audio_ms: 0,
            characters: 0,
        }
    }

    pub async fn chat_stream(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<MeteredChatStream, ProviderError> {
        if messages.is_empty() {
            return Err(ProviderError::InvalidInput("message list is empty".into()));
        }
        let mut meter = self.meter(ctx, CallKind::Chat, self.chat.model_id());
        meter.input_chars = total_chars(messages);
        match self.chat.chat_stream(messages, params).await {
            Ok(inner) => Ok(MeteredStream {
                inner,
                meter: Some(meter),
            }),
            Err(e) => {
                meter.finish(true);
                Err(e)
            }
        }
    }

    pub async fn chat_complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<(String, UsageRecord), ProviderError> {
        if messages.is_empty() {
            return Err(ProviderError::InvalidInput("message list is empty".into()));
        }
        let mut meter = self.meter(ctx, CallKind::Chat, self.chat.model_id());
        meter.input_chars = total_chars(messages);
        match self.chat.chat_complete(messages, params).await {
            Ok(done) => {
                meter.output_chars = done.text.chars().count();
                meter.reported = done.tokens;
                Ok((done.text, meter.finish(false)))
            }
            Err(e) => {
                meter.finish(true);
                Err(e)
            }
        }
    }

    /// Transcribe an upload. Audio time is metered from the container.
    pub async fn transcribe(
        &self,
        ctx: &CallContext,
        audio: &[u8],
        media_type: &str,
    ) -> Result<(String, UsageRecord), ProviderError> {
        let format = AudioFormat::from_media_type(media_type)?;
        let duration = audio::duration_ms(audio, format)?;
        let mut meter = self.meter(ctx, CallKind::Stt, self.stt.model_id());
        meter.audio_ms = duration;
        match self.stt.transcribe(audio, format).await {
            Ok(text) => Ok((text, meter.finish(false))),
            Err(e) => {
                meter.finish(true);
                Err(e)
            }
        }
    }

    pub async fn synthesize_stream(
        &self,
        ctx: &CallContext,
        text: &str,
        voice: &str,
    ) -> Result<(String, MeteredAudioStream), ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::InvalidInput(
                "text to synthesize is empty".into(),
            ));
        }
        let mut meter = self.meter(ctx, CallKind::Tts, self.tts.model_id());
        meter.characters = text.chars().count() as u64;
        match self.tts.synthesize_stream(text, voice).await {
            Ok(out) => Ok((
                out.media_type,
                MeteredStream {
                    inner: out.stream,
                    meter: Some(meter),
                },
            )),
            Err(e) => {
                meter.finish(true);
                Err(e)
            }
        }
    }
}
