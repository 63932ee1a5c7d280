//! HTTP adapters for vendor-neutral API shapes.
//!
//! * chat: an OpenAI-style `chat/completions` endpoint, streamed as
//!   server-sent events (`data: {...}` ... `data: [DONE]`);
//! * speech-to-text: a multipart `audio/transcriptions` endpoint answering
//!   `{"text": ...}`;
//! * text-to-speech: a JSON `audio/speech` endpoint answering with audio bytes.
//!
//! API keys are held in [`Secret`], which never prints or serializes its value.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use eventsource_stream::Eventsource;
use futures::StreamExt;
use serde::Deserialize;
use serde_json::json;

use super::{
    AudioFormat, AudioOutput, ChatCompletion, ChatEvent, ChatEventStream, ChatMessage, ChatParams,
    ChatProvider, ProviderError, ReportedTokens, SttProvider, TtsProvider,
};

static REQUESTS_SENT: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests any remote adapter has sent in this process.
pub fn requests_sent() -> u64 {
    REQUESTS_SENT.load(Ordering::SeqCst)
}

/// A credential. Debug and Display print a placeholder.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

impl fmt::Display for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("***")
    }
}

/// Where and how to reach one remote endpoint.
#[derive(Debug, Clone)]
pub struct Endpoint {
    pub url: String,
    /// Model id, or voice id for text-to-speech.
    pub model: String,
    pub api_key: Secret,
    pub timeout: Duration,
}

fn client(timeout: Duration) -> Result<reqwest::Client, ProviderError> {
    reqwest::Client::builder()
        .connect_timeout(timeout)
        .read_timeout(timeout)
        .build()
        .map_err(|e| ProviderError::NotConfigured(e.to_string()))
}

fn classify(e: reqwest::Error, timeout: Duration) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout(timeout)
    } else if let Some(status) = e.status() {
        ProviderError::Status {
            status: status.as_u16(),
            body: String::new(),
        }
    } else if e.is_decode() {
        ProviderError::Protocol(e.to_string())
    } else {
        ProviderError::Transport(e.to_string())
    }
}

async fn send(
    endpoint: &Endpoint,
    req: reqwest::RequestBuilder,
) -> Result<reqwest::Response, ProviderError> {
    let mut req = req;
    if !endpoint.api_key.is_empty() {
        req = req.bearer_auth(endpoint.api_key.expose());
    }
    REQUESTS_SENT.fetch_add(1, Ordering::SeqCst);
    let resp = req
        .send()
        .await
        .map_err(|e| classify(e, endpoint.timeout))?;
    let status = resp.status();
    if status.is_success() {
        Ok(resp)
    } else {
        let mut body = resp.text().await.unwrap_or_default();
        body.truncate(512);
        Err(ProviderError::Status {
            status: status.as_u16(),
            body,
        })
    }
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl From<WireUsage> for ReportedTokens {
    fn from(u: WireUsage) -> Self {
        ReportedTokens {
            input: u.prompt_tokens,
            output: u.completion_tokens,
        }
    }
}

#[derive(Debug, Deserialize)]
struct StreamChunk {
    #[serde(default)]
    choices: Vec<StreamChoice>,
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct StreamChoice {
    #[serde(default)]
    delta: Delta,
}

#[derive(Debug, Default, Deserialize)]
struct Delta {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Completion {
    choices: Vec<CompletionChoice>,
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Debug, Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

pub struct RemoteChat {
    endpoint: Endpoint,
    http: reqwest::Client,
}

impl RemoteChat {
    pub fn new(endpoint: Endpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            http: client(endpoint.timeout)?,
            endpoint,
        })
    }

    fn body(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
        stream: bool,
    ) -> serde_json::Value {
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "stream": stream,
        });
        if stream {
            body["stream_options"] = json!({ "include_usage": true });
        }
        if let Some(t) = params.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(m) = params.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

#[async_trait]
impl ChatProvider for RemoteChat {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }

    async fn chat_stream(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<ChatEventStream, ProviderError> {
        let req = self
            .http
            .post(&self.endpoint.url)
            .json(&self.body(messages, params, true));
        let resp = send(&self.endpoint, req).await?;
        let timeout = self.endpoint.timeout;
        let events = resp
            .bytes_stream()
            .eventsource()
            .take_while(|ev| {
                let done = matches!(ev, Ok(e) if e.data.trim() == "[DONE]");
                futures::future::ready(!done)
            })
            .flat_map(move |ev| {
                let out: Vec<Result<ChatEvent, ProviderError>> = match ev {
                    Err(eventsource_stream::EventStreamError::Transport(e)) => {
                        vec![Err(classify(e, timeout))]
                    }
                    Err(e) => vec![Err(ProviderError::Protocol(e.to_string()))],
                    Ok(ev) => match serde_json::from_str::<StreamChunk>(&ev.data) {
                        Err(e) => vec![Err(ProviderError::Protocol(format!(
                            "bad stream chunk: {e}"
                        )))],
                        Ok(chunk) => {
                            let mut out: Vec<_> = chunk
                                .choices
                                .into_iter()
                                .filter_map(|c| c.delta.content)
                                .filter(|s| !s.is_empty())
                                .map(|s| Ok(ChatEvent::Delta(s)))
                                .collect();
                            if let Some(u) = chunk.usage {
                                out.push(Ok(ChatEvent::Usage(u.into())));
                            }
                            out
                        }
                    },
                };
                futures::stream::iter(out)
            });
        // Nothing after the first error.
        let mut failed = false;
        let events = events.take_while(move |item| {
            let keep = !failed;
            failed |= item.is_err();
            futures::future::ready(keep)
        });
        Ok(events.boxed())
    }

    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<ChatCompletion, ProviderError> {
        let req = self
            .http
            .post(&self.endpoint.url)
            .json(&self.body(messages, params, false));
        let resp = send(&self.endpoint, req).await?;
        let body: Completion = resp
            .json()
            .await
            .map_err(|e| classify(e, self.endpoint.timeout))?;
        let text = body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Protocol("completion has no content".into()))?;
        Ok(ChatCompletion {
            text,
            tokens: body.usage.map(Into::into).unwrap_or_default(),
        })
    }
}

pub struct RemoteStt {
    endpoint: Endpoint,
    http: reqwest::Client,
}

impl RemoteStt {
    pub fn new(endpoint: Endpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            http: client(endpoint.timeout)?,
            endpoint,
        })
    }
}

#[derive(Debug, Deserialize)]
struct Transcription {
    text: String,
}

#[async_trait]
impl SttProvider for RemoteStt {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }

    async fn transcribe(&self, audio: &[u8], format: AudioFormat) -> Result<String, ProviderError> {
        let part = reqwest::multipart::Part::bytes(audio.to_vec())
            .file_name(format!("speech.{}", format.file_extension()))
            .mime_str(format.media_type())
            .map_err(|e| ProviderError::InvalidInput(e.to_string()))?;
        let form = reqwest::multipart::Form::new()
            .text("model", self.endpoint.model.clone())
            .part("file", part);
        let req = self.http.post(&self.endpoint.url).multipart(form);
        let resp = send(&self.endpoint, req).await?;
        let body: Transcription = resp
            .json()
            .await
            .map_err(|e| classify(e, self.endpoint.timeout))?;
        Ok(body.text)
    }
}

pub struct RemoteTts {
    endpoint: Endpoint,
    http: reqwest::Client,
}

impl RemoteTts {
    pub fn new(endpoint: Endpoint) -> Result<Self, ProviderError> {
        Ok(Self {
            http: client(endpoint.timeout)?,
            endpoint,
        })
    }
}

#[async_trait]
impl TtsProvider for RemoteTts {
    fn model_id(&self) -> &str {
        &self.endpoint.model
    }

    async fn synthesize_stream(
        &self,
        text: &str,
        voice: &str,
    ) -> Result<AudioOutput, ProviderError> {
        let req = self.http.post(&self.endpoint.url).json(&json!({
            "model": self.endpoint.model,
            "voice": voice,
            "input": text,
        }));
        let resp = send(&self.endpoint, req).await?;
        let media_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("audio/mpeg")
            .to_string();
        let timeout = self.endpoint.timeout;
        let stream = resp
            .bytes_stream()
            .map(move |r| r.map_err(|e| classify(e, timeout)))
            .boxed();
        Ok(AudioOutput { media_type, stream })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secret_never_prints() {
        let s = Secret::new("sk-live-123");
        assert_eq!(format!("{s:?}"), "Secret(***)");
        assert_eq!(format!("{s}"), "***");
        let ep = Endpoint {
            url: "http://x".into(),
            model: "m".into(),
            api_key: s,
            timeout: Duration::from_secs(1),
        };
        assert!(!format!("{ep:?}").contains("sk-live"));
    }
}
