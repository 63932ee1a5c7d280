//! Deterministic offline provider for demos and tests.
//!
//! Replies come from a [`MockScript`], a plain-text table keyed by SHA-256
//! hashes of the input. One line per entry:
//!
//! ```text
//! # comment
//! chat *                  <reply for any chat input>
//! chat last:<sha256>      <reply when the last message content hashes to this>
//! chat system:<sha256>    <reply when the system message hashes to this>
//! stt  *                  <transcript for any audio>
//! stt  sha256:<sha256>    <transcript for audio with this hash>
//! ```
//!
//! Values escape newlines as `\n` and backslashes as `\\`. Chat lookup order
//! is queued replies, `last:`, `system:`, then `*`.
//!
//! Synthesized audio is pseudo-random bytes derived from the text: 32 bytes
//! per character, block `i` being `sha256(sha256(text) || i as u64 LE)`.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::stream::{self, StreamExt};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    AudioFormat, AudioOutput, ChatCompletion, ChatEvent, ChatEventStream, ChatMessage, ChatParams,
    ChatProvider, ProviderError, ReportedTokens, Role, SttProvider, TtsProvider,
};

pub const MOCK_MODEL: &str = "mock";
pub const MOCK_AUDIO_MEDIA_TYPE: &str = "audio/x-pal-mock";
pub const MOCK_BYTES_PER_CHAR: usize = 32;
pub const MOCK_AUDIO_CHUNK: usize = 1024;

const BUILTIN_SCRIPT: &str = include_str!("../../fixtures/mock_script.txt");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The pseudo-audio the mock synthesizes for `text`.
pub fn mock_tts_audio(text: &str) -> Vec<u8> {
    let seed = Sha256::digest(text.as_bytes());
    let len = text.chars().count() * MOCK_BYTES_PER_CHAR;
    let mut out = Vec::with_capacity(len + 32);
    let mut block = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(block.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        block += 1;
    }
    out.truncate(len);
    out
}

#[derive(Debug, Error)]
pub enum MockScriptError {
    #[error("mock script line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("cannot read mock script: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockScript {
    chat_by_last: HashMap<String, String>,
    chat_by_system: HashMap<String, String>,
    chat_default: Option<String>,
    stt_by_hash: HashMap<String, String>,
    stt_default: Option<String>,
}

fn unescape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn escape(value: &str) -> String {
    value
        .replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
}

fn valid_hash(h: &str) -> bool {
    h.len() == 64
        && h.bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl MockScript {
    /// The script shipped with the crate: a generic patient reply, a sample
    /// feedback response for the feedback prompt, and a generic transcript.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_SCRIPT).expect("built-in mock script is valid")
    }

    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, MockScriptError> {
        let mut script = MockScript::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let trimmed = line.trim_start();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: &str| MockScriptError::Syntax {
                line: line_no,
                message: message.to_string(),
            };
            let mut parts = trimmed.splitn(3, char::is_whitespace);
            let kind = parts.next().unwrap_or_default();
            let key = parts.next().ok_or_else(|| err("missing key"))?;
            let value = unescape(parts.next().unwrap_or_default().trim_start());
            match (kind, key) {
                ("chat", "*") => script.chat_default = Some(value),
                ("stt", "*") => script.stt_default = Some(value),
                ("chat", k) => {
                    if let Some(h) = k.strip_prefix("last:").filter(|h| valid_hash(h)) {
                        script.chat_by_last.insert(h.to_string(), value);
                    } else if let Some(h) = k.strip_prefix("system:").filter(|h| valid_hash(h)) {
                        script.chat_by_system.insert(h.to_string(), value);
                    } else {
                        return Err(err("chat key must be *, last:<sha256> or system:<sha256>"));
                    }
                }
                ("stt", k) => match k.strip_prefix("sha256:").filter(|h| valid_hash(h)) {
                    Some(h) => {
                        script.stt_by_hash.insert(h.to_string(), value);
                    }
                    None => return Err(err("stt key must be * or sha256:<sha256>")),
                },
                _ => return Err(err("entry kind must be chat or stt")),
            }
        }
        Ok(script)
    }

    /// Render back to the text format. Entries are sorted for stable output.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut sorted = |prefix: &str, kind: &str, map: &HashMap<String, String>| {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort();
            for (k, v) in entries {
                lines.push(format!("{kind} {prefix}{k} {}", escape(v)));
            }
        };
        sorted("last:", "chat", &self.chat_by_last);
        sorted("system:", "chat", &self.chat_by_system);
        sorted("sha256:", "stt", &self.stt_by_hash);
        if let Some(v) = &self.chat_default {
            lines.push(format!("chat * {}", escape(v)));
        }
        if let Some(v) = &self.stt_default {
            lines.push(format!("stt * {}", escape(v)));
        }
        lines.join("\n") + "\n"
    }

    pub fn with_chat_default(mut self, reply: impl Into<String>) -> Self {
        self.chat_default = Some(reply.into());
        self
    }

    pub fn with_chat_for_last(mut self, last_message: &str, reply: impl Into<String>) -> Self {
        self.chat_by_last
            .insert(sha256_hex(last_message.as_bytes()), reply.into());
        self
    }

    pub fn with_chat_for_system(mut self, system: &str, reply: impl Into<String>) -> Self {
        self.chat_by_system
            .insert(sha256_hex(system.as_bytes()), reply.into());
        self
    }

    pub fn with_stt(mut self, audio: &[u8], transcript: impl Into<String>) -> Self {
        self.stt_by_hash
            .insert(sha256_hex(audio), transcript.into());
        self
    }

    pub fn with_stt_default(mut self, transcript: impl Into<String>) -> Self {
        self.stt_default = Some(transcript.into());
        self
    }

    pub fn chat_reply(&self, messages: &[ChatMessage]) -> Option<&str> {
        let by_last = messages
            .last()
            .and_then(|m| self.chat_by_last.get(&sha256_hex(m.content.as_bytes())));
        let by_system = || {
            messages
                .iter()
                .find(|m| m.role == Role::System)
                .and_then(|m| self.chat_by_system.get(&sha256_hex(m.content.as_bytes())))
        };
        by_last
            .or_else(by_system)
            .or(self.chat_default.as_ref())
            .map(String::as_str)
    }

    pub fn transcript(&self, audio: &[u8]) -> Option<&str> {
        self.stt_by_hash
            .get(&sha256_hex(audio))
            .or(self.stt_default.as_ref())
            .map(String::as_str)
    }
}

/// A scripted fault for the next call of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFailure {
    /// Fail the call up front with this HTTP status.
    Status(u16),
    /// Time out before any output.
    Timeout,
    /// Stream this many chunks, then time out.
    TimeoutAfter(usize),
    /// Stream this many chunks, then drop the connection.
    DisconnectAfter(usize),
}

const MOCK_TIMEOUT: Duration = Duration::from_secs(30);

impl MockFailure {
    fn upfront(self) -> Option<ProviderError> {
        match self {
            MockFailure::Status(status) => Some(ProviderError::Status {
                status,
                body: "injected failure".into(),
            }),
            MockFailure::Timeout => Some(ProviderError::Timeout(MOCK_TIMEOUT)),
            _ => None,
        }
    }

    fn midstream(self) -> Option<(usize, ProviderError)> {
        match self {
            MockFailure::TimeoutAfter(n) => Some((n, ProviderError::Timeout(MOCK_TIMEOUT))),
            MockFailure::DisconnectAfter(n) => Some((
                n,
                ProviderError::Transport("connection reset (injected)".into()),
            )),
            _ => None,
        }
    }

    fn as_error(self) -> ProviderError {
        self.upfront()
            .or_else(|| self.midstream().map(|(_, e)| e))
            .expect("every failure maps to an error")
    }
}

/// A call the mock received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockCall {
    Chat {
        messages: Vec<ChatMessage>,
        streaming: bool,
    },
    Stt {
        audio_sha256: String,
        format: AudioFormat,
    },
    Tts {
        text: String,
        voice: String,
    },
}

#[derive(Debug, Default)]
pub struct MockProvider {
    script: RwLock<MockScript>,
    chat_queue: Mutex<VecDeque<String>>,
    chat_failures: Mutex<VecDeque<MockFailure>>,
    stt_failures: Mutex<VecDeque<MockFailure>>,
    tts_failures: Mutex<VecDeque<MockFailure>>,
    calls: Mutex<Vec<MockCall>>,
    chunk_delay: Mutex<Duration>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        Self {
            script: RwLock::new(script),
            ..Default::default()
        }
    }

    pub fn builtin() -> Self {
        Self::new(MockScript::builtin())
    }

    pub fn with_default_reply(reply: &str) -> Self {
        Self::new(MockScript::default().with_chat_default(reply))
    }

    pub fn set_script(&self, script: MockScript) {
        *self.script.write().unwrap() = script;
    }

    pub fn update_script(&self, f: impl FnOnce(MockScript) -> MockScript) {
        let mut guard = self.script.write().unwrap();
        let current = std::mem::take(&mut *guard);
        *guard = f(current);
    }

    /// Reply with these texts, in order, before consulting the script.
    pub fn queue_chat_replies<I, S>(&self, replies: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.chat_queue
            .lock()
            .unwrap()
            .extend(replies.into_iter().map(Into::into));
    }

    pub fn inject_chat_failure(&self, f: MockFailure) {
        self.chat_failures.lock().unwrap().push_back(f);
    }

    pub fn inject_stt_failure(&self, f: MockFailure) {
        self.stt_failures.lock().unwrap().push_back(f);
    }

    pub fn inject_tts_failure(&self, f: MockFailure) {
        self.tts_failures.lock().unwrap().push_back(f);
    }

    /// Delay between streamed chunks.
    pub fn set_chunk_delay(&self, delay: Duration) {
        *self.chunk_delay.lock().unwrap() = delay;
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn chat_calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls()
            .into_iter()
            .filter_map(|c| match c {
                MockCall::Chat { messages, .. } => Some(messages),
                _ => None,
            })
            .collect()
    }

    pub fn tts_texts(&self) -> Vec<String> {
        self.calls()
            .into_iter()
            .filter_map(|c| match c {
                MockCall::Tts { text, .. } => Some(text),
                _ => None,
            })
            .collect()
    }

    fn log(&self, call: MockCall) {
        self.calls.lock().unwrap().push(call);
    }

    fn resolve_chat(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        if let Some(reply) = self.chat_queue.lock().unwrap().pop_front() {
            return Ok(reply);
        }
        let script = self.script.read().unwrap();
        script
            .chat_reply(messages)
            .map(str::to_string)
            .ok_or_else(|| {
                let last = messages
                    .last()
                    .map(|m| m.content.as_str())
                    .unwrap_or_default();
                ProviderError::Protocol(format!(
                    "mock script has no chat reply for last:{}",
                    sha256_hex(last.as_bytes())
                ))
            })
    }

    fn delayed<T: Send + 'static>(
        &self,
        items: Vec<Result<T, ProviderError>>,
    ) -> futures::stream::BoxStream<'static, Result<T, ProviderError>> {
        let delay = *self.chunk_delay.lock().unwrap();
        if delay.is_zero() {
            stream::iter(items).boxed()
        } else {
            stream::iter(items)
                .then(move |item| async move {
                    tokio::time::sleep(delay).await;
                    item
                })
                .boxed()
        }
    }
}

/// Split text into word-sized chunks with trailing whitespace attached.
pub fn mock_chunks(reply: &str) -> Vec<String> {
    reply
        .split_inclusive(char::is_whitespace)
        .map(str::to_string)
        .collect()
}

#[async_trait]
impl ChatProvider for MockProvider {
    fn model_id(&self) -> &str {
        MOCK_MODEL
    }

    async fn chat_stream(
        &self,
        messages: &[ChatMessage],
        _params: &ChatParams,
    ) -> Result<ChatEventStream, ProviderError> {
        self.log(MockCall::Chat {
            messages: messages.to_vec(),
            streaming: true,
        });
        let failure = self.chat_failures.lock().unwrap().pop_front();
        if let Some(e) = failure.and_then(MockFailure::upfront) {
            return Err(e);
        }
        let reply = self.resolve_chat(messages)?;
        let mut items: Vec<Result<ChatEvent, ProviderError>> = mock_chunks(&reply)
            .into_iter()
            .map(|c| Ok(ChatEvent::Delta(c)))
            .collect();
        if let Some((after, err)) = failure.and_then(MockFailure::midstream) {
            items.truncate(after);
            items.push(Err(err));
        }
        Ok(self.delayed(items))
    }

    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        _params: &ChatParams,
    ) -> Result<ChatCompletion, ProviderError> {
        self.log(MockCall::Chat {
            messages: messages.to_vec(),
            streaming: false,
        });
        if let Some(f) = self.chat_failures.lock().unwrap().pop_front() {
            return Err(f.as_error());
        }
        let text = self.resolve_chat(messages)?;
        Ok(ChatCompletion {
            text,
            tokens: ReportedTokens::default(),
        })
    }
}

#[async_trait]
impl SttProvider for MockProvider {
    fn model_id(&self) -> &str {
        MOCK_MODEL
    }

    async fn transcribe(&self, audio: &[u8], format: AudioFormat) -> Result<String, ProviderError> {
        let audio_sha256 = sha256_hex(audio);
        self.log(MockCall::Stt {
            audio_sha256: audio_sha256.clone(),
            format,
        });
        if let Some(f) = self.stt_failures.lock().unwrap().pop_front() {
            return Err(f.as_error());
        }
        let script = self.script.read().unwrap();
        script.transcript(audio).map(str::to_string).ok_or_else(|| {
            ProviderError::Protocol(format!(
                "mock script has no transcript for sha256:{audio_sha256}"
            ))
        })
    }
}

#[async_trait]
impl TtsProvider for MockProvider {
    fn model_id(&self) -> &str {
        MOCK_MODEL
    }

    async fn synthesize_stream(
        &self,
        text: &str,
        voice: &str,
    ) -> Result<AudioOutput, ProviderError> {
        self.log(MockCall::Tts {
            text: text.to_string(),
            voice: voice.to_string(),
        });
        let failure = self.tts_failures.lock().unwrap().pop_front();
        if let Some(e) = failure.and_then(MockFailure::upfront) {
            return Err(e);
        }
        let audio = mock_tts_audio(text);
        let mut items: Vec<Result<Bytes, ProviderError>> = audio
            .chunks(MOCK_AUDIO_CHUNK)
            .map(|c| Ok(Bytes::copy_from_slice(c)))
            .collect();
        if let Some((after, err)) = failure.and_then(MockFailure::midstream) {
            items.truncate(after);
            items.push(Err(err));
        }
        Ok(AudioOutput {
            media_type: MOCK_AUDIO_MEDIA_TYPE.to_string(),
            stream: self.delayed(items),
        })
    }
}
