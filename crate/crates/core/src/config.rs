//! Service configuration: a TOML file plus `PAL_*` environment variables.
//!
//! Credentials are read from the environment only and are never part of
//! [`Config`], so serializing or logging a config cannot leak them.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::EngineOptions;
use crate::feedback::{FeedbackConfig, NurseLexicon};
use crate::providers::mock::{MockProvider, MockScript, MockScriptError};
use crate::providers::remote::{Endpoint, RemoteChat, RemoteStt, RemoteTts, Secret};
use crate::providers::usage::{Rates, UsageSink};
use crate::providers::{ChatParams, ProviderError, Providers};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Remote,
}

impl FromStr for ProviderKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mock" => Ok(ProviderKind::Mock),
            "remote" => Ok(ProviderKind::Remote),
            other => Err(ConfigError::Invalid(format!(
                "PAL_PROVIDER must be mock or remote, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConversationConfig {
    /// Voice id passed to text-to-speech.
    pub voice: String,
    /// Spoken instead of a reply that is nothing but non-verbal cues.
    pub silence_placeholder: String,
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self {
            voice: "alloy".into(),
            silence_placeholder: "\u{2026}".into(),
            temperature: None,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSettings {
    pub max_parse_retries: u32,
    pub lexicon: NurseLexicon,
}

impl Default for FeedbackSettings {
    fn default() -> Self {
        Self {
            max_parse_retries: 2,
            lexicon: NurseLexicon::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub provider: ProviderKind,
    pub timeout_secs: u64,
    pub rates: Rates,
    pub chat: EndpointConfig,
    pub stt: EndpointConfig,
    pub tts: EndpointConfig,
    pub mock_script: Option<PathBuf>,
    pub conversation: ConversationConfig,
    pub feedback: FeedbackSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            timeout_secs: 60,
            rates: Rates::default(),
            chat: EndpointConfig::default(),
            stt: EndpointConfig::default(),
            tts: EndpointConfig::default(),
            mock_script: None,
            conversation: ConversationConfig::default(),
            feedback: FeedbackSettings::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("mock script: {0}")]
    MockScript(#[from] MockScriptError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Environment lookup, injectable for tests.
pub type EnvLookup<'a> = &'a dyn Fn(&str) -> Option<String>;

pub fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Load `path` (or defaults) and apply environment overrides.
    pub fn resolve(path: Option<&Path>, env: EnvLookup<'_>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        config.apply_env(env)?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, env: EnvLookup<'_>) -> Result<(), ConfigError> {
        if let Some(p) = env("PAL_PROVIDER") {
            self.provider = p.parse()?;
        }
        if let Some(s) = env("PAL_MOCK_SCRIPT") {
            self.mock_script = Some(PathBuf::from(s));
        }
        if let Some(t) = env("PAL_TIMEOUT_SECS") {
            self.timeout_secs = t.parse().map_err(|_| {
                ConfigError::Invalid(format!("PAL_TIMEOUT_SECS is not an integer: {t:?}"))
            })?;
        }
        for (prefix, ep) in [
            ("CHAT", &mut self.chat),
            ("STT", &mut self.stt),
            ("TTS", &mut self.tts),
        ] {
            if let Some(url) = env(&format!("PAL_{prefix}_URL")) {
                ep.url = Some(url);
            }
            if let Some(model) = env(&format!("PAL_{prefix}_MODEL")) {
                ep.model = Some(model);
            }
        }
        if let Some(voice) = env("PAL_TTS_VOICE") {
            self.conversation.voice = voice;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_secs == 0 {
            return Err(ConfigError::Invalid("timeout_secs must be positive".into()));
        }
        if !self.rates.is_valid() {
            return Err(ConfigError::Invalid("rates must not be negative".into()));
        }
        if self.conversation.silence_placeholder.is_empty() {
            return Err(ConfigError::Invalid(
                "silence_placeholder must not be empty".into(),
            ));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn feedback_config(&self) -> FeedbackConfig {
        FeedbackConfig {
            max_parse_retries: self.feedback.max_parse_retries,
            lexicon: self.feedback.lexicon.clone(),
            params: ChatParams::default(),
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            voice: self.conversation.voice.clone(),
            silence_placeholder: self.conversation.silence_placeholder.clone(),
            chat_params: self.chat_params(),
            feedback: self.feedback_config(),
        }
    }

    pub fn chat_params(&self) -> ChatParams {
        ChatParams {
            temperature: self.conversation.temperature,
            max_tokens: self.conversation.max_tokens,
        }
    }

    /// Construct the configured adapters. With the mock provider the
    /// adapter is also returned so callers can script or inspect it.
    pub fn build_providers(
        &self,
        env: EnvLookup<'_>,
        sink: Arc<dyn UsageSink>,
    ) -> Result<(Providers, Option<Arc<MockProvider>>), ConfigError> {
        match self.provider {
            ProviderKind::Mock => {
                let script = match &self.mock_script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::builtin(),
                };
                let mock = Arc::new(MockProvider::new(script));
                Ok((
                    Providers::single(mock.clone(), self.rates.clone(), sink),
                    Some(mock),
                ))
            }
            ProviderKind::Remote => {
                let chat = RemoteChat::new(self.endpoint("CHAT", &self.chat, env)?)?;
                let stt = RemoteStt::new(self.endpoint("STT", &self.stt, env)?)?;
                let tts = RemoteTts::new(self.endpoint("TTS", &self.tts, env)?)?;
                Ok((
                    Providers::new(
                        Arc::new(chat),
                        Arc::new(stt),
                        Arc::new(tts),
                        self.rates.clone(),
                        sink,
                    ),
                    None,
                ))
            }
        }
    }

    fn endpoint(
        &self,
        prefix: &str,
        ep: &EndpointConfig,
        env: EnvLookup<'_>,
    ) -> Result<Endpoint, ConfigError> {
        let missing = |what: &str| {
            ConfigError::Invalid(format!(
                "remote provider needs a {what} for {} (set PAL_{prefix}_{} or [{}] {} in the config file)",
                prefix.to_lowercase(),
                what.to_uppercase(),
                prefix.to_lowercase(),
                what,
            ))
        };
        Ok(Endpoint {
            url: ep.url.clone().ok_or_else(|| missing("url"))?,
            model: ep.model.clone().ok_or_else(|| missing("model"))?,
            api_key: Secret::new(env(&format!("PAL_{prefix}_API_KEY")).unwrap_or_default()),
            timeout: self.timeout(),
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use rust_decimal::Decimal;

    use super::*;
    use crate::providers::usage::MemorySink;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_select_mock() {
        let c = Config::resolve(None, &env(&[])).unwrap();
        assert_eq!(c.provider, ProviderKind::Mock);
        assert_eq!(c.feedback.max_parse_retries, 2);
        assert_eq!(c.conversation.silence_placeholder, "\u{2026}");
        let (p, mock) = c
            .build_providers(&env(&[]), Arc::new(MemorySink::default()))
            .unwrap();
        assert!(mock.is_some());
        assert_eq!(p.chat_model(), crate::providers::mock::MOCK_MODEL);
    }

    #[test]
    fn file_and_env_combine() {
        let text = r#"
            timeout_secs = 5
            [rates]
            chat_input_per_million_tokens = "2.00"
            [chat]
            url = "http://localhost:9/chat"
            model = "m"
            [feedback]
            max_parse_retries = 1
        "#;
        let mut c = Config::parse(text, Path::new("pal.toml")).unwrap();
        c.apply_env(&env(&[("PAL_PROVIDER", "remote"), ("PAL_TTS_VOICE", "v2")]))
            .unwrap();
        assert_eq!(c.provider, ProviderKind::Remote);
        assert_eq!(c.rates.chat_input_per_million_tokens, Decimal::new(2, 0));
        assert_eq!(c.conversation.voice, "v2");
        assert_eq!(c.feedback_config().max_parse_retries, 1);
        let err = c
            .build_providers(&env(&[]), Arc::new(MemorySink::default()))
            .unwrap_err();
        assert!(err.to_string().contains("PAL_STT_URL"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("bogus = 1", Path::new("x")).is_err());
        assert!(Config::resolve(None, &env(&[("PAL_PROVIDER", "cloud")])).is_err());
        let mut c = Config::default();
        c.timeout_secs = 0;
        assert!(c.validate().is_err());
        c.timeout_secs = 1;
        c.rates.stt_per_minute = Decimal::new(-1, 0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn api_keys_stay_out_of_the_config() {
        let e = env(&[
            ("PAL_PROVIDER", "remote"),
            ("PAL_CHAT_API_KEY", "sk-secret-value"),
        ]);
        let c = Config::resolve(None, &e).unwrap();
        let dumped = toml::to_string(&c).unwrap();
        assert!(!dumped.contains("sk-secret-value"));
        assert!(!format!("{c:?}").contains("sk-secret-value"));
    }
}
