//! Post-session NURSE feedback: prompt, model call, parsing, quote grounding
//! and category tagging.

pub mod grounding;
pub mod nurse;
pub mod parse;
pub mod prompt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{CallContext, ChatParams, ProviderError, Providers};
use crate::session::Turn;

pub use grounding::{ground_quotes, GroundingReport, GroundingVerdict};
pub use nurse::{tag_nurse_category, NurseCategory, NurseLexicon};
pub use parse::{
    parse_feedback_response, render_feedback_items, FeedbackField, FeedbackParseError, ItemIssue,
};
pub use prompt::{
    build_feedback_prompt, render_transcript, FEEDBACK_PROMPT_SHA256, FEEDBACK_SYSTEM_PROMPT,
};

/// Whether an item's quote was found in the transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grounding {
    Grounded,
    Ungrounded,
    Unchecked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub ordinal: usize,
    pub scenario: String,
    /// Verbatim clinician quote, without surrounding quotation marks.
    pub current_approach: String,
    pub improvement_suggestion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nurse_category: Option<NurseCategory>,
    pub grounded: Grounding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackReport {
    /// Absent for transcripts analyzed outside a session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub items: Vec<FeedbackItem>,
    /// Numbered items the parser could not complete.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issues: Vec<ItemIssue>,
    pub grounding: GroundingReport,
    pub raw_response: String,
    pub model_id: String,
    pub generated_at: DateTime<Utc>,
    /// Usage record ids, one per model call (retries included).
    pub usage: Vec<String>,
    /// Re-asks needed before the response parsed.
    pub parse_retries: u32,
}

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("nothing to analyze: the transcript has no clinician turns")]
    NothingToAnalyze,
    #[error("feedback model call failed: {0}")]
    Provider(#[from] ProviderError),
    #[error("feedback response could not be parsed after {attempts} attempt(s)")]
    Unparseable { raw_response: String, attempts: u32 },
}

impl FeedbackError {
    pub fn is_retryable(&self) -> bool {
        match self {
            FeedbackError::NothingToAnalyze => false,
            FeedbackError::Provider(e) => e.is_retryable(),
            FeedbackError::Unparseable { .. } => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackConfig {
    /// Extra model calls after an unparseable response.
    pub max_parse_retries: u32,
    pub lexicon: NurseLexicon,
    pub params: ChatParams,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            max_parse_retries: 2,
            lexicon: NurseLexicon::default(),
            params: ChatParams::default(),
        }
    }
}

/// Parse a model response and annotate its items against the transcript.
pub fn analyze_response(
    raw: &str,
    transcript: &[Turn],
    lexicon: &NurseLexicon,
) -> Result<(Vec<FeedbackItem>, Vec<ItemIssue>, GroundingReport), FeedbackParseError> {
    let parsed = parse_feedback_response(raw)?;
    let grounding = ground_quotes(&parsed.items, transcript);
    let items = parsed
        .items
        .into_iter()
        .zip(&grounding.verdicts)
        .map(|(mut item, verdict)| {
            item.grounded = if verdict.grounded {
                Grounding::Grounded
            } else {
                Grounding::Ungrounded
            };
            item.nurse_category = lexicon.tag(&item.improvement_suggestion);
            item
        })
        .collect();
    Ok((items, parsed.issues, grounding))
}

/// Ask the chat model for feedback on a transcript, re-asking on
/// unparseable output up to `config.max_parse_retries` times.
pub async fn generate_feedback(
    providers: &Providers,
    session_id: Option<&str>,
    transcript: &[Turn],
    config: &FeedbackConfig,
) -> Result<FeedbackReport, FeedbackError> {
    let messages = build_feedback_prompt(transcript)?;
    let ctx = CallContext {
        session_id: session_id.map(str::to_string),
    };
    let mut usage = Vec::new();
    let mut attempt = 0;
    loop {
        let (raw, record) = providers
            .chat_complete(&ctx, &messages, &config.params)
            .await?;
        usage.push(record.id);
        match analyze_response(&raw, transcript, &config.lexicon) {
            Ok((items, issues, grounding)) => {
                return Ok(FeedbackReport {
                    session_id: session_id.map(str::to_string),
                    items,
                    issues,
                    grounding,
                    raw_response: raw,
                    model_id: providers.chat_model().to_string(),
                    generated_at: crate::now(),
                    usage,
                    parse_retries: attempt,
                })
            }
            Err(_) if attempt < config.max_parse_retries => {
                tracing::warn!(attempt, "feedback response did not parse, asking again");
                attempt += 1;
            }
            Err(_) => {
                return Err(FeedbackError::Unparseable {
                    raw_response: raw,
                    attempts: attempt + 1,
                })
            }
        }
    }
}
