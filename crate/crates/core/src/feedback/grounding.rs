//! Check that quoted "current approach" lines really occur in the transcript.

use serde::{Deserialize, Serialize};

use crate::session::{Speaker, Turn};

use super::FeedbackItem;

/// Case-folded text with typographic quotes made plain and whitespace
/// collapsed to single spaces.
pub fn normalize(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{02bc}' => '\'',
            '\u{201c}' | '\u{201d}' => '"',
            c => c,
        })
        .collect();
    mapped
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// [`normalize`], then trim punctuation and quotes from both ends.
pub fn normalize_quote(s: &str) -> String {
    normalize(s)
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingVerdict {
    pub ordinal: usize,
    pub grounded: bool,
    /// The normalized quote that was searched for.
    pub normalized_quote: String,
    /// Index of the first clinician turn containing the quote.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<usize>,
    /// Character span of the match within the normalized turn text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundingReport {
    pub verdicts: Vec<GroundingVerdict>,
}

impl GroundingReport {
    pub fn grounded_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.grounded).count()
    }
}

/// One verdict per item, in item order.
pub fn ground_quotes(items: &[FeedbackItem], transcript: &[Turn]) -> GroundingReport {
    let clinician: Vec<(usize, String)> = transcript
        .iter()
        .filter(|t| t.role == Speaker::Clinician)
        .map(|t| (t.index, normalize(&t.text)))
        .collect();
    let verdicts = items
        .iter()
        .map(|item| {
            let quote = normalize_quote(&item.current_approach);
            let hit = (!quote.is_empty())
                .then(|| {
                    clinician.iter().find_map(|(index, text)| {
                        text.find(&quote).map(|byte| {
                            let start = text[..byte].chars().count();
                            (*index, (start, start + quote.chars().count()))
                        })
                    })
                })
                .flatten();
            GroundingVerdict {
                ordinal: item.ordinal,
                grounded: hit.is_some(),
                normalized_quote: quote,
                turn_index: hit.map(|(i, _)| i),
                span: hit.map(|(_, s)| s),
            }
        })
        .collect();
    GroundingReport { verdicts }
}
