//! Plain-text encounter files: one `Doctor:` or `Patient:` line per turn,
//! with patient non-verbal cues in square brackets. This is the same format
//! the feedback prompt renders, so saved transcripts can be re-analyzed.

use thiserror::Error;

use crate::cues::{self, CueMarkup};
use crate::session::{Speaker, Turn};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("line {line}: expected a \"Doctor:\" or \"Patient:\" prefix, found {found:?}")]
    UnknownPrefix { line: usize, found: String },
    #[error("transcript has no Doctor lines")]
    NoClinicianLines,
}

/// Parse a transcript file. Blank lines are ignored. Line numbers in errors
/// are 1-based.
pub fn parse_transcript(text: &str) -> Result<Vec<Turn>, TranscriptError> {
    let at = crate::now();
    let mut turns = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (speaker, body) =
            split_prefix(trimmed).ok_or_else(|| TranscriptError::UnknownPrefix {
                line: n + 1,
                found: trimmed.chars().take(40).collect(),
            })?;
        let index = turns.len();
        let turn = match speaker {
            Speaker::Clinician => Turn::clinician(index, body, at),
            Speaker::Patient => {
                let parsed = cues::parse_with(body, CueMarkup::Bracket);
                Turn {
                    text: parsed.text,
                    cues: parsed.cues,
                    raw_text: body.to_string(),
                    ..Turn::patient(index, "", at, at)
                }
            }
        };
        turns.push(turn);
    }
    if !turns.iter().any(|t| t.role == Speaker::Clinician) {
        return Err(TranscriptError::NoClinicianLines);
    }
    Ok(turns)
}

fn split_prefix(line: &str) -> Option<(Speaker, &str)> {
    [Speaker::Clinician, Speaker::Patient]
        .into_iter()
        .find_map(|s| {
            line.strip_prefix(s.label())
                .and_then(|rest| rest.strip_prefix(':'))
                .map(|rest| (s, rest.trim()))
        })
}
