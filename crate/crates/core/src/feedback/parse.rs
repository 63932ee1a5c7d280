//! Parser for numbered feedback lists with bold field labels:
//!
//! ```text
//! 1. **Scenario**: Doctor uses medical jargon.
//!    - **Current Approach**: "There's evidence of multisystem organ failure."
//!    - **Improvement Suggestion**: Replace jargon with simpler language.
//! ```
//!
//! Labels may sit on the numbered line or on their own bulleted lines, with
//! the colon inside or outside the bold markers. A field continues over
//! following lines until the next label, the next item or a blank line.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{FeedbackItem, Grounding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackField {
    Scenario,
    CurrentApproach,
    ImprovementSuggestion,
}

impl FeedbackField {
    pub const ALL: [FeedbackField; 3] = [
        FeedbackField::Scenario,
        FeedbackField::CurrentApproach,
        FeedbackField::ImprovementSuggestion,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FeedbackField::Scenario => "Scenario",
            FeedbackField::CurrentApproach => "Current Approach",
            FeedbackField::ImprovementSuggestion => "Improvement Suggestion",
        }
    }

    fn from_label(label: &str) -> Option<Self> {
        let folded = label
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        Self::ALL
            .into_iter()
            .find(|f| f.label().to_lowercase() == folded)
    }
}

/// A numbered item that lacked one or more fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemIssue {
    pub ordinal: usize,
    pub missing: Vec<FeedbackField>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFeedback {
    pub items: Vec<FeedbackItem>,
    pub issues: Vec<ItemIssue>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no complete feedback items in model response ({} incomplete)", issues.len())]
pub struct FeedbackParseError {
    pub raw: String,
    pub issues: Vec<ItemIssue>,
}

static ITEM_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(\d+)[.)]\s+(.*)$").unwrap());

static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    let labels = r"scenario|current\s+approach|improvement\s+suggestion";
    Regex::new(&format!(
        r"(?i)^\s*(?:[-*•]\s+)?(?:\*\*\s*(?P<bold>{labels})\s*:?\s*\*\*\s*:?|(?P<plain>{labels})\s*:)\s*(?P<rest>.*)$"
    ))
    .unwrap()
});

#[derive(Default)]
struct Block {
    fields: Vec<(FeedbackField, Vec<String>)>,
    open: bool,
}

impl Block {
    fn line(&mut self, line: &str) {
        if let Some(c) = LABEL.captures(line) {
            let label = c.name("bold").or_else(|| c.name("plain")).unwrap().as_str();
            let field = FeedbackField::from_label(label).expect("regex only matches known labels");
            let rest = c["rest"].trim();
            let mut lines = Vec::new();
            if !rest.is_empty() {
                lines.push(rest.to_string());
            }
            self.fields.push((field, lines));
            self.open = true;
        } else if line.trim().is_empty() {
            self.open = false;
        } else if self.open {
            if let Some((_, lines)) = self.fields.last_mut() {
                lines.push(line.trim().to_string());
            }
        }
    }

    fn value(&self, field: FeedbackField) -> Option<String> {
        self.fields
            .iter()
            .find(|(f, lines)| *f == field && !lines.is_empty())
            .map(|(_, lines)| lines.join(" "))
    }
}

/// Remove one pair of double quotes around a quoted utterance.
pub fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('\u{201c}', '\u{201d}')] {
        if s.len() >= open.len_utf8() + close.len_utf8()
            && s.starts_with(open)
            && s.ends_with(close)
        {
            return s[open.len_utf8()..s.len() - close.len_utf8()].trim();
        }
    }
    s
}

pub fn parse_feedback_response(raw: &str) -> Result<ParsedFeedback, FeedbackParseError> {
    let mut blocks: Vec<Block> = Vec::new();
    for line in raw.lines() {
        if let Some(c) = ITEM_START.captures(line) {
            let mut block = Block::default();
            block.line(&c[2]);
            blocks.push(block);
        } else if let Some(block) = blocks.last_mut() {
            block.line(line);
        }
    }

    let mut items = Vec::new();
    let mut issues = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let ordinal = i + 1;
        let values: Vec<Option<String>> =
            FeedbackField::ALL.iter().map(|f| block.value(*f)).collect();
        let missing: Vec<FeedbackField> = FeedbackField::ALL
            .iter()
            .zip(&values)
            .filter(|(_, v)| v.is_none())
            .map(|(f, _)| *f)
            .collect();
        if block.fields.is_empty() {
            // A numbered line with no labels at all is ordinary prose.
            continue;
        }
        if !missing.is_empty() {
            issues.push(ItemIssue { ordinal, missing });
            continue;
        }
        let [scenario, current, suggestion]: [String; 3] = values
            .into_iter()
            .map(Option::unwrap)
            .collect::<Vec<_>>()
            .try_into()
            .expect("three fields");
        let current_approach = strip_quotes(&current).to_string();
        if current_approach.is_empty() {
            issues.push(ItemIssue {
                ordinal,
                missing: vec![FeedbackField::CurrentApproach],
            });
            continue;
        }
        items.push(FeedbackItem {
            ordinal,
            scenario,
            current_approach,
            improvement_suggestion: suggestion,
            nurse_category: None,
            grounded: Grounding::Unchecked,
        });
    }

    if items.is_empty() {
        return Err(FeedbackParseError {
            raw: raw.to_string(),
            issues,
        });
    }
    Ok(ParsedFeedback { items, issues })
}

/// Write items in the format [`parse_feedback_response`] reads.
pub fn render_feedback_items(items: &[FeedbackItem]) -> String {
    let mut out = String::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!(
            "{}. **Scenario**: {}\n   - **Current Approach**: \"{}\"\n   - **Improvement Suggestion**: {}\n",
            item.ordinal, item.scenario, item.current_approach, item.improvement_suggestion
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../fixtures/example_feedback.txt");

    #[test]
    fn worked_example_items() {
        let parsed = parse_feedback_response(EXAMPLE).unwrap();
        assert_eq!(parsed.items.len(), 3);
        assert!(parsed.issues.is_empty());
        let first = &parsed.items[0];
        assert_eq!(
            first.scenario,
            "Doctor introduces prognosis without assessing the emotion."
        );
        assert_eq!(first.current_approach, "The prognosis is not very good.");
        let second = &parsed.items[1];
        assert_eq!(
            second.current_approach,
            "There's evidence of multisystem organ failure."
        );
        assert!(second
            .improvement_suggestion
            .contains("Replace jargon with simpler language."));
        assert_eq!(
            parsed.items[2].current_approach,
            "This must be really hard. But let's talk about next steps."
        );
        assert_eq!(
            parsed.items.iter().map(|i| i.ordinal).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }

    #[test]
    fn unstructured_text_is_an_error() {
        let err = parse_feedback_response("no structured content here").unwrap_err();
        assert_eq!(err.raw, "no structured content here");
        assert!(err.issues.is_empty());
    }

    #[test]
    fn incomplete_items_are_reported() {
        let raw = "1. **Scenario**: A\n   - **Current Approach**: \"B\"\n\n\
                   2. **Scenario**: C\n   - **Current Approach**: \"D\"\n   - **Improvement Suggestion**: E\n";
        let parsed = parse_feedback_response(raw).unwrap();
        assert_eq!(parsed.items.len(), 1);
        assert_eq!(parsed.items[0].ordinal, 2);
        assert_eq!(
            parsed.issues,
            vec![ItemIssue {
                ordinal: 1,
                missing: vec![FeedbackField::ImprovementSuggestion]
            }]
        );
    }

    #[test]
    fn label_variants_and_continuations() {
        let raw = "Here is my feedback:\n\n\
                   1) **Scenario:** Opening\n\
                   **current approach:** \u{201c}Hi there.\u{201d}\n\
                   - Improvement Suggestion: Introduce yourself\n   and your role.\n\n\
                   Overall a good start.\n";
        let parsed = parse_feedback_response(raw).unwrap();
        let item = &parsed.items[0];
        assert_eq!(item.scenario, "Opening");
        assert_eq!(item.current_approach, "Hi there.");
        assert_eq!(
            item.improvement_suggestion,
            "Introduce yourself and your role."
        );
    }

    #[test]
    fn render_then_parse() {
        let parsed = parse_feedback_response(EXAMPLE).unwrap();
        let again = parse_feedback_response(&render_feedback_items(&parsed.items)).unwrap();
        assert_eq!(again.items, parsed.items);
    }
}
