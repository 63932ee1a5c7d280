use crate::cues::{self, CueMarkup};
use crate::providers::ChatMessage;
use crate::session::{Speaker, Turn};

use super::FeedbackError;

/// The feedback system prompt, stored once as a fixture and sent unmodified.
pub const FEEDBACK_SYSTEM_PROMPT: &str = include_str!("../../fixtures/feedback_prompt.txt");

/// SHA-256 of [`FEEDBACK_SYSTEM_PROMPT`].
pub const FEEDBACK_PROMPT_SHA256: &str =
    "0f8de1602e925679e310f22b16b2c052612e3f6298b5c4b25b4af2943106296c";

/// One `Doctor: ...` / `Patient: ...` line per turn. Patient cues are
/// written in brackets where they occurred.
pub fn render_transcript(turns: &[Turn]) -> String {
    let mut out = String::new();
    for turn in turns {
        let body = match turn.role {
            Speaker::Clinician => turn.text.clone(),
            Speaker::Patient => cues::render_cues(&turn.text, &turn.cues, CueMarkup::Bracket),
        };
        out.push_str(turn.role.label());
        out.push_str(": ");
        out.push_str(&body.replace(['\r', '\n'], " "));
        out.push('\n');
    }
    out
}

/// System prompt plus the rendered transcript.
pub fn build_feedback_prompt(turns: &[Turn]) -> Result<Vec<ChatMessage>, FeedbackError> {
    if !turns.iter().any(|t| t.role == Speaker::Clinician) {
        return Err(FeedbackError::NothingToAnalyze);
    }
    Ok(vec![
        ChatMessage::system(FEEDBACK_SYSTEM_PROMPT),
        ChatMessage::user(render_transcript(turns)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::Role;

    #[test]
    fn system_message_is_the_fixture() {
        let now = crate::now();
        let msgs = build_feedback_prompt(&[Turn::clinician(0, "Hello", now)]).unwrap();
        assert_eq!(msgs[0].role, Role::System);
        assert!(msgs[0]
            .content
            .starts_with("Analyze a transcript from a doctor-patient encounter"));
        assert_eq!(msgs[0].content, FEEDBACK_SYSTEM_PROMPT);
    }

    #[test]
    fn two_turns_render_two_lines_in_order() {
        let now = crate::now();
        let turns = [
            Turn::clinician(0, "How are you?", now),
            Turn::patient(1, "*pauses* Not great.", now, now),
        ];
        let msgs = build_feedback_prompt(&turns).unwrap();
        let lines: Vec<&str> = msgs[1].content.lines().collect();
        assert_eq!(
            lines,
            vec!["Doctor: How are you?", "Patient: [pauses] Not great."]
        );
    }

    #[test]
    fn empty_transcript_is_rejected() {
        assert!(matches!(
            build_feedback_prompt(&[]),
            Err(FeedbackError::NothingToAnalyze)
        ));
    }
}
