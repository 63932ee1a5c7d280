//! Emotional-cue markup embedded in patient replies.
//!
//! Patient replies carry non-verbal stage directions between asterisks, e.g.
//! `*pauses* I don't know what to say.` A cue is the run between a pair of
//! delimiters on one line that contains no delimiter and at least one
//! non-whitespace character. Anything else (an unpaired or empty pair) is
//! literal text. When cues are removed the whitespace around them collapses
//! to a single space, or to nothing at the start and end of the text.
//!
//! The same grammar, with `[` and `]`, is used for transcript files where
//! cues are written in brackets.

use serde::{Deserialize, Serialize};

/// A non-verbal annotation removed from speech text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionalCue {
    /// Character offset into the cue-free text where the cue stood.
    pub position: usize,
    pub action: String,
}

/// Delimiter style for cue markup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CueMarkup {
    /// `*pauses*`, as produced by the patient model.
    Asterisk,
    /// `[pauses]`, as written in transcripts.
    Bracket,
}

impl CueMarkup {
    fn open(self) -> char {
        match self {
            CueMarkup::Asterisk => '*',
            CueMarkup::Bracket => '[',
        }
    }

    fn close(self) -> char {
        match self {
            CueMarkup::Asterisk => '*',
            CueMarkup::Bracket => ']',
        }
    }

    fn wrap(self, action: &str) -> String {
        format!("{}{}{}", self.open(), action, self.close())
    }
}

/// Speech text with its cues split out.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCues {
    pub text: String,
    pub cues: Vec<EmotionalCue>,
}

enum Piece {
    Literal(String),
    Cue(String),
}

struct Scan {
    pieces: Vec<Piece>,
    /// Byte offset of the first opening delimiter that reached end of input
    /// without being closed or broken by a newline.
    unresolved_open: Option<usize>,
}

fn scan(raw: &str, markup: CueMarkup) -> Scan {
    let (open, close) = (markup.open(), markup.close());
    let chars: Vec<(usize, char)> = raw.char_indices().collect();
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut unresolved_open = None;
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        if c == open {
            let mut j = i + 1;
            while j < chars.len() {
                let d = chars[j].1;
                if d == close || d == open || d == '\n' {
                    break;
                }
                j += 1;
            }
            if j < chars.len() && chars[j].1 == close {
                let content: String = chars[i + 1..j].iter().map(|(_, c)| *c).collect();
                let action = content.trim();
                if !action.is_empty() {
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Cue(action.to_string()));
                    i = j + 1;
                    continue;
                }
            } else if j == chars.len() && unresolved_open.is_none() {
                unresolved_open = Some(offset);
            }
        }
        literal.push(c);
        i += 1;
    }
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Scan {
        pieces,
        unresolved_open,
    }
}

fn assemble(pieces: Vec<Piece>) -> ParsedCues {
    let mut text = String::new();
    let mut cues = Vec::new();
    let mut pending: Vec<String> = Vec::new();
    let mut boundary_space = false;

    for piece in pieces {
        match piece {
            Piece::Cue(action) => {
                let kept = text.trim_end().len();
                if kept < text.len() {
                    boundary_space = true;
                    text.truncate(kept);
                }
                pending.push(action);
            }
            Piece::Literal(s) if pending.is_empty() => text.push_str(&s),
            Piece::Literal(s) => {
                let rest = s.trim_start();
                if rest.len() < s.len() {
                    boundary_space = true;
                }
                if rest.is_empty() {
                    continue;
                }
                if boundary_space && !text.is_empty() {
                    text.push(' ');
                }
                let position = text.chars().count();
                cues.extend(
                    pending
                        .drain(..)
                        .map(|action| EmotionalCue { position, action }),
                );
                boundary_space = false;
                text.push_str(rest);
            }
        }
    }
    let position = text.chars().count();
    cues.extend(
        pending
            .into_iter()
            .map(|action| EmotionalCue { position, action }),
    );
    ParsedCues { text, cues }
}

/// Split asterisk cue markup out of a patient reply.
pub fn parse_emotional_cues(raw: &str) -> ParsedCues {
    parse_with(raw, CueMarkup::Asterisk)
}

pub fn parse_with(raw: &str, markup: CueMarkup) -> ParsedCues {
    assemble(scan(raw, markup).pieces)
}

/// Speech-only text for synthesis. May be empty when the reply was all cues.
pub fn strip_cues_for_tts(raw: &str) -> String {
    parse_emotional_cues(raw).text
}

/// Re-insert cues into text. Inverse of [`parse_with`] for text without
/// delimiter characters whose whitespace is single spaces and whose cues sit
/// at the start, the end, or directly after a space or inside a word.
pub fn render_cues(text: &str, cues: &[EmotionalCue], markup: CueMarkup) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + cues.len() * 8);
    let mut cursor = 0;
    for cue in cues {
        let at = cue.position.clamp(cursor, chars.len());
        out.extend(&chars[cursor..at]);
        cursor = at;
        let marker = markup.wrap(&cue.action);
        if at == chars.len() && at > 0 {
            out.push(' ');
            out.push_str(&marker);
        } else if at == 0 || chars[at - 1] == ' ' {
            out.push_str(&marker);
            out.push(' ');
        } else {
            out.push_str(&marker);
        }
    }
    out.extend(&chars[cursor..]);
    out
}

/// An incremental piece of a streamed reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CueEvent {
    Text(String),
    Cue(String),
}

/// Incremental cue parser for streamed replies.
///
/// Text is released as soon as it can no longer change: trailing whitespace
/// and anything after an unclosed delimiter are held back. Concatenating the
/// `Text` events gives the same text as [`parse_with`] on the whole input,
/// and the `Cue` events give its cues in order.
#[derive(Debug)]
pub struct CueStreamParser {
    markup: CueMarkup,
    raw: String,
    emitted_chars: usize,
    emitted_cues: usize,
}

impl CueStreamParser {
    pub fn new(markup: CueMarkup) -> Self {
        Self {
            markup,
            raw: String::new(),
            emitted_chars: 0,
            emitted_cues: 0,
        }
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn push(&mut self, chunk: &str) -> Vec<CueEvent> {
        self.raw.push_str(chunk);
        let scanned = scan(&self.raw, self.markup);
        let parsed = match scanned.unresolved_open {
            Some(end) => parse_with(&self.raw[..end], self.markup),
            None => assemble(scanned.pieces),
        };
        let visible = parsed.text.trim_end().chars().count();
        self.release(&parsed, visible)
    }

    /// Flush everything and return the final parse of the whole reply.
    pub fn finish(mut self) -> (Vec<CueEvent>, ParsedCues) {
        let parsed = parse_with(&self.raw, self.markup);
        let all = parsed.text.chars().count();
        let events = self.release(&parsed, all);
        (events, parsed)
    }

    fn release(&mut self, parsed: &ParsedCues, visible: usize) -> Vec<CueEvent> {
        let mut events = Vec::new();
        for cue in &parsed.cues[self.emitted_cues.min(parsed.cues.len())..] {
            let before: String = parsed
                .text
                .chars()
                .take(cue.position.min(visible))
                .collect();
            self.emit_text(&parsed.text, before.trim_end().chars().count(), &mut events);
            events.push(CueEvent::Cue(cue.action.clone()));
            self.emitted_cues += 1;
        }
        self.emit_text(&parsed.text, visible, &mut events);
        events
    }

    fn emit_text(&mut self, text: &str, upto: usize, events: &mut Vec<CueEvent>) {
        if upto > self.emitted_chars {
            let delta: String = text
                .chars()
                .skip(self.emitted_chars)
                .take(upto - self.emitted_chars)
                .collect();
            self.emitted_chars = upto;
            events.push(CueEvent::Text(delta));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cue(position: usize, action: &str) -> EmotionalCue {
        EmotionalCue {
            position,
            action: action.to_string(),
        }
    }

    #[test]
    fn leading_cue() {
        let p = parse_emotional_cues("*pauses* I don't know what to say.");
        assert_eq!(p.text, "I don't know what to say.");
        assert_eq!(p.cues, vec![cue(0, "pauses")]);
    }

    #[test]
    fn no_markers() {
        let p = parse_emotional_cues("Hello doctor.");
        assert_eq!(p.text, "Hello doctor.");
        assert!(p.cues.is_empty());
    }

    #[test]
    fn inner_cues_collapse_whitespace() {
        let p = parse_emotional_cues("I *starts crying* can't do this *long pause* again.");
        assert_eq!(p.text, "I can't do this again.");
        assert_eq!(p.cues, vec![cue(2, "starts crying"), cue(16, "long pause")]);
    }

    #[test]
    fn unpaired_and_empty_asterisks_are_literal() {
        assert_eq!(parse_emotional_cues("5 * 3 = 15").text, "5 * 3 = 15");
        assert_eq!(parse_emotional_cues("a ** b").text, "a ** b");
        let p = parse_emotional_cues("*sighs\n* ok");
        assert!(p.cues.is_empty());
        assert_eq!(p.text, "*sighs\n* ok");
    }

    #[test]
    fn strip_for_tts() {
        assert_eq!(strip_cues_for_tts("*sighs* Okay."), "Okay.");
        assert_eq!(strip_cues_for_tts("Okay."), "Okay.");
        assert_eq!(strip_cues_for_tts("*sobs*"), "");
        assert_eq!(strip_cues_for_tts("Okay. *sighs*"), "Okay.");
    }

    #[test]
    fn adjacent_cues_share_a_position() {
        let p = parse_emotional_cues("*sighs* *looks away* Fine.");
        assert_eq!(p.text, "Fine.");
        assert_eq!(p.cues, vec![cue(0, "sighs"), cue(0, "looks away")]);
    }

    #[test]
    fn glued_cue_inserts_no_space() {
        let p = parse_emotional_cues("I*sighs*ok");
        assert_eq!(p.text, "Iok");
        assert_eq!(p.cues, vec![cue(1, "sighs")]);
        assert_eq!(
            render_cues(&p.text, &p.cues, CueMarkup::Asterisk),
            "I*sighs*ok"
        );
    }

    #[test]
    fn bracket_markup() {
        let p = parse_with("[pauses] I see. [looks down]", CueMarkup::Bracket);
        assert_eq!(p.text, "I see.");
        assert_eq!(p.cues, vec![cue(0, "pauses"), cue(6, "looks down")]);
        assert_eq!(
            render_cues(&p.text, &p.cues, CueMarkup::Bracket),
            "[pauses] I see. [looks down]"
        );
    }

    #[test]
    fn render_round_trips_the_worked_example() {
        let raw = "I *starts crying* can't do this *long pause* again.";
        let p = parse_emotional_cues(raw);
        assert_eq!(render_cues(&p.text, &p.cues, CueMarkup::Asterisk), raw);
    }

    #[test]
    fn stream_parser_emits_cue_then_text() {
        let mut s = CueStreamParser::new(CueMarkup::Asterisk);
        let mut events = Vec::new();
        for chunk in ["*pau", "ses* ", "I ", "see."] {
            events.extend(s.push(chunk));
        }
        let (tail, parsed) = s.finish();
        events.extend(tail);
        assert_eq!(parsed.text, "I see.");
        assert_eq!(events[0], CueEvent::Cue("pauses".into()));
        let text: String = events
            .iter()
            .filter_map(|e| match e {
                CueEvent::Text(t) => Some(t.as_str()),
                _ => None,
            })
            .collect();
        assert_eq!(text, "I see.");
    }

    #[test]
    fn stream_parser_holds_unclosed_marker() {
        let mut s = CueStreamParser::new(CueMarkup::Asterisk);
        assert_eq!(s.push("Well *sig"), vec![CueEvent::Text("Well".into())]);
        assert_eq!(
            s.push("hs* ok"),
            vec![CueEvent::Cue("sighs".into()), CueEvent::Text(" ok".into())]
        );
    }
}
