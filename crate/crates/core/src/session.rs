//! Session and turn records shared by the conversation engine and the store.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cues::{self, EmotionalCue};
use crate::feedback::FeedbackReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Voice,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Voice => "voice",
        })
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Modality::Text),
            "voice" => Ok(Modality::Voice),
            other => Err(format!(
                "unknown modality {other:?}, expected text or voice"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Clinician,
    Patient,
}

impl Speaker {
    /// Label used in rendered transcripts.
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Clinician => "Doctor",
            Speaker::Patient => "Patient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Speaker,
    /// Speech with cue markup removed.
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<EmotionalCue>,
    /// As typed, transcribed or generated, markup included.
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_ref: Option<String>,
    pub started_at: DateTime<Utc>,
    pub completed_at: DateTime<Utc>,
    /// Ids of the usage records produced while making this turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub usage: Vec<String>,
}

impl Turn {
    /// A clinician turn. Clinician input is never parsed for cues.
    pub fn clinician(index: usize, raw_text: impl Into<String>, at: DateTime<Utc>) -> Self {
        let raw_text = raw_text.into();
        Self {
            index,
            role: Speaker::Clinician,
            text: raw_text.clone(),
            cues: Vec::new(),
            raw_text,
            audio_ref: None,
            started_at: at,
            completed_at: at,
            usage: Vec::new(),
        }
    }

    /// A patient turn, with cues parsed out of the generated text.
    pub fn patient(
        index: usize,
        raw_text: impl Into<String>,
        started_at: DateTime<Utc>,
        completed_at: DateTime<Utc>,
    ) -> Self {
        let raw_text = raw_text.into();
        let parsed = cues::parse_emotional_cues(&raw_text);
        Self {
            index,
            role: Speaker::Patient,
            text: parsed.text,
            cues: parsed.cues,
            raw_text,
            audio_ref: None,
            started_at,
            completed_at,
            usage: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub user_id: String,
    pub persona_id: String,
    pub modality: Modality,
    pub created_at: DateTime<Utc>,
    pub turns: Vec<Turn>,
    pub stage_index: usize,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackReport>,
}

impl Session {
    pub fn is_active(&self) -> bool {
        self.status == SessionStatus::Active
    }

    /// The next turn belongs to the clinician.
    pub fn awaiting_clinician(&self) -> bool {
        self.turns.len() % 2 == 0
    }

    pub fn clinician_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Speaker::Clinician)
    }

    /// Check the structural invariants. `stage_count` is the persona's
    /// number of stages.
    pub fn check_invariants(&self, stage_count: usize) -> Result<(), String> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::Clinician
            } else {
                Speaker::Patient
            };
            if turn.role != expected {
                return Err(format!(
                    "turn {i} is {:?}, expected {expected:?}",
                    turn.role
                ));
            }
            if turn.index != i {
                return Err(format!("turn {i} has index {}", turn.index));
            }
            if turn.role == Speaker::Patient {
                let parsed = cues::parse_emotional_cues(&turn.raw_text);
                if parsed.text != turn.text || parsed.cues != turn.cues {
                    return Err(format!("turn {i} text and cues do not match raw_text"));
                }
            }
            match (self.modality, turn.role, turn.audio_ref.is_some()) {
                (Modality::Voice, Speaker::Clinician, false) => {
                    return Err(format!("voice turn {i} has no audio"))
                }
                (Modality::Text, _, true) => return Err(format!("text-mode turn {i} has audio")),
                _ => {}
            }
        }
        if self.feedback.is_some() && self.is_active() {
            return Err("feedback attached to an active session".into());
        }
        if self.stage_index >= stage_count {
            return Err(format!(
                "stage index {} out of range for {stage_count} stage(s)",
                self.stage_index
            ));
        }
        Ok(())
    }
}
