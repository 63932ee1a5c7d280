//! Proptest strategies for domain values.

use chrono::{DateTime, TimeZone, Utc};
use proptest::prelude::*;

use pal_core::cues::EmotionalCue;
use pal_core::feedback::{
    analyze_response, FeedbackItem, FeedbackReport, Grounding, NurseCategory, NurseLexicon,
};
use pal_core::persona::{CaseSections, PersonaProfile, Stage};
use pal_core::session::{Modality, Session, SessionStatus, Turn};

/// Strings mixing plain words, whitespace and both cue delimiter styles.
pub fn cue_text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        4 => "[a-z]{1,6}",
        2 => Just(" ".to_string()),
        1 => Just("  ".to_string()),
        1 => Just("\t".to_string()),
        1 => Just("\n".to_string()),
        2 => Just("*".to_string()),
        1 => Just("[".to_string()),
        1 => Just("]".to_string()),
        1 => Just("é".to_string()),
        1 => Just("—".to_string()),
        1 => Just(".".to_string()),
    ];
    prop::collection::vec(piece, 0..24).prop_map(|v| v.concat())
}

/// Text and cues in the shape the renderer inverts exactly.
pub fn well_formed_cues() -> impl Strategy<Value = (String, Vec<EmotionalCue>)> {
    let words = prop::collection::vec("[a-zé'.,]{1,6}", 0..6).prop_map(|w| w.join(" "));
    words
        .prop_flat_map(|text| {
            let chars: Vec<char> = text.chars().collect();
            let valid: Vec<usize> = (0..=chars.len())
                .filter(|&p| p == 0 || p == chars.len() || chars[p] != ' ')
                .collect();
            let action = prop_oneof!["[a-z]{1,8}", "[a-z]{1,5} [a-z]{1,5}"];
            let cue = (prop::sample::select(valid), action);
            (Just(text), prop::collection::vec(cue, 0..4))
        })
        .prop_map(|(text, mut cues)| {
            cues.sort_by_key(|(p, _)| *p);
            let cues = cues
                .into_iter()
                .map(|(position, action)| EmotionalCue { position, action })
                .collect();
            (text, cues)
        })
}

/// Free text with no line breaks and nothing that looks like a field label.
pub fn prose() -> impl Strategy<Value = String> {
    prop::collection::vec("[A-Za-z][a-z]{0,7}[,.]?", 1..8).prop_map(|w| w.join(" "))
}

fn stage() -> impl Strategy<Value = Stage> {
    (prose(), prose(), prop_oneof![Just(String::new()), prose()]).prop_map(
        |(name, description, advance_hint)| Stage {
            name,
            description,
            advance_hint,
        },
    )
}

/// A profile that passes validation.
pub fn valid_persona() -> impl Strategy<Value = PersonaProfile> {
    (
        "[a-z][a-z0-9]{0,6}(-[a-z0-9]{1,5}){0,2}",
        prose(),
        0i64..110,
        prop_oneof![
            Just("female".to_string()),
            Just("male".to_string()),
            prose()
        ],
        prop::option::of("images/[a-z]{1,8}\\.png"),
        [prose(), prose(), prose(), prose(), prose()],
        prop::collection::vec(stage(), 1..5),
    )
        .prop_flat_map(
            |(id, display_name, age, gender, profile_image, case, stages)| {
                let n = stages.len();
                (
                    Just((id, display_name, age, gender, profile_image, case)),
                    Just(stages),
                    0..n,
                )
            },
        )
        .prop_map(
            |((id, display_name, age, gender, profile_image, case), stages, initial_stage)| {
                let [purpose, disposition, past_medical_history, social_history, setting] = case;
                // Stage names must be unique.
                let stages = stages
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut s)| {
                        s.name = format!("{} {i}", s.name);
                        s
                    })
                    .collect();
                PersonaProfile {
                    id,
                    display_name,
                    age,
                    gender,
                    profile_image,
                    initial_stage,
                    case: CaseSections {
                        purpose,
                        disposition,
                        past_medical_history,
                        social_history,
                        setting,
                    },
                    stages,
                }
            },
        )
}

/// Any profile, valid or not.
pub fn any_persona() -> impl Strategy<Value = PersonaProfile> {
    (
        ".{0,12}",
        ".{0,8}",
        -5i64..200,
        ".{0,6}",
        prop::option::of(".{0,12}"),
        prop::collection::vec(".{0,6}", 5),
        prop::collection::vec((".{0,6}", ".{0,6}", ".{0,6}"), 0..4),
        0usize..6,
    )
        .prop_map(
            |(id, display_name, age, gender, profile_image, case, stages, initial_stage)| {
                PersonaProfile {
                    id,
                    display_name,
                    age,
                    gender,
                    profile_image,
                    initial_stage,
                    case: CaseSections {
                        purpose: case[0].clone(),
                        disposition: case[1].clone(),
                        past_medical_history: case[2].clone(),
                        social_history: case[3].clone(),
                        setting: case[4].clone(),
                    },
                    stages: stages
                        .into_iter()
                        .map(|(name, description, advance_hint)| Stage {
                            name,
                            description,
                            advance_hint,
                        })
                        .collect(),
                }
            },
        )
}

pub fn feedback_item(ordinal: usize) -> impl Strategy<Value = FeedbackItem> {
    (prose(), prose(), prose()).prop_map(
        move |(scenario, current_approach, improvement_suggestion)| FeedbackItem {
            ordinal,
            scenario,
            current_approach,
            improvement_suggestion,
            nurse_category: None,
            grounded: Grounding::Unchecked,
        },
    )
}

pub fn feedback_items() -> impl Strategy<Value = Vec<FeedbackItem>> {
    (1usize..6).prop_flat_map(|n| (1..=n).map(feedback_item).collect::<Vec<_>>())
}

pub fn nurse_category() -> impl Strategy<Value = NurseCategory> {
    prop::sample::select(NurseCategory::ALL.to_vec())
}

/// Millisecond-precision UTC timestamps in a ten-year window.
pub fn timestamp() -> impl Strategy<Value = DateTime<Utc>> {
    (1_600_000_000_000i64..1_915_000_000_000).prop_map(|ms| Utc.timestamp_millis_opt(ms).unwrap())
}

fn patient_raw() -> impl Strategy<Value = String> {
    prop_oneof![
        prose(),
        (prose(), "[a-z]{1,8}").prop_map(|(t, c)| format!("*{c}* {t}")),
        (prose(), prose(), "[a-z ]{1,10}").prop_map(|(a, b, c)| format!("{a} *{c}* {b}")),
    ]
}

/// A structurally valid session for a three-stage persona.
pub fn session() -> impl Strategy<Value = Session> {
    (
        "[a-z0-9]{1,16}",
        "[a-z0-9]{1,16}",
        prop_oneof![
            Just("ruth-alvarez".to_string()),
            Just("james-okafor".to_string())
        ],
        prop_oneof![Just(Modality::Text), Just(Modality::Voice)],
        timestamp(),
        prop::collection::vec((prose(), patient_raw(), timestamp(), "[0-9a-f]{64}"), 0..6),
        any::<bool>(),
        0usize..3,
        any::<bool>(),
    )
        .prop_map(
            |(
                id,
                user_id,
                persona_id,
                modality,
                created_at,
                exchanges,
                dangling,
                stage_index,
                finished,
            )| {
                let mut turns = Vec::new();
                for (clinician, patient, at, hash) in exchanges {
                    let mut c = Turn::clinician(turns.len(), clinician, at);
                    if modality == Modality::Voice {
                        c.audio_ref = Some(hash.clone());
                    }
                    c.usage.push(format!("u{}", turns.len()));
                    turns.push(c);
                    let mut p = Turn::patient(turns.len(), patient, at, at);
                    if modality == Modality::Voice {
                        p.audio_ref = Some(hash);
                    }
                    turns.push(p);
                }
                if dangling {
                    let mut c = Turn::clinician(turns.len(), "Are you still there?", created_at);
                    if modality == Modality::Voice {
                        c.audio_ref = Some("0".repeat(64));
                    }
                    turns.push(c);
                }
                let feedback = finished.then(|| report_for(&id, &turns, created_at));
                Session {
                    id,
                    user_id,
                    persona_id,
                    modality,
                    created_at,
                    turns,
                    stage_index,
                    status: if finished {
                        SessionStatus::Finished
                    } else {
                        SessionStatus::Active
                    },
                    feedback,
                }
            },
        )
}

/// The worked feedback example analyzed against `turns`.
pub fn report_for(session_id: &str, turns: &[Turn], at: DateTime<Utc>) -> FeedbackReport {
    let (items, issues, grounding) =
        analyze_response(super::EXAMPLE_FEEDBACK, turns, &NurseLexicon::default()).unwrap();
    FeedbackReport {
        session_id: Some(session_id.to_string()),
        items,
        issues,
        grounding,
        raw_response: super::EXAMPLE_FEEDBACK.to_string(),
        model_id: "mock".into(),
        generated_at: at,
        usage: vec!["u-feedback".into()],
        parse_retries: 0,
    }
}
