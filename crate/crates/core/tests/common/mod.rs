//! Fixtures and independent oracles shared by the integration test targets.
#![allow(dead_code)]

pub mod gen;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use pal_core::conversation::{Engine, EngineOptions};
use pal_core::persona::{load_persona_library, PersonaLibrary};
use pal_core::providers::mock::{MockProvider, MockScript};
use pal_core::providers::usage::Rates;
use pal_core::providers::usage::UsageSink;
use pal_core::providers::Providers;
use pal_core::store::{FileStore, MemoryStore, SessionStore};
use regex::Regex;
use sha2::{Digest, Sha256};

pub const EXAMPLE_FEEDBACK: &str = include_str!("../../fixtures/example_feedback.txt");
pub const PROMPT_FIXTURE: &str = include_str!("../../fixtures/feedback_prompt.txt");

/// The three quoted clinician lines of the worked feedback example.
pub const EXAMPLE_QUOTES: [&str; 3] = [
    "The prognosis is not very good.",
    "There's evidence of multisystem organ failure.",
    "This must be really hard. But let's talk about next steps.",
];

pub fn repo_personas() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../personas")
}

pub fn library() -> Arc<PersonaLibrary> {
    Arc::new(load_persona_library(&repo_personas()).expect("example personas load"))
}

pub const PERSONA: &str = "ruth-alvarez";

pub struct Harness<S> {
    pub engine: Engine,
    pub mock: Arc<MockProvider>,
    pub store: Arc<S>,
    pub user: String,
}

fn build<S>(store: Arc<S>, script: MockScript) -> Harness<S>
where
    S: SessionStore + UsageSink + 'static,
{
    let mock = Arc::new(MockProvider::new(script));
    let providers = Providers::single(mock.clone(), Rates::default(), store.clone());
    let engine = Engine::new(
        library(),
        store.clone(),
        providers,
        EngineOptions::default(),
    );
    let user = engine.create_user().unwrap().id;
    Harness {
        engine,
        mock,
        store,
        user,
    }
}

/// Engine over an in-memory store with the built-in mock script.
pub fn memory_harness() -> Harness<MemoryStore> {
    build(Arc::new(MemoryStore::new()), MockScript::builtin())
}

pub fn memory_harness_with(script: MockScript) -> Harness<MemoryStore> {
    build(Arc::new(MemoryStore::new()), script)
}

pub fn file_harness(dir: &std::path::Path) -> Harness<FileStore> {
    build(
        Arc::new(FileStore::open(dir).unwrap()),
        MockScript::builtin(),
    )
}

/// Cue grammar oracle built on a regular expression rather than a hand
/// scanner. Returns the cue-free text and `(position, action)` pairs.
pub fn cue_oracle(raw: &str, open: char, close: char) -> (String, Vec<(usize, String)>) {
    const MARK: char = '\u{F8FF}';
    assert!(!raw.contains(MARK));
    static PATTERNS: OnceLock<Mutex<HashMap<(char, char), Regex>>> = OnceLock::new();
    let re = PATTERNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry((open, close))
        .or_insert_with(|| {
            let (o, c) = (
                regex::escape(&open.to_string()),
                regex::escape(&close.to_string()),
            );
            let body = if open == close {
                format!("[^{o}\\n]")
            } else {
                format!("[^{o}{c}\\n]")
            };
            Regex::new(&format!("{o}({body}*){c}")).unwrap()
        })
        .clone();

    let mut marked = String::new();
    let mut actions = Vec::new();
    let mut pos = 0;
    while pos < raw.len() {
        match re.find_at(raw, pos) {
            Some(m) => {
                let content = raw[m.start() + open.len_utf8()..m.end() - close.len_utf8()].trim();
                marked.push_str(&raw[pos..m.start()]);
                if content.is_empty() {
                    // The opener is literal; the closer may open the next cue.
                    marked.push(open);
                    pos = m.start() + open.len_utf8();
                } else {
                    marked.push(MARK);
                    actions.push(content.to_string());
                    pos = m.end();
                }
            }
            None => {
                marked.push_str(&raw[pos..]);
                break;
            }
        }
    }

    let chars: Vec<char> = marked.chars().collect();
    let mut text = String::new();
    let mut positions = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !(chars[i].is_whitespace() || chars[i] == MARK) {
            text.push(chars[i]);
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && (chars[i].is_whitespace() || chars[i] == MARK) {
            i += 1;
        }
        let run = &chars[start..i];
        let marks = run.iter().filter(|&&c| c == MARK).count();
        if marks == 0 {
            text.extend(run);
            continue;
        }
        let interior = start > 0 && i < chars.len();
        if interior && run.iter().any(|c| c.is_whitespace()) {
            text.push(' ');
        }
        let at = text.chars().count();
        positions.extend(std::iter::repeat_n(at, marks));
    }
    (text, positions.into_iter().zip(actions).collect())
}

/// The mock's synthesized audio, recomputed from its published definition.
pub fn mock_audio_oracle(text: &str) -> Vec<u8> {
    let seed = Sha256::digest(text.as_bytes());
    let mut out = Vec::new();
    for i in 0..text.chars().count() as u64 {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(i.to_le_bytes());
        out.extend_from_slice(&h.finalize());
    }
    out
}

/// A minimal mono 16-bit PCM WAV of `samples` silent samples at 16 kHz.
pub fn silent_wav(samples: u32) -> Vec<u8> {
    let data_len = samples * 2;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&16_000u32.to_le_bytes());
    out.extend_from_slice(&32_000u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.resize(44 + data_len as usize, 0);
    out
}

/// One step of a randomized operation sequence against a text session.
#[derive(Debug, Clone)]
pub enum Op {
    Submit(String),
    FailNextChat(pal_core::providers::mock::MockFailure),
    Retry,
    SetStage(usize),
    Finish,
}

pub fn op_strategy() -> impl proptest::strategy::Strategy<Value = Op> {
    use pal_core::providers::mock::MockFailure;
    use proptest::prelude::*;
    let failure = prop_oneof![
        prop_oneof![Just(400u16), Just(429), Just(500), Just(503)].prop_map(MockFailure::Status),
        Just(MockFailure::Timeout),
        (0usize..20).prop_map(MockFailure::TimeoutAfter),
        (0usize..20).prop_map(MockFailure::DisconnectAfter),
    ];
    prop_oneof![
        6 => "[A-Za-z]{1,8}( [a-z]{1,8}){0,3}[.?]?".prop_map(Op::Submit),
        1 => Just(Op::Submit("   ".into())),
        3 => failure.prop_map(Op::FailNextChat),
        2 => Just(Op::Retry),
        1 => (0usize..5).prop_map(Op::SetStage),
        1 => Just(Op::Finish),
    ]
}

/// Run `ops` against a fresh text session and check, after every step,
/// that the outcome matches a reference model and the stored session keeps
/// its invariants.
pub async fn check_alternation(ops: &[Op]) -> Result<(), String> {
    use pal_core::conversation::{collect_reply, EngineError};
    use pal_core::session::Modality;

    let h = memory_harness();
    let stages = h.engine.library().get(PERSONA).unwrap().stages.len();
    let id = h
        .engine
        .start_session(&h.user, PERSONA, Modality::Text)
        .map_err(|e| e.to_string())?
        .id;
    let mut turns = 0usize;
    let mut finished = false;
    let mut pending = 0usize;

    for (step, op) in ops.iter().enumerate() {
        let ctx = |m: String| format!("step {step} {op:?}: {m}");
        match op {
            Op::FailNextChat(f) => {
                h.mock.inject_chat_failure(*f);
                pending += 1;
            }
            Op::Submit(_) | Op::Retry if finished => {
                let r = match op {
                    Op::Submit(t) => h.engine.submit_text(&id, t).await,
                    _ => h.engine.retry_reply(&id).await,
                };
                if !matches!(r, Err(EngineError::SessionFinished)) {
                    return Err(ctx(format!("expected session_finished, got {r:?}")));
                }
            }
            Op::Submit(text) => {
                let r = h.engine.submit_text(&id, text).await;
                if turns % 2 == 1 {
                    if !matches!(r, Err(EngineError::OutOfTurn)) {
                        return Err(ctx(format!("expected out_of_turn, got {r:?}")));
                    }
                } else if text.trim().is_empty() {
                    if !matches!(r, Err(EngineError::InvalidInput(_))) {
                        return Err(ctx(format!("expected invalid input, got {r:?}")));
                    }
                } else {
                    turns += 1;
                    let failing = pending > 0;
                    pending = pending.saturating_sub(1);
                    let ok = match r {
                        Ok(reply) => collect_reply(reply.events).await.3.is_ok(),
                        Err(EngineError::Provider(_)) => false,
                        Err(e) => return Err(ctx(format!("unexpected error {e:?}"))),
                    };
                    if ok == failing {
                        return Err(ctx(format!(
                            "reply success {ok} but failure injected {failing}"
                        )));
                    }
                    if ok {
                        turns += 1;
                    }
                }
            }
            Op::Retry => {
                let r = h.engine.retry_reply(&id).await;
                if turns % 2 == 0 {
                    if !matches!(r, Err(EngineError::NothingToRetry)) {
                        return Err(ctx(format!("expected nothing_to_retry, got {r:?}")));
                    }
                } else {
                    let failing = pending > 0;
                    pending = pending.saturating_sub(1);
                    let ok = match r {
                        Ok(reply) => collect_reply(reply.events).await.3.is_ok(),
                        Err(EngineError::Provider(_)) => false,
                        Err(e) => return Err(ctx(format!("unexpected error {e:?}"))),
                    };
                    if ok == failing {
                        return Err(ctx(format!(
                            "retry success {ok} but failure injected {failing}"
                        )));
                    }
                    if ok {
                        turns += 1;
                    }
                }
            }
            Op::SetStage(i) => {
                let r = h.engine.set_stage(&id, *i);
                let expected_ok = !finished && *i < stages;
                if r.is_ok() != expected_ok {
                    return Err(ctx(format!("set_stage returned {r:?}")));
                }
            }
            Op::Finish => {
                let r = h.engine.finish_session(&id).await;
                if finished {
                    if r.is_err() {
                        return Err(ctx(format!("repeat finish failed: {r:?}")));
                    }
                } else if turns == 0 {
                    if !matches!(r, Err(EngineError::NothingToAnalyze)) {
                        return Err(ctx(format!("expected nothing_to_analyze, got {r:?}")));
                    }
                } else {
                    let failing = pending > 0;
                    pending = pending.saturating_sub(1);
                    match (&r, failing) {
                        (Ok(_), false) => finished = true,
                        (Err(EngineError::Provider(_)), true) => {}
                        _ => {
                            return Err(ctx(format!(
                                "finish returned {r:?}, failure injected {failing}"
                            )))
                        }
                    }
                }
            }
        }

        let stored = h.engine.get_session(&id).map_err(|e| ctx(e.to_string()))?;
        stored.check_invariants(stages).map_err(&ctx)?;
        if stored.turns.len() != turns {
            return Err(ctx(format!(
                "model has {turns} turns, store has {}",
                stored.turns.len()
            )));
        }
        if stored.is_active() == finished {
            return Err(ctx(format!(
                "model finished={finished}, store status {:?}",
                stored.status
            )));
        }
        if let Some(last) = stored.turns.last() {
            if stored.turns.len() % 2 == 0 && last.role != pal_core::session::Speaker::Patient {
                return Err(ctx(
                    "even turn count but last turn is not the patient's".into()
                ));
            }
        }
    }
    Ok(())
}
