//! C ABI over `pal-core`.
//!
//! Every fallible function returns a [`PalStatus`]. On failure a message is
//! available from [`pal_last_error`] on the same thread until the next call.
//! Strings returned through `out` parameters are owned by the caller and
//! must be released with [`pal_string_free`]. Structured results are JSON.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use pal_core::api::{PersonaSummary, SessionView};
use pal_core::config::{process_env, Config};
use pal_core::conversation::{collect_reply, Engine, EngineError};
use pal_core::cues;
use pal_core::feedback::{self, NurseLexicon};
use pal_core::persona;
use pal_core::session::Modality;
use pal_core::store::{FileStore, StoreError};
use pal_core::transcript::parse_transcript;
use serde_json::json;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PalStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// An argument was rejected (empty text, bad modality, bad stage).
    InvalidInput = 3,
    /// Unknown persona, user or session.
    NotFound = 4,
    /// The session is finished, busy, or it is not the clinician's turn.
    Conflict = 5,
    /// A chat, speech or synthesis provider failed.
    Provider = 6,
    /// Model output or an input document could not be parsed.
    Parse = 7,
    /// Reading or writing files failed, or the configuration is unusable.
    Io = 8,
    /// A bug inside the library. The handle should not be used again.
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// The message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn pal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn pal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

struct Failure(PalStatus, String);

type FfiResult<T> = Result<T, Failure>;

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::PersonaNotFound(_)
            | EngineError::SessionNotFound(_)
            | EngineError::UserNotFound(_) => PalStatus::NotFound,
            EngineError::SessionFinished
            | EngineError::OutOfTurn
            | EngineError::NothingToRetry
            | EngineError::Busy
            | EngineError::ModalityMismatch { .. }
            | EngineError::NothingToAnalyze => PalStatus::Conflict,
            EngineError::InvalidStage { .. }
            | EngineError::InvalidInput(_)
            | EngineError::UnsupportedMediaType(_) => PalStatus::InvalidInput,
            EngineError::Provider(_) => PalStatus::Provider,
            EngineError::FeedbackUnparseable { .. } => PalStatus::Parse,
            EngineError::Store(StoreError::NotFound { .. }) => PalStatus::NotFound,
            EngineError::Store(StoreError::InvalidId(_)) => PalStatus::InvalidInput,
            EngineError::Store(_) => PalStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

/// Run `f`, translating errors and panics into a status and last-error
/// message, and writing a successful string result to `out`.
fn guarded(out: *mut *mut c_char, f: impl FnOnce() -> FfiResult<String>) -> PalStatus {
    clear_last_error();
    if out.is_null() {
        set_last_error("output pointer is null");
        return PalStatus::NullArgument;
    }
    // SAFETY: checked non-null above; the caller guarantees it is writable.
    unsafe { *out = ptr::null_mut() };
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            let c = CString::new(s.replace('\0', "\u{FFFD}")).expect("interior nul removed");
            // SAFETY: as above.
            unsafe { *out = c.into_raw() };
            PalStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal error: {message}"));
            PalStatus::Panic
        }
    }
}

/// Borrow a C string argument.
///
/// # Safety
/// `p` must be null or point to a nul-terminated string that outlives the
/// returned borrow.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure(PalStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PalStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn to_json(value: &impl serde::Serialize) -> FfiResult<String> {
    serde_json::to_string(value).map_err(|e| Failure(PalStatus::Panic, e.to_string()))
}

/// Parse asterisk cue markup. Writes `{"text": ..., "cues": [{"position", "action"}]}`.
///
/// # Safety
/// `raw` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_parse_cues(raw: *const c_char, out: *mut *mut c_char) -> PalStatus {
    guarded(out, || {
        to_json(&cues::parse_emotional_cues(arg(raw, "raw")?))
    })
}

/// The speakable text of a reply, with cues removed.
///
/// # Safety
/// `raw` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_strip_cues(raw: *const c_char, out: *mut *mut c_char) -> PalStatus {
    guarded(out, || Ok(cues::strip_cues_for_tts(arg(raw, "raw")?)))
}

/// The feedback system prompt sent to the model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_feedback_prompt(out: *mut *mut c_char) -> PalStatus {
    guarded(out, || Ok(feedback::FEEDBACK_SYSTEM_PROMPT.to_string()))
}

/// Parse a feedback response. Writes `{"items": [...], "issues": [...]}`,
/// or fails with `Parse` when no item is complete.
///
/// # Safety
/// `raw` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_parse_feedback(
    raw: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let parsed = feedback::parse_feedback_response(arg(raw, "raw")?)
            .map_err(|e| Failure(PalStatus::Parse, e.to_string()))?;
        to_json(&json!({ "items": parsed.items, "issues": parsed.issues }))
    })
}

/// Parse a feedback response and check its quotes against a transcript in
/// `Doctor:` / `Patient:` line format. Writes
/// `{"items": [...], "issues": [...], "grounding": {"verdicts": [...]}}`.
///
/// # Safety
/// `feedback_text` and `transcript` must be valid C strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pal_ground_quotes(
    feedback_text: *const c_char,
    transcript: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let raw = arg(feedback_text, "feedback_text")?;
        let turns = parse_transcript(arg(transcript, "transcript")?)
            .map_err(|e| Failure(PalStatus::Parse, e.to_string()))?;
        let (items, issues, grounding) =
            feedback::analyze_response(raw, &turns, &NurseLexicon::default())
                .map_err(|e| Failure(PalStatus::Parse, e.to_string()))?;
        to_json(&json!({ "items": items, "issues": issues, "grounding": grounding }))
    })
}

/// An engine with its own runtime, persona library and file store.
pub struct PalEngine {
    engine: Engine,
    runtime: tokio::runtime::Runtime,
}

/// Open an engine over a persona directory and a data directory. When
/// `config_path` is null the defaults (mock provider) are used, with
/// `PAL_*` environment overrides applied either way.
///
/// # Safety
/// `personas_dir` and `data_dir` must be valid C strings, `config_path`
/// null or a valid C string, and `out` writable. Release the handle with
/// [`pal_engine_free`].
#[no_mangle]
pub unsafe extern "C" fn pal_engine_open(
    personas_dir: *const c_char,
    data_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut PalEngine,
) -> PalStatus {
    clear_last_error();
    if out.is_null() {
        set_last_error("output pointer is null");
        return PalStatus::NullArgument;
    }
    *out = ptr::null_mut();
    let result = catch_unwind(AssertUnwindSafe(|| -> FfiResult<PalEngine> {
        let personas = PathBuf::from(arg(personas_dir, "personas_dir")?);
        let data = PathBuf::from(arg(data_dir, "data_dir")?);
        let config_path = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(arg(config_path, "config_path")?))
        };
        let library = persona::load_persona_library(&personas).map_err(|e| {
            let status = match e {
                persona::PersonaError::Io { .. } => PalStatus::Io,
                _ => PalStatus::InvalidInput,
            };
            Failure(status, e.to_string())
        })?;
        let config = Config::resolve(config_path.as_deref(), &process_env)
            .map_err(|e| Failure(PalStatus::Io, e.to_string()))?;
        let store =
            Arc::new(FileStore::open(&data).map_err(|e| Failure(PalStatus::Io, e.to_string()))?);
        let (providers, _) = config
            .build_providers(&process_env, store.clone())
            .map_err(|e| Failure(PalStatus::Io, e.to_string()))?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Failure(PalStatus::Io, e.to_string()))?;
        let engine = Engine::new(Arc::new(library), store, providers, config.engine_options());
        Ok(PalEngine { engine, runtime })
    }));
    match result {
        Ok(Ok(engine)) => {
            *out = Box::into_raw(Box::new(engine));
            PalStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal error while opening the engine");
            PalStatus::Panic
        }
    }
}

/// Release an engine. Null is ignored.
///
/// # Safety
/// `engine` must be null or a handle from [`pal_engine_open`] that has not
/// been freed, and no other call may be using it.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_free(engine: *mut PalEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

unsafe fn handle<'a>(engine: *const PalEngine) -> FfiResult<&'a PalEngine> {
    engine
        .as_ref()
        .ok_or_else(|| Failure(PalStatus::NullArgument, "engine is null".into()))
}

/// Loaded personas as a JSON array of summaries.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_list_personas(
    engine: *const PalEngine,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let e = handle(engine)?;
        let list: Vec<PersonaSummary> = e
            .engine
            .library()
            .personas()
            .iter()
            .map(PersonaSummary::new)
            .collect();
        to_json(&list)
    })
}

/// Create a user. Writes the new user id.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_create_user(
    engine: *const PalEngine,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || Ok(handle(engine)?.engine.create_user()?.id))
}

/// Start a session. `modality` is `"text"` or `"voice"`. Writes the session id.
///
/// # Safety
/// `engine` must be a live handle, the strings valid C strings, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_start_session(
    engine: *const PalEngine,
    user_id: *const c_char,
    persona_id: *const c_char,
    modality: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let e = handle(engine)?;
        let modality = match arg(modality, "modality")? {
            "text" => Modality::Text,
            "voice" => Modality::Voice,
            other => {
                return Err(Failure(
                    PalStatus::InvalidInput,
                    format!("modality must be \"text\" or \"voice\", not {other:?}"),
                ))
            }
        };
        Ok(e.engine
            .start_session(
                arg(user_id, "user_id")?,
                arg(persona_id, "persona_id")?,
                modality,
            )?
            .id)
    })
}

/// Send a clinician message to a text session and wait for the whole
/// patient reply. Writes the reply summary as JSON
/// (`session_id`, `clinician_index`, `patient_index`, `turn_count`, `text`,
/// `cues`, `usage`).
///
/// # Safety
/// `engine` must be a live handle, the strings valid C strings, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_send_text(
    engine: *const PalEngine,
    session_id: *const c_char,
    text: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let e = handle(engine)?;
        let (session_id, text) = (arg(session_id, "session_id")?, arg(text, "text")?);
        let summary = e.runtime.block_on(async {
            let reply = e.engine.submit_text(session_id, text).await?;
            collect_reply(reply.events).await.3
        })?;
        to_json(&summary)
    })
}

/// Generate feedback and finish the session. Writes the feedback report as
/// JSON. Finishing again returns the stored report.
///
/// # Safety
/// `engine` must be a live handle, `session_id` a valid C string, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_finish(
    engine: *const PalEngine,
    session_id: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let e = handle(engine)?;
        let session_id = arg(session_id, "session_id")?;
        let report = e.runtime.block_on(e.engine.finish_session(session_id))?;
        to_json(&report)
    })
}

/// The session as JSON, in the same shape as the HTTP session detail.
///
/// # Safety
/// `engine` must be a live handle, `session_id` a valid C string, and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pal_engine_get_session(
    engine: *const PalEngine,
    session_id: *const c_char,
    out: *mut *mut c_char,
) -> PalStatus {
    guarded(out, || {
        let e = handle(engine)?;
        let session = e.engine.get_session(arg(session_id, "session_id")?)?;
        to_json(&SessionView::new(&session))
    })
}
