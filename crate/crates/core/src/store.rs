//! File-backed persistence.
//!
//! Layout under the data directory:
//!
//! ```text
//! users/<user-id>.json          one UserRecord
//! sessions/<session-id>.session line-delimited JSON: header, turns, feedback
//! blobs/<sha256>                audio bytes, content addressed
//! blobs/<sha256>.type           media type of the blob
//! usage/<YYYY-MM>.log           one UsageRecord per line, append only
//! ```
//!
//! Whole-file writes go to a temporary sibling, are synced, then renamed
//! over the target, so readers see either the old or the new version.
//! Nothing is ever deleted.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::FeedbackReport;
use crate::persona::PersonaLibrary;
use crate::providers::mock::sha256_hex;
use crate::providers::usage::{Month, UsageRecord, UsageSink};
use crate::session::{Modality, Session, SessionStatus, Turn};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: String,
    pub created_at: DateTime<Utc>,
}

/// Listing entry for a session, joined with its persona's demographics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub persona_id: String,
    /// Falls back to the persona id when the persona is no longer loaded.
    pub persona_name: String,
    pub age: Option<i64>,
    pub gender: Option<String>,
    pub profile_image: Option<String>,
    pub modality: Modality,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub turn_count: usize,
    pub stage_index: usize,
}

impl SessionSummary {
    pub fn new(session: &Session, library: &PersonaLibrary) -> Self {
        let persona = library.get(&session.persona_id);
        Self {
            id: session.id.clone(),
            persona_id: session.persona_id.clone(),
            persona_name: persona
                .map(|p| p.display_name.clone())
                .unwrap_or_else(|| session.persona_id.clone()),
            age: persona.map(|p| p.age),
            gender: persona.map(|p| p.gender.clone()),
            profile_image: persona.and_then(|p| p.profile_image.clone()),
            modality: session.modality,
            created_at: session.created_at,
            status: session.status,
            turn_count: session.turns.len(),
            stage_index: session.stage_index,
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("invalid identifier {0:?}")]
    InvalidId(String),
    #[error("corrupt record in {path}: line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("storage I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Ids are used as file names, so only a conservative alphabet is allowed.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn check_id(id: &str) -> Result<(), StoreError> {
    if is_valid_id(id) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

pub trait SessionStore: Send + Sync {
    fn create_user(&self) -> Result<UserRecord, StoreError>;
    fn get_user(&self, user_id: &str) -> Result<UserRecord, StoreError>;
    /// Overwrite the stored session atomically. The user must exist.
    fn save_session(&self, session: &Session) -> Result<(), StoreError>;
    fn load_session(&self, session_id: &str) -> Result<Session, StoreError>;
    /// A user's sessions, newest first, ties broken by ascending id.
    fn list_sessions(&self, user_id: &str) -> Result<Vec<Session>, StoreError>;
    /// Store audio for a turn and return its content-addressed handle.
    fn put_audio(
        &self,
        session_id: &str,
        turn_index: usize,
        bytes: &[u8],
        media_type: &str,
    ) -> Result<String, StoreError>;
    /// Bytes and media type for a handle.
    fn get_audio(&self, audio_ref: &str) -> Result<(Vec<u8>, String), StoreError>;
    fn usage_records(&self, month: Option<Month>) -> Result<Vec<UsageRecord>, StoreError>;
}

/// Sort newest first, then by id.
pub fn sort_chronologically(sessions: &mut [Session]) {
    sessions.sort_by(|a, b| {
        b.created_at
            .cmp(&a.created_at)
            .then_with(|| a.id.cmp(&b.id))
    });
}

/// Where an injected crash happens during an atomic write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// The temporary file is fully written and synced but never renamed.
    BeforeRename,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum SessionLine {
    Session(SessionHeader),
    Turn(Turn),
    Feedback(FeedbackReport),
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionHeader {
    id: String,
    user_id: String,
    persona_id: String,
    modality: Modality,
    created_at: DateTime<Utc>,
    stage_index: usize,
    status: SessionStatus,
}

/// Serialize a session to its on-disk line format.
pub fn encode_session(session: &Session) -> String {
    let header = SessionLine::Session(SessionHeader {
        id: session.id.clone(),
        user_id: session.user_id.clone(),
        persona_id: session.persona_id.clone(),
        modality: session.modality,
        created_at: session.created_at,
        stage_index: session.stage_index,
        status: session.status,
    });
    let mut out = String::new();
    let mut push = |line: &SessionLine| {
        out.push_str(&serde_json::to_string(line).expect("session lines serialize"));
        out.push('\n');
    };
    push(&header);
    for turn in &session.turns {
        push(&SessionLine::Turn(turn.clone()));
    }
    if let Some(report) = &session.feedback {
        push(&SessionLine::Feedback(report.clone()));
    }
    out
}

/// Parse the on-disk line format. `path` is used in error messages only.
pub fn decode_session(text: &str, path: &Path) -> Result<Session, StoreError> {
    let corrupt = |line: usize, message: String| StoreError::Corrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut session: Option<Session> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SessionLine =
            serde_json::from_str(line).map_err(|e| corrupt(n + 1, e.to_string()))?;
        match (parsed, session.as_mut()) {
            (SessionLine::Session(h), None) => {
                session = Some(Session {
                    id: h.id,
                    user_id: h.user_id,
                    persona_id: h.persona_id,
                    modality: h.modality,
                    created_at: h.created_at,
                    turns: Vec::new(),
                    stage_index: h.stage_index,
                    status: h.status,
                    feedback: None,
                })
            }
            (SessionLine::Turn(t), Some(s)) if s.feedback.is_none() => s.turns.push(t),
            (SessionLine::Feedback(f), Some(s)) if s.feedback.is_none() => s.feedback = Some(f),
            _ => return Err(corrupt(n + 1, "record out of order".into())),
        }
    }
    session.ok_or_else(|| corrupt(1, "missing session header".into()))
}

/// The directory-tree store.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    fault: Mutex<Option<FaultPoint>>,
    usage_lock: Mutex<()>,
}

impl FileStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["users", "sessions", "blobs", "usage"] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(Self {
            root,
            fault: Mutex::new(None),
            usage_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Make the next atomic write stop at `point` and fail.
    pub fn inject_fault(&self, point: FaultPoint) {
        *self.fault.lock().unwrap() = Some(point);
    }

    fn user_path(&self, id: &str) -> PathBuf {
        self.root.join("users").join(format!("{id}.json"))
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.session"))
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join("blobs").join(hash)
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let dir = path.parent().expect("store paths have a parent");
        let name = path
            .file_name()
            .expect("store paths have a file name")
            .to_string_lossy();
        let tmp = dir.join(format!(".{name}.{}.tmp", new_id()));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        if self.fault.lock().unwrap().take() == Some(FaultPoint::BeforeRename) {
            return Err(StoreError::Io(io::Error::other(
                "injected fault before rename",
            )));
        }
        fs::rename(&tmp, path)?;
        // Persist the directory entry as well. Not every platform allows
        // opening a directory for sync, so failure here is ignored.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    fn read_session_file(&self, path: &Path) -> Result<Session, StoreError> {
        decode_session(&fs::read_to_string(path)?, path)
    }
}

impl SessionStore for FileStore {
    fn create_user(&self) -> Result<UserRecord, StoreError> {
        let user = UserRecord {
            id: new_id(),
            created_at: crate::now(),
        };
        let json = serde_json::to_vec(&user).expect("user serializes");
        self.write_atomic(&self.user_path(&user.id), &json)?;
        Ok(user)
    }

    fn get_user(&self, user_id: &str) -> Result<UserRecord, StoreError> {
        check_id(user_id)?;
        let path = self.user_path(user_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::UnknownUser(user_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path,
            line: 1,
            message: e.to_string(),
        })
    }

    fn save_session(&self, session: &Session) -> Result<(), StoreError> {
        check_id(&session.id)?;
        self.get_user(&session.user_id)?;
        self.write_atomic(
            &self.session_path(&session.id),
            encode_session(session).as_bytes(),
        )
    }

    fn load_session(&self, session_id: &str) -> Result<Session, StoreError> {
        check_id(session_id)?;
        let path = self.session_path(session_id);
        if !path.exists() {
            return Err(StoreError::NotFound {
                kind: "session",
                id: session_id.to_string(),
            });
        }
        self.read_session_file(&path)
    }

    fn list_sessions(&self, user_id: &str) -> Result<Vec<Session>, StoreError> {
        self.get_user(user_id)?;
        let mut out = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let path = entry?.path();
            let is_session = path.extension().is_some_and(|e| e == "session")
                && !path
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with('.'));
            if !is_session {
                continue;
            }
            let session = self.read_session_file(&path)?;
            if session.user_id == user_id {
                out.push(session);
            }
        }
        sort_chronologically(&mut out);
        Ok(out)
    }

    fn put_audio(
        &self,
        session_id: &str,
        _turn_index: usize,
        bytes: &[u8],
        media_type: &str,
    ) -> Result<String, StoreError> {
        check_id(session_id)?;
        if !self.session_path(session_id).exists() {
            return Err(StoreError::NotFound {
                kind: "session",
                id: session_id.to_string(),
            });
        }
        let hash = sha256_hex(bytes);
        let path = self.blob_path(&hash);
        if !path.exists() {
            self.write_atomic(&path, bytes)?;
        }
        self.write_atomic(
            &self.blob_path(&format!("{hash}.type")),
            media_type.as_bytes(),
        )?;
        Ok(hash)
    }

    fn get_audio(&self, audio_ref: &str) -> Result<(Vec<u8>, String), StoreError> {
        let not_found = || StoreError::NotFound {
            kind: "audio",
            id: audio_ref.to_string(),
        };
        if audio_ref.len() != 64 || !audio_ref.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(not_found());
        }
        let bytes = match fs::read(self.blob_path(audio_ref)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(e.into()),
        };
        let media_type = fs::read_to_string(self.blob_path(&format!("{audio_ref}.type")))
            .unwrap_or_else(|_| "application/octet-stream".to_string());
        Ok((bytes, media_type))
    }

    fn usage_records(&self, month: Option<Month>) -> Result<Vec<UsageRecord>, StoreError> {
        let dir = self.root.join("usage");
        let mut files: Vec<PathBuf> = match month {
            Some(m) => vec![dir.join(format!("{m}.log"))],
            None => fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "log"))
                .collect(),
        };
        files.sort();
        let mut out = Vec::new();
        for path in files {
            let file = match File::open(&path) {
                Ok(f) => f,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(e.into()),
            };
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: UsageRecord =
                    serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                        path: path.clone(),
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                if month.is_none_or(|m| m.contains(&record.timestamp)) {
                    out.push(record);
                }
            }
        }
        Ok(out)
    }
}

impl UsageSink for FileStore {
    fn record(&self, record: &UsageRecord) -> io::Result<()> {
        let path = self
            .root
            .join("usage")
            .join(format!("{}.log", Month::of(&record.timestamp)));
        let mut line = serde_json::to_string(record).map_err(io::Error::other)?;
        line.push('\n');
        let _guard = self.usage_lock.lock().unwrap();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }
}

/// A volatile store with the same contract as [`FileStore`], for tests and
/// embedding.
#[derive(Debug, Default)]
pub struct MemoryStore {
    users: Mutex<HashMap<String, UserRecord>>,
    sessions: Mutex<HashMap<String, Session>>,
    blobs: Mutex<HashMap<String, (Vec<u8>, String)>>,
    usage: Mutex<Vec<UsageRecord>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SessionStore for MemoryStore {
    fn create_user(&self) -> Result<UserRecord, StoreError> {
        let user = UserRecord {
            id: new_id(),
            created_at: crate::now(),
        };
        self.users
            .lock()
            .unwrap()
            .insert(user.id.clone(), user.clone());
        Ok(user)
    }

    fn get_user(&self, user_id: &str) -> Result<UserRecord, StoreError> {
        check_id(user_id)?;
        self.users
            .lock()
            .unwrap()
            .get(user_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownUser(user_id.to_string()))
    }

    fn save_session(&self, session: &Session) -> Result<(), StoreError> {
        check_id(&session.id)?;
        self.get_user(&session.user_id)?;
        self.sessions
            .lock()
            .unwrap()
            .insert(session.id.clone(), session.clone());
        Ok(())
    }

    fn load_session(&self, session_id: &str) -> Result<Session, StoreError> {
        check_id(session_id)?;
        self.sessions
            .lock()
            .unwrap()
            .get(session_id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                kind: "session",
                id: session_id.to_string(),
            })
    }

    fn list_sessions(&self, user_id: &str) -> Result<Vec<Session>, StoreError> {
        self.get_user(user_id)?;
        let mut out: Vec<Session> = self
            .sessions
            .lock()
            .unwrap()
            .values()
            .filter(|s| s.user_id == user_id)
            .cloned()
            .collect();
        sort_chronologically(&mut out);
        Ok(out)
    }

    fn put_audio(
        &self,
        session_id: &str,
        _turn_index: usize,
        bytes: &[u8],
        media_type: &str,
    ) -> Result<String, StoreError> {
        self.load_session(session_id)?;
        let hash = sha256_hex(bytes);
        self.blobs
            .lock()
            .unwrap()
            .insert(hash.clone(), (bytes.to_vec(), media_type.to_string()));
        Ok(hash)
    }

    fn get_audio(&self, audio_ref: &str) -> Result<(Vec<u8>, String), StoreError> {
        self.blobs
            .lock()
            .unwrap()
            .get(audio_ref)
            .cloned()
            .ok_or_else(|| StoreError::NotFound {
                kind: "audio",
                id: audio_ref.to_string(),
            })
    }

    fn usage_records(&self, month: Option<Month>) -> Result<Vec<UsageRecord>, StoreError> {
        Ok(self
            .usage
            .lock()
            .unwrap()
            .iter()
            .filter(|r| month.is_none_or(|m| m.contains(&r.timestamp)))
            .cloned()
            .collect())
    }
}

impl UsageSink for MemoryStore {
    fn record(&self, record: &UsageRecord) -> io::Result<()> {
        self.usage.lock().unwrap().push(record.clone());
        Ok(())
    }
}
