//! Standardized-patient case files and the patient-agent prompt built from them.
//!
//! One persona per `*.persona.toml` file. See `docs/persona-format.md` for the
//! grammar. Personas are immutable after load.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PERSONA_EXTENSION: &str = ".persona.toml";

/// A six-section standardized-patient case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaProfile {
    pub id: String,
    pub display_name: String,
    pub age: i64,
    pub gender: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_image: Option<String>,
    #[serde(default)]
    pub initial_stage: usize,
    pub case: CaseSections,
    #[serde(default)]
    pub stages: Vec<Stage>,
}

/// The free-text sections of a case, in document order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSections {
    /// Learning objective, e.g. delivering bad news.
    pub purpose: String,
    /// Emotional disposition, attitudes and behavior.
    pub disposition: String,
    pub past_medical_history: String,
    pub social_history: String,
    /// Clinical context, e.g. hospital ward.
    pub setting: String,
}

/// One phase of the patient's emotional trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub description: String,
    /// Clinician behavior that moves the dialogue on to the next stage.
    #[serde(default)]
    pub advance_hint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub severity: Severity,
    pub field_path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub persona_id: String,
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        !self.issues.iter().any(|i| i.severity == Severity::Error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &ValidationIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }
}

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}:{column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} invalid persona file(s): {}", .0.len(), describe_invalid(.0))]
    Invalid(Vec<InvalidPersona>),
    #[error("stage index {index} out of range for persona with {len} stage(s)")]
    StageOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct InvalidPersona {
    pub file: PathBuf,
    pub report: ValidationReport,
}

fn describe_invalid(items: &[InvalidPersona]) -> String {
    items
        .iter()
        .map(|i| {
            let msgs: Vec<String> = i
                .report
                .errors()
                .map(|e| format!("{}: {}", e.field_path, e.message))
                .collect();
            format!("{} ({})", i.file.display(), msgs.join("; "))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// True for a non-empty slug of lowercase ASCII letters, digits and hyphens.
pub fn is_valid_slug(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Check every profile invariant. Never fails; problems are reported.
pub fn validate_persona(profile: &PersonaProfile) -> ValidationReport {
    let mut issues = Vec::new();
    let mut error = |field: &str, message: String| {
        issues.push(ValidationIssue {
            severity: Severity::Error,
            field_path: field.to_string(),
            message,
        })
    };

    if profile.id.is_empty() {
        error("id", "must not be empty".into());
    } else if !is_valid_slug(&profile.id) {
        error(
            "id",
            format!(
                "{:?} contains characters other than lowercase letters, digits and hyphens",
                profile.id
            ),
        );
    }
    if profile.display_name.trim().is_empty() {
        error("display_name", "must not be empty".into());
    }
    if profile.age < 0 {
        error("age", format!("must be >= 0, got {}", profile.age));
    }
    let sections = [
        ("case.purpose", &profile.case.purpose),
        ("case.disposition", &profile.case.disposition),
        (
            "case.past_medical_history",
            &profile.case.past_medical_history,
        ),
        ("case.social_history", &profile.case.social_history),
        ("case.setting", &profile.case.setting),
    ];
    for (field, text) in sections {
        if text.trim().is_empty() {
            error(field, "case section must not be empty".into());
        }
    }
    if let Some(image) = &profile.profile_image {
        if !is_safe_relative_path(image) {
            error(
                "profile_image",
                format!("{image:?} must be a relative path inside the persona directory"),
            );
        }
    }

    if profile.stages.is_empty() {
        error("stages", "at least one stage is required".into());
    } else if profile.initial_stage >= profile.stages.len() {
        error(
            "initial_stage",
            format!(
                "{} is out of range for {} stage(s)",
                profile.initial_stage,
                profile.stages.len()
            ),
        );
    }
    let mut seen = HashSet::new();
    for (i, stage) in profile.stages.iter().enumerate() {
        if stage.name.trim().is_empty() {
            error(&format!("stages[{i}].name"), "must not be empty".into());
        } else if !seen.insert(stage.name.trim().to_string()) {
            error(
                &format!("stages[{i}].name"),
                format!("duplicate stage name {:?}", stage.name),
            );
        }
        if stage.description.trim().is_empty() {
            error(
                &format!("stages[{i}].description"),
                "must not be empty".into(),
            );
        }
    }
    let last = profile.stages.len().saturating_sub(1);
    for (i, stage) in profile.stages.iter().enumerate() {
        if i < last && stage.advance_hint.trim().is_empty() {
            issues.push(ValidationIssue {
                severity: Severity::Warning,
                field_path: format!("stages[{i}].advance_hint"),
                message: "no hint for moving on to the next stage".into(),
            });
        }
    }

    ValidationReport {
        persona_id: profile.id.clone(),
        issues,
    }
}

fn is_safe_relative_path(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Parse one persona document. `file` is only used for error messages.
pub fn parse_persona(text: &str, file: &Path) -> Result<PersonaProfile, PersonaError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((1, 1));
        PersonaError::Parse {
            file: file.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

pub fn serialize_persona(profile: &PersonaProfile) -> String {
    toml::to_string(profile).expect("persona profiles always serialize")
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// The loaded persona library, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct PersonaLibrary {
    root: PathBuf,
    personas: Vec<PersonaProfile>,
}

impl PersonaLibrary {
    pub fn from_profiles(root: impl Into<PathBuf>, mut personas: Vec<PersonaProfile>) -> Self {
        personas.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            root: root.into(),
            personas,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn personas(&self) -> &[PersonaProfile] {
        &self.personas
    }

    pub fn get(&self, id: &str) -> Option<&PersonaProfile> {
        self.personas
            .binary_search_by(|p| p.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.personas[i])
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    /// Absolute path of a persona's profile image, if it has one.
    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        let image = self.get(id)?.profile_image.as_ref()?;
        is_safe_relative_path(image).then(|| self.root.join(image))
    }
}

/// Every persona file in `directory` along with its validation report.
pub fn read_persona_dir(
    directory: &Path,
) -> Result<Vec<(PathBuf, PersonaProfile, ValidationReport)>, PersonaError> {
    let io_err = |source| PersonaError::Io {
        path: directory.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(directory).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        let is_persona = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(PERSONA_EXTENSION));
        if is_persona && path.is_file() {
            files.push(path);
        }
    }
    files.sort();

    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let text = std::fs::read_to_string(&path).map_err(|source| PersonaError::Io {
            path: path.clone(),
            source,
        })?;
        let profile = parse_persona(&text, &path)?;
        let report = validate_persona(&profile);
        out.push((path, profile, report));
    }
    Ok(out)
}

/// Load and validate a persona directory. Any error-severity issue, or a
/// duplicate id, rejects the whole load.
pub fn load_persona_library(directory: &Path) -> Result<PersonaLibrary, PersonaError> {
    let entries = read_persona_dir(directory)?;
    let mut invalid = Vec::new();
    let mut first_file_for_id: std::collections::HashMap<String, PathBuf> = Default::default();
    let mut personas = Vec::new();
    for (file, profile, mut report) in entries {
        if let Some(previous) = first_file_for_id.get(&profile.id) {
            report.issues.push(ValidationIssue {
                severity: Severity::Error,
                field_path: "id".into(),
                message: format!("id {:?} already used by {}", profile.id, previous.display()),
            });
        } else {
            first_file_for_id.insert(profile.id.clone(), file.clone());
        }
        if report.is_valid() {
            personas.push(profile);
        } else {
            invalid.push(InvalidPersona { file, report });
        }
    }
    if !invalid.is_empty() {
        return Err(PersonaError::Invalid(invalid));
    }
    Ok(PersonaLibrary::from_profiles(directory, personas))
}

pub const SECTION_PURPOSE: &str = "## Purpose of the Case";
pub const SECTION_PERSONA: &str = "## Persona of the Patient";
pub const SECTION_MEDICAL: &str = "## Past Medical History";
pub const SECTION_SOCIAL: &str = "## Social History";
pub const SECTION_SETTING: &str = "## Setting";
pub const SECTION_STAGES: &str = "## Stages of the Interaction";
pub const SECTION_CURRENT_STAGE: &str = "## Current Stage";

/// Build the patient-agent system prompt for a persona at a given stage.
///
/// Deterministic; every case section is copied verbatim and nothing is
/// truncated.
pub fn render_patient_system_prompt(
    profile: &PersonaProfile,
    stage_index: usize,
) -> Result<String, PersonaError> {
    let current = profile
        .stages
        .get(stage_index)
        .ok_or(PersonaError::StageOutOfRange {
            index: stage_index,
            len: profile.stages.len(),
        })?;

    let mut p = String::with_capacity(4096);
    let _ = writeln!(
        p,
        "You are role-playing a patient in a clinical communication training simulation. \
         You are {name}, the patient. The person you are talking to is the clinician. \
         Speak only as the patient: never write the clinician's lines, never offer medical advice, \
         and never step out of the role or mention that this is a simulation.",
        name = profile.display_name
    );
    p.push('\n');
    let _ = writeln!(p, "## Patient");
    let _ = writeln!(p, "Name: {}", profile.display_name);
    let _ = writeln!(p, "Age: {}", profile.age);
    let _ = writeln!(p, "Gender: {}", profile.gender);
    for (header, body) in [
        (SECTION_PURPOSE, &profile.case.purpose),
        (SECTION_PERSONA, &profile.case.disposition),
        (SECTION_MEDICAL, &profile.case.past_medical_history),
        (SECTION_SOCIAL, &profile.case.social_history),
        (SECTION_SETTING, &profile.case.setting),
    ] {
        let _ = write!(p, "\n{header}\n{body}\n");
    }

    let _ = writeln!(p, "\n{SECTION_STAGES}");
    let _ = writeln!(
        p,
        "The conversation moves through these phases in order. Stay in the current phase until the \
         clinician's behavior moves you on."
    );
    for (i, stage) in profile.stages.iter().enumerate() {
        let _ = writeln!(p, "{}. {}: {}", i + 1, stage.name, stage.description);
        if !stage.advance_hint.is_empty() {
            let _ = writeln!(p, "   Moves on when: {}", stage.advance_hint);
        }
    }

    let _ = writeln!(p, "\n{SECTION_CURRENT_STAGE}");
    let _ = writeln!(
        p,
        "Stage {} of {}: {}",
        stage_index + 1,
        profile.stages.len(),
        current.name
    );
    let _ = writeln!(p, "{}", current.description);
    if !current.advance_hint.is_empty() {
        let _ = writeln!(p, "Moves on when: {}", current.advance_hint);
    }

    let _ = writeln!(p, "\n## Non-verbal Cues");
    let _ = writeln!(
        p,
        "Show non-verbal behavior as short actions between single asterisks, on the same line as \
         your speech, for example *pauses*, *starts crying* or *looks away*. Do not use asterisks \
         for anything else."
    );

    let _ = writeln!(p, "\n## Responding to the Clinician");
    let _ = writeln!(
        p,
        "Let your emotions follow how you are treated. When the clinician names or acknowledges \
         your feelings, shows understanding, respect or support, or invites you to say more, open \
         up gradually. When the clinician uses jargon, rushes, ignores your emotions or gives \
         false reassurance, become more guarded, confused or upset. Keep replies short and \
         conversational, the way a real patient speaks."
    );
    Ok(p)
}
