//! The `pal` command line.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | persona validation failed |
//! | 2 | bad command-line usage |
//! | 3 | bad input file or configuration |
//! | 4 | provider call failed |
//! | 5 | feedback response could not be parsed (raw response saved) |
//! | 6 | I/O, storage or network setup failure |

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::api;
use crate::config::{process_env, Config};
use crate::conversation::Engine;
use crate::feedback::{self, FeedbackError, FeedbackReport, Grounding};
use crate::persona::{self, PersonaError, Severity, ValidationReport};
use crate::providers::usage::{cost_summary, CostSummary, Month, UsageSink};
use crate::store::{FileStore, SessionStore};
use crate::transcript;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_PERSONAS: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_PROVIDER: i32 = 4;
pub const EXIT_UNPARSEABLE: i32 = 5;
pub const EXIT_IO: i32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "pal", version, about = "Palliative-care conversation trainer")]
pub struct Cli {
    /// Persona library directory.
    #[arg(
        long,
        global = true,
        env = "PAL_PERSONAS_DIR",
        default_value = "personas"
    )]
    pub personas: PathBuf,
    /// Data directory for sessions, audio and usage logs.
    #[arg(long, global = true, env = "PAL_DATA_DIR", default_value = "pal-data")]
    pub data: PathBuf,
    /// Service configuration file (TOML).
    #[arg(long, global = true, env = "PAL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output format for validate, feedback and costs.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "PAL_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "PAL_HOST", default_value = "127.0.0.1")]
        host: String,
        /// Directory of static web UI assets to serve.
        #[arg(long, env = "PAL_STATIC_DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Validate a persona library.
    Validate,
    /// Generate feedback for a transcript file.
    Feedback {
        transcript: PathBuf,
        /// Where to save the raw model response if it cannot be parsed.
        #[arg(long)]
        raw_out: Option<PathBuf>,
    },
    /// Summarize metered provider costs.
    Costs {
        /// Restrict to one month, YYYY-MM.
        #[arg(long)]
        month: Option<Month>,
    },
}

/// Parse arguments and run. Returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    run(cli, out, err)
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Validate => validate(&cli, out, err),
        Command::Costs { month } => costs(&cli, *month, out),
        Command::Feedback {
            transcript,
            raw_out,
        } => feedback_cmd(&cli, transcript, raw_out.as_deref(), out, err),
        Command::Serve {
            port,
            host,
            static_dir,
        } => serve(&cli, host, *port, static_dir.clone(), err),
    };
    match result {
        Ok(code) => code,
        Err((code, message)) => {
            let _ = writeln!(err, "error: {message}");
            code
        }
    }
}

type CmdResult = Result<i32, (i32, String)>;

fn io_fail(e: impl std::fmt::Display) -> (i32, String) {
    (EXIT_IO, e.to_string())
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<(), (i32, String)> {
    let text = serde_json::to_string_pretty(value).map_err(io_fail)?;
    writeln!(out, "{text}").map_err(io_fail)
}

#[derive(Serialize)]
struct FileReport {
    file: PathBuf,
    #[serde(flatten)]
    report: ValidationReport,
    valid: bool,
}

fn validate(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let entries = match persona::read_persona_dir(&cli.personas) {
        Ok(e) => e,
        Err(PersonaError::Io { path, source }) => {
            return Err((EXIT_IO, format!("cannot read {}: {source}", path.display())))
        }
        Err(e) => {
            let _ = writeln!(err, "{e}");
            return Ok(EXIT_INVALID_PERSONAS);
        }
    };
    let mut reports: Vec<FileReport> = entries
        .into_iter()
        .map(|(file, _, report)| FileReport {
            valid: report.is_valid(),
            file,
            report,
        })
        .collect();
    // Duplicate ids are only detectable across files.
    for i in 0..reports.len() {
        if let Some(first) = reports[..i]
            .iter()
            .find(|r| r.report.persona_id == reports[i].report.persona_id)
        {
            let message = format!("id already used by {}", first.file.display());
            let r = &mut reports[i];
            r.report.issues.push(persona::ValidationIssue {
                severity: Severity::Error,
                field_path: "id".into(),
                message,
            });
            r.valid = false;
        }
    }
    let all_valid = reports.iter().all(|r| r.valid);
    if reports.is_empty() {
        let _ = writeln!(
            err,
            "warning: no *{} files in {}",
            persona::PERSONA_EXTENSION,
            cli.personas.display()
        );
    }
    match cli.format {
        Format::Json => print_json(out, &reports)?,
        Format::Text => {
            for r in &reports {
                let status = if r.valid { "ok  " } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "{status} {} ({})",
                    r.report.persona_id,
                    r.file.display()
                );
                for issue in &r.report.issues {
                    let sev = match issue.severity {
                        Severity::Error => "error",
                        Severity::Warning => "warning",
                    };
                    let _ = writeln!(out, "     {sev} {}: {}", issue.field_path, issue.message);
                }
            }
        }
    }
    Ok(if all_valid {
        EXIT_OK
    } else {
        EXIT_INVALID_PERSONAS
    })
}

fn load_usage(
    data: &Path,
    month: Option<Month>,
) -> Result<Vec<crate::providers::UsageRecord>, (i32, String)> {
    if !data.exists() {
        return Ok(Vec::new());
    }
    let store = FileStore::open(data).map_err(io_fail)?;
    store.usage_records(month).map_err(io_fail)
}

fn costs(cli: &Cli, month: Option<Month>, out: &mut dyn Write) -> CmdResult {
    let records = load_usage(&cli.data, month)?;
    let summary = cost_summary(&records, month);
    match cli.format {
        Format::Json => print_json(out, &summary)?,
        Format::Text => write_cost_table(out, &summary).map_err(io_fail)?,
    }
    Ok(EXIT_OK)
}

fn write_cost_table(out: &mut dyn Write, s: &CostSummary) -> std::io::Result<()> {
    if let Some(p) = &s.period {
        writeln!(out, "period: {p}")?;
    }
    writeln!(
        out,
        "{:<5} {:>6} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "kind", "calls", "in_tokens", "out_tokens", "audio_s", "chars", "cost"
    )?;
    for (kind, t) in &s.by_kind {
        writeln!(
            out,
            "{:<5} {:>6} {:>12} {:>12} {:>10.1} {:>10} {:>10}",
            kind.as_str(),
            t.calls,
            t.input_tokens,
            t.output_tokens,
            t.audio_ms as f64 / 1000.0,
            t.characters,
            t.cost
        )?;
    }
    writeln!(out, "total {:>67}", s.total)
}

fn load_config(cli: &Cli) -> Result<Config, (i32, String)> {
    Config::resolve(cli.config.as_deref(), &process_env).map_err(|e| (EXIT_INPUT, e.to_string()))
}

fn runtime() -> Result<tokio::runtime::Runtime, (i32, String)> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_fail)
}

fn feedback_cmd(
    cli: &Cli,
    path: &Path,
    raw_out: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (EXIT_INPUT, format!("cannot read {}: {e}", path.display())))?;
    let turns = transcript::parse_transcript(&text)
        .map_err(|e| (EXIT_INPUT, format!("{}: {e}", path.display())))?;
    let config = load_config(cli)?;
    let store = FileStore::open(&cli.data).map_err(io_fail)?;
    let sink: Arc<dyn UsageSink> = Arc::new(store);
    let (providers, _) = config
        .build_providers(&process_env, sink)
        .map_err(|e| (EXIT_INPUT, e.to_string()))?;
    let rt = runtime()?;
    let result = rt.block_on(feedback::generate_feedback(
        &providers,
        None,
        &turns,
        &config.feedback_config(),
    ));
    match result {
        Ok(report) => {
            match cli.format {
                Format::Json => print_json(out, &report)?,
                Format::Text => write_report(out, &report).map_err(io_fail)?,
            }
            Ok(EXIT_OK)
        }
        Err(FeedbackError::Unparseable {
            raw_response,
            attempts,
        }) => {
            let target = match raw_out {
                Some(p) => p.to_path_buf(),
                None => cli.data.join(format!(
                    "unparsed-feedback-{}.txt",
                    crate::now().format("%Y%m%dT%H%M%S%.3fZ")
                )),
            };
            std::fs::write(&target, raw_response).map_err(io_fail)?;
            let _ = writeln!(
                err,
                "error: feedback response could not be parsed after {attempts} attempt(s); raw response saved to {}",
                target.display()
            );
            let _ = writeln!(out, "{}", target.display());
            Ok(EXIT_UNPARSEABLE)
        }
        Err(FeedbackError::NothingToAnalyze) => {
            Err((EXIT_INPUT, "transcript has no Doctor lines".into()))
        }
        Err(FeedbackError::Provider(e)) => Err((EXIT_PROVIDER, e.to_string())),
    }
}

/// Human-readable report with grounding verdicts.
pub fn write_report(out: &mut dyn Write, report: &FeedbackReport) -> std::io::Result<()> {
    for item in &report.items {
        let category = item
            .nurse_category
            .map(|c| format!(" [{c}]"))
            .unwrap_or_default();
        writeln!(out, "{}. {}{category}", item.ordinal, item.scenario)?;
        let marker = match item.grounded {
            Grounding::Grounded => "grounded",
            Grounding::Ungrounded => "NOT FOUND IN TRANSCRIPT",
            Grounding::Unchecked => "unchecked",
        };
        writeln!(
            out,
            "   current approach: \"{}\" ({marker})",
            item.current_approach
        )?;
        writeln!(out, "   suggestion: {}", item.improvement_suggestion)?;
    }
    for issue in &report.issues {
        let missing: Vec<&str> = issue.missing.iter().map(|f| f.label()).collect();
        writeln!(
            out,
            "item {} skipped: missing {}",
            issue.ordinal,
            missing.join(", ")
        )?;
    }
    writeln!(
        out,
        "{} of {} quotes grounded; model {}",
        report.grounding.grounded_count(),
        report.items.len(),
        report.model_id
    )
}

fn serve(
    cli: &Cli,
    host: &str,
    port: u16,
    static_dir: Option<PathBuf>,
    err: &mut dyn Write,
) -> CmdResult {
    let library = match persona::load_persona_library(&cli.personas) {
        Ok(l) => l,
        Err(PersonaError::Io { path, source }) => {
            return Err((
                EXIT_IO,
                format!("cannot read personas from {}: {source}", path.display()),
            ))
        }
        Err(e) => {
            let _ = writeln!(
                err,
                "persona library {} is invalid:\n{e}",
                cli.personas.display()
            );
            return Ok(EXIT_INVALID_PERSONAS);
        }
    };
    let config = load_config(cli)?;
    let store = Arc::new(FileStore::open(&cli.data).map_err(io_fail)?);
    let (providers, _) = config
        .build_providers(&process_env, store.clone())
        .map_err(|e| (EXIT_INPUT, e.to_string()))?;
    let engine = Engine::new(Arc::new(library), store, providers, config.engine_options());
    let app = api::router(engine, static_dir);
    let rt = runtime()?;
    rt.block_on(async {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| (EXIT_IO, format!("cannot listen on {addr}: {e}")))?;
        tracing::info!(%addr, provider = ?config.provider, "serving");
        eprintln!(
            "listening on http://{}",
            listener.local_addr().map_err(io_fail)?
        );
        api::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io_fail)?;
        Ok(EXIT_OK)
    })
}
