//! Palliative-care conversation training: simulated patients, session
//! storage and empathy feedback.

pub mod api;
pub mod cli;
pub mod config;
pub mod conversation;
pub mod cues;
pub mod feedback;
pub mod persona;
pub mod providers;
pub mod session;
pub mod store;
pub mod transcript;

use chrono::{DateTime, SubsecRound, Utc};

/// Current time at millisecond precision, so stored timestamps round-trip.
pub(crate) fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(3)
}
