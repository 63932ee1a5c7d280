//! Per-call usage metering and cost accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::{DateTime, Datelike, Utc};
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

/// Digits after the decimal point of the smallest currency unit.
pub const COST_DECIMALS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Chat,
    Stt,
    Tts,
}

impl CallKind {
    pub const ALL: [CallKind; 3] = [CallKind::Chat, CallKind::Stt, CallKind::Tts];

    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Chat => "chat",
            CallKind::Stt => "stt",
            CallKind::Tts => "tts",
        }
    }
}

/// One provider call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub id: String,
    pub kind: CallKind,
    pub model: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub audio_ms: u64,
    pub characters: u64,
    /// Token counts came from the chars/4 fallback, not from the provider.
    pub estimated: bool,
    /// The call errored or its stream was abandoned before completion.
    pub failed: bool,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost: Decimal,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

/// Metered quantities for a call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Quantities {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub audio_ms: u64,
    pub characters: u64,
}

/// Unit prices, in currency per unit batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rates {
    pub currency: String,
    #[serde(with = "rust_decimal::serde::str")]
    pub chat_input_per_million_tokens: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub chat_output_per_million_tokens: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub stt_per_minute: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub tts_per_thousand_chars: Decimal,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            currency: "USD".into(),
            chat_input_per_million_tokens: Decimal::ZERO,
            chat_output_per_million_tokens: Decimal::ZERO,
            stt_per_minute: Decimal::ZERO,
            tts_per_thousand_chars: Decimal::ZERO,
        }
    }
}

impl Rates {
    pub fn is_valid(&self) -> bool {
        [
            self.chat_input_per_million_tokens,
            self.chat_output_per_million_tokens,
            self.stt_per_minute,
            self.tts_per_thousand_chars,
        ]
        .iter()
        .all(|r| !r.is_sign_negative())
    }

    /// Quantities priced at these rates, rounded half-up once to the
    /// smallest currency unit.
    pub fn cost(&self, q: &Quantities) -> Decimal {
        // Common denominator of 1e6 tokens, 60_000 ms and 1e3 chars.
        const DENOMINATOR: i64 = 3_000_000;
        let numerator =
            Decimal::from(q.input_tokens) * self.chat_input_per_million_tokens * Decimal::from(3)
                + Decimal::from(q.output_tokens)
                    * self.chat_output_per_million_tokens
                    * Decimal::from(3)
                + Decimal::from(q.audio_ms) * self.stt_per_minute * Decimal::from(50)
                + Decimal::from(q.characters) * self.tts_per_thousand_chars * Decimal::from(3000);
        (numerator / Decimal::from(DENOMINATOR))
            .round_dp_with_strategy(COST_DECIMALS, RoundingStrategy::MidpointAwayFromZero)
    }
}

/// Token estimate used when a provider does not report usage.
pub fn estimate_tokens(chars: usize) -> u64 {
    (chars as u64).div_ceil(4)
}

/// A calendar month, `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn of(ts: &DateTime<Utc>) -> Self {
        Self {
            year: ts.year(),
            month: ts.month(),
        }
    }

    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        Month::of(ts) == *self
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected YYYY-MM, got {s:?}");
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Month { year, month })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub audio_ms: u64,
    pub characters: u64,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost: Decimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period: Option<String>,
    pub by_kind: BTreeMap<CallKind, KindTotals>,
    #[serde(with = "rust_decimal::serde::str")]
    pub total: Decimal,
}

/// Totals per call kind and overall, optionally restricted to one month.
pub fn cost_summary(records: &[UsageRecord], period: Option<Month>) -> CostSummary {
    let mut by_kind: BTreeMap<CallKind, KindTotals> = CallKind::ALL
        .iter()
        .map(|k| (*k, KindTotals::default()))
        .collect();
    let mut total = Decimal::ZERO;
    for r in records
        .iter()
        .filter(|r| period.is_none_or(|m| m.contains(&r.timestamp)))
    {
        let t = by_kind.entry(r.kind).or_default();
        t.calls += 1;
        t.input_tokens += r.input_tokens;
        t.output_tokens += r.output_tokens;
        t.audio_ms += r.audio_ms;
        t.characters += r.characters;
        t.cost += r.cost;
        total += r.cost;
    }
    CostSummary {
        period: period.map(|m| m.to_string()),
        by_kind,
        total,
    }
}

/// Destination for usage records.
pub trait UsageSink: Send + Sync {
    fn record(&self, record: &UsageRecord) -> std::io::Result<()>;
}

/// Keeps records in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Mutex<Vec<UsageRecord>>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<UsageRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl UsageSink for MemorySink {
    fn record(&self, record: &UsageRecord) -> std::io::Result<()> {
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }
}
