//! Keyword tagging of improvement suggestions with a NURSE category.

use std::fmt;

use serde::{Deserialize, Serialize};

/// The five NURSE empathy strategies, in framework order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NurseCategory {
    Naming,
    Understanding,
    Respecting,
    Supporting,
    Exploring,
}

impl NurseCategory {
    pub const ALL: [NurseCategory; 5] = [
        NurseCategory::Naming,
        NurseCategory::Understanding,
        NurseCategory::Respecting,
        NurseCategory::Supporting,
        NurseCategory::Exploring,
    ];
}

impl fmt::Display for NurseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NurseCategory::Naming => "naming",
            NurseCategory::Understanding => "understanding",
            NurseCategory::Respecting => "respecting",
            NurseCategory::Supporting => "supporting",
            NurseCategory::Exploring => "exploring",
        })
    }
}

/// Keyword sets per category. Matching is case-insensitive substring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NurseLexicon {
    pub naming: Vec<String>,
    pub understanding: Vec<String>,
    pub respecting: Vec<String>,
    pub supporting: Vec<String>,
    pub exploring: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for NurseLexicon {
    fn default() -> Self {
        Self {
            naming: words(&["name the emotion", "naming"]),
            understanding: words(&["understanding statement", "validate"]),
            respecting: words(&["respect"]),
            supporting: words(&["support"]),
            exploring: words(&["explore", "tell me more"]),
        }
    }
}

impl NurseLexicon {
    pub fn keywords(&self, category: NurseCategory) -> &[String] {
        match category {
            NurseCategory::Naming => &self.naming,
            NurseCategory::Understanding => &self.understanding,
            NurseCategory::Respecting => &self.respecting,
            NurseCategory::Supporting => &self.supporting,
            NurseCategory::Exploring => &self.exploring,
        }
    }

    /// First category, in N-U-R-S-E order, with a keyword in the suggestion.
    pub fn tag(&self, suggestion: &str) -> Option<NurseCategory> {
        let folded = suggestion.to_lowercase();
        NurseCategory::ALL.into_iter().find(|c| {
            self.keywords(*c)
                .iter()
                .any(|k| !k.is_empty() && folded.contains(&k.to_lowercase()))
        })
    }
}

pub fn tag_nurse_category(suggestion: &str, lexicon: &NurseLexicon) -> Option<NurseCategory> {
    lexicon.tag(suggestion)
}
