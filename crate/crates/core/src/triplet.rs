//! Training triplets: one query, one positive, and an ordered list of hard
//! negatives from hardest (level 1) to easiest.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::DEFAULT_NUM_LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    ShortLong,
    LongShort,
    LongLong,
    ShortShort,
    Sts,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 5] = [
        TaskCategory::ShortLong,
        TaskCategory::LongShort,
        TaskCategory::LongLong,
        TaskCategory::ShortShort,
        TaskCategory::Sts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::ShortLong => "short_long",
            TaskCategory::LongShort => "long_short",
            TaskCategory::LongLong => "long_long",
            TaskCategory::ShortShort => "short_short",
            TaskCategory::Sts => "sts",
        }
    }

    /// Human-readable label used in prompts.
    pub fn label(self) -> &'static str {
        match self {
            TaskCategory::ShortLong => "short-long match",
            TaskCategory::LongShort => "long-short match",
            TaskCategory::LongLong => "long-long match",
            TaskCategory::ShortShort => "short-short match",
            TaskCategory::Sts => "semantic textual similarity",
        }
    }

    /// Compact query instruction, short enough to leave room for the query
    /// inside a toy context window.
    pub fn short_instruction(self) -> &'static str {
        match self {
            TaskCategory::ShortLong => "find passage",
            TaskCategory::LongShort => "find summary",
            TaskCategory::LongLong => "find document",
            TaskCategory::ShortShort => "find match",
            TaskCategory::Sts => "find paraphrase",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown task category {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub category: TaskCategory,
    pub description: String,
}

impl TaskSpec {
    pub fn new(category: TaskCategory, description: impl Into<String>) -> Result<Self, ValidationError> {
        let spec = Self {
            category,
            description: description.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.description.trim().is_empty() {
            return Err(ValidationError::new(Violation::EmptyText, "task description is empty"));
        }
        if self.description.contains(['\n', '\r']) {
            return Err(ValidationError::new(
                Violation::MultiLine,
                "task description spans several lines",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    RetrievalAugmented,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Synthetic => "synthetic",
            Source::RetrievalAugmented => "retrieval_augmented",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Source::Synthetic, Source::RetrievalAugmented]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown source {s:?}"))
    }
}

/// Kinds of rejected records. The names are stable and appear in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    MalformedJson,
    MissingField,
    NegativeCount,
    LevelOrder,
    EmptyText,
    DuplicateNegative,
    MultiLine,
    UnknownValue,
}

impl Violation {
    pub fn name(self) -> &'static str {
        match self {
            Violation::MalformedJson => "malformed_json",
            Violation::MissingField => "missing_field",
            Violation::NegativeCount => "negative_count",
            Violation::LevelOrder => "level_order",
            Violation::EmptyText => "empty_text",
            Violation::DuplicateNegative => "duplicate_negative",
            Violation::MultiLine => "multi_line",
            Violation::UnknownValue => "unknown_value",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("{kind}: {detail}")]
pub struct ValidationError {
    pub kind: Violation,
    pub detail: String,
}

impl ValidationError {
    pub fn new(kind: Violation, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

/// Canonical similarity tags for `n` ordered negatives: `high`, then
/// `medium` for the interior, then `low`.
pub fn similarity_levels(n: usize) -> Vec<&'static str> {
    match n {
        0 => vec![],
        1 => vec!["high"],
        _ => std::iter::once("high")
            .chain(std::iter::repeat_n("medium", n - 2))
            .chain(std::iter::once("low"))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TrainingTriplet {
    pub query: String,
    pub positive: String,
    /// `negatives[k - 1]` is the level-`k` negative; level 1 is the hardest.
    pub negatives: Vec<String>,
    pub source: Source,
    pub task: TaskSpec,
}

impl TrainingTriplet {
    pub fn num_levels(&self) -> usize {
        self.negatives.len()
    }

    /// Negative at 1-based level `k`.
    pub fn negative(&self, k: usize) -> Option<&str> {
        k.checked_sub(1).and_then(|i| self.negatives.get(i)).map(String::as_str)
    }

    pub fn validate(&self, num_levels: usize) -> Result<(), ValidationError> {
        self.task.validate()?;
        if self.negatives.len() != num_levels {
            return Err(ValidationError::new(
                Violation::NegativeCount,
                format!("expected {num_levels} negatives, got {}", self.negatives.len()),
            ));
        }
        for (name, text) in [("query", &self.query), ("positive", &self.positive)] {
            if text.trim().is_empty() {
                return Err(ValidationError::new(Violation::EmptyText, format!("{name} is empty")));
            }
        }
        for (i, n) in self.negatives.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(ValidationError::new(
                    Violation::EmptyText,
                    format!("negative {} is empty", i + 1),
                ));
            }
            if self.negatives[..i].contains(n) {
                return Err(ValidationError::new(
                    Violation::DuplicateNegative,
                    format!("negative {} repeats an earlier negative", i + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn validate_default(&self) -> Result<(), ValidationError> {
        self.validate(DEFAULT_NUM_LEVELS)
    }
}
