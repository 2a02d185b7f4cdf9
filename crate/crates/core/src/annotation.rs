//! Token-level annotation spans shared by the detector, taggers and masker.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Which pipeline phase produced a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Namespace {
    Phi,
    Med,
    Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    Detector,
    Gold,
    Tagger,
}

/// A categorized inclusive token range.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub namespace: Namespace,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<String>,
    pub token_first: usize,
    pub token_last: usize,
    pub source: SpanSource,
    /// Name of the rule that produced a detector span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}

impl AnnotationSpan {
    pub fn new(
        namespace: Namespace,
        label: impl Into<String>,
        token_first: usize,
        token_last: usize,
        source: SpanSource,
    ) -> Self {
        Self {
            namespace,
            label: label.into(),
            subtype: None,
            token_first,
            token_last,
            source,
            rule: None,
        }
    }

    pub fn len(&self) -> usize {
        self.token_last - self.token_first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &AnnotationSpan) -> bool {
        self.token_first <= other.token_last && other.token_first <= self.token_last
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.token_first..=self.token_last
    }
}

impl fmt::Display for AnnotationSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}:{}[{}..={}]",
            self.namespace, self.label, self.token_first, self.token_last
        )
    }
}
