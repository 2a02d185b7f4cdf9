//! Medical entity tagging via a case-insensitive phrase gazetteer with greedy
//! longest-match lookup.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::annotation::{AnnotationSpan, Namespace, SpanSource};
use crate::text::{tokenize, Document};

pub const CLINICAL_GAZETTEER: &str = include_str!("../config/clinical_gazetteer.tsv");
pub const DISEASE_CHEMICAL_GAZETTEER: &str = include_str!("../config/disease_chemical_gazetteer.tsv");

pub const MED_LABELS: [&str; 3] = ["PROBLEM", "TEST", "TREATMENT"];
pub const UTILITY_LABELS: [&str; 2] = ["DISEASE", "CHEMICAL"];

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error("gazetteer line {line}: unknown label {label} (expected one of {expected})")]
    UnknownLabel {
        line: usize,
        label: String,
        expected: String,
    },
    #[error("gazetteer line {line}: expected LABEL<TAB>phrase")]
    Malformed { line: usize },
    #[error("gazetteer file {path}: {message}")]
    File { path: String, message: String },
    #[error("tagger unavailable: {0}")]
    Unavailable(String),
    #[error("tagger failed on {doc}: {message}")]
    Failed { doc: String, message: String },
}

/// Anything that labels entity spans on a document.
pub trait EntityTagger: Send + Sync {
    fn tag(&self, doc: &Document) -> Result<Vec<AnnotationSpan>, TaggerError>;
    fn labels(&self) -> Vec<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gazetteer {
    /// Lowercased token sequence → label.
    pub entries: HashMap<Vec<String>, String>,
    pub max_phrase_len: usize,
    labels: Vec<String>,
    pub warnings: Vec<String>,
}

impl Gazetteer {
    /// Parses `LABEL<TAB>phrase` lines; `#` starts a comment. Phrases are
    /// re-tokenized so they match tokenizer output.
    pub fn parse(source: &str, allowed: &[&str]) -> Result<Self, TaggerError> {
        let mut entries = HashMap::new();
        let mut warnings = Vec::new();
        let mut max_phrase_len = 0;
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, phrase) = line.split_once('\t').ok_or(TaggerError::Malformed { line: i + 1 })?;
            let label = label.trim().to_uppercase();
            if !allowed.contains(&label.as_str()) {
                return Err(TaggerError::UnknownLabel {
                    line: i + 1,
                    label,
                    expected: allowed.join(", "),
                });
            }
            let key: Vec<String> = tokenize(phrase.trim()).lowercase_tokens();
            if key.is_empty() {
                return Err(TaggerError::Malformed { line: i + 1 });
            }
            match entries.get(&key) {
                Some(existing) if *existing != label => {
                    let msg = format!(
                        "line {}: phrase {:?} already labeled {existing}; keeping it over {label}",
                        i + 1,
                        phrase.trim()
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                Some(_) => {}
                None => {
                    max_phrase_len = max_phrase_len.max(key.len());
                    entries.insert(key, label);
                }
            }
        }
        Ok(Self {
            entries,
            max_phrase_len,
            labels: allowed.iter().map(|s| s.to_string()).collect(),
            warnings,
        })
    }

    pub fn clinical() -> Self {
        Self::parse(CLINICAL_GAZETTEER, &MED_LABELS).expect("shipped gazetteer parses")
    }

    pub fn disease_chemical() -> Self {
        Self::parse(DISEASE_CHEMICAL_GAZETTEER, &UTILITY_LABELS).expect("shipped gazetteer parses")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for label in self.entries.values() {
            *counts.entry(label.as_str()).or_default() += 1;
        }
        counts
    }
}

pub fn load_gazetteer(path: &Path, allowed: &[&str]) -> Result<Gazetteer, TaggerError> {
    let source = std::fs::read_to_string(path).map_err(|e| TaggerError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Gazetteer::parse(&source, allowed)
}

/// Greedy left-to-right longest match over lowercased token n-grams.
pub fn tag_medical(doc: &Document, gaz: &Gazetteer) -> Vec<AnnotationSpan> {
    let lower = doc.lowercase_tokens();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < lower.len() {
        let longest = (1..=gaz.max_phrase_len.min(lower.len() - i))
            .rev()
            .find_map(|n| gaz.entries.get(&lower[i..i + n]).map(|label| (n, label)));
        match longest {
            Some((n, label)) => {
                spans.push(AnnotationSpan::new(
                    Namespace::Med,
                    label,
                    i,
                    i + n - 1,
                    SpanSource::Tagger,
                ));
                i += n;
            }
            None => i += 1,
        }
    }
    spans
}

impl EntityTagger for Gazetteer {
    fn tag(&self, doc: &Document) -> Result<Vec<AnnotationSpan>, TaggerError> {
        Ok(tag_medical(doc, self))
    }

    fn labels(&self) -> Vec<String> {
        self.labels.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaz(src: &str) -> Gazetteer {
        Gazetteer::parse(src, &MED_LABELS).unwrap()
    }

    #[test]
    fn two_entities() {
        let g = gaz("TREATMENT\tmetformin\nPROBLEM\tdiabetes\n");
        let spans = tag_medical(&tokenize("started metformin for diabetes"), &g);
        let got: Vec<_> = spans
            .iter()
            .map(|s| (s.label.as_str(), s.token_first, s.token_last))
            .collect();
        assert_eq!(got, [("TREATMENT", 1, 1), ("PROBLEM", 3, 3)]);
        assert!(tag_medical(&tokenize(""), &g).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let g = gaz("TEST\tchest x - ray\nPROBLEM\tchest\nTEST\tx\n");
        let spans = tag_medical(&tokenize("chest x - ray normal"), &g);
        assert_eq!(spans.len(), 1);
        assert_eq!(
            (spans[0].label.as_str(), spans[0].token_first, spans[0].token_last),
            ("TEST", 0, 3)
        );
        // Unspaced phrases normalize to the same tokens.
        let g = gaz("TEST\tchest x-ray\n");
        assert_eq!(tag_medical(&tokenize("Chest X-ray normal"), &g).len(), 1);
    }

    #[test]
    fn file_parsing() {
        let g = gaz("# comment\nPROBLEM\tasthma\nTEST\tlipid panel\n\nTREATMENT\taspirin\n");
        assert_eq!(g.len(), 3);
        assert_eq!(g.max_phrase_len, 2);

        let g = gaz("PROBLEM\tgout\nTREATMENT\tgout\n");
        assert_eq!(g.entries[&vec!["gout".to_string()]], "PROBLEM");
        assert_eq!(g.warnings.len(), 1);

        assert!(matches!(
            Gazetteer::parse("DRUG\taspirin\n", &MED_LABELS),
            Err(TaggerError::UnknownLabel { .. })
        ));
    }

    #[test]
    fn shipped_gazetteers() {
        let g = Gazetteer::clinical();
        assert!(g.len() >= 100);
        let counts = g.label_counts();
        for label in MED_LABELS {
            assert!(counts[label] > 0, "{label}");
        }
        let dc = Gazetteer::disease_chemical();
        assert_eq!(dc.label_counts().len(), 2);
    }
}
