//! Coarse part-of-speech tagging from a word lexicon and suffix rules.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{is_numeric, is_punctuation, Document};

pub const DEFAULT_POS_LEXICON: &str = include_str!("../config/pos_lexicon.tsv");

#[derive(Debug, Error)]
pub enum PosError {
    #[error("unknown POS tag {0}")]
    UnknownTag(String),
    #[error("lexicon line {line}: expected word<TAB>TAG")]
    Malformed { line: usize },
    #[error("lexicon file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
    Pron,
    Det,
    Adp,
    Num,
    Punct,
    Other,
}

impl PosTag {
    pub const ALL: [PosTag; 10] = [
        PosTag::Noun,
        PosTag::Verb,
        PosTag::Adj,
        PosTag::Adv,
        PosTag::Pron,
        PosTag::Det,
        PosTag::Adp,
        PosTag::Num,
        PosTag::Punct,
        PosTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Pron => "PRON",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Num => "NUM",
            PosTag::Punct => "PUNCT",
            PosTag::Other => "OTHER",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = PosError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_uppercase();
        // "VRB" is accepted as an alias for VERB.
        if upper == "VRB" {
            return Ok(PosTag::Verb);
        }
        PosTag::ALL
            .into_iter()
            .find(|t| t.as_str() == upper)
            .ok_or(PosError::UnknownTag(upper))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PosLexicon {
    words: HashMap<String, PosTag>,
}

impl PosLexicon {
    pub fn parse(source: &str) -> Result<Self, PosError> {
        let mut words = HashMap::new();
        for (i, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or(PosError::Malformed { line: i + 1 })?;
            words
                .entry(word.trim().to_lowercase())
                .or_insert(tag.parse::<PosTag>()?);
        }
        Ok(Self { words })
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_POS_LEXICON).expect("shipped lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self, PosError> {
        let source = std::fs::read_to_string(path).map_err(|e| PosError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&source)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tag_word(&self, word: &str) -> PosTag {
        let lower = word.to_lowercase();
        if let Some(&tag) = self.words.get(&lower) {
            return tag;
        }
        if is_numeric(word) {
            return PosTag::Num;
        }
        if is_punctuation(word) {
            return PosTag::Punct;
        }
        let has_suffix = |suffix: &str| lower.ends_with(suffix) && lower.chars().count() >= suffix.chars().count() + 2;
        if has_suffix("ly") {
            PosTag::Adv
        } else if has_suffix("ing") || has_suffix("ed") {
            PosTag::Verb
        } else if ["ous", "ful", "ive", "al"].into_iter().any(has_suffix) {
            PosTag::Adj
        } else if word.chars().any(char::is_alphabetic) {
            PosTag::Noun
        } else {
            PosTag::Other
        }
    }
}

/// One tag per token.
pub fn tag_pos(doc: &Document, lexicon: &PosLexicon) -> Vec<PosTag> {
    doc.tokens.iter().map(|t| lexicon.tag_word(&t.text)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    #[test]
    fn examples() {
        let lex = PosLexicon::shipped();
        assert_eq!(
            tag_pos(&tokenize("the patient walked slowly"), &lex),
            [PosTag::Det, PosTag::Noun, PosTag::Verb, PosTag::Adv]
        );
        assert_eq!(tag_pos(&tokenize("."), &lex), [PosTag::Punct]);
        assert_eq!(tag_pos(&tokenize("zzgh"), &lex), [PosTag::Noun]);
        assert_eq!(tag_pos(&tokenize("120"), &lex), [PosTag::Num]);
        assert_eq!(tag_pos(&tokenize("painful"), &lex), [PosTag::Adj]);
        assert_eq!(tag_pos(&tokenize("red"), &PosLexicon::default()), [PosTag::Noun]);
    }

    #[test]
    fn total_over_tokens() {
        let lex = PosLexicon::shipped();
        let doc = tokenize("He was seen on 01/02/2069, and is doing well!");
        assert_eq!(tag_pos(&doc, &lex).len(), doc.tokens.len());
    }

    #[test]
    fn vrb_alias() {
        assert_eq!("VRB".parse::<PosTag>().unwrap(), PosTag::Verb);
        assert!("XYZ".parse::<PosTag>().is_err());
    }
}
