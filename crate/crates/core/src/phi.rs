//! Rule-based PHI detection: ordered regular-expression rules plus
//! word lexicons, resolved to non-overlapping whole-token spans.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSpan, Namespace, SpanSource};
use crate::text::Document;

/// Shipped default ruleset.
pub const DEFAULT_RULES_JSON: &str = include_str!("../config/phi_rules.json");

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule {rule}: pattern does not compile: {message}")]
    Compile { rule: String, message: String },
    #[error("rule {rule}: unknown lexicon {lexicon}")]
    UnknownLexicon { rule: String, lexicon: String },
    #[error("rule {rule}: {message}")]
    Invalid { rule: String, message: String },
    #[error("priority {priority} is used by both {first} and {second}")]
    DuplicatePriority {
        priority: i64,
        first: String,
        second: String,
    },
    #[error("unknown PHI category {category}; known taxonomy: {known}")]
    UnknownCategory { category: String, known: String },
    #[error("unknown {category} subtype {subtype}; known subtypes: {known}")]
    UnknownSubtype {
        category: String,
        subtype: String,
        known: String,
    },
    #[error("ruleset file {path}: {message}")]
    File { path: String, message: String },
    #[error("ruleset JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// The six categories a detector rule may emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PhiCategory {
    Date,
    Id,
    Name,
    Contact,
    Age,
    Location,
}

impl PhiCategory {
    pub const ALL: [PhiCategory; 6] = [
        PhiCategory::Date,
        PhiCategory::Id,
        PhiCategory::Name,
        PhiCategory::Contact,
        PhiCategory::Age,
        PhiCategory::Location,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiCategory::Date => "DATE",
            PhiCategory::Id => "ID",
            PhiCategory::Name => "NAME",
            PhiCategory::Contact => "CONTACT",
            PhiCategory::Age => "AGE",
            PhiCategory::Location => "LOCATION",
        }
    }
}

impl fmt::Display for PhiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhiCategory {
    type Err = RuleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhiCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| RuleError::UnknownCategory {
                category: s.to_string(),
                known: PhiCategory::ALL.map(|c| c.as_str()).join(", "),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Pattern,
    Lexicon,
}

/// On-disk rule description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub name: String,
    pub category: PhiCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<String>,
    pub kind: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<String>,
    #[serde(default)]
    pub case_insensitive: bool,
    pub priority: i64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RuleFile {
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub lexicons: BTreeMap<String, Vec<String>>,
}

/// A compiled rule. Pattern rules with a capture group named `phi` report
/// only that group.
#[derive(Debug, Clone)]
pub struct PhiRule {
    pub spec: RuleSpec,
    regex: Regex,
}

impl PhiRule {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    fn char_matches(&self, text: &str, byte_to_char: &[usize]) -> Vec<(usize, usize)> {
        let phi_group = self.regex.capture_names().any(|n| n == Some("phi"));
        let mut out = Vec::new();
        if phi_group {
            for caps in self.regex.captures_iter(text) {
                if let Some(m) = caps.name("phi") {
                    out.push((byte_to_char[m.start()], byte_to_char[m.end()]));
                }
            }
        } else {
            for m in self.regex.find_iter(text) {
                if m.start() < m.end() {
                    out.push((byte_to_char[m.start()], byte_to_char[m.end()]));
                }
            }
        }
        out
    }
}

/// Priority-ordered compiled rules; the highest priority comes first.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    pub rules: Vec<PhiRule>,
    pub lexicons: BTreeMap<String, Vec<String>>,
}

fn lexicon_regex(words: &[String], case_insensitive: bool) -> String {
    let mut alternatives: Vec<String> = words
        .iter()
        .map(|w| w.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
        .filter(|w| !w.is_empty())
        .collect();
    // Longest alternatives first so multi-word entries win over their prefixes.
    alternatives.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    if alternatives.is_empty() {
        // Matches nothing.
        return r"[^\s\S]".to_string();
    }
    let flags = if case_insensitive { "(?i)" } else { "" };
    format!(r"{flags}\b(?:{})\b", alternatives.join("|"))
}

impl RuleSet {
    pub fn compile(file: RuleFile) -> Result<Self, RuleError> {
        let mut lexicons = file.lexicons;
        for words in lexicons.values_mut() {
            words.sort();
            words.dedup();
        }
        let mut rules = Vec::with_capacity(file.rules.len());
        let mut priorities: BTreeMap<i64, String> = BTreeMap::new();
        for spec in file.rules {
            if let Some(first) = priorities.insert(spec.priority, spec.name.clone()) {
                return Err(RuleError::DuplicatePriority {
                    priority: spec.priority,
                    first,
                    second: spec.name,
                });
            }
            let source = match spec.kind {
                RuleKind::Pattern => spec.pattern.clone().ok_or_else(|| RuleError::Invalid {
                    rule: spec.name.clone(),
                    message: "pattern rule has no pattern".into(),
                })?,
                RuleKind::Lexicon => {
                    let name = spec.lexicon.clone().ok_or_else(|| RuleError::Invalid {
                        rule: spec.name.clone(),
                        message: "lexicon rule has no lexicon".into(),
                    })?;
                    let words = lexicons.get(&name).ok_or_else(|| RuleError::UnknownLexicon {
                        rule: spec.name.clone(),
                        lexicon: name.clone(),
                    })?;
                    lexicon_regex(words, spec.case_insensitive)
                }
            };
            let regex = Regex::new(&source).map_err(|e| RuleError::Compile {
                rule: spec.name.clone(),
                message: e.to_string(),
            })?;
            rules.push(PhiRule { spec, regex });
        }
        rules.sort_by_key(|r| std::cmp::Reverse(r.spec.priority));
        Ok(Self { rules, lexicons })
    }

    pub fn from_json(json: &str) -> Result<Self, RuleError> {
        Self::compile(serde_json::from_str(json)?)
    }

    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("shipped ruleset compiles")
    }

    pub fn categories(&self) -> HashSet<PhiCategory> {
        self.rules.iter().map(|r| r.spec.category).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Loads and compiles a ruleset file.
pub fn load_rules(path: &Path) -> Result<RuleSet, RuleError> {
    let json = std::fs::read_to_string(path).map_err(|e| RuleError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    RuleSet::from_json(&json)
}

fn byte_to_char_map(text: &str) -> Vec<usize> {
    let mut map = vec![0; text.len() + 1];
    let mut chars = 0;
    for (b, c) in text.char_indices() {
        for slot in &mut map[b..b + c.len_utf8()] {
            *slot = chars;
        }
        chars += 1;
    }
    map[text.len()] = chars;
    map
}

struct Candidate {
    first: usize,
    last: usize,
    rule: usize,
    priority: i64,
}

/// Runs every rule over the raw text, widens matches to whole tokens and
/// keeps non-overlapping spans by priority, then length, then position.
pub fn detect_phi(doc: &Document, rules: &RuleSet) -> Vec<AnnotationSpan> {
    if doc.tokens.is_empty() {
        return Vec::new();
    }
    let byte_to_char = byte_to_char_map(&doc.text);
    let mut candidates = Vec::new();
    for (rule_index, rule) in rules.rules.iter().enumerate() {
        for (start, end) in rule.char_matches(&doc.text, &byte_to_char) {
            if let Some((first, last)) = doc.covering_tokens(start, end) {
                candidates.push(Candidate {
                    first,
                    last,
                    rule: rule_index,
                    priority: rule.spec.priority,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.priority
            .cmp(&a.priority)
            .then((b.last - b.first).cmp(&(a.last - a.first)))
            .then(a.first.cmp(&b.first))
    });

    let mut claimed = vec![false; doc.tokens.len()];
    let mut accepted = Vec::new();
    for c in candidates {
        if claimed[c.first..=c.last].iter().any(|&x| x) {
            continue;
        }
        claimed[c.first..=c.last].iter_mut().for_each(|x| *x = true);
        let rule = &rules.rules[c.rule];
        let mut span = AnnotationSpan::new(
            Namespace::Phi,
            rule.spec.category.as_str(),
            c.first,
            c.last,
            SpanSource::Detector,
        );
        span.subtype = rule.spec.subtype.clone();
        span.rule = Some(rule.spec.name.clone());
        accepted.push(span);
    }
    accepted.sort_by_key(|s| s.token_first);
    accepted
}

/// Annotation taxonomy: category → known subtypes.
pub const TAXONOMY: &[(&str, &[&str])] = &[
    ("NAME", &["PATIENT", "DOCTOR", "USERNAME"]),
    ("PROFESSION", &[]),
    (
        "LOCATION",
        &[
            "ROOM",
            "DEPARTMENT",
            "HOSPITAL",
            "ORGANIZATION",
            "STREET",
            "CITY",
            "STATE",
            "COUNTRY",
            "ZIP",
            "OTHER",
        ],
    ),
    ("AGE", &[]),
    ("DATE", &[]),
    ("CONTACT", &["PHONE", "FAX", "EMAIL", "URL", "IPADDRESS"]),
    (
        "ID",
        &[
            "SOCIAL SECURITY NUMBER",
            "MEDICAL RECORD NUMBER",
            "HEALTH PLAN NUMBER",
            "ACCOUNT NUMBER",
            "LICENSE NUMBER",
            "VEHICLE ID",
            "DEVICE ID",
            "BIOMETRIC ID",
            "ID NUMBER",
        ],
    ),
];

/// Normalizes i2b2 TYPE codes to taxonomy subtype names.
fn canonical_subtype(subtype: &str) -> String {
    let upper = subtype.trim().to_uppercase().replace(['_', '-'], " ");
    match upper.as_str() {
        "SSN" => "SOCIAL SECURITY NUMBER",
        "MEDICALRECORD" | "MRN" => "MEDICAL RECORD NUMBER",
        "HEALTHPLAN" => "HEALTH PLAN NUMBER",
        "ACCOUNT" => "ACCOUNT NUMBER",
        "LICENSE" => "LICENSE NUMBER",
        "VEHICLE" => "VEHICLE ID",
        "DEVICE" => "DEVICE ID",
        "BIOID" => "BIOMETRIC ID",
        "IDNUM" => "ID NUMBER",
        "IPADDR" => "IPADDRESS",
        "LOCATION OTHER" => "OTHER",
        other => other,
    }
    .to_string()
}

/// Whether a gold category/subtype pair is a HIPAA-mandated identifier.
pub fn map_to_hipaa(category: &str, subtype: Option<&str>) -> Result<bool, RuleError> {
    let category = category.trim().to_uppercase();
    let Some((_, subtypes)) = TAXONOMY.iter().find(|(c, _)| *c == category) else {
        return Err(RuleError::UnknownCategory {
            category,
            known: TAXONOMY.iter().map(|(c, _)| *c).collect::<Vec<_>>().join(", "),
        });
    };
    let subtype = subtype
        .map(canonical_subtype)
        .filter(|s| !s.is_empty() && *s != category);
    if let Some(s) = &subtype {
        if !subtypes.contains(&s.as_str()) && category != "ID" {
            return Err(RuleError::UnknownSubtype {
                category,
                subtype: s.clone(),
                known: subtypes.join(", "),
            });
        }
    }
    Ok(matches!(
        (category.as_str(), subtype.as_deref()),
        ("AGE" | "DATE" | "ID", _)
            | ("NAME", Some("PATIENT"))
            | ("LOCATION", Some("STREET" | "CITY" | "ZIP" | "ORGANIZATION"))
            | ("CONTACT", Some("PHONE" | "FAX" | "EMAIL"))
    ))
}


#[cfg(test)]
mod fixture_recall {
    use super::*;
    use crate::fixture::generate_fixture_corpus;

    #[test]
    fn default_rules_catch_every_fixture_identifier() {
        let rules = RuleSet::default_rules();
        let corpus = generate_fixture_corpus(7, 100).unwrap();
        let mut missed = Vec::new();
        for d in &corpus.docs {
            let detected = detect_phi(&d.doc, &rules);
            let mut covered = vec![false; d.doc.tokens.len()];
            for s in &detected {
                covered[s.positions()].iter_mut().for_each(|c| *c = true);
            }
            for gold in d.phi_token_spans() {
                if gold.label == "PROFESSION" {
                    continue;
                }
                if gold.positions().any(|i| !covered[i]) {
                    missed.push(format!(
                        "{} {} {:?}",
                        d.id(),
                        gold.label,
                        d.doc.tokens[gold.positions()]
                            .iter()
                            .map(|t| &t.text)
                            .collect::<Vec<_>>()
                    ));
                }
            }
        }
        assert!(missed.is_empty(), "{missed:#?}");
    }
}
