//! Annotated corpora: i2b2-style XML ingestion, the native JSON format and
//! seeded dataset splits.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSpan, Namespace, SpanSource};
use crate::rng::derive_rng;
use crate::text::{tokenize_with_id, Document};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed XML in {doc}: {message}")]
    Xml { doc: String, message: String },
    #[error("document {doc} is missing the <{element}> element")]
    MissingElement { doc: String, element: &'static str },
    #[error("annotation error in {doc}: tag {tag} {reason}")]
    Annotation { doc: String, tag: String, reason: String },
    #[error("duplicate document id {0}")]
    DuplicateId(String),
    #[error("corpus is empty")]
    Empty,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Categories that may appear in a gold PHI annotation.
pub const PHI_CATEGORIES: [&str; 7] = ["DATE", "ID", "NAME", "CONTACT", "AGE", "LOCATION", "PROFESSION"];

/// Character-offset annotation as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<String>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedDocument {
    pub doc: Document,
    pub gold_phi: Vec<CharSpan>,
    pub gold_med: Option<Vec<CharSpan>>,
}

impl AnnotatedDocument {
    pub fn id(&self) -> &str {
        &self.doc.id
    }

    /// Builds the document, checking every span lies inside the text.
    pub fn new(
        id: &str,
        text: &str,
        gold_phi: Vec<CharSpan>,
        gold_med: Option<Vec<CharSpan>>,
    ) -> Result<Self, CorpusError> {
        let len = text.chars().count();
        for span in gold_phi.iter().chain(gold_med.iter().flatten()) {
            if span.start >= span.end || span.end > len {
                return Err(CorpusError::Annotation {
                    doc: id.to_string(),
                    tag: span.category.clone(),
                    reason: format!(
                        "has offsets [{}, {}) outside text of length {len}",
                        span.start, span.end
                    ),
                });
            }
        }
        Ok(Self {
            doc: tokenize_with_id(id, text),
            gold_phi,
            gold_med,
        })
    }

    pub fn phi_token_spans(&self) -> Vec<AnnotationSpan> {
        align_spans(&self.doc, &self.gold_phi, Namespace::Phi)
    }

    pub fn med_token_spans(&self) -> Vec<AnnotationSpan> {
        self.gold_med
            .as_deref()
            .map(|spans| align_spans(&self.doc, spans, Namespace::Med))
            .unwrap_or_default()
    }

    /// Text covered by a character span.
    pub fn span_text(&self, span: &CharSpan) -> String {
        self.doc
            .text
            .chars()
            .skip(span.start)
            .take(span.end - span.start)
            .collect()
    }
}

/// Maps character spans to covering token ranges. Spans that do not fall on
/// token boundaries are widened to whole tokens.
pub fn align_spans(doc: &Document, spans: &[CharSpan], namespace: Namespace) -> Vec<AnnotationSpan> {
    let mut out = Vec::with_capacity(spans.len());
    for span in spans {
        let Some((first, last)) = doc.covering_tokens(span.start, span.end) else {
            log::warn!(
                "{}: {} span [{}, {}) covers no token; dropped",
                doc.id,
                span.category,
                span.start,
                span.end
            );
            continue;
        };
        if !doc.is_token_aligned(span.start, span.end) {
            log::warn!(
                "{}: {} span [{}, {}) is not token-aligned; widened to tokens {first}..={last}",
                doc.id,
                span.category,
                span.start,
                span.end
            );
        }
        let mut a = AnnotationSpan::new(namespace, &span.category, first, last, SpanSource::Gold);
        a.subtype = span.subtype.clone();
        out.push(a);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub docs: Vec<AnnotatedDocument>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, docs: Vec<AnnotatedDocument>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.id().to_string()) {
                return Err(CorpusError::DuplicateId(d.id().to_string()));
            }
        }
        Ok(Self {
            name: name.into(),
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedDocument> {
        self.docs.iter().find(|d| d.id() == id)
    }

    pub fn to_json(&self) -> Result<String, CorpusError> {
        let file = JsonCorpus {
            name: self.name.clone(),
            docs: self
                .docs
                .iter()
                .map(|d| JsonDocument {
                    id: d.doc.id.clone(),
                    text: d.doc.text.clone(),
                    phi: d.gold_phi.clone(),
                    med: d.gold_med.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let file: JsonCorpus = serde_json::from_str(json)?;
        let docs = file
            .docs
            .into_iter()
            .map(|d| AnnotatedDocument::new(&d.id, &d.text, d.phi, d.med))
            .collect::<Result<Vec<_>, _>>()?;
        Corpus::new(file.name, docs)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let json = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonCorpus {
    name: String,
    docs: Vec<JsonDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonDocument {
    id: String,
    text: String,
    #[serde(default)]
    phi: Vec<CharSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    med: Option<Vec<CharSpan>>,
}

/// Parses one i2b2-style record: a root holding `<TEXT>` and `<TAGS>`, each
/// tag carrying `start`, `end` and `TYPE` attributes over the TEXT content.
pub fn parse_annotated_xml(id: &str, bytes: &[u8]) -> Result<AnnotatedDocument, CorpusError> {
    let xml_err = |message: String| CorpusError::Xml {
        doc: id.to_string(),
        message,
    };
    let source = std::str::from_utf8(bytes).map_err(|e| xml_err(e.to_string()))?;
    let tree = roxmltree::Document::parse(source).map_err(|e| xml_err(e.to_string()))?;
    let root = tree.root_element();

    let text_node = root
        .children()
        .find(|n| n.has_tag_name("TEXT"))
        .ok_or(CorpusError::MissingElement {
            doc: id.to_string(),
            element: "TEXT",
        })?;
    let text: String = text_node
        .children()
        .filter_map(|n| n.text())
        .collect::<Vec<_>>()
        .concat();
    let chars: Vec<char> = text.chars().collect();

    let mut gold = Vec::new();
    if let Some(tags) = root.children().find(|n| n.has_tag_name("TAGS")) {
        for tag in tags.children().filter(|n| n.is_element()) {
            let category = tag.tag_name().name().to_uppercase();
            let tag_id = tag.attribute("id").unwrap_or(&category).to_string();
            let annotation_err = |reason: String| CorpusError::Annotation {
                doc: id.to_string(),
                tag: tag_id.clone(),
                reason,
            };
            if !PHI_CATEGORIES.contains(&category.as_str()) {
                return Err(annotation_err(format!("has unknown category {category}")));
            }
            let offset = |name: &str| -> Result<usize, CorpusError> {
                tag.attribute(name)
                    .ok_or_else(|| annotation_err(format!("is missing attribute {name}")))?
                    .trim()
                    .parse()
                    .map_err(|_| annotation_err(format!("has a non-integer {name}")))
            };
            let start = offset("start")?;
            let end = offset("end")?;
            if start >= end || end > chars.len() {
                return Err(annotation_err(format!(
                    "has offsets [{start}, {end}) outside text of length {}",
                    chars.len()
                )));
            }
            if let Some(recorded) = tag.attribute("text") {
                let actual: String = chars[start..end].iter().collect();
                if actual != recorded {
                    return Err(annotation_err(format!(
                        "records text {recorded:?} but offsets cover {actual:?}"
                    )));
                }
            }
            let subtype = tag
                .attribute("TYPE")
                .map(|t| t.trim().to_uppercase())
                .filter(|t| !t.is_empty() && *t != category);
            gold.push(CharSpan {
                category,
                subtype,
                start,
                end,
            });
        }
    }
    gold.sort_by_key(|s| (s.start, s.end));
    AnnotatedDocument::new(id, &text, gold, None)
}

/// Reads every `.xml` file in a directory (sorted by name) into a corpus; the
/// file stem becomes the document id.
pub fn load_xml_dir(name: &str, dir: &Path) -> Result<Corpus, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    paths.sort();
    let mut docs = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = std::fs::read(&path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        docs.push(parse_annotated_xml(&id, &bytes)?);
    }
    Corpus::new(name, docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: Vec<(String, f64)>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(fractions: &[(&str, f64)], seed: u64) -> Self {
        Self {
            fractions: fractions.iter().map(|(l, f)| (l.to_string(), *f)).collect(),
            seed,
        }
    }

    pub fn train_test(train: f64, seed: u64) -> Self {
        Self::new(&[("train", train), ("test", 1.0 - train)], seed)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.fractions.is_empty() {
            return Err(CorpusError::InvalidSplit("no fractions".into()));
        }
        let mut labels = HashSet::new();
        for (label, f) in &self.fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(CorpusError::InvalidSplit(format!(
                    "fraction {f} for {label} is outside (0, 1]"
                )));
            }
            if !labels.insert(label) {
                return Err(CorpusError::InvalidSplit(format!("duplicate label {label}")));
            }
        }
        let sum: f64 = self.fractions.iter().map(|(_, f)| f).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("fractions sum to {sum}")));
        }
        Ok(())
    }
}

/// Seeded shuffle, then consecutive partitions of `round_half_up(f * n)`
/// documents with the last label absorbing the remainder.
pub fn split_corpus(corpus: &Corpus, spec: &SplitSpec) -> Result<BTreeMap<String, Corpus>, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    spec.validate()?;
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(spec.seed, "split"));

    let mut out = BTreeMap::new();
    let mut cursor = 0;
    for (i, (label, fraction)) in spec.fractions.iter().enumerate() {
        let take = if i + 1 == spec.fractions.len() {
            n - cursor
        } else {
            ((fraction * n as f64 + 0.5 + 1e-9).floor() as usize).min(n - cursor)
        };
        let docs = order[cursor..cursor + take]
            .iter()
            .map(|&j| corpus.docs[j].clone())
            .collect();
        cursor += take;
        out.insert(label.clone(), Corpus::new(format!("{}:{label}", corpus.name), docs)?);
    }
    Ok(out)
}

/// Concatenates corpora, preserving order.
pub fn merge_corpora(name: &str, parts: &[&Corpus]) -> Result<Corpus, CorpusError> {
    Corpus::new(name, parts.iter().flat_map(|c| c.docs.iter().cloned()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_DATE: &str = r#"<?xml version="1.0" encoding="UTF-8" ?>
<deid><TEXT><![CDATA[2069-04-07 note]]></TEXT>
<TAGS><DATE id="P0" start="0" end="10" text="2069-04-07" TYPE="DATE" comment="" /></TAGS></deid>"#;

    fn plain_corpus(n: usize) -> Corpus {
        let docs = (0..n)
            .map(|i| AnnotatedDocument::new(&format!("d{i}"), "a b", vec![], None).unwrap())
            .collect();
        Corpus::new("t", docs).unwrap()
    }

    #[test]
    fn parses_one_date() {
        let doc = parse_annotated_xml("r1", ONE_DATE.as_bytes()).unwrap();
        assert_eq!(doc.gold_phi.len(), 1);
        assert_eq!(doc.gold_phi[0].category, "DATE");
        assert_eq!(doc.gold_phi[0].subtype, None);
        assert_eq!(doc.span_text(&doc.gold_phi[0]), "2069-04-07");
        let tokens = doc.phi_token_spans();
        assert_eq!((tokens[0].token_first, tokens[0].token_last), (0, 4));
    }

    #[test]
    fn zero_tags() {
        let xml = "<deid><TEXT>hello there</TEXT><TAGS></TAGS></deid>";
        let doc = parse_annotated_xml("r", xml.as_bytes()).unwrap();
        assert!(doc.gold_phi.is_empty());
        assert_eq!(doc.doc.tokens.len(), 2);
    }

    #[test]
    fn tag_past_end_is_annotation_error() {
        let xml = r#"<deid><TEXT>short</TEXT><TAGS><NAME id="P3" start="0" end="40" TYPE="PATIENT"/></TAGS></deid>"#;
        match parse_annotated_xml("r", xml.as_bytes()) {
            Err(CorpusError::Annotation { tag, .. }) => assert_eq!(tag, "P3"),
            other => panic!("expected annotation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_xml_reports_location() {
        let err = parse_annotated_xml("r", b"<deid><TEXT>x</deid>").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CorpusError::Xml { .. }));
        assert!(msg.contains(':'), "{msg}");
    }

    #[test]
    fn recorded_text_must_match() {
        let xml = r#"<deid><TEXT>John left</TEXT><TAGS><NAME id="P0" start="0" end="4" text="Jane" TYPE="PATIENT"/></TAGS></deid>"#;
        assert!(matches!(
            parse_annotated_xml("r", xml.as_bytes()),
            Err(CorpusError::Annotation { .. })
        ));
    }

    #[test]
    fn xml_to_json_round_trip() {
        let doc = parse_annotated_xml("r1", ONE_DATE.as_bytes()).unwrap();
        let corpus = Corpus::new("x", vec![doc]).unwrap();
        let back = Corpus::from_json(&corpus.to_json().unwrap()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::new(&[("train", 0.8), ("test", 0.2)], 1);
        let parts = split_corpus(&plain_corpus(10), &spec).unwrap();
        assert_eq!(parts["train"].len(), 8);
        assert_eq!(parts["test"].len(), 2);
        assert_eq!(parts, split_corpus(&plain_corpus(10), &spec).unwrap());

        let parts = split_corpus(&plain_corpus(5), &SplitSpec::new(&[("a", 0.5), ("b", 0.5)], 3)).unwrap();
        assert_eq!(parts["a"].len(), 3);
        assert_eq!(parts["b"].len(), 2);
    }

    #[test]
    fn split_partitions_corpus() {
        let corpus = plain_corpus(17);
        let parts = split_corpus(&corpus, &SplitSpec::new(&[("a", 0.3), ("b", 0.3), ("c", 0.4)], 9)).unwrap();
        let mut ids: Vec<String> = parts
            .values()
            .flat_map(|c| c.docs.iter().map(|d| d.id().to_string()))
            .collect();
        ids.sort();
        let mut expected: Vec<String> = corpus.docs.iter().map(|d| d.id().to_string()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn split_errors() {
        let empty = Corpus::new("e", vec![]).unwrap();
        assert!(matches!(
            split_corpus(&empty, &SplitSpec::train_test(0.8, 1)),
            Err(CorpusError::Empty)
        ));
        assert!(split_corpus(&plain_corpus(3), &SplitSpec::new(&[("a", 0.5), ("b", 0.6)], 1)).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let d = AnnotatedDocument::new("same", "x", vec![], None).unwrap();
        assert!(matches!(
            Corpus::new("c", vec![d.clone(), d]),
            Err(CorpusError::DuplicateId(_))
        ));
    }
}
