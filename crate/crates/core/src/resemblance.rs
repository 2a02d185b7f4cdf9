//! Lexical resemblance metrics: ROUGE-1/2/L, greedy embedding similarity,
//! readability formulas and top-k frequent-word overlap.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::exec::Execution;
use crate::fill::SyntheticDocument;
use crate::remote::RemoteEmbedder;
use crate::rng::derive_rng;
use crate::text::{count_syllables, is_word, split_sentences, tokenize_with_id, Document};

pub const SHIPPED_STOPWORDS: &str = include_str!("../config/stopwords.txt");
pub const DEFAULT_TOPK: [usize; 4] = [5, 20, 50, 100];
pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("{doc}: readability needs at least one word and one sentence")]
    NoWords { doc: String },
    #[error("synthetic document for {0} has no source document")]
    Unpaired(String),
    #[error("stopword file {path}: {message}")]
    Stopwords { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }

    pub const ONE: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn mean(items: &[Prf]) -> Prf {
        let n = items.len().max(1) as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn from_counts(matches: usize, candidate: usize, reference: usize) -> Prf {
    match (candidate, reference) {
        (0, 0) => Prf::ONE,
        (0, _) | (_, 0) => Prf::ZERO,
        (c, r) => Prf::from_pr(matches as f64 / c as f64, matches as f64 / r as f64),
    }
}

pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Prf {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    from_counts(matches, cand.values().sum(), refs.values().sum())
}

/// Length of the longest common subsequence, in O(n·m) time and O(m) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(candidate: &[String], reference: &[String]) -> Prf {
    from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE over already lowercased token streams.
pub fn rouge_tokens(candidate: &[String], reference: &[String]) -> RougeScores {
    RougeScores {
        r1: rouge_n(candidate, reference, 1),
        r2: rouge_n(candidate, reference, 2),
        rl: rouge_l(candidate, reference),
    }
}

pub fn rouge(candidate: &Document, reference: &Document) -> RougeScores {
    rouge_tokens(&candidate.lowercase_tokens(), &reference.lowercase_tokens())
}

/// Maps each token of a sequence to a vector of fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    /// One vector per token; `tokens` doubles as the context.
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError>;
}

/// Context-free vectors: each token type gets a fixed pseudo-random unit
/// vector derived from its lowercase form.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedProjection {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for HashedProjection {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl HashedProjection {
    pub fn vector(&self, token: &str) -> Vec<f64> {
        use rand::Rng;
        let mut rng = derive_rng(self.seed, &format!("embed/{}", token.to_lowercase()));
        let v: Vec<f64> = (0..self.dimension).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl EmbeddingProvider for HashedProjection {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }
}

/// One dimension per known token; unknown tokens are an error.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHot {
    index: HashMap<String, usize>,
}

impl OneHot {
    pub fn new<S: AsRef<str>>(vocab: &[S]) -> Self {
        let mut index = HashMap::new();
        for t in vocab {
            let next = index.len();
            index.entry(t.as_ref().to_string()).or_insert(next);
        }
        Self { index }
    }
}

impl EmbeddingProvider for OneHot {
    fn dimension(&self) -> usize {
        self.index.len()
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        tokens
            .iter()
            .map(|t| {
                let i = *self
                    .index
                    .get(t)
                    .ok_or_else(|| MetricError::Provider(format!("token {t} not in one-hot vocabulary")))?;
                let mut v = vec![0.0; self.index.len()];
                v[i] = 1.0;
                Ok(v)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.embed_tokens(&["the".to_string()])
            .ok()
            .and_then(|v| v.first().map(Vec::len))
            .unwrap_or(0)
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricError> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        self.embed_tokens(tokens)
            .map_err(|e| MetricError::Provider(e.to_string()))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching similarity over token vectors.
pub fn embed_score_tokens(
    candidate: &[String],
    reference: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<Prf, MetricError> {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return Ok(Prf::ONE),
        (true, false) | (false, true) => return Ok(Prf::ZERO),
        _ => {}
    }
    let c = provider.embed(candidate)?;
    let r = provider.embed(reference)?;
    if c.len() != candidate.len() || r.len() != reference.len() {
        return Err(MetricError::Provider("vector count differs from token count".into()));
    }
    let sim: Vec<Vec<f64>> = c.iter().map(|x| r.iter().map(|y| cosine(x, y)).collect()).collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / c.len() as f64;
    let recall = (0..r.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    Ok(Prf::from_pr(precision, recall))
}

pub fn embed_score(
    candidate: &Document,
    reference: &Document,
    provider: &dyn EmbeddingProvider,
) -> Result<Prf, MetricError> {
    embed_score_tokens(&candidate.lowercase_tokens(), &reference.lowercase_tokens(), provider)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityScores {
    pub fre: f64,
    pub fkg: f64,
    pub smog: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityCounts {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
    pub polysyllables: usize,
}

pub fn readability_counts(doc: &Document) -> ReadabilityCounts {
    let mut counts = ReadabilityCounts {
        words: 0,
        sentences: split_sentences(doc).len(),
        syllables: 0,
        polysyllables: 0,
    };
    for t in doc.tokens.iter().filter(|t| is_word(&t.text)) {
        let s = count_syllables(&t.text);
        counts.words += 1;
        counts.syllables += s;
        if s >= 3 {
            counts.polysyllables += 1;
        }
    }
    counts
}

pub fn readability(doc: &Document) -> Result<ReadabilityScores, MetricError> {
    let c = readability_counts(doc);
    if c.words == 0 || c.sentences == 0 {
        return Err(MetricError::NoWords { doc: doc.id.clone() });
    }
    let wps = c.words as f64 / c.sentences as f64;
    let spw = c.syllables as f64 / c.words as f64;
    Ok(ReadabilityScores {
        fre: 206.835 - 1.015 * wps - 84.6 * spw,
        fkg: 0.39 * wps + 11.8 * spw - 15.59,
        smog: 1.0430 * (c.polysyllables as f64 * 30.0 / c.sentences as f64).sqrt() + 3.1291,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn parse(source: &str) -> Self {
        Self(
            source
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect(),
        )
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_STOPWORDS)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        fs::read_to_string(path)
            .map(|s| Self::parse(&s))
            .map_err(|e| MetricError::Stopwords {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Words ranked by frequency (ties alphabetical), stopwords and tokens
/// with non-letters removed.
pub fn ranked_words(doc: &Document, stopwords: &Stopwords) -> Vec<String> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for w in doc.lowercase_tokens() {
        if w.chars().all(char::is_alphabetic) && !stopwords.contains(&w) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().map(|(w, _)| w).collect()
}

pub fn topk_overlap_pair(real: &Document, synth: &Document, k: usize, stopwords: &Stopwords) -> usize {
    let a: HashSet<String> = ranked_words(real, stopwords).into_iter().take(k).collect();
    ranked_words(synth, stopwords)
        .into_iter()
        .take(k)
        .filter(|w| a.contains(w))
        .count()
}

/// An original letter and one synthetic version of it.
#[derive(Debug, Clone, PartialEq)]
pub struct DocPair {
    pub source_id: String,
    pub variant_index: usize,
    pub original: Document,
    pub synthetic: Document,
}

pub fn pair_documents(real: &Corpus, synth: &[SyntheticDocument]) -> Result<Vec<DocPair>, MetricError> {
    synth
        .iter()
        .map(|s| {
            let source = real
                .get(&s.source_id)
                .ok_or_else(|| MetricError::Unpaired(s.source_id.clone()))?;
            Ok(DocPair {
                source_id: s.source_id.clone(),
                variant_index: s.variant_index,
                original: source.doc.clone(),
                synthetic: tokenize_with_id(&format!("{}#{}", s.source_id, s.variant_index), &s.text),
            })
        })
        .collect()
}

/// Mean top-k overlap per `k` over all pairs.
pub fn topk_overlap(pairs: &[DocPair], ks: &[usize], stopwords: &Stopwords) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let total: usize = pairs
                .iter()
                .map(|p| topk_overlap_pair(&p.original, &p.synthetic, k, stopwords))
                .sum();
            (k, total as f64 / pairs.len().max(1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_doc: Vec<Value>,
    pub mean: Value,
    pub config: Value,
}

fn mean_readability(items: &[ReadabilityScores]) -> ReadabilityScores {
    let n = items.len().max(1) as f64;
    ReadabilityScores {
        fre: items.iter().map(|r| r.fre).sum::<f64>() / n,
        fkg: items.iter().map(|r| r.fkg).sum::<f64>() / n,
        smog: items.iter().map(|r| r.smog).sum::<f64>() / n,
    }
}

struct PairMetrics {
    rouge: RougeScores,
    embed: Prf,
    original: ReadabilityScores,
    synthetic: ReadabilityScores,
    overlap: BTreeMap<usize, usize>,
}

/// Computes every resemblance metric family over `pairs`.
pub fn resemblance_reports(
    pairs: &[DocPair],
    provider: &dyn EmbeddingProvider,
    stopwords: &Stopwords,
    ks: &[usize],
    exec: Execution,
) -> Result<Vec<MetricReport>, MetricError> {
    let rows = exec.try_map(pairs, |p| {
        Ok::<_, MetricError>(PairMetrics {
            rouge: rouge(&p.synthetic, &p.original),
            embed: embed_score(&p.synthetic, &p.original, provider)?,
            original: readability(&p.original)?,
            synthetic: readability(&p.synthetic)?,
            overlap: ks
                .iter()
                .map(|&k| (k, topk_overlap_pair(&p.original, &p.synthetic, k, stopwords)))
                .collect(),
        })
    })?;
    let id = |p: &DocPair| json!({ "source_id": p.source_id, "variant_index": p.variant_index });
    let with = |p: &DocPair, key: &str, v: Value| {
        let mut obj = id(p);
        obj[key] = v;
        obj
    };
    let n = rows.len().max(1) as f64;

    let rouge_report = MetricReport {
        metric: "rouge".into(),
        per_doc: pairs
            .iter()
            .zip(&rows)
            .map(|(p, r)| with(p, "scores", json!(r.rouge)))
            .collect(),
        mean: json!({
            "r1": Prf::mean(&rows.iter().map(|r| r.rouge.r1).collect::<Vec<_>>()),
            "r2": Prf::mean(&rows.iter().map(|r| r.rouge.r2).collect::<Vec<_>>()),
            "rl": Prf::mean(&rows.iter().map(|r| r.rouge.rl).collect::<Vec<_>>()),
        }),
        config: json!({ "tokens": "word", "lowercase": true, "headline": "f1" }),
    };
    let embed_report = MetricReport {
        metric: "embedding".into(),
        per_doc: pairs
            .iter()
            .zip(&rows)
            .map(|(p, r)| with(p, "scores", json!(r.embed)))
            .collect(),
        mean: json!(Prf::mean(&rows.iter().map(|r| r.embed).collect::<Vec<_>>())),
        config: json!({ "provider_dimension": provider.dimension(), "matching": "greedy-cosine" }),
    };
    let readability_report = MetricReport {
        metric: "readability".into(),
        per_doc: pairs
            .iter()
            .zip(&rows)
            .map(|(p, r)| with(p, "scores", json!({ "original": r.original, "synthetic": r.synthetic })))
            .collect(),
        mean: json!({
            "original": mean_readability(&rows.iter().map(|r| r.original).collect::<Vec<_>>()),
            "synthetic": mean_readability(&rows.iter().map(|r| r.synthetic).collect::<Vec<_>>()),
        }),
        config: json!({}),
    };
    let overlap_mean: BTreeMap<String, f64> = ks
        .iter()
        .map(|&k| {
            (
                k.to_string(),
                rows.iter().map(|r| r.overlap[&k] as f64).sum::<f64>() / n,
            )
        })
        .collect();
    let overlap_report = MetricReport {
        metric: "topk_overlap".into(),
        per_doc: pairs
            .iter()
            .zip(&rows)
            .map(|(p, r)| {
                let by_k: BTreeMap<String, usize> = r.overlap.iter().map(|(k, v)| (k.to_string(), *v)).collect();
                with(p, "overlap", json!(by_k))
            })
            .collect(),
        mean: json!(overlap_mean),
        config: json!({ "ks": ks, "stopwords": stopwords.len(), "pairing": "per-document" }),
    };
    Ok(vec![rouge_report, embed_report, readability_report, overlap_report])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn rouge_examples() {
        let same = rouge_tokens(&t("a b c"), &t("a b c"));
        assert_eq!(
            same,
            RougeScores {
                r1: Prf::ONE,
                r2: Prf::ONE,
                rl: Prf::ONE
            }
        );
        let r = rouge_tokens(&t("a b c"), &t("a b d"));
        assert!((r.r1.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.rl.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.r2.f1 - 0.5).abs() < 1e-12);
        assert_eq!(rouge_tokens(&[], &[]).r1, Prf::ONE);
        assert_eq!(rouge_tokens(&t("a"), &[]).rl, Prf::ZERO);
        let doc = rouge(&tokenize("The cat."), &tokenize("the CAT ."));
        assert_eq!(doc.r1, Prf::ONE);
    }

    #[test]
    fn clipping() {
        let r = rouge_n(&t("the the the"), &t("the cat"), 1);
        assert!((r.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_examples() {
        let one_hot = OneHot::new(&["a", "b", "c", "d"]);
        let e = embed_score_tokens(&t("a b"), &t("a c"), &one_hot).unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (0.5, 0.5, 0.5));
        assert_eq!(embed_score_tokens(&t("a b"), &t("c d"), &one_hot).unwrap().f1, 0.0);
        assert!(embed_score_tokens(&t("z"), &t("a"), &one_hot).is_err());
        let hashed = HashedProjection::default();
        let doc = tokenize("Patient was discharged home in stable condition.");
        assert!((embed_score(&doc, &doc, &hashed).unwrap().f1 - 1.0).abs() < 1e-9);
        assert_eq!(hashed.vector("Home"), hashed.vector("home"));
    }

    #[test]
    fn readability_examples() {
        let r = readability(&tokenize("The cat sat on the mat.")).unwrap();
        assert!((r.fre - 116.145).abs() < 1e-9);
        assert!((r.fkg + 1.45).abs() < 1e-9);
        assert!((r.smog - 3.1291).abs() < 1e-12);
        assert!(matches!(
            readability(&tokenize("12 . 34")),
            Err(MetricError::NoWords { .. })
        ));
    }

    #[test]
    fn stopword_list_is_fixed() {
        let s = Stopwords::shipped();
        assert_eq!(s.len(), 175);
        assert!(s.contains("the") && s.contains("whether") && !s.contains("patient"));
    }

    #[test]
    fn topk_examples() {
        let sw = Stopwords::shipped();
        let a = tokenize("Fever and cough. Fever resolved with fluids and rest.");
        let words = ranked_words(&a, &sw);
        assert_eq!(words[0], "fever");
        for k in [1, 3, 5, 100] {
            assert_eq!(topk_overlap_pair(&a, &a, k, &sw), k.min(words.len()));
        }
        let b = tokenize("Rash over legs.");
        assert_eq!(topk_overlap_pair(&a, &b, 5, &sw), 0);
    }

    #[test]
    fn pairing_requires_sources() {
        let corpus = Corpus::new("c", vec![]).unwrap();
        let s = SyntheticDocument {
            source_id: "ghost".into(),
            variant_index: 0,
            text: "x".into(),
            filled: BTreeMap::new(),
            config_used: Default::default(),
        };
        assert!(matches!(pair_documents(&corpus, &[s]), Err(MetricError::Unpaired(id)) if id == "ghost"));
    }

    proptest! {
        #[test]
        fn rouge_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..5, 0..15),
            b in proptest::collection::vec(0u8..5, 0..15),
        ) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let ab = rouge_tokens(&a, &b);
            let ba = rouge_tokens(&b, &a);
            for (x, y) in [(ab.r1, ba.r1), (ab.r2, ba.r2), (ab.rl, ba.rl)] {
                prop_assert!((x.f1 - y.f1).abs() < 1e-12);
                prop_assert!((x.precision - y.recall).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.f1));
            }
        }
    }
}
