//! Downstream NER utility: BIO datasets from an entity extractor, an
//! averaged-perceptron tagger, entity-level scoring, and the real versus
//! synthetic training comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_corpus, AnnotatedDocument, Corpus, CorpusError, SplitSpec};
use crate::exec::Execution;
use crate::fill::{FillError, Pipeline, SystemPreset};
use crate::mlm::{train_native, ModelError, TrainingConfig};
use crate::ner::{EntityTagger, TaggerError, UTILITY_LABELS};
use crate::resemblance::Prf;
use crate::rng::derive_rng;
use crate::text::split_sentences;

pub const DEFAULT_EPOCHS: usize = 5;
pub const MIN_EXPERIMENT_DOCS: usize = 10;
/// Tag classes in index order.
pub const CLASSES: [&str; 5] = ["O", "B-DISEASE", "I-DISEASE", "B-CHEMICAL", "I-CHEMICAL"];

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("entity extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error("extractor label {0} is not one of DISEASE, CHEMICAL")]
    UnknownLabel(String),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("epochs must be at least 1")]
    NoEpochs,
    #[error("the experiment needs at least {MIN_EXPERIMENT_DOCS} documents, got {0}")]
    TooFewDocuments(usize),
    #[error("multiplier must be 1 or 2, got {0}")]
    Multiplier(usize),
    #[error("synthetic document {0} derives from a test document")]
    Leakage(String),
    #[error("arm {arm}: {message}")]
    Arm { arm: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fill(#[from] FillError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub sentences: Vec<LabeledSentence>,
    /// Documents dropped because the extractor failed on them.
    pub skipped_docs: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.sentences.iter().map(|s| entities(&s.tags).len()).sum()
    }
}

/// Labels each sentence of every document with BIO tags from `extractor`.
/// Entities crossing a sentence boundary restart with `B-` in the next
/// sentence. All-O sentences are dropped unless `keep_empty` is set.
pub fn extract_entities(
    corpus: &Corpus,
    extractor: &dyn EntityTagger,
    keep_empty: bool,
) -> Result<LabeledDataset, UtilityError> {
    if let Some(label) = extractor
        .labels()
        .into_iter()
        .find(|l| !UTILITY_LABELS.contains(&l.as_str()))
    {
        return Err(UtilityError::UnknownLabel(label));
    }
    let mut out = LabeledDataset::default();
    for ad in &corpus.docs {
        let spans = match extractor.tag(&ad.doc) {
            Ok(spans) => spans,
            Err(TaggerError::Unavailable(m)) => return Err(UtilityError::ExtractorUnavailable(m)),
            Err(e) => {
                log::warn!("skipping {}: {e}", ad.id());
                out.skipped_docs += 1;
                continue;
            }
        };
        let mut tags = vec!["O".to_string(); ad.doc.len()];
        for s in &spans {
            if !UTILITY_LABELS.contains(&s.label.as_str()) {
                return Err(UtilityError::UnknownLabel(s.label.clone()));
            }
            for p in s.positions() {
                let prefix = if p == s.token_first { "B" } else { "I" };
                tags[p] = format!("{prefix}-{}", s.label);
            }
        }
        for sentence in split_sentences(&ad.doc) {
            let range = sentence.first_token..=sentence.last_token;
            let mut sentence_tags = tags[range.clone()].to_vec();
            if let Some(rest) = sentence_tags[0].strip_prefix("I-") {
                sentence_tags[0] = format!("B-{rest}");
            }
            if !keep_empty && sentence_tags.iter().all(|t| t == "O") {
                continue;
            }
            out.sentences.push(LabeledSentence {
                doc_id: ad.id().to_string(),
                tokens: ad.doc.tokens[range].iter().map(|t| t.text.clone()).collect(),
                tags: sentence_tags,
            });
        }
    }
    Ok(out)
}

/// Entities as `(first, last, label)`; a stray `I-X` opens a new entity.
pub fn entities(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, label) = match tag.split_once('-') {
            Some((k, l)) => (k, Some(l)),
            None => (tag.as_str(), None),
        };
        let continues = kind == "I" && open.as_ref().map(|o| Some(o.1.as_str())) == Some(label);
        if !continues {
            if let Some((start, l)) = open.take() {
                out.push((start, i - 1, l));
            }
            if let Some(l) = label {
                open = Some((i, l.to_string()));
            }
        }
    }
    if let Some((start, l)) = open {
        out.push((start, tags.len() - 1, l));
    }
    out
}

fn features(tokens: &[String], i: usize, prev_tag: usize) -> Vec<String> {
    let w = &tokens[i];
    let lower = w.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let prefix: String = chars.iter().take(3).collect();
    let suffix: String = chars[chars.len().saturating_sub(3)..].iter().collect();
    let prev = if i > 0 {
        tokens[i - 1].to_lowercase()
    } else {
        "<s>".into()
    };
    let next = tokens
        .get(i + 1)
        .map(|t| t.to_lowercase())
        .unwrap_or_else(|| "</s>".into());
    vec![
        "bias".into(),
        format!("w={w}"),
        format!("lw={lower}"),
        format!("p3={prefix}"),
        format!("s3={suffix}"),
        format!("digit={}", w.chars().all(|c| c.is_ascii_digit())),
        format!("pw={prev}"),
        format!("nw={next}"),
        format!("pt={}", CLASSES[prev_tag]),
    ]
}

fn class_index(tag: &str) -> usize {
    CLASSES.iter().position(|c| *c == tag).unwrap_or(0)
}

type Row = [f64; CLASSES.len()];

/// Greedy left-to-right averaged perceptron over [`CLASSES`].
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptronTagger {
    pub weights: HashMap<String, Row>,
}

fn argmax(scores: &Row) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

fn score(weights: &HashMap<String, Row>, feats: &[String]) -> Row {
    let mut scores = [0.0; CLASSES.len()];
    for f in feats {
        if let Some(row) = weights.get(f) {
            for (s, w) in scores.iter_mut().zip(row) {
                *s += w;
            }
        }
    }
    scores
}

impl PerceptronTagger {
    pub fn predict(&self, tokens: &[String]) -> Vec<String> {
        let mut prev = 0;
        tokens
            .iter()
            .enumerate()
            .map(|(i, _)| {
                prev = argmax(&score(&self.weights, &features(tokens, i, prev)));
                CLASSES[prev].to_string()
            })
            .collect()
    }
}

struct Trainer {
    weights: HashMap<String, Row>,
    totals: HashMap<String, Row>,
    stamps: HashMap<String, [u64; CLASSES.len()]>,
    instances: u64,
}

impl Trainer {
    fn update(&mut self, feats: &[String], class: usize, delta: f64) {
        for f in feats {
            let w = self.weights.entry(f.clone()).or_insert([0.0; CLASSES.len()]);
            let t = self.totals.entry(f.clone()).or_insert([0.0; CLASSES.len()]);
            let s = self.stamps.entry(f.clone()).or_insert([0; CLASSES.len()]);
            t[class] += (self.instances - s[class]) as f64 * w[class];
            s[class] = self.instances;
            w[class] += delta;
        }
    }

    fn average(mut self) -> PerceptronTagger {
        for (f, w) in &self.weights {
            let t = self.totals.get_mut(f).expect("total per weight");
            let s = &self.stamps[f];
            for c in 0..CLASSES.len() {
                t[c] += (self.instances - s[c]) as f64 * w[c];
                t[c] /= self.instances.max(1) as f64;
            }
        }
        self.totals.retain(|_, row| row.iter().any(|&x| x != 0.0));
        PerceptronTagger { weights: self.totals }
    }
}

pub fn train_tagger(ds: &LabeledDataset, epochs: usize, seed: u64) -> Result<PerceptronTagger, UtilityError> {
    if epochs == 0 {
        return Err(UtilityError::NoEpochs);
    }
    if ds.is_empty() {
        return Err(UtilityError::EmptyDataset);
    }
    let mut trainer = Trainer {
        weights: HashMap::new(),
        totals: HashMap::new(),
        stamps: HashMap::new(),
        instances: 0,
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut derive_rng(seed, &format!("perceptron/epoch/{epoch}")));
        for &si in &order {
            let sentence = &ds.sentences[si];
            let mut prev = 0;
            for i in 0..sentence.tokens.len() {
                trainer.instances += 1;
                let feats = features(&sentence.tokens, i, prev);
                let guess = argmax(&score(&trainer.weights, &feats));
                let gold = class_index(&sentence.tags[i]);
                if guess != gold {
                    trainer.update(&feats, gold, 1.0);
                    trainer.update(&feats, guess, -1.0);
                }
                prev = guess;
            }
        }
    }
    Ok(trainer.average())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Precision, recall and F1 from entity counts. With neither gold nor
/// predicted entities every metric is 1.0.
pub fn label_score(true_positives: usize, predicted: usize, gold: usize) -> LabelScore {
    let (precision, recall) = if predicted == 0 && gold == 0 {
        (1.0, 1.0)
    } else {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (ratio(true_positives, predicted), ratio(true_positives, gold))
    };
    let prf = Prf::from_pr(precision, recall);
    LabelScore {
        precision,
        recall,
        f1: prf.f1,
        true_positives,
        predicted,
        gold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub labels: BTreeMap<String, LabelScore>,
    pub macro_avg: Prf,
}

/// Entity-level exact-match scores of predicted against gold tag
/// sequences, sentence by sentence.
pub fn score_entities(gold: &[Vec<String>], predicted: &[Vec<String>]) -> Evaluation {
    let collect = |seqs: &[Vec<String>]| -> BTreeSet<(usize, usize, usize, String)> {
        seqs.iter()
            .enumerate()
            .flat_map(|(s, tags)| entities(tags).into_iter().map(move |(a, b, l)| (s, a, b, l)))
            .collect()
    };
    let g = collect(gold);
    let p = collect(predicted);
    let labels: BTreeMap<String, LabelScore> = UTILITY_LABELS
        .iter()
        .map(|&label| {
            let of = |set: &BTreeSet<(usize, usize, usize, String)>| {
                set.iter().filter(|e| e.3 == label).cloned().collect::<BTreeSet<_>>()
            };
            let (gl, pl) = (of(&g), of(&p));
            (
                label.to_string(),
                label_score(gl.intersection(&pl).count(), pl.len(), gl.len()),
            )
        })
        .collect();
    let n = labels.len() as f64;
    let macro_avg = Prf {
        precision: labels.values().map(|s| s.precision).sum::<f64>() / n,
        recall: labels.values().map(|s| s.recall).sum::<f64>() / n,
        f1: labels.values().map(|s| s.f1).sum::<f64>() / n,
    };
    Evaluation { labels, macro_avg }
}

pub fn evaluate_tagger(tagger: &PerceptronTagger, test: &LabeledDataset) -> Evaluation {
    let gold: Vec<Vec<String>> = test.sentences.iter().map(|s| s.tags.clone()).collect();
    let predicted: Vec<Vec<String>> = test.sentences.iter().map(|s| tagger.predict(&s.tokens)).collect();
    score_entities(&gold, &predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityOptions {
    pub epochs: usize,
    pub keep_empty: bool,
    pub train_fraction: f64,
    pub training: TrainingConfig,
}

impl Default for UtilityOptions {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            keep_empty: true,
            train_fraction: 0.8,
            training: TrainingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub documents: usize,
    pub sentences: usize,
    pub entities: usize,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub preset: String,
    pub seed: u64,
    pub multiplier: usize,
    pub test_documents: usize,
    pub test_sentences: usize,
    pub arms: Vec<ArmResult>,
}

impl UtilityReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// Arms as rows; per-label and macro P/R/F1 as column groups.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "arm");
        for label in UTILITY_LABELS.iter().copied().chain(["MACRO"]) {
            let _ = write!(out, " | {label:^20}");
        }
        out.push('\n');
        let _ = write!(out, "{:<10}", "");
        for _ in 0..=UTILITY_LABELS.len() {
            let _ = write!(out, " | {:>6} {:>6} {:>6}", "P", "R", "F1");
        }
        out.push('\n');
        for arm in &self.arms {
            let _ = write!(out, "{:<10}", arm.arm);
            for s in arm.evaluation.labels.values() {
                let _ = write!(out, " | {:>6.3} {:>6.3} {:>6.3}", s.precision, s.recall, s.f1);
            }
            let m = arm.evaluation.macro_avg;
            let _ = writeln!(out, " | {:>6.3} {:>6.3} {:>6.3}", m.precision, m.recall, m.f1);
        }
        out
    }
}

/// Components shared by every arm of the experiment.
#[derive(Clone)]
pub struct UtilityResources {
    pub extractor: Arc<dyn EntityTagger>,
    pub pipeline_template: fn(Arc<dyn crate::mlm::FillModel>) -> Pipeline,
}

impl Default for UtilityResources {
    fn default() -> Self {
        Self {
            extractor: Arc::new(crate::ner::Gazetteer::disease_chemical()),
            pipeline_template: Pipeline::with_defaults,
        }
    }
}

/// Trains taggers on real letters and on `multiplier` synthetic versions of
/// them, all scored on the same held-out real letters.
pub fn run_utility_experiment(
    real: &Corpus,
    preset: &SystemPreset,
    multiplier: usize,
    seed: u64,
    options: &UtilityOptions,
    resources: &UtilityResources,
) -> Result<UtilityReport, UtilityError> {
    if !(1..=2).contains(&multiplier) {
        return Err(UtilityError::Multiplier(multiplier));
    }
    if real.len() < MIN_EXPERIMENT_DOCS {
        return Err(UtilityError::TooFewDocuments(real.len()));
    }
    let mut parts = split_corpus(real, &SplitSpec::train_test(options.train_fraction, seed))?;
    let train = parts.remove("train").expect("train split");
    let test = parts.remove("test").expect("test split");

    let model = train_native(
        &train,
        &TrainingConfig {
            seed,
            ..options.training.clone()
        },
    )?;
    let pipeline = (resources.pipeline_template)(Arc::new(model));
    let generated = pipeline.generate_corpus(&train, preset, multiplier, seed, Execution::default())?;

    let test_ids: BTreeSet<&str> = test.docs.iter().map(|d| d.id()).collect();
    if let Some(g) = generated
        .iter()
        .find(|g| test_ids.contains(g.synthetic.source_id.as_str()))
    {
        return Err(UtilityError::Leakage(g.synthetic.source_id.clone()));
    }
    let synth_corpus = |max_variant: usize| -> Result<Corpus, UtilityError> {
        let docs = generated
            .iter()
            .filter(|g| g.synthetic.variant_index < max_variant)
            .map(|g| {
                let id = format!("{}#v{}", g.synthetic.source_id, g.synthetic.variant_index);
                AnnotatedDocument::new(&id, &g.synthetic.text, vec![], None)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Corpus::new(format!("{}:synth_x{max_variant}", train.name), docs)?)
    };

    let mut arms: Vec<(String, Corpus)> = vec![("real".into(), train.clone())];
    for m in 1..=multiplier {
        arms.push((format!("synth_x{m}"), synth_corpus(m)?));
    }
    let extractor = resources.extractor.as_ref();
    let test_ds = extract_entities(&test, extractor, options.keep_empty)?;
    let results = Execution::default().try_map(&arms, |(name, corpus)| {
        let wrap = |e: UtilityError| UtilityError::Arm {
            arm: name.clone(),
            message: e.to_string(),
        };
        let ds = extract_entities(corpus, extractor, options.keep_empty).map_err(wrap)?;
        let tagger = train_tagger(&ds, options.epochs, seed).map_err(wrap)?;
        Ok::<_, UtilityError>(ArmResult {
            arm: name.clone(),
            documents: corpus.len(),
            sentences: ds.len(),
            entities: ds.entity_count(),
            evaluation: evaluate_tagger(&tagger, &test_ds),
        })
    })?;
    Ok(UtilityReport {
        preset: preset.name.clone(),
        seed,
        multiplier,
        test_documents: test.len(),
        test_sentences: test_ds.len(),
        arms: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::generate_fixture_corpus;
    use crate::ner::Gazetteer;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn corpus(texts: &[&str]) -> Corpus {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| AnnotatedDocument::new(&format!("d{i}"), t, vec![], None).unwrap())
            .collect();
        Corpus::new("c", docs).unwrap()
    }

    #[test]
    fn extraction_examples() {
        let gaz = Gazetteer::disease_chemical();
        let ds = extract_entities(
            &corpus(&["History of coronary artery disease on aspirin. Stable."]),
            &gaz,
            true,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(
            ds.sentences[0].tags,
            tags("O O B-DISEASE I-DISEASE I-DISEASE O B-CHEMICAL O")
        );
        assert!(ds.sentences[1].tags.iter().all(|t| t == "O"));
        let dropped = extract_entities(&corpus(&["History of coronary artery disease. Stable."]), &gaz, false).unwrap();
        assert_eq!(dropped.len(), 1);
        let empty = extract_entities(&corpus(&[]), &gaz, true).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn entity_decoding() {
        assert_eq!(
            entities(&tags("B-DISEASE I-DISEASE O I-CHEMICAL B-CHEMICAL")),
            vec![
                (0, 1, "DISEASE".into()),
                (3, 3, "CHEMICAL".into()),
                (4, 4, "CHEMICAL".into())
            ]
        );
    }

    #[test]
    fn scoring_examples() {
        let gold = vec![tags("B-DISEASE O B-CHEMICAL")];
        let same = score_entities(&gold, &gold);
        assert_eq!(same.macro_avg, Prf::ONE);
        let none = score_entities(&gold, &[tags("O O O")]);
        assert_eq!(none.labels["DISEASE"].f1, 0.0);
        assert_eq!(none.labels["DISEASE"].precision, 0.0);
        let gold = vec![tags("B-DISEASE O B-DISEASE")];
        let half = score_entities(&gold, &[tags("B-DISEASE O O")]);
        let d = half.labels["DISEASE"];
        assert_eq!((d.precision, d.recall), (1.0, 0.5));
        assert!((d.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(half.labels["CHEMICAL"].f1, 1.0);
    }

    #[test]
    fn training_examples() {
        let ds = LabeledDataset {
            sentences: vec![LabeledSentence {
                doc_id: "d".into(),
                tokens: tags("Patient takes metformin for diabetes ."),
                tags: tags("O O B-CHEMICAL O B-DISEASE O"),
            }],
            skipped_docs: 0,
        };
        let a = train_tagger(&ds, 10, 3).unwrap();
        assert_eq!(a, train_tagger(&ds, 10, 3).unwrap());
        assert_eq!(evaluate_tagger(&a, &ds).macro_avg.f1, 1.0);
        assert!(matches!(train_tagger(&ds, 0, 3), Err(UtilityError::NoEpochs)));
        assert!(matches!(
            train_tagger(&LabeledDataset::default(), 1, 3),
            Err(UtilityError::EmptyDataset)
        ));
    }

    #[test]
    fn identity_arm_equals_real_arm() {
        let real = generate_fixture_corpus(5, 12).unwrap();
        let report = run_utility_experiment(
            &real,
            &SystemPreset::identity(),
            2,
            1,
            &UtilityOptions::default(),
            &UtilityResources::default(),
        )
        .unwrap();
        let r = report.arm("real").unwrap();
        let s1 = report.arm("synth_x1").unwrap();
        assert_eq!(r.evaluation, s1.evaluation);
        assert_eq!(r.sentences, s1.sentences);
        assert_eq!(report.arm("synth_x2").unwrap().documents, 2 * s1.documents);
        assert!(report.render_table().contains("synth_x2"));
        assert!(matches!(
            run_utility_experiment(
                &real,
                &SystemPreset::identity(),
                3,
                1,
                &UtilityOptions::default(),
                &UtilityResources::default()
            ),
            Err(UtilityError::Multiplier(3))
        ));
    }

    proptest! {
        #[test]
        fn scorer_matches_span_set_oracle(
            gold in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..8), 1..4),
            noise in proptest::collection::vec(0usize..5, 32),
        ) {
            let as_tags = |v: &Vec<usize>| v.iter().map(|&c| CLASSES[c].to_string()).collect::<Vec<_>>();
            let g: Vec<Vec<String>> = gold.iter().map(as_tags).collect();
            let mut k = 0;
            let p: Vec<Vec<String>> = gold.iter().map(|s| s.iter().map(|&c| {
                k += 1;
                CLASSES[if noise[k % 32] < 2 { noise[(k + 7) % 32] } else { c }].to_string()
            }).collect()).collect();
            let eval = score_entities(&g, &p);
            for label in UTILITY_LABELS {
                // Oracle: enumerate every (sentence, start, end) triple explicitly.
                let spans = |seqs: &Vec<Vec<String>>| {
                    let mut set = BTreeSet::new();
                    for (s, t) in seqs.iter().enumerate() {
                        for a in 0..t.len() {
                            for b in a..t.len() {
                                let starts = t[a] == format!("B-{label}") || (t[a] == format!("I-{label}") && (a == 0 || !t[a - 1].ends_with(label)));
                                let inner = (a + 1..=b).all(|i| t[i] == format!("I-{label}"));
                                let closed = b + 1 == t.len() || t[b + 1] != format!("I-{label}");
                                if starts && inner && closed {
                                    set.insert((s, a, b));
                                }
                            }
                        }
                    }
                    set
                };
                let (gs, ps) = (spans(&g), spans(&p));
                let score = eval.labels[label];
                prop_assert_eq!(score.true_positives, gs.intersection(&ps).count());
                prop_assert_eq!(score.gold, gs.len());
                prop_assert_eq!(score.predicted, ps.len());
            }
        }
    }
}
