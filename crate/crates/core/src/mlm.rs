//! Fill-model interface, the native interpolated count model, perplexity
//! and the hyperparameter grid search.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::Duration;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{merge_corpora, split_corpus, AnnotatedDocument, Corpus, CorpusError, SplitSpec};
use crate::exec::Execution;
use crate::masker::{round_half_up, MaskPlan, MaskPolicy, MaskReason, MaskedDocument, SpanGroup, MASK_TOKEN};
use crate::rng::derive_rng;

pub const MODEL_FILE_VERSION: u32 = 1;
pub const MODEL_KIND: &str = "native-count";
pub const DEFAULT_WINDOW: usize = 21;
/// Probability assigned to an original token missing from a distribution.
pub const PROBABILITY_FLOOR: f64 = 1e-12;
/// Share of non-PHI validation tokens masked during grid search.
pub const VALIDATION_MASK_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("training masked every token; the vocabulary is empty")]
    EmptyVocabulary,
    #[error("no masked positions to evaluate")]
    NoMaskedPositions,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error in field `{field}`: {message}")]
    Protocol { field: String, message: String },
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("grid config {index}: {source}")]
    Grid {
        index: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// True for failures of a remote backend rather than of the request.
    pub fn is_backend(&self) -> bool {
        match self {
            ModelError::Transport(_)
            | ModelError::Timeout(_)
            | ModelError::Protocol { .. }
            | ModelError::Server { .. } => true,
            ModelError::Grid { source, .. } => source.is_backend(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub p: f64,
}

/// Ranked candidates for one masked position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FillDistribution {
    pub candidates: Vec<Candidate>,
}

impl FillDistribution {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self, ModelError> {
        let dist = Self { candidates };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidDistribution(m));
        if self.candidates.is_empty() {
            return bad("no candidates".into());
        }
        let mut seen = BTreeSet::new();
        let mut sum = 0.0;
        for (i, c) in self.candidates.iter().enumerate() {
            if !(c.p.is_finite() && c.p > 0.0) {
                return bad(format!("candidate {i} ({}) has probability {}", c.token, c.p));
            }
            if i > 0 && c.p > self.candidates[i - 1].p {
                return bad(format!("probabilities increase at rank {i}"));
            }
            if !seen.insert(c.token.as_str()) {
                return bad(format!("token {} repeated", c.token));
            }
            sum += c.p;
        }
        if sum > 1.0 + 1e-9 {
            return bad(format!("probabilities sum to {sum}"));
        }
        Ok(())
    }

    pub fn probability(&self, token: &str) -> Option<f64> {
        self.candidates.iter().find(|c| c.token == token).map(|c| c.p)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// A masked language model as seen by the filler.
///
/// `context` carries [`MASK_TOKEN`] at masked positions; the result holds
/// one distribution per entry of `mask_positions`, in order.
pub trait FillModel: Send + Sync {
    /// Longest context accepted, in tokens.
    fn window(&self) -> usize;

    fn predict(
        &self,
        context: &[String],
        mask_positions: &[usize],
        top_k: usize,
    ) -> Result<Vec<FillDistribution>, ModelError>;
}

/// Checks shared by every backend before a request is issued.
pub fn check_request(
    context: &[String],
    mask_positions: &[usize],
    top_k: usize,
    window: usize,
) -> Result<(), ModelError> {
    if top_k == 0 {
        return Err(ModelError::InvalidRequest("top_k must be at least 1".into()));
    }
    if context.len() > window {
        return Err(ModelError::InvalidRequest(format!(
            "context of {} tokens exceeds the window of {window}",
            context.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for &p in mask_positions {
        if p >= context.len() {
            return Err(ModelError::InvalidRequest(format!(
                "mask position {p} outside context of {} tokens",
                context.len()
            )));
        }
        if !seen.insert(p) {
            return Err(ModelError::InvalidRequest(format!("mask position {p} repeated")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Learning rate; forwarded to remote trainable backends only.
    pub alpha: f64,
    /// Batch size; forwarded to remote trainable backends only.
    pub beta: usize,
    pub phi: f64,
    pub psi: f64,
    /// Early-stop patience; forwarded to remote trainable backends only.
    pub patience: usize,
    pub smoothing: f64,
    pub lambdas: [f64; 4],
    pub window: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-5,
            beta: 16,
            phi: 1.0,
            psi: 0.3,
            patience: 2,
            smoothing: 0.1,
            lambdas: [0.3, 0.3, 0.3, 0.1],
            window: DEFAULT_WINDOW,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [("phi", self.phi), ("psi", self.psi)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.beta < 1 || !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be positive and beta at least 1".into());
        }
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0) {
            return bad(format!("smoothing {} must be finite and non-negative", self.smoothing));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad(format!("lambdas {:?} must be non-negative", self.lambdas));
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("lambdas sum to {sum}, not 1"));
        }
        if self.window < 3 {
            return bad("window must be at least 3 tokens".into());
        }
        Ok(())
    }

    /// The full α × β × φ × ψ grid searched for the neural model, with every
    /// other field taken from `base`.
    pub fn reference_grid(base: &TrainingConfig) -> Vec<TrainingConfig> {
        let mut grid = Vec::new();
        for alpha in [1e-4, 5e-5, 3e-5] {
            for beta in [8, 16] {
                for phi in [0.75, 1.0] {
                    for psi in [0.3, 0.5] {
                        grid.push(TrainingConfig {
                            alpha,
                            beta,
                            phi,
                            psi,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        grid
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by target id.
    counts: Vec<(u32, u64)>,
}

impl ContextCounts {
    fn get(&self, w: u32) -> u64 {
        self.counts
            .binary_search_by_key(&w, |&(id, _)| id)
            .map(|i| self.counts[i].1)
            .unwrap_or(0)
    }
}

/// Interpolated left-bigram, right-bigram, skip-gram and unigram model.
#[derive(Debug, Clone, PartialEq)]
pub struct NativeCountModel {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    unigram: Vec<u64>,
    unigram_total: u64,
    left: HashMap<u32, ContextCounts>,
    right: HashMap<u32, ContextCounts>,
    skip: HashMap<(u32, u32), ContextCounts>,
    smoothing: f64,
    lambdas: [f64; 4],
    window: usize,
}

/// Positions masked while training on `doc`: a sample of whole gold PHI
/// spans, topped up with uniformly chosen non-PHI tokens to reach `psi`.
pub fn training_mask(doc: &AnnotatedDocument, config: &TrainingConfig) -> Vec<usize> {
    let n = doc.doc.len();
    let mut rng = derive_rng(config.seed, &format!("train/{}", doc.id()));
    let spans = doc.phi_token_spans();
    let mut is_phi = vec![false; n];
    for s in &spans {
        is_phi[s.positions()].iter_mut().for_each(|b| *b = true);
    }
    let mut masked = BTreeSet::new();
    let take = round_half_up(config.phi * spans.len() as f64);
    for i in sample(&mut rng, spans.len(), take) {
        masked.extend(spans[i].positions());
    }
    let target = round_half_up(config.psi * n as f64);
    let pool: Vec<usize> = (0..n).filter(|&i| !is_phi[i]).collect();
    let extra = target.saturating_sub(masked.len()).min(pool.len());
    for i in sample(&mut rng, pool.len(), extra) {
        masked.insert(pool[i]);
    }
    masked.into_iter().collect()
}

fn neighbours(masked: &[bool]) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let n = masked.len();
    let mut left = vec![None; n];
    let mut last = None;
    for i in 0..n {
        left[i] = last;
        if !masked[i] {
            last = Some(i);
        }
    }
    let mut right = vec![None; n];
    last = None;
    for i in (0..n).rev() {
        right[i] = last;
        if !masked[i] {
            last = Some(i);
        }
    }
    (left, right)
}

fn into_contexts<K: std::hash::Hash + Eq + Copy>(
    raw: HashMap<(K, u32), u64>,
    remap: &[Option<u32>],
) -> HashMap<K, ContextCounts> {
    let mut out: HashMap<K, ContextCounts> = HashMap::new();
    for ((key, w), c) in raw {
        if let Some(w) = remap[w as usize] {
            let entry = out.entry(key).or_default();
            entry.total += c;
            entry.counts.push((w, c));
        }
    }
    for ctx in out.values_mut() {
        ctx.counts.sort_unstable();
    }
    out
}

pub fn train_native(corpus: &Corpus, config: &TrainingConfig) -> Result<NativeCountModel, ModelError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut interner: HashMap<String, u32> = HashMap::new();
    let mut strings: Vec<String> = Vec::new();
    let mut seen_unmasked: Vec<bool> = Vec::new();
    let mut unigram: HashMap<u32, u64> = HashMap::new();
    let mut left: HashMap<(u32, u32), u64> = HashMap::new();
    let mut right: HashMap<(u32, u32), u64> = HashMap::new();
    let mut skip: HashMap<((u32, u32), u32), u64> = HashMap::new();

    for ad in &corpus.docs {
        let ids: Vec<u32> = ad
            .doc
            .tokens
            .iter()
            .map(|t| {
                *interner.entry(t.text.clone()).or_insert_with(|| {
                    strings.push(t.text.clone());
                    seen_unmasked.push(false);
                    (strings.len() - 1) as u32
                })
            })
            .collect();
        let mut masked = vec![false; ids.len()];
        for p in training_mask(ad, config) {
            masked[p] = true;
        }
        for (i, &id) in ids.iter().enumerate() {
            if !masked[i] {
                seen_unmasked[id as usize] = true;
            }
        }
        let (lefts, rights) = neighbours(&masked);
        for (i, &w) in ids.iter().enumerate() {
            *unigram.entry(w).or_default() += 1;
            let l = lefts[i].map(|j| ids[j]);
            let r = rights[i].map(|j| ids[j]);
            if let Some(l) = l {
                *left.entry((l, w)).or_default() += 1;
            }
            if let Some(r) = r {
                *right.entry((r, w)).or_default() += 1;
            }
            if let (Some(l), Some(r)) = (l, r) {
                *skip.entry(((l, r), w)).or_default() += 1;
            }
        }
    }

    let mut vocab: Vec<String> = strings
        .iter()
        .zip(&seen_unmasked)
        .filter(|(_, &seen)| seen)
        .map(|(s, _)| s.clone())
        .collect();
    if vocab.is_empty() {
        return Err(ModelError::EmptyVocabulary);
    }
    vocab.sort();
    let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
    let remap: Vec<Option<u32>> = strings.iter().map(|s| index.get(s).copied()).collect();

    let mut uni = vec![0u64; vocab.len()];
    for (w, c) in unigram {
        if let Some(w) = remap[w as usize] {
            uni[w as usize] = c;
        }
    }
    // Contexts are always unmasked tokens, hence already in the vocabulary.
    let ctx = |k: u32| remap[k as usize].expect("context token is unmasked");
    let left = into_contexts(left.into_iter().map(|((l, w), c)| ((ctx(l), w), c)).collect(), &remap);
    let right = into_contexts(right.into_iter().map(|((r, w), c)| ((ctx(r), w), c)).collect(), &remap);
    let skip = into_contexts(
        skip.into_iter()
            .map(|(((l, r), w), c)| (((ctx(l), ctx(r)), w), c))
            .collect(),
        &remap,
    );

    Ok(NativeCountModel {
        unigram_total: uni.iter().sum(),
        vocab,
        index,
        unigram: uni,
        left,
        right,
        skip,
        smoothing: config.smoothing,
        lambdas: config.lambdas,
        window: config.window,
    })
}

/// A neighbour of a mask: absent, out of vocabulary, or a vocabulary id.
type Neighbour = Option<Option<u32>>;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    kind: String,
    window: usize,
    smoothing: f64,
    lambdas: [f64; 4],
    vocab: Vec<String>,
    unigram: Vec<u64>,
    /// `[left, target, count]`
    left: Vec<[u64; 3]>,
    /// `[right, target, count]`
    right: Vec<[u64; 3]>,
    /// `[left, right, target, count]`
    skip: Vec<[u64; 4]>,
}

impl NativeCountModel {
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn lambdas(&self) -> [f64; 4] {
        self.lambdas
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn unigram_count(&self, w: &str) -> u64 {
        self.id(w).map(|w| self.unigram[w as usize]).unwrap_or(0)
    }

    /// Count of `w` directly after `prev`.
    pub fn left_bigram(&self, prev: &str, w: &str) -> u64 {
        match (self.id(prev), self.id(w)) {
            (Some(l), Some(w)) => self.left.get(&l).map(|c| c.get(w)).unwrap_or(0),
            _ => 0,
        }
    }

    /// Count of `w` directly before `next`.
    pub fn right_bigram(&self, w: &str, next: &str) -> u64 {
        match (self.id(next), self.id(w)) {
            (Some(r), Some(w)) => self.right.get(&r).map(|c| c.get(w)).unwrap_or(0),
            _ => 0,
        }
    }

    pub fn skip_count(&self, prev: &str, next: &str, w: &str) -> u64 {
        match (self.id(prev), self.id(next), self.id(w)) {
            (Some(l), Some(r), Some(w)) => self.skip.get(&(l, r)).map(|c| c.get(w)).unwrap_or(0),
            _ => 0,
        }
    }

    /// Normalized probabilities over the whole vocabulary for one mask.
    fn scores(&self, l: Neighbour, r: Neighbour) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        let k = self.smoothing;
        let empty = ContextCounts::default();
        let terms: [(f64, Option<&ContextCounts>); 3] = [
            (
                self.lambdas[0],
                l.map(|l| l.and_then(|l| self.left.get(&l)).unwrap_or(&empty)),
            ),
            (
                self.lambdas[1],
                r.map(|r| r.and_then(|r| self.right.get(&r)).unwrap_or(&empty)),
            ),
            (
                self.lambdas[2],
                match (l, r) {
                    (Some(l), Some(r)) => Some(l.zip(r).and_then(|key| self.skip.get(&key)).unwrap_or(&empty)),
                    _ => None,
                },
            ),
        ];
        let unigram_den = self.unigram_total as f64 + k * v;
        // A term takes part when its context exists and its denominator is
        // positive; the remaining weights are renormalized.
        let mut active: Vec<(f64, &ContextCounts, f64)> = terms
            .iter()
            .filter_map(|&(lambda, ctx)| {
                let ctx = ctx?;
                let den = ctx.total as f64 + k * v;
                (den > 0.0).then_some((lambda, ctx, den))
            })
            .collect();
        let mut unigram_weight = self.lambdas[3];
        let weight_sum: f64 = active.iter().map(|t| t.0).sum::<f64>() + unigram_weight;
        if weight_sum > 0.0 {
            active.iter_mut().for_each(|t| t.0 /= weight_sum);
            unigram_weight /= weight_sum;
        } else {
            active.clear();
            unigram_weight = 1.0;
        }

        let base: f64 =
            active.iter().map(|&(lambda, _, den)| lambda * k / den).sum::<f64>() + unigram_weight * k / unigram_den;
        let mut scores: Vec<f64> = self
            .unigram
            .iter()
            .map(|&c| base + unigram_weight * c as f64 / unigram_den)
            .collect();
        for (lambda, ctx, den) in active {
            for &(w, c) in &ctx.counts {
                scores[w as usize] += lambda * c as f64 / den;
            }
        }
        let total: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= total);
        scores
    }

    fn top_candidates(&self, scores: Vec<f64>, top_k: usize) -> FillDistribution {
        let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
        let order = |a: &usize, b: &usize| {
            scores[*b]
                .total_cmp(&scores[*a])
                .then_with(|| self.vocab[*a].cmp(&self.vocab[*b]))
        };
        if top_k < ids.len() {
            ids.select_nth_unstable_by(top_k, order);
            ids.truncate(top_k);
        }
        ids.sort_unstable_by(order);
        FillDistribution {
            candidates: ids
                .into_iter()
                .map(|i| Candidate {
                    token: self.vocab[i].clone(),
                    p: scores[i],
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let flat2 = |m: &HashMap<u32, ContextCounts>| {
            let mut rows: Vec<[u64; 3]> = m
                .iter()
                .flat_map(|(&c, ctx)| ctx.counts.iter().map(move |&(w, n)| [c as u64, w as u64, n]))
                .collect();
            rows.sort_unstable();
            rows
        };
        let mut skip: Vec<[u64; 4]> = self
            .skip
            .iter()
            .flat_map(|(&(l, r), ctx)| ctx.counts.iter().map(move |&(w, n)| [l as u64, r as u64, w as u64, n]))
            .collect();
        skip.sort_unstable();
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            kind: MODEL_KIND.into(),
            window: self.window,
            smoothing: self.smoothing,
            lambdas: self.lambdas,
            vocab: self.vocab.clone(),
            unigram: self.unigram.clone(),
            left: flat2(&self.left),
            right: flat2(&self.right),
            skip,
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::ModelFile(m);
        let value: serde_json::Value = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_FILE_VERSION as u64 => {}
            Some(v) => return Err(bad(format!("unsupported version {v}"))),
            None => return Err(bad("missing version field".into())),
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if file.kind != MODEL_KIND {
            return Err(bad(format!("unsupported model kind {}", file.kind)));
        }
        let v = file.vocab.len();
        if v == 0 || file.unigram.len() != v {
            return Err(bad("vocabulary and unigram table disagree".into()));
        }
        TrainingConfig {
            smoothing: file.smoothing,
            lambdas: file.lambdas,
            window: file.window,
            ..TrainingConfig::default()
        }
        .validate()
        .map_err(|e| bad(e.to_string()))?;
        let id = |x: u64| -> Result<u32, ModelError> {
            if (x as usize) < v {
                Ok(x as u32)
            } else {
                Err(bad(format!("token id {x} outside vocabulary")))
            }
        };
        let mut left: HashMap<(u32, u32), u64> = HashMap::new();
        for [c, w, n] in file.left {
            left.insert((id(c)?, id(w)?), n);
        }
        let mut right: HashMap<(u32, u32), u64> = HashMap::new();
        for [c, w, n] in file.right {
            right.insert((id(c)?, id(w)?), n);
        }
        let mut skip: HashMap<((u32, u32), u32), u64> = HashMap::new();
        for [l, r, w, n] in file.skip {
            skip.insert(((id(l)?, id(r)?), id(w)?), n);
        }
        let identity: Vec<Option<u32>> = (0..v as u32).map(Some).collect();
        let index = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect::<HashMap<_, _>>();
        if index.len() != v {
            return Err(bad("duplicate vocabulary entries".into()));
        }
        Ok(Self {
            unigram_total: file.unigram.iter().sum(),
            index,
            vocab: file.vocab,
            unigram: file.unigram,
            left: into_contexts(left, &identity),
            right: into_contexts(right, &identity),
            skip: into_contexts(skip, &identity),
            smoothing: file.smoothing,
            lambdas: file.lambdas,
            window: file.window,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl FillModel for NativeCountModel {
    fn window(&self) -> usize {
        self.window
    }

    fn predict(
        &self,
        context: &[String],
        mask_positions: &[usize],
        top_k: usize,
    ) -> Result<Vec<FillDistribution>, ModelError> {
        check_request(context, mask_positions, top_k, self.window)?;
        let mut masked: Vec<bool> = context.iter().map(|t| t == MASK_TOKEN).collect();
        for &p in mask_positions {
            masked[p] = true;
        }
        let (lefts, rights) = neighbours(&masked);
        Ok(mask_positions
            .iter()
            .map(|&p| {
                let l = lefts[p].map(|j| self.id(&context[j]));
                let r = rights[p].map(|j| self.id(&context[j]));
                self.top_candidates(self.scores(l, r), top_k)
            })
            .collect())
    }
}

/// Free-function form of [`FillModel::predict`] for the native model.
pub fn predict_native(
    model: &NativeCountModel,
    context: &[String],
    mask_positions: &[usize],
    top_k: usize,
) -> Result<Vec<FillDistribution>, ModelError> {
    model.predict(context, mask_positions, top_k)
}

/// Sum of `-ln P(original)` and the number of masked positions of one
/// document, querying the full vocabulary window by window.
fn document_log_loss(model: &dyn FillModel, md: &MaskedDocument) -> Result<(f64, usize), ModelError> {
    let originals = md.doc.token_texts();
    let masked = md.masked_tokens();
    let w = model.window().max(1);
    let mut loss = 0.0;
    let mut count = 0;
    for start in (0..masked.len()).step_by(w) {
        let end = (start + w).min(masked.len());
        let local: Vec<usize> = md
            .plan
            .masked_positions
            .iter()
            .filter(|&&p| p >= start && p < end)
            .map(|&p| p - start)
            .collect();
        if local.is_empty() {
            continue;
        }
        let dists = model.predict(&masked[start..end], &local, usize::MAX)?;
        if dists.len() != local.len() {
            return Err(ModelError::InvalidDistribution(format!(
                "{} distributions returned for {} masks",
                dists.len(),
                local.len()
            )));
        }
        for (&p, dist) in local.iter().zip(&dists) {
            let prob = dist
                .probability(&originals[start + p])
                .unwrap_or(0.0)
                .max(PROBABILITY_FLOOR);
            loss -= prob.ln();
            count += 1;
        }
    }
    Ok((loss, count))
}

/// `exp` of the mean negative log-probability of the original tokens at the
/// masked positions.
pub fn perplexity(model: &dyn FillModel, masked: &[MaskedDocument]) -> Result<f64, ModelError> {
    let parts = Execution::default().try_map(masked, |md| document_log_loss(model, md))?;
    let (loss, count) = parts.into_iter().fold((0.0, 0), |(l, c), (dl, dc)| (l + dl, c + dc));
    if count == 0 {
        return Err(ModelError::NoMaskedPositions);
    }
    Ok((loss / count as f64).exp())
}

/// The fixed validation masking: `VALIDATION_MASK_FRACTION` of each
/// document's non-PHI tokens, drawn from `seed` and the document id only.
pub fn validation_masks(corpus: &Corpus, seed: u64) -> Vec<MaskedDocument> {
    corpus
        .docs
        .iter()
        .map(|ad| {
            let n = ad.doc.len();
            let mut is_phi = vec![false; n];
            for s in ad.phi_token_spans() {
                is_phi[s.positions()].iter_mut().for_each(|b| *b = true);
            }
            let pool: Vec<usize> = (0..n).filter(|&i| !is_phi[i]).collect();
            let take = round_half_up(VALIDATION_MASK_FRACTION * pool.len() as f64);
            let mut rng = derive_rng(seed, &format!("validation/{}", ad.id()));
            let mut positions: Vec<usize> = sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            positions.sort_unstable();
            let mut plan = MaskPlan::empty(ad.id(), MaskPolicy::default().with_seed(seed));
            plan.span_groups = positions
                .iter()
                .map(|&p| SpanGroup {
                    first: p,
                    last: p,
                    reason: MaskReason::Random,
                })
                .collect();
            plan.masked_positions = positions;
            MaskedDocument {
                doc: ad.doc.clone(),
                plan,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub index: usize,
    pub config: TrainingConfig,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub entries: Vec<GridEntry>,
    pub best_index: usize,
    pub train_docs: usize,
    pub validation_docs: usize,
    pub validation_positions: usize,
}

#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub best: TrainingConfig,
    /// The winning config retrained on train and validation together.
    pub model: NativeCountModel,
    pub report: GridReport,
}

/// Trains every config on the first split, scores it on a fixed masking of
/// the second, and retrains the lowest-perplexity config on both.
pub fn grid_search(
    corpus: &Corpus,
    grid: &[TrainingConfig],
    split: &SplitSpec,
) -> Result<GridSearchOutcome, ModelError> {
    if grid.is_empty() {
        return Err(ModelError::InvalidConfig("empty grid".into()));
    }
    if split.fractions.len() != 2 {
        return Err(ModelError::InvalidConfig(
            "grid search needs a two-way train/validation split".into(),
        ));
    }
    let mut parts = split_corpus(corpus, split)?;
    let train = parts.remove(&split.fractions[0].0).expect("split label present");
    let validation = parts.remove(&split.fractions[1].0).expect("split label present");
    let masked = validation_masks(&validation, split.seed);
    let validation_positions = masked.iter().map(|m| m.plan.masked_positions.len()).sum();

    let indexed: Vec<(usize, &TrainingConfig)> = grid.iter().enumerate().collect();
    let scores = Execution::default().try_map(&indexed, |&(index, config)| {
        let annotate = |e: ModelError| ModelError::Grid {
            index,
            source: Box::new(e),
        };
        let model = train_native(&train, config).map_err(annotate)?;
        perplexity(&model, &masked).map_err(annotate)
    })?;

    let mut best_index = 0;
    for (i, &p) in scores.iter().enumerate() {
        if p < scores[best_index] {
            best_index = i;
        }
    }
    let merged = merge_corpora(&corpus.name, &[&train, &validation])?;
    let best = grid[best_index].clone();
    let model = train_native(&merged, &best).map_err(|e| ModelError::Grid {
        index: best_index,
        source: Box::new(e),
    })?;
    let entries = grid
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (config, perplexity))| GridEntry {
            index,
            config: config.clone(),
            perplexity,
        })
        .collect();
    Ok(GridSearchOutcome {
        best,
        model,
        report: GridReport {
            entries,
            best_index,
            train_docs: train.len(),
            validation_docs: validation.len(),
            validation_positions,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnnotatedDocument;
    use crate::text::tokenize_with_id;
    use proptest::prelude::*;

    fn corpus(texts: &[&str]) -> Corpus {
        let docs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| AnnotatedDocument::new(&format!("d{i}"), t, vec![], None).unwrap())
            .collect();
        Corpus::new("t", docs).unwrap()
    }

    fn unmasked(lambdas: [f64; 4], smoothing: f64) -> TrainingConfig {
        TrainingConfig {
            phi: 0.0,
            psi: 0.0,
            lambdas,
            smoothing,
            ..TrainingConfig::default()
        }
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn letter(i: usize) -> String {
        char::from(b'a' + i as u8).to_string()
    }

    /// Assigns a fixed probability to every token it is asked about.
    struct Fixed(Vec<f64>);

    impl FillModel for Fixed {
        fn window(&self) -> usize {
            100
        }
        fn predict(&self, context: &[String], pos: &[usize], _: usize) -> Result<Vec<FillDistribution>, ModelError> {
            Ok(pos
                .iter()
                .map(|&p| FillDistribution {
                    candidates: vec![Candidate {
                        token: letter(p),
                        p: self.0[p],
                    }],
                })
                .inspect(|_| assert_eq!(context.len(), self.0.len()))
                .collect())
        }
    }

    fn masked_doc(n: usize, positions: Vec<usize>) -> MaskedDocument {
        let text = (0..n).map(letter).collect::<Vec<_>>().join(" ");
        let doc = tokenize_with_id("d", &text);
        let mut plan = MaskPlan::empty("d", MaskPolicy::default());
        plan.span_groups = positions
            .iter()
            .map(|&p| SpanGroup {
                first: p,
                last: p,
                reason: MaskReason::Random,
            })
            .collect();
        plan.masked_positions = positions;
        MaskedDocument { doc, plan }
    }

    #[test]
    fn counts_match_brute_force() {
        let c = corpus(&["the red cat .", "the red dog ."]);
        let m = train_native(&c, &unmasked([1.0, 0.0, 0.0, 0.0], 0.0)).unwrap();
        assert_eq!(m.left_bigram("red", "cat"), 1);
        assert_eq!(m.left_bigram("red", "dog"), 1);
        assert_eq!(m.left_bigram("the", "red"), 2);
        assert_eq!(m.right_bigram("cat", "."), 1);
        assert_eq!(m.skip_count("red", ".", "dog"), 1);
        assert_eq!(m.unigram_count("the"), 2);
        assert_eq!(m.vocab(), [".", "cat", "dog", "red", "the"]);
    }

    #[test]
    fn left_bigram_prediction() {
        let c = corpus(&["the red cat .", "the red dog ."]);
        let m = train_native(&c, &unmasked([1.0, 0.0, 0.0, 0.0], 0.0)).unwrap();
        let d = predict_native(&m, &toks("the red [MASK]"), &[2], 10).unwrap();
        assert_eq!(d[0].candidates.len(), 2);
        assert_eq!(
            d[0].candidates[0],
            Candidate {
                token: "cat".into(),
                p: 0.5
            }
        );
        assert_eq!(
            d[0].candidates[1],
            Candidate {
                token: "dog".into(),
                p: 0.5
            }
        );
    }

    #[test]
    fn unigram_only_ignores_context() {
        let c = corpus(&["the red cat .", "the red dog ."]);
        let m = train_native(&c, &unmasked([0.0, 0.0, 0.0, 1.0], 0.5)).unwrap();
        let a = m.predict(&toks("the red [MASK]"), &[2], 10).unwrap();
        let b = m.predict(&toks("[MASK] cat dog"), &[0], 10).unwrap();
        assert_eq!(a, b);
        // (2 + 0.5) / (8 + 0.5 * 5)
        assert!((a[0].probability("the").unwrap() - 2.5 / 10.5).abs() < 1e-12);
    }

    #[test]
    fn all_masked_context_backs_off_to_unigram() {
        let c = corpus(&["the red cat .", "the red dog ."]);
        let m = train_native(&c, &unmasked([0.3, 0.3, 0.3, 0.1], 0.1)).unwrap();
        let d = m.predict(&toks("[MASK] [MASK] [MASK]"), &[1], 10).unwrap();
        let uni = train_native(&c, &unmasked([0.0, 0.0, 0.0, 1.0], 0.1)).unwrap();
        let u = uni.predict(&toks("x"), &[0], 10).unwrap();
        assert_eq!(d, u);
    }

    #[test]
    fn full_vocab_query_sums_to_one() {
        let c = corpus(&["the red cat sat on the mat .", "a red dog sat on a log ."]);
        let m = train_native(
            &c,
            &TrainingConfig {
                psi: 0.2,
                ..TrainingConfig::default()
            },
        )
        .unwrap();
        let d = m
            .predict(&toks("the [MASK] dog [MASK] on"), &[1, 3], usize::MAX)
            .unwrap();
        for dist in &d {
            let sum: f64 = dist.candidates.iter().map(|c| c.p).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            dist.validate().unwrap();
        }
        assert_eq!(m.predict(&toks("a [MASK]"), &[1], 3).unwrap()[0].len(), 3);
    }

    #[test]
    fn request_errors() {
        let c = corpus(&["a b c"]);
        let m = train_native(&c, &unmasked([0.25; 4], 0.1)).unwrap();
        assert!(matches!(
            m.predict(&toks("a b"), &[0], 0),
            Err(ModelError::InvalidRequest(_))
        ));
        assert!(matches!(
            m.predict(&toks("a b"), &[2], 1),
            Err(ModelError::InvalidRequest(_))
        ));
        let long = vec!["a".to_string(); 30];
        assert!(matches!(m.predict(&long, &[0], 1), Err(ModelError::InvalidRequest(_))));
    }

    #[test]
    fn training_errors_and_determinism() {
        let empty = Corpus::new("e", vec![]).unwrap();
        assert!(matches!(
            train_native(&empty, &TrainingConfig::default()),
            Err(ModelError::EmptyCorpus)
        ));
        let bad = TrainingConfig {
            lambdas: [0.5, 0.5, 0.5, 0.0],
            ..TrainingConfig::default()
        };
        assert!(matches!(
            train_native(&corpus(&["a"]), &bad),
            Err(ModelError::InvalidConfig(_))
        ));
        let c = corpus(&["one two three four five six", "six five four three two one"]);
        let cfg = TrainingConfig {
            psi: 0.5,
            seed: 4,
            ..TrainingConfig::default()
        };
        assert_eq!(train_native(&c, &cfg).unwrap(), train_native(&c, &cfg).unwrap());
    }

    #[test]
    fn model_file_round_trip() {
        let c = corpus(&["the red cat sat .", "the red dog ran ."]);
        let m = train_native(&c, &TrainingConfig::default()).unwrap();
        let json = m.to_json();
        assert_eq!(NativeCountModel::from_json(&json).unwrap(), m);
        assert_eq!(NativeCountModel::from_json(&json).unwrap().to_json(), json);
        let no_version = json.replacen("\"version\":1,", "", 1);
        assert!(NativeCountModel::from_json(&no_version).is_err());
        let future = json.replacen("\"version\":1", "\"version\":9", 1);
        assert!(NativeCountModel::from_json(&future).is_err());
    }

    #[test]
    fn perplexity_arithmetic() {
        let half = Fixed(vec![0.5; 3]);
        let md = masked_doc(3, vec![0, 2]);
        assert!((perplexity(&half, std::slice::from_ref(&md)).unwrap() - 2.0).abs() < 1e-9);
        assert!((perplexity(&Fixed(vec![1.0; 3]), &[md]).unwrap() - 1.0).abs() < 1e-9);
        let mixed = Fixed(vec![0.5, 1.0, 0.125]);
        let md = masked_doc(3, vec![0, 2]);
        assert!((perplexity(&mixed, &[md]).unwrap() - 4.0).abs() < 1e-9);
        assert!(matches!(
            perplexity(&half, &[masked_doc(3, vec![])]),
            Err(ModelError::NoMaskedPositions)
        ));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let c = corpus(&["a b c d e", "e d c b a"]);
        let m = train_native(&c, &unmasked([0.0, 0.0, 0.0, 1.0], 1e9)).unwrap();
        let ppl = perplexity(&m, &validation_masks(&c, 3)).unwrap();
        assert!((ppl - 5.0).abs() < 1e-6, "{ppl}");
    }

    #[test]
    fn grid_of_one_and_ties() {
        let c = corpus(
            &["a b c d e f g h"; 1]
                .to_vec()
                .iter()
                .copied()
                .chain(["h g f e d c b a", "a c e g b d f h", "b d f h a c e g"])
                .collect::<Vec<_>>(),
        );
        let split = SplitSpec::new(&[("train", 0.5), ("validation", 0.5)], 1);
        let cfg = unmasked([0.25; 4], 0.1);
        let one = grid_search(&c, std::slice::from_ref(&cfg), &split).unwrap();
        assert_eq!(one.report.best_index, 0);
        let same = grid_search(&c, &[cfg.clone(), cfg.clone()], &split).unwrap();
        assert_eq!(same.report.best_index, 0);
        assert_eq!(same.report.entries[0].perplexity, same.report.entries[1].perplexity);
        assert!(grid_search(&c, &[], &split).is_err());
        let bad = TrainingConfig { phi: 2.0, ..cfg };
        let err = grid_search(&c, &[TrainingConfig::default(), bad], &split).unwrap_err();
        assert!(matches!(err, ModelError::Grid { index: 1, .. }));
    }

    #[test]
    fn reference_grid_has_every_combination() {
        let grid = TrainingConfig::reference_grid(&TrainingConfig::default());
        assert_eq!(grid.len(), 24);
        assert!(grid.iter().all(|c| c.validate().is_ok()));
    }

    proptest! {
        #[test]
        fn distributions_are_valid(
            words in proptest::collection::vec(0usize..6, 4..30),
            mask in proptest::collection::vec(any::<bool>(), 4..30),
            k in 0.0f64..2.0,
        ) {
            let vocab = ["a", "b", "c", "d", "e", "f"];
            let text: Vec<&str> = words.iter().map(|&w| vocab[w]).collect();
            let c = corpus(&[&text.join(" ")]);
            let m = train_native(&c, &unmasked([0.3, 0.3, 0.3, 0.1], k)).unwrap();
            let n = words.len().min(mask.len()).min(DEFAULT_WINDOW);
            let ctx: Vec<String> = text[..n].iter().map(|s| s.to_string()).collect();
            let positions: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let dists = m.predict(&ctx, &positions, usize::MAX).unwrap();
            prop_assert_eq!(dists.len(), positions.len());
            for d in dists {
                d.validate().unwrap();
                let sum: f64 = d.candidates.iter().map(|c| c.p).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }
}
