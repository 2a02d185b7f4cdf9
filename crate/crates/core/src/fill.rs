//! Mask filling: simultaneous chunk filling, iterative left-to-right
//! filling, token selection, the system presets, and the end-to-end
//! generation pipeline.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Corpus};
use crate::exec::Execution;
use crate::masker::{apply_mask, build_mask_plan, MaskError, MaskPlan, MaskPolicy, MaskedDocument, MASK_TOKEN};
use crate::mlm::{FillDistribution, FillModel, ModelError, DEFAULT_WINDOW};
use crate::ner::{EntityTagger, Gazetteer, MED_LABELS};
use crate::phi::{detect_phi, RuleSet};
use crate::pos::{tag_pos, PosLexicon, PosTag};
use crate::rng::{derive_rng, derive_seed};
use crate::text::{render, split_sentences, Document};

pub const PRESET_NAMES: [&str; 4] = ["S_0.5", "S_0.7", "I_0.7", "I_0.9"];

#[derive(Debug, Error)]
pub enum FillError {
    #[error("no selectable candidates in distribution")]
    EmptyDistribution,
    #[error("invalid fill config: {0}")]
    InvalidConfig(String),
    #[error("model window {window} is smaller than chunk length {chunk_len}")]
    WindowTooSmall { window: usize, chunk_len: usize },
    #[error("{doc}: {unit}: {source}")]
    Model {
        doc: String,
        unit: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("unknown preset {0} (expected one of S_0.5, S_0.7, I_0.7, I_0.9)")]
    UnknownPreset(String),
    #[error("{doc}: {stage} stage failed: {message}")]
    Stage {
        doc: String,
        stage: &'static str,
        message: String,
    },
}

impl FillError {
    pub fn is_backend(&self) -> bool {
        matches!(self, FillError::Model { source, .. } if source.is_backend())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Simultaneous,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FillConfig {
    pub algorithm: Algorithm,
    pub selection: Selection,
    pub temperature: f64,
    pub top_k: usize,
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for FillConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Simultaneous,
            selection: Selection::Stochastic,
            temperature: 1.0,
            top_k: 50,
            chunk_len: DEFAULT_WINDOW,
            seed: 0,
        }
    }
}

impl FillConfig {
    pub fn validate(&self) -> Result<(), FillError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(FillError::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_k == 0 {
            return Err(FillError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.chunk_len < 3 {
            return Err(FillError::InvalidConfig("chunk_len must be at least 3".into()));
        }
        Ok(())
    }
}

/// A named masking policy plus fill configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemPreset {
    pub name: String,
    pub policy: MaskPolicy,
    pub fill: FillConfig,
    /// Permits masking fewer than all detected PHI spans.
    #[serde(default)]
    pub allow_partial_phi: bool,
}

impl SystemPreset {
    pub fn named(name: &str) -> Result<Self, FillError> {
        let (algorithm, ratio) = match name {
            "S_0.5" => (Algorithm::Simultaneous, 0.5),
            "S_0.7" => (Algorithm::Simultaneous, 0.7),
            "I_0.7" => (Algorithm::Iterative, 0.7),
            "I_0.9" => (Algorithm::Iterative, 0.9),
            other => return Err(FillError::UnknownPreset(other.to_string())),
        };
        let policy = MaskPolicy {
            phi_proportion: 1.0,
            med_ratios: MED_LABELS.iter().map(|l| (l.to_string(), 0.0)).collect(),
            pos_ratios: [PosTag::Noun, PosTag::Verb, PosTag::Adj]
                .into_iter()
                .map(|t| (t, ratio))
                .collect(),
            overall_cap: None,
            seed: 0,
        };
        Ok(Self {
            name: name.to_string(),
            policy,
            fill: FillConfig {
                algorithm,
                selection: Selection::Stochastic,
                ..FillConfig::default()
            },
            allow_partial_phi: false,
        })
    }

    /// Masks nothing and fills deterministically, so output equals input.
    pub fn identity() -> Self {
        Self {
            name: "identity".into(),
            policy: MaskPolicy {
                phi_proportion: 0.0,
                ..MaskPolicy::default()
            },
            fill: FillConfig {
                selection: Selection::Deterministic,
                ..FillConfig::default()
            },
            allow_partial_phi: true,
        }
    }

    pub fn validate(&self) -> Result<(), FillError> {
        self.policy.validate()?;
        self.fill.validate()?;
        if self.policy.phi_proportion < 1.0 && !self.allow_partial_phi {
            return Err(FillError::InvalidConfig(format!(
                "preset {} masks only {} of detected PHI; set allow_partial_phi to permit this",
                self.name, self.policy.phi_proportion
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDocument {
    pub source_id: String,
    pub variant_index: usize,
    pub text: String,
    pub filled: BTreeMap<usize, String>,
    pub config_used: FillConfig,
}

/// Picks one token from `dist`: the argmax (ties to the lexicographically
/// smallest token) or a draw proportional to `p^(1/τ)` over the top `k`.
pub fn select_token<R: Rng + ?Sized>(
    dist: &FillDistribution,
    config: &FillConfig,
    rng: &mut R,
) -> Result<String, FillError> {
    let candidates: Vec<_> = dist
        .candidates
        .iter()
        .filter(|c| c.token != MASK_TOKEN && c.p > 0.0)
        .collect();
    if candidates.is_empty() {
        return Err(FillError::EmptyDistribution);
    }
    match config.selection {
        Selection::Deterministic => {
            let best = candidates
                .iter()
                .max_by(|a, b| a.p.total_cmp(&b.p).then_with(|| b.token.cmp(&a.token)))
                .expect("non-empty");
            Ok(best.token.clone())
        }
        Selection::Stochastic => {
            let mut ranked = candidates;
            ranked.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| a.token.cmp(&b.token)));
            ranked.truncate(config.top_k.max(1));
            let max_log = ranked[0].p.ln();
            let weights: Vec<f64> = ranked
                .iter()
                .map(|c| ((c.p.ln() - max_log) / config.temperature).exp())
                .collect();
            let index = WeightedIndex::new(&weights).map_err(|_| FillError::EmptyDistribution)?;
            Ok(ranked[index.sample(rng)].token.clone())
        }
    }
}

fn position_rng(config: &FillConfig, doc_id: &str, position: usize) -> rand_chacha::ChaCha8Rng {
    derive_rng(config.seed, &format!("fill/{doc_id}/{position}"))
}

/// Consecutive chunks of at most `chunk_len` tokens, each cut back to the
/// last sentence end it contains.
pub fn chunk_ranges(doc: &Document, chunk_len: usize) -> Vec<Range<usize>> {
    let n = doc.len();
    let mut is_end = vec![false; n];
    for s in split_sentences(doc) {
        is_end[s.last_token] = true;
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + chunk_len).min(n);
        if end < n {
            if let Some(e) = (start..end).rev().find(|&e| is_end[e]) {
                end = e + 1;
            }
        }
        chunks.push(start..end);
        start = end;
    }
    chunks
}

fn finish(md: &MaskedDocument, filled: BTreeMap<usize, String>, config: &FillConfig) -> SyntheticDocument {
    let text = render(&md.doc, &filled).expect("filled positions come from the plan");
    SyntheticDocument {
        source_id: md.doc.id.clone(),
        variant_index: 0,
        text,
        filled,
        config_used: config.clone(),
    }
}

fn check_distributions(
    doc: &str,
    unit: String,
    dists: Result<Vec<FillDistribution>, ModelError>,
    expected: usize,
) -> Result<Vec<FillDistribution>, FillError> {
    let wrap = |source| FillError::Model {
        doc: doc.to_string(),
        unit: unit.clone(),
        source,
    };
    let dists = dists.map_err(wrap)?;
    if dists.len() != expected {
        return Err(wrap(ModelError::InvalidDistribution(format!(
            "{} distributions returned for {expected} masks",
            dists.len()
        ))));
    }
    Ok(dists)
}

/// Fills every chunk's masks from one model call with all masks shown as
/// sentinels.
pub fn fill_simultaneous(
    md: &MaskedDocument,
    model: &dyn FillModel,
    config: &FillConfig,
) -> Result<SyntheticDocument, FillError> {
    fill_simultaneous_with(md, model, config, Execution::Sequential)
}

/// [`fill_simultaneous`] with the chunks of one document spread over `exec`.
pub fn fill_simultaneous_with(
    md: &MaskedDocument,
    model: &dyn FillModel,
    config: &FillConfig,
    exec: Execution,
) -> Result<SyntheticDocument, FillError> {
    config.validate()?;
    if model.window() < config.chunk_len {
        return Err(FillError::WindowTooSmall {
            window: model.window(),
            chunk_len: config.chunk_len,
        });
    }
    let masked = md.masked_tokens();
    let jobs: Vec<(usize, Range<usize>, Vec<usize>)> = chunk_ranges(&md.doc, config.chunk_len)
        .into_iter()
        .enumerate()
        .filter_map(|(i, range)| {
            let positions: Vec<usize> = md
                .plan
                .masked_positions
                .iter()
                .copied()
                .filter(|p| range.contains(p))
                .collect();
            (!positions.is_empty()).then_some((i, range, positions))
        })
        .collect();
    let parts = exec.try_map(&jobs, |(i, range, positions)| {
        let local: Vec<usize> = positions.iter().map(|p| p - range.start).collect();
        let dists = check_distributions(
            &md.doc.id,
            format!("chunk {i}"),
            model.predict(&masked[range.clone()], &local, config.top_k),
            local.len(),
        )?;
        positions
            .iter()
            .zip(&dists)
            .map(|(&p, dist)| {
                let token = select_token(dist, config, &mut position_rng(config, &md.doc.id, p))?;
                Ok((p, token))
            })
            .collect::<Result<Vec<_>, FillError>>()
    })?;
    Ok(finish(md, parts.into_iter().flatten().collect(), config))
}

/// The `window`-token span centred on `position`, shifted to stay inside a
/// document of `n` tokens.
pub fn centred_window(position: usize, window: usize, n: usize) -> Range<usize> {
    let window = window.max(1);
    let start = position.saturating_sub((window - 1) / 2);
    let end = (start + window).min(n);
    end.saturating_sub(window)..end
}

/// Fills masks left to right, one model call each. Earlier masks show their
/// chosen tokens and later masks their original tokens.
pub fn fill_iterative(
    md: &MaskedDocument,
    model: &dyn FillModel,
    config: &FillConfig,
) -> Result<SyntheticDocument, FillError> {
    config.validate()?;
    let mut current = md.doc.token_texts();
    let mut filled = BTreeMap::new();
    for (j, &p) in md.plan.masked_positions.iter().enumerate() {
        let range = centred_window(p, model.window(), current.len());
        let mut context = current[range.clone()].to_vec();
        let local = p - range.start;
        context[local] = MASK_TOKEN.to_string();
        let dists = check_distributions(
            &md.doc.id,
            format!("mask {j}"),
            model.predict(&context, &[local], config.top_k),
            1,
        )?;
        let token = select_token(&dists[0], config, &mut position_rng(config, &md.doc.id, p))?;
        current[p] = token.clone();
        filled.insert(p, token);
    }
    Ok(finish(md, filled, config))
}

pub fn fill(md: &MaskedDocument, model: &dyn FillModel, config: &FillConfig) -> Result<SyntheticDocument, FillError> {
    match config.algorithm {
        Algorithm::Simultaneous => fill_simultaneous(md, model, config),
        Algorithm::Iterative => fill_iterative(md, model, config),
    }
}

/// Runs PHI detection, medical tagging and POS tagging on `doc`, then
/// builds and applies the plan for `policy`.
pub fn mask_document(
    doc: &Document,
    rules: &RuleSet,
    med_tagger: &dyn EntityTagger,
    lexicon: &PosLexicon,
    policy: &MaskPolicy,
) -> Result<MaskedDocument, FillError> {
    let stage = |stage: &'static str, message: String| FillError::Stage {
        doc: doc.id.clone(),
        stage,
        message,
    };
    let phi = detect_phi(doc, rules);
    let med = med_tagger.tag(doc).map_err(|e| stage("tag", e.to_string()))?;
    let tags = tag_pos(doc, lexicon);
    let plan = build_mask_plan(doc, &phi, &med, &tags, policy).map_err(|e| stage("plan", e.to_string()))?;
    apply_mask(doc, &plan).map_err(|e| stage("plan", e.to_string()))
}

/// Detector, taggers and fill model used by [`Pipeline::generate`].
#[derive(Clone)]
pub struct Pipeline {
    pub rules: Arc<RuleSet>,
    pub med_tagger: Arc<dyn EntityTagger>,
    pub lexicon: Arc<PosLexicon>,
    pub model: Arc<dyn FillModel>,
}

/// One generated variant with the plan that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedVariant {
    pub plan: MaskPlan,
    pub synthetic: SyntheticDocument,
}

impl Pipeline {
    /// Shipped ruleset, clinical gazetteer and POS lexicon around `model`.
    pub fn with_defaults(model: Arc<dyn FillModel>) -> Self {
        Self {
            rules: Arc::new(RuleSet::default_rules()),
            med_tagger: Arc::new(Gazetteer::clinical()),
            lexicon: Arc::new(PosLexicon::shipped()),
            model,
        }
    }

    /// Detect, tag and plan: the masked letter for one document.
    pub fn mask(&self, doc: &Document, policy: &MaskPolicy) -> Result<MaskedDocument, FillError> {
        mask_document(doc, &self.rules, self.med_tagger.as_ref(), &self.lexicon, policy)
    }

    pub fn generate_with_plans(
        &self,
        doc: &AnnotatedDocument,
        preset: &SystemPreset,
        n_variants: usize,
        seed: u64,
    ) -> Result<Vec<GeneratedVariant>, FillError> {
        if n_variants == 0 {
            return Err(FillError::InvalidConfig("n_variants must be at least 1".into()));
        }
        preset.validate()?;
        (0..n_variants)
            .map(|v| {
                let policy = preset
                    .policy
                    .clone()
                    .with_seed(derive_seed(seed, &format!("variant/{v}/mask")));
                let config = FillConfig {
                    seed: derive_seed(seed, &format!("variant/{v}/fill")),
                    ..preset.fill.clone()
                };
                let md = self.mask(&doc.doc, &policy)?;
                let mut synthetic = fill(&md, self.model.as_ref(), &config)?;
                synthetic.variant_index = v;
                Ok(GeneratedVariant {
                    plan: md.plan,
                    synthetic,
                })
            })
            .collect()
    }

    pub fn generate(
        &self,
        doc: &AnnotatedDocument,
        preset: &SystemPreset,
        n_variants: usize,
        seed: u64,
    ) -> Result<Vec<SyntheticDocument>, FillError> {
        Ok(self
            .generate_with_plans(doc, preset, n_variants, seed)?
            .into_iter()
            .map(|g| g.synthetic)
            .collect())
    }

    /// Generates variants for every document, in corpus then variant order.
    pub fn generate_corpus(
        &self,
        corpus: &Corpus,
        preset: &SystemPreset,
        n_variants: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Vec<GeneratedVariant>, FillError> {
        let per_doc = exec.try_map(&corpus.docs, |doc| {
            self.generate_with_plans(doc, preset, n_variants, seed)
        })?;
        Ok(per_doc.into_iter().flatten().collect())
    }
}
