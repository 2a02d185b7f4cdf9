//! Combines PHI, medical-entity and POS annotations into a mask plan.
//!
//! Precedence is PHI > MED > POS: a token claimed by a higher phase is never
//! visible to a lower one, even when the higher phase leaves it unmasked.
//! Every category masks exactly `round_half_up(ratio * population)` units.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{AnnotationSpan, Namespace};
use crate::ner::MED_LABELS;
use crate::pos::PosTag;
use crate::rng::derive_rng;
use crate::text::{render, Document};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("{doc}: span {span} lies outside a document of {len} tokens")]
    OutOfBounds { doc: String, span: String, len: usize },
    #[error("{doc}: conflicting spans {first} and {second}")]
    Conflict { doc: String, first: String, second: String },
    #[error("{doc}: {tags} POS tags supplied for {tokens} tokens")]
    TagCount { doc: String, tags: usize, tokens: usize },
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
    #[error("plan for {plan} does not match document {doc}: {reason}")]
    Mismatch { plan: String, doc: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Fraction of detected PHI spans to mask.
    pub phi_proportion: f64,
    #[serde(default)]
    pub med_ratios: BTreeMap<String, f64>,
    #[serde(default)]
    pub pos_ratios: BTreeMap<PosTag, f64>,
    /// Upper bound on the masked fraction of all tokens; only POS masks are
    /// released to honor it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_cap: Option<f64>,
    pub seed: u64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            phi_proportion: 1.0,
            med_ratios: BTreeMap::new(),
            pos_ratios: BTreeMap::new(),
            overall_cap: None,
            seed: 0,
        }
    }
}

fn check_fraction(name: &str, value: f64) -> Result<(), MaskError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MaskError::InvalidPolicy(format!("{name} = {value} is outside [0, 1]")))
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), MaskError> {
        check_fraction("phi_proportion", self.phi_proportion)?;
        for (label, r) in &self.med_ratios {
            if !MED_LABELS.contains(&label.as_str()) {
                return Err(MaskError::InvalidPolicy(format!("unknown medical label {label}")));
            }
            check_fraction(label, *r)?;
        }
        for (tag, r) in &self.pos_ratios {
            check_fraction(tag.as_str(), *r)?;
        }
        if let Some(cap) = self.overall_cap {
            check_fraction("overall_cap", cap)?;
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Why a group of tokens is masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum MaskReason {
    Phi {
        category: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subtype: Option<String>,
    },
    Med {
        label: String,
    },
    Pos {
        tag: PosTag,
    },
    /// Uniformly sampled position, used for training and validation masks.
    Random,
}

impl MaskReason {
    pub fn is_phi(&self) -> bool {
        matches!(self, MaskReason::Phi { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanGroup {
    pub first: usize,
    pub last: usize,
    pub reason: MaskReason,
}

impl SpanGroup {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub doc_id: String,
    pub masked_positions: Vec<usize>,
    pub span_groups: Vec<SpanGroup>,
    pub policy_used: MaskPolicy,
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn empty(doc_id: &str, policy: MaskPolicy) -> Self {
        Self {
            doc_id: doc_id.to_string(),
            masked_positions: Vec::new(),
            span_groups: Vec::new(),
            policy_used: policy,
        }
    }

    pub fn phi_groups(&self) -> impl Iterator<Item = &SpanGroup> {
        self.span_groups.iter().filter(|g| g.reason.is_phi())
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.masked_positions.binary_search(&position).is_ok()
    }

    pub fn count_by_reason(&self, pred: impl Fn(&MaskReason) -> bool) -> usize {
        self.span_groups
            .iter()
            .filter(|g| pred(&g.reason))
            .map(SpanGroup::len)
            .sum()
    }
}

/// `round(x)` with halves rounded up; a small tolerance keeps products such
/// as `0.7 * 10` stable across platforms.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn check_spans(doc: &Document, spans: &[AnnotationSpan]) -> Result<(), MaskError> {
    let n = doc.tokens.len();
    for s in spans {
        if s.token_first > s.token_last || s.token_last >= n {
            return Err(MaskError::OutOfBounds {
                doc: doc.id.clone(),
                span: s.to_string(),
                len: n,
            });
        }
    }
    let mut sorted: Vec<&AnnotationSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.token_first, s.token_last));
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.overlaps(b) && !(a.positions() == b.positions() && a.label == b.label) {
            return Err(MaskError::Conflict {
                doc: doc.id.clone(),
                first: a.to_string(),
                second: b.to_string(),
            });
        }
    }
    Ok(())
}

fn dedup(spans: &[AnnotationSpan]) -> Vec<&AnnotationSpan> {
    let mut seen = BTreeSet::new();
    let mut out: Vec<&AnnotationSpan> = spans
        .iter()
        .filter(|s| seen.insert((s.token_first, s.token_last)))
        .collect();
    out.sort_by_key(|s| s.token_first);
    out
}

pub fn build_mask_plan(
    doc: &Document,
    phi_spans: &[AnnotationSpan],
    med_spans: &[AnnotationSpan],
    pos_tags: &[PosTag],
    policy: &MaskPolicy,
) -> Result<MaskPlan, MaskError> {
    policy.validate()?;
    let n = doc.tokens.len();
    if pos_tags.len() != n {
        return Err(MaskError::TagCount {
            doc: doc.id.clone(),
            tags: pos_tags.len(),
            tokens: n,
        });
    }
    let wrong_phase = phi_spans
        .iter()
        .map(|s| (s, Namespace::Phi))
        .chain(med_spans.iter().map(|s| (s, Namespace::Med)))
        .find(|(s, ns)| s.namespace != *ns);
    if let Some((s, ns)) = wrong_phase {
        return Err(MaskError::Conflict {
            doc: doc.id.clone(),
            first: s.to_string(),
            second: format!("{ns:?} phase"),
        });
    }
    check_spans(doc, phi_spans)?;
    check_spans(doc, med_spans)?;

    let mut claimed = vec![false; n];
    let mut groups: Vec<SpanGroup> = Vec::new();

    let phi = dedup(phi_spans);
    let take = round_half_up(policy.phi_proportion * phi.len() as f64);
    let mut rng = derive_rng(policy.seed, &format!("mask/phi/{}", doc.id));
    for i in sample(&mut rng, phi.len(), take) {
        let s = phi[i];
        groups.push(SpanGroup {
            first: s.token_first,
            last: s.token_last,
            reason: MaskReason::Phi {
                category: s.label.clone(),
                subtype: s.subtype.clone(),
            },
        });
    }
    for s in &phi {
        claimed[s.positions()].iter_mut().for_each(|c| *c = true);
    }

    // MED spans touching a PHI token are dropped whole.
    let mut by_label: BTreeMap<&str, Vec<&AnnotationSpan>> = BTreeMap::new();
    for s in dedup(med_spans) {
        if !claimed[s.positions()].iter().any(|&c| c) {
            by_label.entry(s.label.as_str()).or_default().push(s);
        }
    }
    for (label, spans) in &by_label {
        let ratio = policy.med_ratios.get(*label).copied().unwrap_or(0.0);
        let take = round_half_up(ratio * spans.len() as f64);
        let mut rng = derive_rng(policy.seed, &format!("mask/med/{label}/{}", doc.id));
        for i in sample(&mut rng, spans.len(), take) {
            groups.push(SpanGroup {
                first: spans[i].token_first,
                last: spans[i].token_last,
                reason: MaskReason::Med {
                    label: label.to_string(),
                },
            });
        }
        for s in spans {
            claimed[s.positions()].iter_mut().for_each(|c| *c = true);
        }
    }

    let mut pos_selected: Vec<(usize, PosTag)> = Vec::new();
    for (&tag, &ratio) in &policy.pos_ratios {
        let population: Vec<usize> = (0..n).filter(|&i| !claimed[i] && pos_tags[i] == tag).collect();
        let take = round_half_up(ratio * population.len() as f64);
        let mut rng = derive_rng(policy.seed, &format!("mask/pos/{tag}/{}", doc.id));
        for i in sample(&mut rng, population.len(), take) {
            pos_selected.push((population[i], tag));
        }
    }

    if let Some(cap) = policy.overall_cap {
        let limit = (cap * n as f64 + 1e-9).floor() as usize;
        let fixed: usize = groups.iter().map(SpanGroup::len).sum();
        while fixed + pos_selected.len() > limit && !pos_selected.is_empty() {
            pos_selected.pop();
        }
    }
    groups.extend(pos_selected.into_iter().map(|(i, tag)| SpanGroup {
        first: i,
        last: i,
        reason: MaskReason::Pos { tag },
    }));
    groups.sort_by_key(|g| g.first);

    let masked_positions = groups.iter().flat_map(SpanGroup::positions).collect();
    Ok(MaskPlan {
        doc_id: doc.id.clone(),
        masked_positions,
        span_groups: groups,
        policy_used: policy.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDocument {
    pub doc: Document,
    pub plan: MaskPlan,
}

impl MaskedDocument {
    /// The letter with every masked token replaced by [`MASK_TOKEN`].
    pub fn masked_text(&self) -> String {
        let replacements = self
            .plan
            .masked_positions
            .iter()
            .map(|&i| (i, MASK_TOKEN.to_string()))
            .collect();
        render(&self.doc, &replacements).expect("plan validated against document")
    }

    /// Token sequence with sentinels at masked positions.
    pub fn masked_tokens(&self) -> Vec<String> {
        let mut tokens = self.doc.token_texts();
        for &i in &self.plan.masked_positions {
            tokens[i] = MASK_TOKEN.to_string();
        }
        tokens
    }
}

pub fn apply_mask(doc: &Document, plan: &MaskPlan) -> Result<MaskedDocument, MaskError> {
    let mismatch = |reason: String| MaskError::Mismatch {
        plan: plan.doc_id.clone(),
        doc: doc.id.clone(),
        reason,
    };
    if plan.doc_id != doc.id {
        return Err(mismatch("document ids differ".into()));
    }
    if let Some(&last) = plan.masked_positions.last() {
        if last >= doc.tokens.len() {
            return Err(mismatch(format!(
                "position {last} is past the last token {}",
                doc.tokens.len()
            )));
        }
    }
    if plan.masked_positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(mismatch("masked positions are not strictly increasing".into()));
    }
    let from_groups: Vec<usize> = plan.span_groups.iter().flat_map(SpanGroup::positions).collect();
    let mut sorted = from_groups.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != from_groups.len() || sorted != plan.masked_positions {
        return Err(mismatch("span groups disagree with masked positions".into()));
    }
    Ok(MaskedDocument {
        doc: doc.clone(),
        plan: plan.clone(),
    })
}
