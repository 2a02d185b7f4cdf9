//! Privacy measurements: PHI recall of the masker, re-identification of
//! masked PHI in synthetic text, and longest-common-substring rates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedDocument;
use crate::exec::Execution;
use crate::masker::MaskPlan;
use crate::phi::{map_to_hipaa, RuleError};
use crate::text::Document;

pub const DEFAULT_LCS_THRESHOLDS: [usize; 3] = [3, 5, 7];
pub const DEFAULT_MIN_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("document {gold} is paired with a plan for {plan}")]
    Mismatch { gold: String, plan: String },
    #[error("{documents} documents but {plans} plans")]
    Count { documents: usize, plans: usize },
    #[error("no masked PHI span has at least {min_tokens} tokens; use a larger corpus")]
    NoEligible { min_tokens: usize },
    #[error("min_tokens and thresholds must be at least 1")]
    InvalidArgument,
    #[error(transparent)]
    Taxonomy(#[from] RuleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub recall: f64,
    pub masked: usize,
    pub total: usize,
    /// Set when no gold token qualified and the recall is 1.0 by convention.
    pub vacuous: bool,
}

/// Micro-averaged share of gold PHI tokens that the plans mask.
pub fn phi_recall(
    gold: &[AnnotatedDocument],
    plans: &[MaskPlan],
    hipaa_only: bool,
) -> Result<RecallResult, PrivacyError> {
    if gold.len() != plans.len() {
        return Err(PrivacyError::Count {
            documents: gold.len(),
            plans: plans.len(),
        });
    }
    let (mut masked, mut total) = (0, 0);
    for (doc, plan) in gold.iter().zip(plans) {
        if doc.id() != plan.doc_id {
            return Err(PrivacyError::Mismatch {
                gold: doc.id().to_string(),
                plan: plan.doc_id.clone(),
            });
        }
        let mut positions = BTreeSet::new();
        for span in doc.phi_token_spans() {
            if !hipaa_only || map_to_hipaa(&span.label, span.subtype.as_deref())? {
                positions.extend(span.positions());
            }
        }
        total += positions.len();
        masked += positions.iter().filter(|&&p| plan.is_masked(p)).count();
    }
    Ok(if total == 0 {
        RecallResult {
            recall: 1.0,
            masked,
            total,
            vacuous: true,
        }
    } else {
        RecallResult {
            recall: masked as f64 / total as f64,
            masked,
            total,
            vacuous: false,
        }
    })
}

/// One original letter, the plan used on it and a synthetic version.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyCase {
    pub original: AnnotatedDocument,
    pub plan: MaskPlan,
    pub synthetic: Document,
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Length of the longest run of consecutive tokens shared by `a` and `b`.
pub fn longest_common_substring(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut row = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                row[j + 1] = prev[j] + 1;
                best = best.max(row[j + 1]);
            }
        }
        prev = row;
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReidResult {
    pub rate: f64,
    pub reidentified: usize,
    pub eligible: usize,
    pub min_tokens: usize,
}

/// Share of masked PHI groups of at least `min_tokens` tokens whose original
/// token sequence reappears anywhere in the synthetic letter, ignoring case.
pub fn reidentification_rate(cases: &[PrivacyCase], min_tokens: usize) -> Result<ReidResult, PrivacyError> {
    if min_tokens == 0 {
        return Err(PrivacyError::InvalidArgument);
    }
    let (mut hits, mut eligible) = (0, 0);
    for case in cases {
        check_pair(case)?;
        let original = case.original.doc.lowercase_tokens();
        let synthetic = case.synthetic.lowercase_tokens();
        for group in case.plan.phi_groups().filter(|g| g.len() >= min_tokens) {
            eligible += 1;
            if contains_run(&synthetic, &original[group.positions()]) {
                hits += 1;
            }
        }
    }
    if eligible == 0 {
        return Err(PrivacyError::NoEligible { min_tokens });
    }
    Ok(ReidResult {
        rate: hits as f64 / eligible as f64,
        reidentified: hits,
        eligible,
        min_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcsEntry {
    pub rate: f64,
    pub hits: usize,
    pub eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcsReport {
    /// Rate per threshold over spans at least that long.
    pub rates: BTreeMap<usize, LcsEntry>,
    /// Thresholds with no eligible span, with the reason.
    pub omitted: BTreeMap<usize, String>,
    /// Rates over the spans eligible at every threshold.
    pub common: BTreeMap<usize, LcsEntry>,
    /// Whether `common` is non-increasing in the threshold.
    pub monotone_on_common: bool,
    /// LCS length and original length of every gold span, in order.
    pub spans: Vec<(usize, usize)>,
}

fn check_pair(case: &PrivacyCase) -> Result<(), PrivacyError> {
    if case.original.id() != case.plan.doc_id {
        return Err(PrivacyError::Mismatch {
            gold: case.original.id().to_string(),
            plan: case.plan.doc_id.clone(),
        });
    }
    Ok(())
}

fn entry(hits: usize, eligible: usize) -> LcsEntry {
    LcsEntry {
        rate: hits as f64 / eligible as f64,
        hits,
        eligible,
    }
}

pub fn lcs_rates(cases: &[PrivacyCase], thresholds: &[usize]) -> Result<LcsReport, PrivacyError> {
    if thresholds.contains(&0) {
        return Err(PrivacyError::InvalidArgument);
    }
    for case in cases {
        check_pair(case)?;
    }
    let per_case = Execution::default().map(cases, |case| {
        let synthetic = case.synthetic.lowercase_tokens();
        let original = case.original.doc.lowercase_tokens();
        case.original
            .phi_token_spans()
            .iter()
            .map(|s| {
                let span = &original[s.positions()];
                (longest_common_substring(span, &synthetic), span.len())
            })
            .collect::<Vec<_>>()
    });
    let spans: Vec<(usize, usize)> = per_case.into_iter().flatten().collect();

    let mut sorted: Vec<usize> = thresholds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rates = BTreeMap::new();
    let mut omitted = BTreeMap::new();
    for &t in &sorted {
        let eligible = spans.iter().filter(|s| s.1 >= t).count();
        if eligible == 0 {
            omitted.insert(t, format!("no gold PHI span has {t} or more tokens"));
        } else {
            let hits = spans.iter().filter(|s| s.1 >= t && s.0 >= t).count();
            rates.insert(t, entry(hits, eligible));
        }
    }
    let mut common = BTreeMap::new();
    if let Some(&max_t) = sorted.last() {
        let shared: Vec<&(usize, usize)> = spans.iter().filter(|s| s.1 >= max_t).collect();
        if !shared.is_empty() {
            for &t in &sorted {
                let hits = shared.iter().filter(|s| s.0 >= t).count();
                common.insert(t, entry(hits, shared.len()));
            }
        }
    }
    let values: Vec<f64> = common.values().map(|e| e.rate).collect();
    let monotone_on_common = values.windows(2).all(|w| w[0] >= w[1]);
    Ok(LcsReport {
        rates,
        omitted,
        common,
        monotone_on_common,
        spans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub recall_all: RecallResult,
    pub recall_hipaa: RecallResult,
    pub reidentification: ReidResult,
    pub lcs: LcsReport,
}

impl PrivacyReport {
    pub fn reid_rate(&self) -> f64 {
        self.reidentification.rate
    }
}

/// Runs the whole battery. Each case contributes its own plan, so a letter
/// with several variants counts once per variant.
pub fn privacy_report(
    cases: &[PrivacyCase],
    min_tokens: usize,
    thresholds: &[usize],
) -> Result<PrivacyReport, PrivacyError> {
    let gold: Vec<AnnotatedDocument> = cases.iter().map(|c| c.original.clone()).collect();
    let plans: Vec<MaskPlan> = cases.iter().map(|c| c.plan.clone()).collect();
    Ok(PrivacyReport {
        recall_all: phi_recall(&gold, &plans, false)?,
        recall_hipaa: phi_recall(&gold, &plans, true)?,
        reidentification: reidentification_rate(cases, min_tokens)?,
        lcs: lcs_rates(cases, thresholds)?,
    })
}
