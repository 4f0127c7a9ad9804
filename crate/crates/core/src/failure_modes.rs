//! Structural detectors for the three code-switching failure modes:
//! language omission, translation instead of transcription, and
//! hallucination (repetition or runaway length).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mer::{prepare, ScoringRow};
use crate::text_norm::{language_profile, tokenize_raw, LanguageTag, PreambleTemplate, TokenSequence};

pub const DEFAULT_THRESHOLDS: &str = include_str!("../../../config/thresholds.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureLabel {
    LanguageOmission,
    Translation,
    Hallucination,
    None,
}

impl fmt::Display for FailureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureLabel::LanguageOmission => "LanguageOmission",
            FailureLabel::Translation => "Translation",
            FailureLabel::Hallucination => "Hallucination",
            FailureLabel::None => "None",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierThresholds {
    /// Longest n-gram checked for consecutive repetition.
    pub repetition_ngram_max: usize,
    /// Consecutive copies of one n-gram that count as a repetition loop.
    pub repetition_min_repeats: usize,
    /// Hypothesis longer than this multiple of the reference is a blow-up.
    pub length_blowup_ratio: f64,
    /// A monolingual hypothesis no longer than this multiple of the surviving
    /// language's reference tokens is an omission, otherwise a translation.
    pub omission_length_slack: f64,
    /// Fraction of the surviving language's reference tokens the hypothesis
    /// must still contain before a collapse is diagnosed at all.
    pub min_retained_fraction: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        ClassifierThresholds {
            repetition_ngram_max: 4,
            repetition_min_repeats: 10,
            length_blowup_ratio: 3.0,
            omission_length_slack: 1.3,
            min_retained_fraction: 0.5,
        }
    }
}

impl ClassifierThresholds {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: ClassifierThresholds =
            toml::from_str(text).map_err(|e| Error::Config(format!("thresholds: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.repetition_ngram_max > 0
            && self.length_blowup_ratio > 0.0
            && self.omission_length_slack > 0.0
            && self.min_retained_fraction > 0.0
            && self.min_retained_fraction <= 1.0;
        if !positive {
            return Err(Error::Config(format!("thresholds must be strictly positive: {self:?}")));
        }
        if self.repetition_min_repeats < 3 {
            return Err(Error::Config("repetition_min_repeats must be at least 3".into()));
        }
        Ok(())
    }
}

/// A run of one n-gram repeated back to back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepeatRun {
    pub start: usize,
    pub ngram: Vec<String>,
    pub repeats: usize,
}

/// Longest consecutive repetition of any n-gram with `n <= max_n`.
pub fn longest_repeat(tokens: &[&str], max_n: usize) -> Option<RepeatRun> {
    let mut best: Option<RepeatRun> = None;
    for n in 1..=max_n.min(tokens.len()) {
        let mut i = 0;
        while i + n <= tokens.len() {
            let gram = &tokens[i..i + n];
            let mut k = 1;
            while i + (k + 1) * n <= tokens.len() && &tokens[i + k * n..i + (k + 1) * n] == gram {
                k += 1;
            }
            if k > 1 && best.as_ref().map_or(true, |b| k > b.repeats) {
                best = Some(RepeatRun {
                    start: i,
                    ngram: gram.iter().map(|s| s.to_string()).collect(),
                    repeats: k,
                });
            }
            // Skip to the last copy: other phases of the same loop hold no
            // more copies than this one.
            i += if k > 1 { (k - 1) * n } else { 1 };
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct HallucinationEvidence {
    pub repeat: Option<RepeatRun>,
    pub length_ratio: f64,
    pub repetition: bool,
    pub blowup: bool,
}

impl HallucinationEvidence {
    pub fn fired(&self) -> bool {
        self.repetition || self.blowup
    }
}

pub fn hallucination_evidence(
    hyp: &TokenSequence,
    reference: &TokenSequence,
    t: &ClassifierThresholds,
) -> HallucinationEvidence {
    let surfaces = hyp.surfaces();
    let repeat = longest_repeat(&surfaces, t.repetition_ngram_max);
    let repetition = repeat
        .as_ref()
        .is_some_and(|r| r.repeats >= t.repetition_min_repeats);
    let length_ratio = if reference.is_empty() {
        if hyp.is_empty() { 0.0 } else { f64::INFINITY }
    } else {
        hyp.len() as f64 / reference.len() as f64
    };
    HallucinationEvidence {
        blowup: hyp.len() as f64 > t.length_blowup_ratio * reference.len() as f64,
        repeat,
        length_ratio,
        repetition,
    }
}

pub fn detect_hallucination(hyp: &TokenSequence, reference: &TokenSequence, t: &ClassifierThresholds) -> bool {
    hallucination_evidence(hyp, reference, t).fired()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseEvidence {
    pub label: FailureLabel,
    pub surviving: Option<LanguageTag>,
    pub hyp_len: usize,
    pub ref_surviving: usize,
    pub retained: usize,
}

pub fn collapse_evidence(
    reference: &TokenSequence,
    hyp: &TokenSequence,
    t: &ClassifierThresholds,
) -> CollapseEvidence {
    let rp = language_profile(reference);
    let hp = language_profile(hyp);
    let surviving = match (hp.mandarin > 0, hp.english > 0) {
        (true, false) => Some(LanguageTag::Mandarin),
        (false, true) => Some(LanguageTag::English),
        _ => None,
    };
    let hyp_len = hp.mandarin + hp.english;
    let none = |surviving| CollapseEvidence {
        label: FailureLabel::None,
        surviving,
        hyp_len,
        ref_surviving: 0,
        retained: 0,
    };
    let Some(lang) = surviving.filter(|_| rp.is_mixed()) else {
        return none(surviving);
    };

    let ref_surviving = rp.count(lang);
    let mut pool: HashMap<&str, usize> = HashMap::new();
    for tok in reference.tokens.iter().filter(|t| t.lang == lang) {
        *pool.entry(&tok.surface).or_default() += 1;
    }
    let mut retained = 0;
    for tok in hyp.tokens.iter().filter(|t| t.lang == lang) {
        if let Some(n) = pool.get_mut(tok.surface.as_str()).filter(|n| **n > 0) {
            *n -= 1;
            retained += 1;
        }
    }
    if (retained as f64) < t.min_retained_fraction * ref_surviving as f64 {
        return CollapseEvidence {
            ref_surviving,
            retained,
            ..none(surviving)
        };
    }
    let label = if hyp_len as f64 <= t.omission_length_slack * ref_surviving as f64 {
        FailureLabel::LanguageOmission
    } else {
        FailureLabel::Translation
    };
    CollapseEvidence {
        label,
        surviving,
        hyp_len,
        ref_surviving,
        retained,
    }
}

pub fn detect_monolingual_collapse(
    reference: &TokenSequence,
    hyp: &TokenSequence,
    t: &ClassifierThresholds,
) -> FailureLabel {
    collapse_evidence(reference, hyp, t).label
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub labels: BTreeSet<FailureLabel>,
    pub evidence: String,
}

impl Diagnosis {
    pub fn is_clean(&self) -> bool {
        self.labels.len() == 1 && self.labels.contains(&FailureLabel::None)
    }
}

/// Runs every detector on already tokenized text.
pub fn classify_tokens(
    reference: &TokenSequence,
    hyp: &TokenSequence,
    t: &ClassifierThresholds,
) -> Result<Diagnosis> {
    if reference.is_empty() {
        return Err(Error::EmptyReference { row_id: None });
    }
    let mut labels = BTreeSet::new();
    let collapse = collapse_evidence(reference, hyp, t);
    if collapse.label != FailureLabel::None {
        labels.insert(collapse.label);
    }
    let hall = hallucination_evidence(hyp, reference, t);
    if hall.fired() {
        labels.insert(FailureLabel::Hallucination);
    }
    if labels.is_empty() {
        labels.insert(FailureLabel::None);
    }

    let mut evidence = format!(
        "ref_len={} hyp_len={} length_ratio={:.3}",
        reference.len(),
        hyp.len(),
        hall.length_ratio
    );
    if let Some(r) = &hall.repeat {
        evidence.push_str(&format!(" max_repeat={}x{:?}", r.repeats, r.ngram.join(" ")));
    }
    if let Some(lang) = collapse.surviving {
        evidence.push_str(&format!(
            " monolingual={lang:?} ref_same_lang={} retained={}",
            collapse.ref_surviving, collapse.retained
        ));
    }
    Ok(Diagnosis { labels, evidence })
}

pub fn classify(reference: &str, hypothesis: &str, t: &ClassifierThresholds) -> Result<Diagnosis> {
    classify_tokens(&tokenize_raw(reference), &tokenize_raw(hypothesis), t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedRow {
    pub id: String,
    pub labels: BTreeSet<FailureLabel>,
    pub evidence: String,
}

/// Per-label frequencies over a batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelFrequencies {
    pub rows: usize,
    pub counts: BTreeMap<FailureLabel, usize>,
}

impl LabelFrequencies {
    pub fn add(&mut self, labels: &BTreeSet<FailureLabel>) {
        self.rows += 1;
        for l in labels {
            *self.counts.entry(*l).or_default() += 1;
        }
    }

    pub fn count(&self, label: FailureLabel) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }
}

/// Classifies every row (hypotheses preamble-stripped first). Rows with an
/// empty reference fail the batch with their id.
pub fn classify_batch(
    rows: &[ScoringRow],
    t: &ClassifierThresholds,
    patterns: &[PreambleTemplate],
) -> Result<(Vec<ClassifiedRow>, LabelFrequencies)> {
    let out: Vec<ClassifiedRow> = rows
        .par_iter()
        .map(|row| {
            let (r, h) = prepare(&row.reference, &row.hypothesis, patterns);
            classify_tokens(&r, &h, t)
                .map(|d| ClassifiedRow {
                    id: row.id.clone(),
                    labels: d.labels,
                    evidence: d.evidence,
                })
                .map_err(|_| Error::EmptyReference {
                    row_id: Some(row.id.clone()),
                })
        })
        .collect::<Result<_>>()?;
    let mut freq = LabelFrequencies::default();
    for row in &out {
        freq.add(&row.labels);
    }
    Ok((out, freq))
}
