//! Mixed Error Rate: unit-cost Levenshtein alignment over mixed tokens.

use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_norm::{normalize, strip_model_preamble, tokenize_mixed, PreambleTemplate, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AlignOp {
    Hit,
    Sub,
    Del,
    Ins,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub reference: Option<String>,
    pub hypothesis: Option<String>,
    pub op: AlignOp,
}

/// Additive S/D/I/hit counters. Summing over utterances gives pooled counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn hyp_len(&self) -> usize {
        self.hits + self.substitutions + self.insertions
    }

    /// `(S + D + I) / ref_len`; `None` when the reference is empty.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_len > 0).then(|| self.errors() as f64 / self.ref_len as f64)
    }

    pub fn from_ops(ops: &[AlignOp]) -> Self {
        let mut c = ErrorCounts::default();
        for op in ops {
            match op {
                AlignOp::Hit => c.hits += 1,
                AlignOp::Sub => c.substitutions += 1,
                AlignOp::Del => c.deletions += 1,
                AlignOp::Ins => c.insertions += 1,
            }
        }
        c.ref_len = c.hits + c.substitutions + c.deletions;
        c
    }
}

impl Add for ErrorCounts {
    type Output = ErrorCounts;

    fn add(self, o: ErrorCounts) -> ErrorCounts {
        ErrorCounts {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            hits: self.hits + o.hits,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: ErrorCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = ErrorCounts>>(iter: I) -> Self {
        iter.fold(ErrorCounts::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentResult {
    #[serde(flatten)]
    pub counts: ErrorCounts,
    pub alignment: Vec<AlignedPair>,
}

/// Minimal unit-cost edit script turning `reference` into `hypothesis`.
///
/// Ties in the backtrace resolve HIT > SUB > DEL > INS, walking from the end
/// of both sequences, so the script itself is reproducible.
pub fn edit_script<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let up = cost[(i - 1) * w + j] + 1;
            let left = cost[i * w + j - 1] + 1;
            cost[i * w + j] = diag.min(up).min(left);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = cost[(i - 1) * w + j - 1];
            if same && here == diag {
                ops.push(AlignOp::Hit);
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && here == diag + 1 {
                ops.push(AlignOp::Sub);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            ops.push(AlignOp::Del);
            i -= 1;
        } else {
            ops.push(AlignOp::Ins);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn align(reference: &TokenSequence, hypothesis: &TokenSequence) -> AlignmentResult {
    let r = reference.surfaces();
    let h = hypothesis.surfaces();
    let ops = edit_script(&r, &h);
    let (mut ri, mut hi) = (0, 0);
    let alignment = ops
        .iter()
        .map(|&op| {
            let take_ref = op != AlignOp::Ins;
            let take_hyp = op != AlignOp::Del;
            let pair = AlignedPair {
                reference: take_ref.then(|| r[ri].to_string()),
                hypothesis: take_hyp.then(|| h[hi].to_string()),
                op,
            };
            ri += usize::from(take_ref);
            hi += usize::from(take_hyp);
            pair
        })
        .collect();
    AlignmentResult {
        counts: ErrorCounts::from_ops(&ops),
        alignment,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerScore {
    /// Dimensionless ratio; may exceed 1.0.
    pub value: f64,
    pub breakdown: AlignmentResult,
}

impl MerScore {
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

/// Tokens of a reference and a (preamble-stripped) hypothesis, ready to align.
pub fn prepare(
    reference: &str,
    hypothesis: &str,
    patterns: &[PreambleTemplate],
) -> (TokenSequence, TokenSequence) {
    let hyp = strip_model_preamble(hypothesis, patterns);
    let mut r = tokenize_mixed(&normalize(reference));
    r.source = reference.to_string();
    let mut h = tokenize_mixed(&normalize(&hyp));
    h.source = hypothesis.to_string();
    (r, h)
}

pub fn mer(reference: &str, hypothesis: &str, patterns: &[PreambleTemplate]) -> Result<MerScore> {
    let (r, h) = prepare(reference, hypothesis, patterns);
    if r.is_empty() {
        return Err(Error::EmptyReference { row_id: None });
    }
    let breakdown = align(&r, &h);
    Ok(MerScore {
        value: breakdown.counts.errors() as f64 / breakdown.counts.ref_len as f64,
        breakdown,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
}

/// Micro-averaged corpus score: summed errors over summed reference length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledMer {
    pub value: f64,
    pub counts: ErrorCounts,
    pub utterances: usize,
}

impl PooledMer {
    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }

    pub fn from_counts(counts: ErrorCounts, utterances: usize) -> Result<Self> {
        let value = counts
            .rate()
            .ok_or(Error::EmptyReference { row_id: None })?;
        Ok(PooledMer {
            value,
            counts,
            utterances,
        })
    }
}

pub fn corpus_mer(rows: &[ScoringRow], patterns: &[PreambleTemplate]) -> Result<PooledMer> {
    let per_row: Vec<Result<ErrorCounts>> = rows
        .par_iter()
        .map(|row| {
            mer(&row.reference, &row.hypothesis, patterns)
                .map(|s| s.breakdown.counts)
                .map_err(|_| Error::EmptyReference {
                    row_id: Some(row.id.clone()),
                })
        })
        .collect();
    let counts = per_row.into_iter().collect::<Result<Vec<_>>>()?.into_iter().sum();
    PooledMer::from_counts(counts, rows.len())
}

/// Rounds a percentage to two decimals for reporting.
pub fn round_percent(p: f64) -> f64 {
    (p * 100.0).round() / 100.0
}
