//! Benchmark scoring, base-vs-treatment comparison and hypothesis fetching.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ManifestRow;
use crate::error::{Error, Result};
use crate::failure_modes::{classify_tokens, ClassifierThresholds, FailureLabel, LabelFrequencies};
use crate::jsonl;
use crate::mer::{align, prepare, ErrorCounts, PooledMer};
use crate::text_norm::PreambleTemplate;
use crate::wire::Endpoint;

pub const ASR_URL_ENV: &str = "CSALIGN_ASR_URL";
pub const ASR_TOKEN_ENV: &str = "CSALIGN_ASR_TOKEN";
pub const DEFAULT_EVAL_PROMPT: &str = "Please transcribe this speech.";

/// How rows without a hypothesis were scored; stored in every report.
pub const MISSING_HYPOTHESIS_POLICY: &str = "empty_hypothesis_all_deletions";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub id: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub benchmark_name: String,
    pub model_name: String,
    pub hypotheses: BTreeMap<String, String>,
    /// File path or endpoint the hypotheses came from.
    pub provenance: String,
}

impl BenchmarkRun {
    pub fn from_records(
        benchmark_name: impl Into<String>,
        model_name: impl Into<String>,
        records: Vec<HypothesisRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let mut hypotheses = BTreeMap::new();
        for r in records {
            if hypotheses.contains_key(&r.id) {
                return Err(Error::InvalidRow {
                    row_id: r.id,
                    reason: "duplicate hypothesis".into(),
                });
            }
            hypotheses.insert(r.id, r.hypothesis);
        }
        Ok(BenchmarkRun {
            benchmark_name: benchmark_name.into(),
            model_name: model_name.into(),
            hypotheses,
            provenance: provenance.into(),
        })
    }

    pub fn load(benchmark_name: &str, model_name: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let records = jsonl::read::<HypothesisRecord>(path)?;
        Self::from_records(benchmark_name, model_name, records, path.display().to_string())
    }

    pub fn records(&self) -> Vec<HypothesisRecord> {
        self.hypotheses
            .iter()
            .map(|(id, h)| HypothesisRecord {
                id: id.clone(),
                hypothesis: h.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub id: String,
    /// Percent; absent when the reference is empty and the row is excluded.
    pub mer: Option<f64>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
    pub labels: BTreeSet<FailureLabel>,
    pub missing_hypothesis: bool,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub benchmark: String,
    pub model: String,
    /// Pooled MER in percent.
    pub pooled_mer: f64,
    pub counts: ErrorCounts,
    pub scored: usize,
    pub excluded_empty_reference: usize,
    pub missing_hypotheses: usize,
    pub missing_policy: String,
    pub labels: LabelFrequencies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<UtteranceRow>,
    pub summary: EvalSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Row(UtteranceRow),
    Summary(EvalSummary),
}

impl EvalReport {
    /// Per-utterance lines followed by one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<ReportLine> = self.rows.iter().cloned().map(ReportLine::Row).collect();
        lines.push(ReportLine::Summary(self.summary.clone()));
        jsonl::to_string(&lines)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rows = Vec::new();
        let mut summary = None;
        for line in jsonl::read::<ReportLine>(path)? {
            match line {
                ReportLine::Row(r) => rows.push(r),
                ReportLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::Config(format!("{} has no summary line", path.display())))?;
        Ok(EvalReport { rows, summary })
    }
}

fn check_unique(manifest: &[ManifestRow]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in manifest {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InvalidRow {
                row_id: r.id.clone(),
                reason: "duplicate manifest id".into(),
            });
        }
    }
    Ok(())
}

/// Scores every manifest row against the run. Missing hypotheses score as
/// empty output; rows whose reference has no tokens are excluded from pooling.
pub fn evaluate(
    manifest: &[ManifestRow],
    run: &BenchmarkRun,
    thresholds: &ClassifierThresholds,
    patterns: &[PreambleTemplate],
) -> Result<EvalReport> {
    check_unique(manifest)?;
    let rows: Vec<(UtteranceRow, ErrorCounts)> = manifest
        .par_iter()
        .map(|m| {
            let hyp = run.hypotheses.get(&m.id);
            let (r, h) = prepare(&m.transcript, hyp.map_or("", String::as_str), patterns);
            let mut row = UtteranceRow {
                id: m.id.clone(),
                mer: None,
                substitutions: 0,
                deletions: 0,
                insertions: 0,
                ref_len: 0,
                labels: BTreeSet::new(),
                missing_hypothesis: hyp.is_none(),
                excluded: r.is_empty(),
            };
            if r.is_empty() {
                return Ok((row, ErrorCounts::default()));
            }
            let counts = align(&r, &h).counts;
            row.mer = Some(100.0 * counts.errors() as f64 / counts.ref_len as f64);
            row.substitutions = counts.substitutions;
            row.deletions = counts.deletions;
            row.insertions = counts.insertions;
            row.ref_len = counts.ref_len;
            row.labels = classify_tokens(&r, &h, thresholds)?.labels;
            Ok((row, counts))
        })
        .collect::<Result<_>>()?;

    let mut labels = LabelFrequencies::default();
    let mut counts = ErrorCounts::default();
    let (mut scored, mut excluded, mut missing) = (0, 0, 0);
    for (row, c) in &rows {
        missing += usize::from(row.missing_hypothesis);
        if row.excluded {
            excluded += 1;
            log::warn!("row {} has an empty reference; excluded", row.id);
            continue;
        }
        scored += 1;
        counts += *c;
        labels.add(&row.labels);
    }
    let pooled = PooledMer::from_counts(counts, scored)?;
    Ok(EvalReport {
        rows: rows.into_iter().map(|(r, _)| r).collect(),
        summary: EvalSummary {
            benchmark: run.benchmark_name.clone(),
            model: run.model_name.clone(),
            pooled_mer: pooled.percent(),
            counts,
            scored,
            excluded_empty_reference: excluded,
            missing_hypotheses: missing,
            missing_policy: MISSING_HYPOTHESIS_POLICY.into(),
            labels,
        },
    })
}

/// Relative change in tenths of a percent. The ratio is rounded to hundredths
/// of a percent first and then to tenths, half away from zero, which is how
/// two-decimal MER scores map to one-decimal relative deltas.
pub fn relative_change_tenths(base: f64, treatment: f64) -> i64 {
    let hundredths = ((treatment - base) / base * 10_000.0).round() as i64;
    hundredths.signum() * ((hundredths.abs() + 5) / 10)
}

pub fn format_tenths(tenths: i64) -> String {
    let sign = if tenths < 0 { "-" } else { "" };
    format!("{sign}{}.{}%", tenths.abs() / 10, tenths.abs() % 10)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub benchmark: String,
    /// Percent, two decimals.
    pub base: f64,
    pub treatment: f64,
    /// Relative change in tenths of a percent; negative means improvement.
    pub delta_rel_tenths: i64,
}

impl ComparisonRow {
    pub fn from_scores(benchmark: impl Into<String>, base: f64, treatment: f64) -> Self {
        let (base, treatment) = (round2(base), round2(treatment));
        ComparisonRow {
            benchmark: benchmark.into(),
            base,
            treatment,
            delta_rel_tenths: relative_change_tenths(base, treatment),
        }
    }

    pub fn delta_rel(&self) -> String {
        format_tenths(self.delta_rel_tenths)
    }
}

/// Compares two reports over the same manifest.
pub fn compare(base: &EvalReport, treatment: &EvalReport) -> Result<ComparisonRow> {
    let ids = |r: &EvalReport| r.rows.iter().map(|u| u.id.clone()).collect::<BTreeSet<_>>();
    let (a, b) = (ids(base), ids(treatment));
    if a != b {
        let only_base = a.difference(&b).count();
        let only_treat = b.difference(&a).count();
        return Err(Error::ManifestMismatch(format!(
            "{only_base} ids only in base, {only_treat} only in treatment"
        )));
    }
    if base.summary.benchmark != treatment.summary.benchmark {
        return Err(Error::ManifestMismatch(format!(
            "benchmark {:?} vs {:?}",
            base.summary.benchmark, treatment.summary.benchmark
        )));
    }
    Ok(ComparisonRow::from_scores(
        base.summary.benchmark.clone(),
        base.summary.pooled_mer,
        treatment.summary.pooled_mer,
    ))
}

/// Pairs reports by benchmark name, keeping the base order.
pub fn compare_all(base: &[EvalReport], treatment: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    if base.len() != treatment.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} base reports vs {} treatment reports",
            base.len(),
            treatment.len()
        )));
    }
    base.iter()
        .map(|b| {
            let t = treatment
                .iter()
                .find(|t| t.summary.benchmark == b.summary.benchmark)
                .ok_or_else(|| Error::ManifestMismatch(format!("no treatment report for {}", b.summary.benchmark)))?;
            compare(b, t)
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("benchmark,base,treatment,delta_rel\n");
    for r in rows {
        let name = if r.benchmark.contains([',', '"', '\n']) {
            format!("\"{}\"", r.benchmark.replace('"', "\"\""))
        } else {
            r.benchmark.clone()
        };
        let _ = writeln!(out, "{name},{:.2},{:.2},{}", r.base, r.treatment, r.delta_rel());
    }
    out
}

/// Source of raw model output for one manifest row.
pub trait Transcriber: Send + Sync {
    fn transcribe(&self, row: &ManifestRow, prompt: &str) -> Result<String>;
    fn describe(&self) -> String;
}

/// Serves hypotheses from an existing file.
pub struct FileTranscriber {
    path: PathBuf,
    hypotheses: BTreeMap<String, String>,
}

impl FileTranscriber {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let run = BenchmarkRun::load("", "", &path)?;
        Ok(FileTranscriber {
            path,
            hypotheses: run.hypotheses,
        })
    }
}

impl Transcriber for FileTranscriber {
    fn transcribe(&self, row: &ManifestRow, _prompt: &str) -> Result<String> {
        self.hypotheses.get(&row.id).cloned().ok_or_else(|| Error::InvalidRow {
            row_id: row.id.clone(),
            reason: format!("no hypothesis in {}", self.path.display()),
        })
    }

    fn describe(&self) -> String {
        format!("file:{}", self.path.display())
    }
}

#[derive(Serialize)]
struct TranscribeRequest<'a> {
    id: &'a str,
    audio_ref: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TranscribeResponse {
    text: String,
}

/// JSON-over-HTTP transcription endpoint.
pub struct HttpTranscriber {
    pub endpoint: Endpoint,
}

impl HttpTranscriber {
    pub fn new(endpoint: Endpoint) -> Self {
        HttpTranscriber { endpoint }
    }

    pub fn from_env() -> Option<Self> {
        Endpoint::from_env(ASR_URL_ENV, ASR_TOKEN_ENV).map(Self::new)
    }
}

impl Transcriber for HttpTranscriber {
    fn transcribe(&self, row: &ManifestRow, prompt: &str) -> Result<String> {
        let req = TranscribeRequest {
            id: &row.id,
            audio_ref: &row.audio_ref,
            prompt,
        };
        self.endpoint
            .post_json::<_, TranscribeResponse>(&req)
            .map(|r| r.text)
            .map_err(|e| Error::InvalidRow {
                row_id: row.id.clone(),
                reason: e,
            })
    }

    fn describe(&self) -> String {
        self.endpoint.url.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub run: BenchmarkRun,
    pub failures: Vec<FetchFailure>,
    /// Rows served from the cache after a failed request.
    pub from_cache: usize,
}

pub struct FetchOptions<'a> {
    pub benchmark_name: &'a str,
    pub model_name: &'a str,
    pub prompt: &'a str,
    /// Archive written after the fetch, also read as a fallback cache.
    pub out_path: &'a Path,
}

/// Collects raw hypotheses for every manifest row. Output is archived
/// verbatim (no stripping) so evaluation can be replayed offline. Rows that
/// fail and are absent from the cache stay missing; the fetch fails only when
/// no row produced a hypothesis.
pub fn fetch_hypotheses(
    transcriber: &dyn Transcriber,
    manifest: &[ManifestRow],
    opts: &FetchOptions<'_>,
) -> Result<FetchOutcome> {
    check_unique(manifest)?;
    let cache: BTreeMap<String, String> = if opts.out_path.exists() {
        BenchmarkRun::load("", "", opts.out_path)?.hypotheses
    } else {
        BTreeMap::new()
    };
    let results: Vec<Result<String>> = manifest
        .par_iter()
        .map(|row| transcriber.transcribe(row, opts.prompt))
        .collect();

    let mut hypotheses = BTreeMap::new();
    let mut failures = Vec::new();
    let mut from_cache = 0;
    for (row, res) in manifest.iter().zip(results) {
        match res {
            Ok(text) => {
                hypotheses.insert(row.id.clone(), text);
            }
            Err(e) => {
                if let Some(cached) = cache.get(&row.id) {
                    from_cache += 1;
                    hypotheses.insert(row.id.clone(), cached.clone());
                } else {
                    failures.push(FetchFailure {
                        id: row.id.clone(),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    if hypotheses.is_empty() && !manifest.is_empty() {
        return Err(Error::AllRowsFailed(manifest.len()));
    }
    let run = BenchmarkRun {
        benchmark_name: opts.benchmark_name.into(),
        model_name: opts.model_name.into(),
        hypotheses,
        provenance: transcriber.describe(),
    };
    // Manifest order, not id order, so the archive diffs cleanly against it.
    let records: Vec<HypothesisRecord> = manifest
        .iter()
        .filter_map(|m| {
            run.hypotheses.get(&m.id).map(|h| HypothesisRecord {
                id: m.id.clone(),
                hypothesis: h.clone(),
            })
        })
        .collect();
    jsonl::write(opts.out_path, &records)?;
    Ok(FetchOutcome {
        run,
        failures,
        from_cache,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ManifestSource;
    use crate::mer::{corpus_mer, ScoringRow};
    use crate::text_norm::default_preambles;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    fn row(id: &str, text: &str) -> ManifestRow {
        ManifestRow {
            id: id.into(),
            audio_ref: format!("audio/{id}.wav"),
            transcript: text.into(),
            source: ManifestSource::NaturalMix,
            component_ids: vec![id.into()],
            duration: 1.0,
        }
    }

    fn run_of(pairs: &[(&str, &str)]) -> BenchmarkRun {
        BenchmarkRun::from_records(
            "bench",
            "model",
            pairs
                .iter()
                .map(|(i, h)| HypothesisRecord { id: i.to_string(), hypothesis: h.to_string() })
                .collect(),
            "memory",
        )
        .unwrap()
    }

    fn manifest() -> Vec<ManifestRow> {
        vec![
            row("a", "我们都应该 pursue a healthy lifestyle"),
            row("b", "我们二月多有 valentine's day"),
            row("c", "我住 temasek poly 那边"),
            row("d", "今天 meeting 很长"),
        ]
    }

    #[test]
    fn identical_hypotheses_score_zero() {
        let m = manifest();
        let run = run_of(&m.iter().map(|r| (r.id.as_str(), r.transcript.as_str())).collect::<Vec<_>>());
        let rep = evaluate(&m, &run, &ClassifierThresholds::default(), &[]).unwrap();
        assert_eq!(rep.summary.pooled_mer, 0.0);
        assert!(rep.rows.iter().all(|r| r.labels == BTreeSet::from([FailureLabel::None])));
        assert_eq!(rep.summary.labels.count(FailureLabel::None), 4);
    }

    #[test]
    fn missing_rows_count_as_deletions() {
        let m = manifest();
        let run = run_of(&[("a", &m[0].transcript), ("c", &m[2].transcript)]);
        let rep = evaluate(&m, &run, &ClassifierThresholds::default(), &[]).unwrap();
        let missing_len = rep.rows[1].ref_len + rep.rows[3].ref_len;
        assert_eq!(rep.summary.counts.deletions, missing_len);
        assert_eq!(rep.summary.counts.errors(), missing_len);
        assert_eq!(rep.summary.missing_hypotheses, 2);
        assert_eq!(rep.rows[1].mer, Some(100.0));
        assert!(rep.rows[1].missing_hypothesis);
        assert_eq!(rep.summary.missing_policy, MISSING_HYPOTHESIS_POLICY);
    }

    #[test]
    fn qualitative_examples_as_benchmark() {
        let m = manifest()[..3].to_vec();
        let ah = vec!["ah month"; 250].join(" ");
        let run = run_of(&[("a", "我们都应该追求健康的生活方式"), ("b", &ah), ("c", "我住达马士科波利那边")]);
        let rep = evaluate(&m, &run, &ClassifierThresholds::default(), &[]).unwrap();
        assert_eq!(rep.rows[0].mer, Some(100.0));
        assert_eq!(rep.rows[2].mer, Some(100.0));
        assert_eq!(rep.rows[0].labels, BTreeSet::from([FailureLabel::Translation]));
        assert_eq!(rep.rows[1].labels, BTreeSet::from([FailureLabel::Hallucination]));
        assert_eq!(rep.rows[2].labels.len(), 1);
        assert!(
            rep.rows[2].labels.contains(&FailureLabel::Translation)
                || rep.rows[2].labels.contains(&FailureLabel::LanguageOmission)
        );
    }

    #[test]
    fn empty_reference_is_excluded_and_counted() {
        let mut m = manifest();
        m.push(row("e", "。。。"));
        let run = run_of(&[("a", "x")]);
        let rep = evaluate(&m, &run, &ClassifierThresholds::default(), &[]).unwrap();
        assert_eq!(rep.summary.excluded_empty_reference, 1);
        assert_eq!(rep.summary.scored, 4);
        assert!(rep.rows[4].excluded && rep.rows[4].mer.is_none());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = vec![row("a", "我 ok"), row("a", "你 ok")];
        assert!(evaluate(&m, &run_of(&[]), &ClassifierThresholds::default(), &[]).is_err());
        let dup = vec![
            HypothesisRecord { id: "a".into(), hypothesis: "x".into() },
            HypothesisRecord { id: "a".into(), hypothesis: "y".into() },
        ];
        assert!(BenchmarkRun::from_records("b", "m", dup, "").is_err());
    }

    #[test]
    fn pooled_score_matches_corpus_mer() {
        let m = manifest();
        let hyps = [("a", "我们都应该 pursue healthy"), ("b", "二月多有 valentines day"), ("c", "The original content of this audio is: '我住 tamasek poly 那边'"), ("d", "今天 meeting")];
        let patterns = default_preambles();
        let rep = evaluate(&m, &run_of(&hyps), &ClassifierThresholds::default(), &patterns).unwrap();
        let rows: Vec<ScoringRow> = m
            .iter()
            .zip(hyps)
            .map(|(r, (_, h))| ScoringRow { id: r.id.clone(), reference: r.transcript.clone(), hypothesis: h.into() })
            .collect();
        let direct = corpus_mer(&rows, &patterns).unwrap();
        assert_eq!(rep.summary.pooled_mer, direct.percent());
        assert_eq!(rep.summary.counts, direct.counts);
        // The preamble is removed at scoring time.
        assert_eq!(rep.rows[2].substitutions, 1);
        assert_eq!(rep.rows[2].insertions, 0);
    }

    #[test]
    fn report_roundtrip_is_stable() {
        let m = manifest();
        let run = run_of(&[("a", "我们"), ("c", "我住 temasek poly 那边")]);
        let t = ClassifierThresholds::default();
        let a = evaluate(&m, &run, &t, &[]).unwrap();
        let b = evaluate(&m, &run, &t, &[]).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rep.jsonl");
        a.write(&p).unwrap();
        assert_eq!(EvalReport::read(&p).unwrap(), a);
    }

    #[test]
    fn published_relative_changes() {
        let rows = [
            (32.38, 31.75, "-2.0%"),
            (25.79, 25.61, "-0.7%"),
            (32.01, 30.41, "-5.0%"),
            (25.41, 22.58, "-11.1%"),
            (69.97, 61.09, "-12.7%"),
            (51.97, 46.63, "-10.3%"),
            (70.98, 7.38, "-89.6%"),
            (49.61, 10.65, "-78.5%"),
            (95.11, 85.52, "-10.1%"),
            (72.89, 58.30, "-20.0%"),
            (44.70, 42.08, "-5.9%"),
            (38.91, 31.40, "-19.3%"),
        ];
        for (b, t, want) in rows {
            assert_eq!(ComparisonRow::from_scores("x", b, t).delta_rel(), want, "{b} -> {t}");
        }
        assert_eq!(ComparisonRow::from_scores("x", 40.0, 40.0).delta_rel(), "0.0%");
        assert_eq!(ComparisonRow::from_scores("x", 40.0, 50.0).delta_rel(), "25.0%");
    }

    fn report_with(ids: &[&str], bench: &str, mer: f64) -> EvalReport {
        let run = run_of(&[]);
        let m: Vec<ManifestRow> = ids.iter().map(|i| row(i, "我 ok")).collect();
        let mut r = evaluate(&m, &run, &ClassifierThresholds::default(), &[]).unwrap();
        r.summary.benchmark = bench.into();
        r.summary.pooled_mer = mer;
        r
    }

    #[test]
    fn compare_checks_manifests() {
        let a = report_with(&["1", "2"], "emilia", 70.98);
        let b = report_with(&["1", "2"], "emilia", 7.38);
        let c = report_with(&["1", "3"], "emilia", 7.38);
        assert_eq!(compare(&a, &b).unwrap().delta_rel(), "-89.6%");
        assert!(matches!(compare(&a, &c), Err(Error::ManifestMismatch(_))));
        let d = report_with(&["1", "2"], "other", 7.38);
        assert!(matches!(compare(&a, &d), Err(Error::ManifestMismatch(_))));
        let csv = comparison_csv(&compare_all(&[a], &[b]).unwrap());
        assert_eq!(csv, "benchmark,base,treatment,delta_rel\nemilia,70.98,7.38,-89.6%\n");
    }

    struct Echo(AtomicUsize);

    impl Transcriber for Echo {
        fn transcribe(&self, row: &ManifestRow, prompt: &str) -> Result<String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            if row.id == "d" {
                return Err(Error::Translator("boom".into()));
            }
            Ok(format!("The original content of this audio is: {} [{prompt}]", row.transcript))
        }
        fn describe(&self) -> String {
            "echo".into()
        }
    }

    #[test]
    fn fetch_archives_raw_output_and_records_failures() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("hyp.jsonl");
        let opts = FetchOptions { benchmark_name: "b", model_name: "m", prompt: DEFAULT_EVAL_PROMPT, out_path: &out };
        let res = fetch_hypotheses(&Echo(AtomicUsize::new(0)), &manifest(), &opts).unwrap();
        assert_eq!(res.failures.len(), 1);
        assert_eq!(res.failures[0].id, "d");
        let stored = jsonl::read::<HypothesisRecord>(&out).unwrap();
        assert_eq!(stored.len(), 3);
        assert!(stored[0].hypothesis.starts_with("The original content of this audio is:"));
        assert!(stored[0].hypothesis.ends_with("[Please transcribe this speech.]"));

        // The file provider serves the archive back unchanged.
        let file = FileTranscriber::open(&out).unwrap();
        let m = manifest();
        assert_eq!(file.transcribe(&m[0], "").unwrap(), stored[0].hypothesis);
        assert!(file.transcribe(&m[3], "").is_err());
    }

    struct Down;

    impl Transcriber for Down {
        fn transcribe(&self, row: &ManifestRow, _: &str) -> Result<String> {
            Err(Error::InvalidRow { row_id: row.id.clone(), reason: "connection refused".into() })
        }
        fn describe(&self) -> String {
            "down".into()
        }
    }

    #[test]
    fn unreachable_endpoint_uses_cache_or_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("hyp.jsonl");
        let opts = FetchOptions { benchmark_name: "b", model_name: "m", prompt: DEFAULT_EVAL_PROMPT, out_path: &out };
        assert!(matches!(fetch_hypotheses(&Down, &manifest(), &opts), Err(Error::AllRowsFailed(4))));

        let cached: Vec<HypothesisRecord> = manifest()
            .iter()
            .map(|r| HypothesisRecord { id: r.id.clone(), hypothesis: r.transcript.clone() })
            .collect();
        jsonl::write(&out, &cached).unwrap();
        let res = fetch_hypotheses(&Down, &manifest(), &opts).unwrap();
        assert_eq!(res.from_cache, 4);
        assert!(res.failures.is_empty());
        let rep = evaluate(&manifest(), &res.run, &ClassifierThresholds::default(), &[]).unwrap();
        assert_eq!(rep.summary.pooled_mer, 0.0);
    }

    /// Answers each request with `{"text": "<prompt>|<audio_ref>"}` after
    /// failing the first `fail_first` with HTTP 503.
    fn mock_server(fail_first: usize) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = false;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    auth |= lower.starts_with("authorization: bearer secret");
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, payload) = if n < fail_first {
                    ("503 Service Unavailable", "{}".to_string())
                } else if !auth {
                    ("401 Unauthorized", "{}".to_string())
                } else {
                    let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                    let text = format!("{}|{}", req["prompt"].as_str().unwrap(), req["audio_ref"].as_str().unwrap());
                    ("200 OK", serde_json::json!({ "text": text }).to_string())
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            }
        });
        (format!("http://{addr}/transcribe"), hits)
    }

    #[test]
    fn http_transcriber_retries_and_sends_prompt() {
        let (url, hits) = mock_server(2);
        let mut ep = Endpoint::new(url);
        ep.token = Some("secret".into());
        ep.retry.initial_backoff = Duration::from_millis(5);
        let t = HttpTranscriber::new(ep);
        let m = manifest();
        assert_eq!(t.transcribe(&m[0], DEFAULT_EVAL_PROMPT).unwrap(), "Please transcribe this speech.|audio/a.wav");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_client_errors_are_not_retried() {
        let (url, hits) = mock_server(0);
        let mut ep = Endpoint::new(url);
        ep.retry.initial_backoff = Duration::from_millis(5);
        let t = HttpTranscriber::new(ep);
        assert!(t.transcribe(&manifest()[0], DEFAULT_EVAL_PROMPT).is_err());
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }
}
