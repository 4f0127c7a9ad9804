//! Command-line front end. Every stage reads and writes JSONL so stages
//! compose through files; randomized and file-producing commands leave a
//! `<out>.meta.json` sidecar with the seed, a hash of the configuration and
//! the tool version.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use csalign_core::datasets::{self, ManifestRow, Utterance};
use csalign_core::dpo_core::{self, DpoConfig, ExperimentSettings};
use csalign_core::evalharness::{self, BenchmarkRun, EvalReport, FetchOptions, Transcriber};
use csalign_core::failure_modes::{classify_batch, ClassifierThresholds, DEFAULT_THRESHOLDS};
use csalign_core::mer::{align, corpus_mer, prepare, ScoringRow};
use csalign_core::pairgen::{
    self, DictionaryTranslator, HttpTranslator, PairGenConfig, PromptPool, StrategyConfig, Translator,
};
use csalign_core::text_norm::{normalize, parse_preambles, strip_model_preamble, tokenize_mixed, PreambleTemplate};
use csalign_core::{jsonl, Error};

pub const TOOL_NAME: &str = "csalign";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "csalign", version, about = "Code-switching transcription scoring, preference data and toy DPO")]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores). Output order
    /// does not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print normalized text (or tokens) for each input line.
    Normalize(NormalizeArgs),
    /// Pooled mixed error rate of hypotheses against references.
    Mer(MerArgs),
    /// Label failure modes (omission, translation, hallucination) per row.
    Classify(ClassifyArgs),
    /// Build chosen/rejected preference pairs from a manifest.
    Pairgen(PairgenArgs),
    /// Assemble training manifests and audio.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the toy transcriber with DPO and write the loss trace.
    TrainToy(TrainToyArgs),
    /// Run the behavior-alignment experiment and write a JSONL report.
    BehaviorExp(BehaviorArgs),
    /// Score a hypothesis file against a reference manifest.
    Evaluate(EvaluateArgs),
    /// Compare base and treatment reports (CSV with relative change).
    Compare(CompareArgs),
    /// Collect raw hypotheses from a transcription endpoint or file.
    Fetch(FetchArgs),
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// Text to normalize; ignored when --input is given.
    pub text: Vec<String>,
    /// File with one text per line.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Remove a model preamble before normalizing.
    #[arg(long)]
    pub strip_preamble: bool,
    /// Preamble templates (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub preambles: Option<PathBuf>,
    /// Print tokens with language tags as JSON instead of normalized text.
    #[arg(long)]
    pub tokens: bool,
}

#[derive(Debug, Args)]
pub struct MerArgs {
    /// Reference JSONL: `id` plus `text`, `transcript` or `reference`.
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    /// Hypothesis JSONL: `id` plus `text`, `hypothesis` or `transcript`.
    #[arg(long = "hyp", value_name = "PATH")]
    pub hypothesis: PathBuf,
    /// Preamble templates (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub preambles: Option<PathBuf>,
    /// Per-utterance scores as JSONL.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Reference JSONL: `id` plus `text`, `transcript` or `reference`.
    #[arg(long = "ref", value_name = "PATH")]
    pub reference: PathBuf,
    /// Hypothesis JSONL: `id` plus `text`, `hypothesis` or `transcript`.
    #[arg(long = "hyp", value_name = "PATH")]
    pub hypothesis: PathBuf,
    /// Classifier thresholds TOML (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub thresholds: Option<PathBuf>,
    /// Preamble templates (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub preambles: Option<PathBuf>,
    /// Per-row labels as JSONL.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TranslatorKind {
    /// Bundled phrase table; deterministic and offline.
    Dictionary,
    /// Remote endpoint from CSALIGN_TRANSLATOR_URL / CSALIGN_TRANSLATOR_TOKEN.
    Http,
}

#[derive(Debug, Args)]
pub struct PairgenArgs {
    /// Manifest JSONL from `dataset`.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Preference pairs JSONL.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Skipped rows with reasons (default: <out>.rejects.jsonl).
    #[arg(long, value_name = "PATH")]
    pub rejects: Option<PathBuf>,
    /// Run seed; generated and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt pool (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub prompts: Option<PathBuf>,
    /// Phrase table for the dictionary translator (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub dictionary: Option<PathBuf>,
    /// Translator used to build rejected transcripts.
    #[arg(long, value_enum, default_value_t = TranslatorKind::Dictionary)]
    pub translator: TranslatorKind,
    /// Probability of a global (whole-language) rejection.
    #[arg(long, default_value_t = 0.8)]
    pub global_fraction: f64,
    /// Spans translated in a partial rejection.
    #[arg(long, default_value_t = 1)]
    pub max_spans: usize,
    /// Longest span, in tokens.
    #[arg(long, default_value_t = 3)]
    pub max_span_len: usize,
    /// Translator calls per span before the row is rejected.
    #[arg(long, default_value_t = pairgen::DEFAULT_TRANSLATOR_ATTEMPTS)]
    pub translator_attempts: usize,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Group consecutive code-switched utterances into rows.
    MixRuns(MixRunsArgs),
    /// Pair adjacent English/Mandarin utterances of one conversation.
    PairEncn(PairEncnArgs),
    /// Random English + Mandarin pairs from two monolingual pools.
    Synth(SynthArgs),
    /// Write concatenated audio for every manifest row.
    Concat(ConcatArgs),
}

#[derive(Debug, Args)]
pub struct MixRunsArgs {
    /// Utterance JSONL.
    #[arg(long, value_name = "PATH")]
    pub utterances: PathBuf,
    /// Manifest JSONL to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Longest row, in seconds.
    #[arg(long, default_value_t = datasets::DEFAULT_MAX_DURATION)]
    pub max_duration: f64,
    /// Silence between clips.
    #[arg(long, default_value_t = 0)]
    pub gap_ms: u32,
}

#[derive(Debug, Args)]
pub struct PairEncnArgs {
    /// Utterance JSONL.
    #[arg(long, value_name = "PATH")]
    pub utterances: PathBuf,
    /// Manifest JSONL to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Silence between clips.
    #[arg(long, default_value_t = 0)]
    pub gap_ms: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// English utterance JSONL.
    #[arg(long, value_name = "PATH")]
    pub en: PathBuf,
    /// Mandarin utterance JSONL.
    #[arg(long, value_name = "PATH")]
    pub zh: PathBuf,
    /// Rows to generate.
    #[arg(long)]
    pub n: usize,
    /// Run seed; generated and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest JSONL to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Silence between clips.
    #[arg(long, default_value_t = 0)]
    pub gap_ms: u32,
}

#[derive(Debug, Args)]
pub struct ConcatArgs {
    /// Manifest JSONL whose rows should be rendered.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Utterance JSONL that resolves component ids to audio files.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Directory that utterance audio paths are relative to.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub audio_root: PathBuf,
    /// Output directory; rows are written to <out-dir>/<audio_ref>.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Silence between clips.
    #[arg(long, default_value_t = 0)]
    pub gap_ms: u32,
    /// Per-row outcome JSONL (default: <out-dir>/concat.jsonl).
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Preference strength β.
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    /// Gradient descent step size.
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Gradient steps.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Run seed; generated and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Items per step (default: full batch).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Trace CSV with columns step, loss, mean_margin.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BehaviorArgs {
    /// Run seed; generated and recorded when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// β values to run (default: 0.5, 0.05 and 0.3).
    #[arg(long = "beta", value_name = "BETA")]
    pub betas: Vec<f64>,
    /// Gradient descent step size.
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Gradient steps per β.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Preference items per context.
    #[arg(long, default_value_t = 50)]
    pub items_per_context: usize,
    /// Sampled outputs per context for the MER estimate.
    #[arg(long, default_value_t = 200)]
    pub samples_per_context: usize,
    /// Report JSONL (one line per context plus a summary per β).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference manifest JSONL.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Hypothesis JSONL {id, hypothesis}.
    #[arg(long = "hyp", value_name = "PATH")]
    pub hypothesis: PathBuf,
    /// Benchmark name recorded in the report.
    #[arg(long, default_value = "benchmark")]
    pub benchmark: String,
    /// Model name recorded in the report.
    #[arg(long, default_value = "model")]
    pub model: String,
    /// Classifier thresholds TOML (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub thresholds: Option<PathBuf>,
    /// Preamble templates (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub preambles: Option<PathBuf>,
    /// Report JSONL (per-utterance rows and a summary line).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Base reports; repeat for several benchmarks.
    #[arg(long, value_name = "PATH", required = true)]
    pub base: Vec<PathBuf>,
    /// Treatment reports, matched to base reports by benchmark name.
    #[arg(long, value_name = "PATH", required = true)]
    pub treatment: Vec<PathBuf>,
    /// CSV output (default: stdout).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Manifest JSONL listing the rows to transcribe.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Hypothesis archive; an existing file doubles as a fallback cache.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Transcription endpoint (default: CSALIGN_ASR_URL).
    #[arg(long, value_name = "URL", conflicts_with = "from_file")]
    pub endpoint: Option<String>,
    /// Serve hypotheses from an existing JSONL file instead of an endpoint.
    #[arg(long, value_name = "PATH")]
    pub from_file: Option<PathBuf>,
    /// Prompt sent with every request (default: the pool's eval prompt).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Prompt pool whose eval prompt is used (default: bundled).
    #[arg(long, value_name = "PATH")]
    pub prompts: Option<PathBuf>,
    /// Benchmark name recorded with the run.
    #[arg(long, default_value = "benchmark")]
    pub benchmark: String,
    /// Model name recorded with the run.
    #[arg(long, default_value = "model")]
    pub model: String,
    /// Per-request timeout.
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

/// How a command failed: bad invocation (exit 2) or bad data (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 1,
        }
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self) -> String {
        let v = match self {
            Failure::Usage(msg) => serde_json::json!({ "error": "Usage", "message": msg, "row_id": null }),
            Failure::Data(e) => serde_json::json!({ "error": e.kind(), "message": e.to_string(), "row_id": e.row_id() }),
        };
        v.to_string()
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.record());
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Normalize(a) => cmd_normalize(a),
        Command::Mer(a) => cmd_mer(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Pairgen(a) => cmd_pairgen(a),
        Command::Dataset(d) => match d {
            DatasetCommand::MixRuns(a) => cmd_mix_runs(a),
            DatasetCommand::PairEncn(a) => cmd_pair_encn(a),
            DatasetCommand::Synth(a) => cmd_synth(a),
            DatasetCommand::Concat(a) => cmd_concat(a),
        },
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::BehaviorExp(a) => cmd_behavior(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Fetch(a) => cmd_fetch(a),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Content hash over every configuration input of a run.
#[derive(Default)]
struct ConfigHash(Sha256);

impl ConfigHash {
    fn add(&mut self, label: &str, content: &str) -> &mut Self {
        for part in [label, content] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part.as_bytes());
        }
        self
    }

    fn add_json(&mut self, label: &str, value: &impl Serialize) -> &mut Self {
        let text = serde_json::to_string(value).expect("params serialize");
        self.add(label, &text)
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn write_meta(out: &Path, command: &str, seed: Option<u64>, hash: ConfigHash) -> Result<(), Error> {
    let meta = RunMeta {
        tool: TOOL_NAME.into(),
        version: TOOL_VERSION.into(),
        command: command.into(),
        seed,
        config_hash: hash.finish(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    write_text(&meta_path(out), &text)
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        log::info!("no --seed given; using generated seed {s}");
        s
    })
}

/// Reads an optional config file or falls back to the bundled text.
fn config_text(path: Option<&Path>, bundled: &str) -> Result<String, Error> {
    match path {
        Some(p) => read_text(p),
        None => Ok(bundled.to_string()),
    }
}

fn load_preambles(path: Option<&Path>, hash: &mut ConfigHash) -> Result<Vec<PreambleTemplate>, Error> {
    let text = config_text(path, csalign_core::text_norm::DEFAULT_PREAMBLES)?;
    hash.add("preambles", &text);
    parse_preambles(&text)
}

fn load_thresholds(path: Option<&Path>, hash: &mut ConfigHash) -> Result<ClassifierThresholds, Error> {
    let text = config_text(path, DEFAULT_THRESHOLDS)?;
    hash.add("thresholds", &text);
    ClassifierThresholds::from_toml(&text)
}

fn load_prompts(path: Option<&Path>, hash: &mut ConfigHash) -> Result<PromptPool, Error> {
    let text = config_text(path, pairgen::DEFAULT_PROMPTS)?;
    hash.add("prompts", &text);
    PromptPool::parse(&text)
}

fn load_utterances(path: &Path) -> Result<Vec<Utterance>, Error> {
    let utts: Vec<Utterance> = jsonl::read(path)?;
    for u in &utts {
        u.validate()?;
    }
    Ok(utts)
}

/// `id` plus text under any of the usual field names.
#[derive(Debug, Deserialize)]
struct TextRecord {
    id: String,
    #[serde(alias = "transcript", alias = "hypothesis", alias = "reference")]
    text: String,
}

fn read_text_records(path: &Path) -> Result<Vec<TextRecord>, Error> {
    let rows: Vec<TextRecord> = jsonl::read(path)?;
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InvalidRow {
                row_id: r.id.clone(),
                reason: format!("duplicate id in {}", path.display()),
            });
        }
    }
    Ok(rows)
}

/// Reference rows paired with hypotheses; a missing hypothesis is empty.
fn scoring_rows(reference: &Path, hypothesis: &Path) -> Result<Vec<ScoringRow>, Error> {
    let refs = read_text_records(reference)?;
    let mut hyps: BTreeMap<String, String> =
        read_text_records(hypothesis)?.into_iter().map(|r| (r.id, r.text)).collect();
    let rows: Vec<ScoringRow> = refs
        .into_iter()
        .map(|r| {
            let hypothesis = hyps.remove(&r.id).unwrap_or_else(|| {
                log::warn!("no hypothesis for {}; scored as empty", r.id);
                String::new()
            });
            ScoringRow {
                id: r.id,
                reference: r.text,
                hypothesis,
            }
        })
        .collect();
    for id in hyps.keys() {
        log::warn!("hypothesis {id} has no reference; ignored");
    }
    Ok(rows)
}

fn cmd_normalize(a: NormalizeArgs) -> CmdResult {
    let mut hash = ConfigHash::default();
    let patterns = load_preambles(a.preambles.as_deref(), &mut hash)?;
    let lines: Vec<String> = match &a.input {
        Some(p) => read_text(p)?.lines().map(str::to_string).collect(),
        None if a.text.is_empty() => return Err(Failure::Usage("give TEXT arguments or --input".into())),
        None => a.text.clone(),
    };
    let mut out = String::new();
    for line in &lines {
        let raw = if a.strip_preamble {
            strip_model_preamble(line, &patterns)
        } else {
            line.clone()
        };
        let n = normalize(&raw);
        if a.tokens {
            let toks = tokenize_mixed(&n).tokens;
            out.push_str(&serde_json::to_string(&toks).expect("tokens serialize"));
        } else {
            out.push_str(&n);
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

#[derive(Serialize)]
struct MerRow<'a> {
    id: &'a str,
    mer: f64,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    ref_len: usize,
}

fn cmd_mer(a: MerArgs) -> CmdResult {
    let mut hash = ConfigHash::default();
    let patterns = load_preambles(a.preambles.as_deref(), &mut hash)?;
    let rows = scoring_rows(&a.reference, &a.hypothesis)?;
    let pooled = corpus_mer(&rows, &patterns)?;
    if let Some(out) = &a.out {
        let mut text = String::new();
        for r in &rows {
            let (rt, ht) = prepare(&r.reference, &r.hypothesis, &patterns);
            let c = align(&rt, &ht).counts;
            let row = MerRow {
                id: &r.id,
                mer: 100.0 * c.errors() as f64 / c.ref_len as f64,
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                ref_len: c.ref_len,
            };
            text.push_str(&serde_json::to_string(&row).expect("row serializes"));
            text.push('\n');
        }
        write_text(out, &text)?;
        write_meta(out, "mer", None, hash)?;
    }
    let c = pooled.counts;
    println!(
        "MER {:.2}% (S={} D={} I={} N={}, {} utterances)",
        pooled.percent(),
        c.substitutions,
        c.deletions,
        c.insertions,
        c.ref_len,
        pooled.utterances
    );
    Ok(())
}

fn cmd_classify(a: ClassifyArgs) -> CmdResult {
    let mut hash = ConfigHash::default();
    let thresholds = load_thresholds(a.thresholds.as_deref(), &mut hash)?;
    let patterns = load_preambles(a.preambles.as_deref(), &mut hash)?;
    let rows = scoring_rows(&a.reference, &a.hypothesis)?;
    let (classified, freq) = classify_batch(&rows, &thresholds, &patterns)?;
    if let Some(out) = &a.out {
        jsonl::write(out, &classified)?;
        write_meta(out, "classify", None, hash)?;
    }
    println!("rows\t{}", freq.rows);
    for (label, n) in &freq.counts {
        println!("{label}\t{n}");
    }
    Ok(())
}

fn cmd_pairgen(a: PairgenArgs) -> CmdResult {
    let seed = resolve_seed(a.seed);
    let mut hash = ConfigHash::default();
    let pool = load_prompts(a.prompts.as_deref(), &mut hash)?;
    let config = PairGenConfig {
        strategy: StrategyConfig {
            global_fraction: a.global_fraction,
            max_spans: a.max_spans,
            max_span_len: a.max_span_len,
        },
        translator_attempts: a.translator_attempts,
    };
    if !(0.0..=1.0).contains(&a.global_fraction) || a.max_spans == 0 || a.max_span_len == 0 {
        return Err(Failure::Usage(
            "--global-fraction must be in [0, 1]; --max-spans and --max-span-len at least 1".into(),
        ));
    }
    hash.add_json("strategy", &config.strategy);
    hash.add("translator_attempts", &config.translator_attempts.to_string());
    let translator: Box<dyn Translator> = match a.translator {
        TranslatorKind::Dictionary => {
            let text = config_text(a.dictionary.as_deref(), pairgen::DEFAULT_DICTIONARY)?;
            hash.add("dictionary", &text);
            Box::new(DictionaryTranslator::from_tsv(&text)?)
        }
        TranslatorKind::Http => {
            let t = HttpTranslator::from_env().ok_or_else(|| {
                Failure::Usage(format!("--translator http needs {} in the environment", pairgen::TRANSLATOR_URL_ENV))
            })?;
            hash.add("translator", &t.endpoint.url);
            Box::new(t)
        }
    };
    let manifest: Vec<ManifestRow> = jsonl::read(&a.manifest)?;
    let batch = pairgen::build_pairs(&manifest, translator.as_ref(), &pool, seed, &config);
    jsonl::write(&a.out, &batch.pairs)?;
    let rejects = a.rejects.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".rejects.jsonl");
        a.out.with_file_name(name)
    });
    jsonl::write(&rejects, &batch.rejects)?;
    write_meta(&a.out, "pairgen", Some(seed), hash)?;
    println!("{} pairs, {} rejected rows", batch.pairs.len(), batch.rejects.len());
    Ok(())
}

fn print_stats(rows: &[ManifestRow]) {
    let s = datasets::manifest_stats(rows);
    println!(
        "{} rows, {:.3} h (natural_mix {}, concat_intra_corpus {}, concat_cross_corpus {})",
        s.rows, s.hours, s.natural_mix, s.concat_intra_corpus, s.concat_cross_corpus
    );
}

fn cmd_mix_runs(a: MixRunsArgs) -> CmdResult {
    if !(a.max_duration > 0.0) {
        return Err(Failure::Usage("--max-duration must be positive".into()));
    }
    let utts = load_utterances(&a.utterances)?;
    let (rows, _warnings) = datasets::group_mix_runs(&utts, a.max_duration, a.gap_ms);
    jsonl::write(&a.out, &rows)?;
    let mut hash = ConfigHash::default();
    hash.add("max_duration", &a.max_duration.to_string()).add("gap_ms", &a.gap_ms.to_string());
    write_meta(&a.out, "dataset mix-runs", None, hash)?;
    print_stats(&rows);
    Ok(())
}

fn cmd_pair_encn(a: PairEncnArgs) -> CmdResult {
    let utts = load_utterances(&a.utterances)?;
    let rows = datasets::pair_en_cn(&utts, a.gap_ms);
    jsonl::write(&a.out, &rows)?;
    let mut hash = ConfigHash::default();
    hash.add("gap_ms", &a.gap_ms.to_string());
    write_meta(&a.out, "dataset pair-encn", None, hash)?;
    print_stats(&rows);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let seed = resolve_seed(a.seed);
    let en = load_utterances(&a.en)?;
    let zh = load_utterances(&a.zh)?;
    let rows = datasets::synth_cross_corpus(&en, &zh, a.n, seed, a.gap_ms)?;
    jsonl::write(&a.out, &rows)?;
    let mut hash = ConfigHash::default();
    hash.add("n", &a.n.to_string()).add("gap_ms", &a.gap_ms.to_string());
    write_meta(&a.out, "dataset synth", Some(seed), hash)?;
    print_stats(&rows);
    Ok(())
}

fn cmd_concat(a: ConcatArgs) -> CmdResult {
    let manifest: Vec<ManifestRow> = jsonl::read(&a.manifest)?;
    let corpus: Vec<Utterance> = jsonl::read(&a.corpus)?;
    let outcomes = datasets::concat_manifest(&manifest, &corpus, &a.audio_root, &a.out_dir, a.gap_ms);
    let report = a.report.clone().unwrap_or_else(|| a.out_dir.join("concat.jsonl"));
    jsonl::write(&report, &outcomes)?;
    let failed: Vec<_> = outcomes.iter().filter(|o| o.error.is_some()).collect();
    println!("{} rows written, {} failed", outcomes.len() - failed.len(), failed.len());
    if let Some(first) = failed.first() {
        return Err(Failure::Data(Error::InvalidRow {
            row_id: first.id.clone(),
            reason: first.error.clone().unwrap_or_default(),
        }));
    }
    for o in &outcomes {
        if let Some(d) = o.audio_duration {
            if (d - o.manifest_duration).abs() > 1e-3 {
                log::warn!("{}: audio lasts {d:.4} s, manifest says {:.4} s", o.id, o.manifest_duration);
            }
        }
    }
    Ok(())
}

fn dpo_config(beta: f64, lr: f64, steps: usize, seed: u64, batch_size: Option<usize>) -> Result<DpoConfig, Failure> {
    let c = DpoConfig {
        beta,
        learning_rate: lr,
        steps,
        seed,
        batch_size,
    };
    c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(c)
}

fn cmd_train_toy(a: TrainToyArgs) -> CmdResult {
    let seed = resolve_seed(a.seed);
    let config = dpo_config(a.beta, a.lr, a.steps, seed, a.batch_size)?;
    let setup = dpo_core::experiment_setup(seed, &ExperimentSettings::default())?;
    let out = dpo_core::train(&setup.policy, &setup.reference, &setup.batch, &config)?;
    let mut csv = String::from("step,loss,mean_margin\n");
    for r in &out.trace {
        let _ = writeln!(csv, "{},{},{}", r.step, r.loss, r.mean_margin);
    }
    write_text(&a.out, &csv)?;
    let mut hash = ConfigHash::default();
    hash.add_json("dpo", &config);
    write_meta(&a.out, "train-toy", Some(seed), hash)?;
    let min_verbatim = (0..out.policy.n_contexts())
        .map(|x| out.policy.probs(x)[dpo_core::VERBATIM])
        .fold(f64::INFINITY, f64::min);
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        println!("loss {:.6} -> {:.6}; min P(verbatim) {:.4}", first.loss, last.loss, min_verbatim);
    }
    Ok(())
}

fn cmd_behavior(a: BehaviorArgs) -> CmdResult {
    let seed = resolve_seed(a.seed);
    let betas: Vec<f64> = if a.betas.is_empty() {
        dpo_core::REFERENCE_BETAS.iter().map(|&(_, b)| b).collect()
    } else {
        a.betas.clone()
    };
    if a.items_per_context == 0 || a.samples_per_context == 0 {
        return Err(Failure::Usage("--items-per-context and --samples-per-context must be positive".into()));
    }
    let settings = ExperimentSettings {
        items_per_context: a.items_per_context,
        samples_per_context: a.samples_per_context,
        ..ExperimentSettings::default()
    };
    let mut text = String::new();
    let mut hash = ConfigHash::default();
    hash.add_json("settings", &settings);
    for beta in betas {
        let config = dpo_config(beta, a.lr, a.steps, seed, None)?;
        hash.add_json("dpo", &config);
        let r = dpo_core::behavior_experiment(&config, &settings)?;
        println!(
            "beta {}: min P(verbatim) {:.4} -> {:.4}, threshold at step {}, sampled MER {:.2}% -> {:.2}%",
            r.beta,
            r.contexts.iter().map(|c| c.pre[dpo_core::VERBATIM]).fold(f64::INFINITY, f64::min),
            r.min_post_verbatim,
            r.steps_to_threshold.map_or("never".to_string(), |s| s.to_string()),
            r.pre_sampled_mer,
            r.post_sampled_mer
        );
        text.push_str(&r.to_jsonl());
    }
    write_text(&a.out, &text)?;
    write_meta(&a.out, "behavior-exp", Some(seed), hash)?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let mut hash = ConfigHash::default();
    let thresholds = load_thresholds(a.thresholds.as_deref(), &mut hash)?;
    let patterns = load_preambles(a.preambles.as_deref(), &mut hash)?;
    let manifest: Vec<ManifestRow> = jsonl::read(&a.manifest)?;
    let run = BenchmarkRun::load(&a.benchmark, &a.model, &a.hypothesis)?;
    let report = evalharness::evaluate(&manifest, &run, &thresholds, &patterns)?;
    report.write(&a.out)?;
    hash.add("missing_policy", evalharness::MISSING_HYPOTHESIS_POLICY);
    write_meta(&a.out, "evaluate", None, hash)?;
    let s = &report.summary;
    println!(
        "{} / {}: MER {:.2}% over {} rows ({} excluded, {} missing hypotheses)",
        s.benchmark, s.model, s.pooled_mer, s.scored, s.excluded_empty_reference, s.missing_hypotheses
    );
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let load = |paths: &[PathBuf]| paths.iter().map(EvalReport::read).collect::<Result<Vec<_>, _>>();
    let base = load(&a.base)?;
    let treatment = load(&a.treatment)?;
    let rows = evalharness::compare_all(&base, &treatment)?;
    let csv = evalharness::comparison_csv(&rows);
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_fetch(a: FetchArgs) -> CmdResult {
    let mut hash = ConfigHash::default();
    let prompt = match &a.prompt {
        Some(p) => p.clone(),
        None => load_prompts(a.prompts.as_deref(), &mut hash)?.eval_prompt,
    };
    hash.add("prompt", &prompt);
    let transcriber: Box<dyn Transcriber> = if let Some(path) = &a.from_file {
        Box::new(evalharness::FileTranscriber::open(path)?)
    } else {
        let mut ep = match &a.endpoint {
            Some(url) => {
                let mut ep = csalign_core::wire::Endpoint::new(url.clone());
                ep.token = std::env::var(evalharness::ASR_TOKEN_ENV).ok().filter(|t| !t.is_empty());
                ep
            }
            None => csalign_core::wire::Endpoint::from_env(evalharness::ASR_URL_ENV, evalharness::ASR_TOKEN_ENV)
                .ok_or_else(|| {
                    Failure::Usage(format!(
                        "give --endpoint, --from-file or set {}",
                        evalharness::ASR_URL_ENV
                    ))
                })?,
        };
        ep.timeout = std::time::Duration::from_secs(a.timeout_secs);
        Box::new(evalharness::HttpTranscriber::new(ep))
    };
    let manifest: Vec<ManifestRow> = jsonl::read(&a.manifest)?;
    let opts = FetchOptions {
        benchmark_name: &a.benchmark,
        model_name: &a.model,
        prompt: &prompt,
        out_path: &a.out,
    };
    let outcome = evalharness::fetch_hypotheses(transcriber.as_ref(), &manifest, &opts)?;
    for f in &outcome.failures {
        log::warn!("{}: {}", f.id, f.reason);
    }
    write_meta(&a.out, "fetch", None, hash)?;
    println!(
        "{} hypotheses ({} from cache), {} missing",
        outcome.run.hypotheses.len(),
        outcome.from_cache,
        outcome.failures.len()
    );
    Ok(())
}
