//! Preference-pair construction.
//!
//! The chosen response is the ground-truth code-switched transcript. The
//! rejected response is the same transcript with either every token of one
//! language translated (global, 80% by default) or one short single-language
//! span translated (partial, 20%). Translation goes through a
//! [`Translator`] port so the generator can be a remote model or the
//! deterministic dictionary stub.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::ManifestRow;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::text_norm::{
    is_cjk, is_punctuation, language_profile, normalize, tokenize_located, tokenize_raw, LanguageTag, LocatedToken, Token,
    TokenSequence,
};
use crate::wire::Endpoint;

pub const DEFAULT_PROMPTS: &str = include_str!("../../../config/prompts.txt");
pub const DEFAULT_DICTIONARY: &str = include_str!("../../../config/translation_dict.tsv");

pub const TRANSLATOR_URL_ENV: &str = "CSALIGN_TRANSLATOR_URL";
pub const TRANSLATOR_TOKEN_ENV: &str = "CSALIGN_TRANSLATOR_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    EnToZh,
    ZhToEn,
}

impl Direction {
    pub fn source(self) -> LanguageTag {
        match self {
            Direction::EnToZh => LanguageTag::English,
            Direction::ZhToEn => LanguageTag::Mandarin,
        }
    }

    pub fn target(self) -> LanguageTag {
        match self {
            Direction::EnToZh => LanguageTag::Mandarin,
            Direction::ZhToEn => LanguageTag::English,
        }
    }

    fn codes(self) -> (&'static str, &'static str) {
        match self {
            Direction::EnToZh => ("en", "zh"),
            Direction::ZhToEn => ("zh", "en"),
        }
    }

    /// True when `tok` still reads as source-language content.
    fn leaks(self, tok: &Token) -> bool {
        match self {
            Direction::EnToZh => tok.surface.chars().any(|c| c.is_ascii_alphabetic()),
            Direction::ZhToEn => tok.lang == LanguageTag::Mandarin,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    GlobalTranslation,
    PartialTranslation,
}

/// Half-open token range `[start, end)` over the normalized chosen tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn range(self) -> Range<usize> {
        self.0..self.1
    }

    pub fn len(self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStrategy {
    pub kind: StrategyKind,
    pub direction: Direction,
    pub spans: Vec<Span>,
}

impl RejectionStrategy {
    pub fn global(direction: Direction) -> Self {
        RejectionStrategy {
            kind: StrategyKind::GlobalTranslation,
            direction,
            spans: Vec::new(),
        }
    }

    pub fn partial(direction: Direction, spans: Vec<Span>) -> Self {
        RejectionStrategy {
            kind: StrategyKind::PartialTranslation,
            direction,
            spans,
        }
    }

    /// Checks the strategy against the chosen tokens it will be applied to.
    pub fn validate(&self, tokens: &[Token]) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStrategy(m));
        match self.kind {
            StrategyKind::GlobalTranslation => {
                if !self.spans.is_empty() {
                    return bad("global translation takes no spans".into());
                }
                if !tokens.iter().any(|t| t.lang == self.direction.source()) {
                    return bad(format!("no {:?} tokens to translate", self.direction.source()));
                }
            }
            StrategyKind::PartialTranslation => {
                if self.spans.is_empty() {
                    return bad("partial translation needs at least one span".into());
                }
                let mut sorted = self.spans.clone();
                sorted.sort();
                let mut covered = 0;
                let mut prev_end = 0;
                for s in &sorted {
                    if s.is_empty() || s.1 > tokens.len() {
                        return bad(format!("span {s:?} out of range for {} tokens", tokens.len()));
                    }
                    if s.0 < prev_end {
                        return bad(format!("span {s:?} overlaps another span"));
                    }
                    if tokens[s.range()].iter().any(|t| t.lang != self.direction.source()) {
                        return bad(format!("span {s:?} is not all {:?}", self.direction.source()));
                    }
                    covered += s.len();
                    prev_end = s.1;
                }
                if covered >= tokens.len() {
                    return bad("spans must cover a strict subset of the utterance".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub global_fraction: f64,
    pub max_spans: usize,
    pub max_span_len: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            global_fraction: 0.8,
            max_spans: 1,
            max_span_len: 3,
        }
    }
}

/// Directions with at least one source-language token in `tokens`.
pub fn applicable_directions(tokens: &[Token]) -> Vec<Direction> {
    let p = language_profile(&TokenSequence {
        tokens: tokens.to_vec(),
        source: String::new(),
    });
    let mut out = Vec::with_capacity(2);
    if p.english > 0 {
        out.push(Direction::EnToZh);
    }
    if p.mandarin > 0 {
        out.push(Direction::ZhToEn);
    }
    out
}

/// Draws global vs partial, then a direction uniformly among the applicable
/// ones, then (for partial) spans of 1..=max_span_len same-language tokens.
pub fn sample_strategy<R: Rng + ?Sized>(
    rng: &mut R,
    tokens: &[Token],
    config: &StrategyConfig,
) -> Result<RejectionStrategy> {
    let global = rng.gen::<f64>() < config.global_fraction;
    let directions = applicable_directions(tokens);
    let direction = *directions
        .choose(rng)
        .ok_or_else(|| Error::NotMixed(tokens.iter().map(|t| t.surface.as_str()).collect()))?;
    if global {
        return Ok(RejectionStrategy::global(direction));
    }

    let source = direction.source();
    let starts: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i].lang == source).collect();
    let mut spans: Vec<Span> = Vec::new();
    // A bounded number of draws; overlapping candidates are discarded.
    for _ in 0..config.max_spans.max(1) * 4 {
        if spans.len() == config.max_spans.max(1) {
            break;
        }
        let start = *starts.choose(rng).expect("direction has source tokens");
        let want = rng.gen_range(1..=config.max_span_len.max(1));
        let mut end = start;
        while end < tokens.len() && end - start < want && tokens[end].lang == source {
            end += 1;
        }
        let cand = Span(start, end);
        if spans.iter().all(|s| cand.1 <= s.0 || cand.0 >= s.1) {
            spans.push(cand);
        }
    }
    spans.sort();
    Ok(RejectionStrategy::partial(direction, spans))
}

/// Translates text between English and Mandarin.
pub trait Translator: Send + Sync {
    /// `context` is the full utterance when only a span is being translated.
    fn translate(&self, text: &str, direction: Direction, context: Option<&str>) -> Result<String>;
}

/// Calls `translator` until its output carries no source-language content,
/// up to `max_attempts` times.
pub fn translate_checked(
    translator: &dyn Translator,
    text: &str,
    direction: Direction,
    context: Option<&str>,
    max_attempts: usize,
) -> Result<String> {
    let attempts = max_attempts.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        last = translator.translate(text, direction, context)?;
        let toks = tokenize_raw(&last);
        if !toks.is_empty() && !toks.tokens.iter().any(|t| direction.leaks(t)) {
            return Ok(last);
        }
    }
    Err(Error::TranslatorViolation {
        direction,
        attempts,
        output: last,
    })
}

/// Deterministic phrase-table translator. Longest phrase wins; words missing
/// from the table get a stable placeholder derived from their spelling.
#[derive(Debug, Clone)]
pub struct DictionaryTranslator {
    en_to_zh: BTreeMap<Vec<String>, String>,
    zh_to_en: BTreeMap<String, String>,
    max_en_phrase: usize,
    max_zh_phrase: usize,
}

const PLACEHOLDER_HANZI: [char; 16] = [
    '阿', '巴', '卡', '达', '拉', '马', '纳', '帕', '萨', '塔', '瓦', '雅', '扎', '贝', '多', '米',
];
const PLACEHOLDER_SYLLABLES: [&str; 16] = [
    "ba", "ka", "da", "la", "ma", "na", "pa", "sa", "ta", "wa", "ya", "za", "ri", "mo", "lu", "ke",
];

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl DictionaryTranslator {
    /// Parses `english<TAB>mandarin` lines; `#` starts a comment line.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut en_to_zh = BTreeMap::new();
        let mut zh_to_en = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (en, zh) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("dictionary line {}: expected a tab", n + 1)))?;
            let en_key: Vec<String> = tokenize_raw(en).tokens.into_iter().map(|t| t.surface).collect();
            let zh_key: String = tokenize_raw(zh).surfaces().concat();
            if en_key.is_empty() || zh_key.is_empty() {
                return Err(Error::Config(format!("dictionary line {}: empty side", n + 1)));
            }
            zh_to_en.entry(zh_key).or_insert_with(|| en.trim().to_lowercase());
            en_to_zh.entry(en_key).or_insert_with(|| zh.trim().to_string());
        }
        let max_en_phrase = en_to_zh.keys().map(Vec::len).max().unwrap_or(1);
        let max_zh_phrase = zh_to_en.keys().map(|k| k.chars().count()).max().unwrap_or(1);
        Ok(DictionaryTranslator {
            en_to_zh,
            zh_to_en,
            max_en_phrase,
            max_zh_phrase,
        })
    }

    pub fn bundled() -> Self {
        Self::from_tsv(DEFAULT_DICTIONARY).expect("bundled dictionary parses")
    }

    fn en_to_zh(&self, words: &[String]) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < words.len() {
            let hit = (1..=self.max_en_phrase.min(words.len() - i))
                .rev()
                .find_map(|n| self.en_to_zh.get(&words[i..i + n]).map(|zh| (n, zh)));
            match hit {
                Some((n, zh)) => {
                    out.push_str(zh);
                    i += n;
                }
                None => {
                    let h = fnv1a(&words[i]);
                    out.push(PLACEHOLDER_HANZI[(h & 0xF) as usize]);
                    out.push(PLACEHOLDER_HANZI[((h >> 4) & 0xF) as usize]);
                    i += 1;
                }
            }
        }
        out
    }

    fn zh_to_en(&self, chars: &[String]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let hit = (1..=self.max_zh_phrase.min(chars.len() - i))
                .rev()
                .find_map(|n| self.zh_to_en.get(&chars[i..i + n].concat()).map(|en| (n, en)));
            match hit {
                Some((n, en)) => {
                    words.push(en.clone());
                    i += n;
                }
                None => {
                    let h = fnv1a(&chars[i]);
                    words.push(format!(
                        "{}{}",
                        PLACEHOLDER_SYLLABLES[(h & 0xF) as usize],
                        PLACEHOLDER_SYLLABLES[((h >> 4) & 0xF) as usize]
                    ));
                    i += 1;
                }
            }
        }
        words.join(" ")
    }
}

impl Translator for DictionaryTranslator {
    fn translate(&self, text: &str, direction: Direction, _context: Option<&str>) -> Result<String> {
        let tokens = tokenize_raw(text).tokens;
        // Tokens of the target language (and unknown scripts) pass through.
        let mut out: Vec<String> = Vec::new();
        let mut run: Vec<String> = Vec::new();
        let flush = |run: &mut Vec<String>, out: &mut Vec<String>| {
            if !run.is_empty() {
                out.push(match direction {
                    Direction::EnToZh => self.en_to_zh(run),
                    Direction::ZhToEn => self.zh_to_en(run),
                });
                run.clear();
            }
        };
        for t in tokens {
            if t.lang == direction.source() {
                run.push(t.surface);
            } else {
                flush(&mut run, &mut out);
                out.push(t.surface);
            }
        }
        flush(&mut run, &mut out);
        Ok(out.join(if direction == Direction::EnToZh { "" } else { " " }))
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    source_lang: &'a str,
    target_lang: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<&'a str>,
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

/// Wire client for an external translation service.
#[derive(Debug, Clone)]
pub struct HttpTranslator {
    pub endpoint: Endpoint,
}

impl HttpTranslator {
    pub fn new(endpoint: Endpoint) -> Self {
        HttpTranslator { endpoint }
    }

    /// Endpoint from `CSALIGN_TRANSLATOR_URL`, token from `CSALIGN_TRANSLATOR_TOKEN`.
    pub fn from_env() -> Option<Self> {
        Endpoint::from_env(TRANSLATOR_URL_ENV, TRANSLATOR_TOKEN_ENV).map(Self::new)
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, text: &str, direction: Direction, context: Option<&str>) -> Result<String> {
        let (source_lang, target_lang) = direction.codes();
        let req = TranslateRequest {
            text,
            source_lang,
            target_lang,
            context,
        };
        self.endpoint
            .post_json::<_, TranslateResponse>(&req)
            .map(|r| r.text)
            .map_err(Error::Translator)
    }
}

/// Maximal runs of consecutive source-language tokens, as token index ranges.
fn source_runs(tokens: &[LocatedToken], source: LanguageTag) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, t) in tokens.iter().enumerate() {
        match (t.token.lang == source, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..tokens.len());
    }
    runs
}

/// Whether English inserted next to `chars` would fuse with a word once
/// punctuation is stripped. Punctuation directly adjacent is looked through.
fn needs_space(mut chars: impl Iterator<Item = char>) -> bool {
    chars
        .find(|c| !is_punctuation(*c))
        .is_some_and(|c| c.is_alphanumeric() || is_cjk(c))
}

pub const DEFAULT_TRANSLATOR_ATTEMPTS: usize = 3;

/// Applies `strategy` to the raw chosen transcript. Text outside the
/// translated ranges (punctuation and spacing included) is kept byte for byte.
pub fn make_rejected(
    chosen: &str,
    strategy: &RejectionStrategy,
    translator: &dyn Translator,
    max_attempts: usize,
) -> Result<String> {
    let located = tokenize_located(chosen);
    let tokens: Vec<Token> = located.iter().map(|l| l.token.clone()).collect();
    if !language_profile(&TokenSequence {
        tokens: tokens.clone(),
        source: String::new(),
    })
    .is_mixed()
    {
        return Err(Error::NotMixed(chosen.to_string()));
    }
    strategy.validate(&tokens)?;

    let ranges: Vec<Range<usize>> = match strategy.kind {
        StrategyKind::GlobalTranslation => source_runs(&located, strategy.direction.source()),
        StrategyKind::PartialTranslation => {
            let mut r: Vec<_> = strategy.spans.iter().map(|s| s.range()).collect();
            r.sort_by_key(|r| r.start);
            r
        }
    };
    let context = (strategy.kind == StrategyKind::PartialTranslation).then_some(chosen);

    let mut rejected = chosen.to_string();
    for tr in ranges.iter().rev() {
        let bytes = located[tr.start].raw_range.start..located[tr.end - 1].raw_range.end;
        let mut text = translate_checked(translator, &chosen[bytes.clone()], strategy.direction, context, max_attempts)?
            .trim()
            .to_string();
        if strategy.direction == Direction::ZhToEn {
            if needs_space(chosen[..bytes.start].chars().rev()) {
                text.insert(0, ' ');
            }
            if needs_space(chosen[bytes.end..].chars()) {
                text.push(' ');
            }
        }
        rejected.replace_range(bytes, &text);
    }

    verify_rejected(&tokens, &rejected, strategy)?;
    Ok(rejected)
}

/// Post-conditions of [`make_rejected`], checked on normalized tokens.
pub fn verify_rejected(chosen: &[Token], rejected: &str, strategy: &RejectionStrategy) -> Result<()> {
    let rej = tokenize_raw(rejected).tokens;
    let surf = |t: &[Token]| t.iter().map(|t| t.surface.clone()).collect::<Vec<_>>();
    if surf(chosen) == surf(&rej) {
        return Err(Error::DegenerateRejection);
    }
    match strategy.kind {
        StrategyKind::GlobalTranslation => {
            if rej.iter().any(|t| strategy.direction.leaks(t)) {
                return Err(Error::InvalidStrategy(
                    "global translation left source-language tokens behind".into(),
                ));
            }
        }
        StrategyKind::PartialTranslation => {
            if !outside_spans_identical(chosen, &rej, &strategy.spans) {
                return Err(Error::InvalidStrategy(
                    "partial translation changed tokens outside its spans".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Checks that `rejected` equals `chosen` with each span swapped for some
/// (possibly different-length) replacement, matching the untouched segments
/// between spans in order.
pub fn outside_spans_identical(chosen: &[Token], rejected: &[Token], spans: &[Span]) -> bool {
    let mut spans = spans.to_vec();
    spans.sort();
    let mut segments: Vec<&[Token]> = Vec::new();
    let mut prev = 0;
    for s in &spans {
        segments.push(&chosen[prev..s.0]);
        prev = s.1;
    }
    segments.push(&chosen[prev..]);

    let eq = |a: &[Token], b: &[Token]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.surface == y.surface);
    let (first, rest) = segments.split_first().expect("at least one segment");
    let (last, middle) = rest.split_last().expect("at least one span");
    if rejected.len() < first.len() + last.len() {
        return false;
    }
    if !eq(first, &rejected[..first.len()]) || !eq(last, &rejected[rejected.len() - last.len()..]) {
        return false;
    }
    // Middle segments must appear in order, each preceded by a non-empty replacement.
    let mut pos = first.len();
    let end = rejected.len() - last.len();
    for seg in middle {
        let found = (pos + 1..=end.saturating_sub(seg.len())).find(|&p| eq(seg, &rejected[p..p + seg.len()]));
        match found {
            Some(p) => pos = p + seg.len(),
            None => return false,
        }
    }
    pos < end
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    pub english_prompts: Vec<String>,
    pub mandarin_prompts: Vec<String>,
    pub eval_prompt: String,
}

const TRANSCRIPTION_CUES: [&str; 17] = [
    "transcri", "write", "written", "text", "type out", "what is being said", "verbatim", "转写", "转录",
    "说什么", "说了什么", "写下", "写出", "文字", "听写", "记录", "转成",
];

impl PromptPool {
    /// Parses a pool file with `[english]`, `[mandarin]` and `[eval]` sections.
    pub fn parse(text: &str) -> Result<Self> {
        let mut english = Vec::new();
        let mut mandarin = Vec::new();
        let mut eval = Vec::new();
        let mut section: Option<&mut Vec<String>> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[english]" => section = Some(&mut english),
                "[mandarin]" => section = Some(&mut mandarin),
                "[eval]" => section = Some(&mut eval),
                _ => match section.as_deref_mut() {
                    Some(list) => list.push(line.to_string()),
                    None => {
                        return Err(Error::Config(format!("prompt pool line {}: outside any section", n + 1)));
                    }
                },
            }
        }
        if eval.len() != 1 {
            return Err(Error::Config(format!("prompt pool needs exactly one eval prompt, found {}", eval.len())));
        }
        let pool = PromptPool {
            english_prompts: english,
            mandarin_prompts: mandarin,
            eval_prompt: eval.remove(0),
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_PROMPTS).expect("bundled prompt pool is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("english", &self.english_prompts), ("mandarin", &self.mandarin_prompts)] {
            if list.is_empty() {
                return Err(Error::EmptyPool(if name == "english" { "english prompt" } else { "mandarin prompt" }));
            }
            let mut seen = HashSet::new();
            for p in list.iter() {
                if !seen.insert(p.as_str()) {
                    return Err(Error::Config(format!("duplicate {name} prompt: {p}")));
                }
                if *p == self.eval_prompt {
                    return Err(Error::Config(format!("eval prompt appears in the {name} pool")));
                }
                let lower = p.to_lowercase();
                if !TRANSCRIPTION_CUES.iter().any(|c| lower.contains(c)) {
                    return Err(Error::Config(format!("{name} prompt does not ask for a transcription: {p}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.english_prompts.len() + self.mandarin_prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.english_prompts.iter().chain(&self.mandarin_prompts).map(String::as_str)
    }
}

/// Uniform draw over both training lists.
pub fn sample_prompt<'a, R: Rng + ?Sized>(pool: &'a PromptPool, rng: &mut R) -> &'a str {
    let i = rng.gen_range(0..pool.len());
    let n_en = pool.english_prompts.len();
    if i < n_en {
        &pool.english_prompts[i]
    } else {
        &pool.mandarin_prompts[i - n_en]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: String,
    pub audio_ref: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub strategy: RejectionStrategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub id: String,
    pub kind: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<PreferencePair>,
    pub rejects: Vec<RejectRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGenConfig {
    pub strategy: StrategyConfig,
    pub translator_attempts: usize,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        PairGenConfig {
            strategy: StrategyConfig::default(),
            translator_attempts: DEFAULT_TRANSLATOR_ATTEMPTS,
        }
    }
}

/// Builds one pair from a manifest row with an explicit strategy.
pub fn build_pair(
    row: &ManifestRow,
    strategy: RejectionStrategy,
    prompt: &str,
    seed: u64,
    translator: &dyn Translator,
    config: &PairGenConfig,
) -> Result<PreferencePair> {
    let rejected = make_rejected(&row.transcript, &strategy, translator, config.translator_attempts)?;
    Ok(PreferencePair {
        id: row.id.clone(),
        audio_ref: row.audio_ref.clone(),
        prompt: prompt.to_string(),
        chosen: row.transcript.clone(),
        rejected,
        strategy,
        seed,
    })
}

fn build_row(
    row: &ManifestRow,
    translator: &dyn Translator,
    pool: &PromptPool,
    seed: u64,
    config: &PairGenConfig,
) -> Result<PreferencePair> {
    let row_seed = derive_seed(seed, &row.id);
    let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
    let tokens = tokenize_raw(&row.transcript).tokens;
    if !language_profile(&TokenSequence {
        tokens: tokens.clone(),
        source: String::new(),
    })
    .is_mixed()
    {
        return Err(Error::NotMixed(normalize(&row.transcript)));
    }
    let strategy = sample_strategy(&mut rng, &tokens, &config.strategy)?;
    let prompt = sample_prompt(pool, &mut rng).to_string();
    build_pair(row, strategy, &prompt, row_seed, translator, config)
}

/// One pair per code-switched row. Failures are collected as reject records;
/// output order follows the manifest regardless of parallelism.
pub fn build_pairs(
    manifest: &[ManifestRow],
    translator: &dyn Translator,
    pool: &PromptPool,
    seed: u64,
    config: &PairGenConfig,
) -> PairBatch {
    let results: Vec<Result<PreferencePair>> = manifest
        .par_iter()
        .map(|row| build_row(row, translator, pool, seed, config))
        .collect();
    let mut batch = PairBatch::default();
    for (row, res) in manifest.iter().zip(results) {
        match res {
            Ok(pair) => batch.pairs.push(pair),
            Err(e) => {
                log::warn!("skipping row {}: {e}", row.id);
                batch.rejects.push(RejectRecord {
                    id: row.id.clone(),
                    kind: e.kind().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    batch
}
