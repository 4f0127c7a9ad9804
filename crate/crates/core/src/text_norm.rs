//! Text normalization and mixed English/Mandarin tokenization.
//!
//! Every scoring path goes through the same two steps: [`normalize`] (lowercase,
//! strip punctuation, collapse whitespace) and [`tokenize_mixed`] (one token per
//! CJK ideograph, one token per Latin word). Both the reference and the
//! hypothesis are treated identically, so the metric never depends on which
//! side carried the punctuation.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Placeholder marking the content slot in a preamble template.
pub const CONTENT_SLOT: &str = "{content}";

/// Default model-output preamble templates, one per line.
pub const DEFAULT_PREAMBLES: &str = include_str!("../../../config/preambles.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LanguageTag {
    Mandarin,
    English,
    Other,
}

impl LanguageTag {
    /// Tag a normalized token by its code points.
    pub fn of(surface: &str) -> Self {
        let mut chars = surface.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if is_cjk(c) => LanguageTag::Mandarin,
            (Some(_), _) if surface.chars().all(|c| c.is_ascii_alphanumeric()) => {
                LanguageTag::English
            }
            _ => LanguageTag::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lang: LanguageTag,
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Self {
        let surface = surface.into();
        let lang = LanguageTag::of(&surface);
        Token { surface, lang }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Renders the tokens back to text: consecutive non-CJK tokens are
    /// separated by a space, CJK tokens attach without a separator.
    pub fn joined(&self) -> String {
        let mut out = String::new();
        let mut prev_spaced = false;
        for tok in &self.tokens {
            let spaced = tok.lang != LanguageTag::Mandarin;
            if !out.is_empty() && spaced && prev_spaced {
                out.push(' ');
            }
            out.push_str(&tok.surface);
            prev_spaced = spaced;
        }
        out
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }
}

/// Token counts per language, in (Mandarin, English, Other) order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub mandarin: usize,
    pub english: usize,
    pub other: usize,
}

impl LanguageProfile {
    pub fn total(&self) -> usize {
        self.mandarin + self.english + self.other
    }

    /// Both Mandarin and English are present.
    pub fn is_mixed(&self) -> bool {
        self.mandarin > 0 && self.english > 0
    }

    pub fn count(&self, lang: LanguageTag) -> usize {
        match lang {
            LanguageTag::Mandarin => self.mandarin,
            LanguageTag::English => self.english,
            LanguageTag::Other => self.other,
        }
    }
}

/// CJK Unified Ideographs, extensions A through H, and the compatibility block.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x2F800..=0x2FA1F
        | 0x30000..=0x323AF)
}

/// Unicode punctuation (all `P*` categories) plus fullwidth-form symbols.
pub fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    match get_general_category(c) {
        ConnectorPunctuation | DashPunctuation | OpenPunctuation | ClosePunctuation
        | InitialPunctuation | FinalPunctuation | OtherPunctuation => true,
        // Halfwidth and fullwidth forms that are neither letters nor digits.
        _ => matches!(c as u32, 0xFF00..=0xFF65 | 0xFFE0..=0xFFEE) && !c.is_alphanumeric(),
    }
}

/// Lowercases, removes punctuation (apostrophes included), collapses
/// whitespace runs to one space and trims.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if is_punctuation(c) {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// Splits normalized text into Mandarin character tokens and whitespace/CJK
/// delimited word tokens.
pub fn tokenize_mixed(normalized: &str) -> TokenSequence {
    let tokens = scan_words(normalized)
        .into_iter()
        .map(|r| Token::new(&normalized[r]))
        .collect();
    TokenSequence {
        tokens,
        source: normalized.to_string(),
    }
}

/// `normalize` followed by `tokenize_mixed`, keeping `raw` as the source.
pub fn tokenize_raw(raw: &str) -> TokenSequence {
    let mut seq = tokenize_mixed(&normalize(raw));
    seq.source = raw.to_string();
    seq
}

pub fn language_profile(seq: &TokenSequence) -> LanguageProfile {
    let mut p = LanguageProfile::default();
    for t in &seq.tokens {
        match t.lang {
            LanguageTag::Mandarin => p.mandarin += 1,
            LanguageTag::English => p.english += 1,
            LanguageTag::Other => p.other += 1,
        }
    }
    p
}

/// Byte ranges of the word units of `text`: each CJK ideograph alone, and each
/// maximal run of other non-whitespace characters.
fn scan_words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_cjk(c) {
            if let Some(start) = run.take() {
                out.push(start..i);
            }
            if is_cjk(c) {
                out.push(i..i + c.len_utf8());
            }
        } else if run.is_none() {
            run = Some(i);
        }
    }
    if let Some(start) = run {
        out.push(start..text.len());
    }
    out
}

/// A token of normalized text together with where it came from in the raw
/// string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocatedToken {
    pub token: Token,
    /// Byte range in the raw text from the first to the last character that
    /// survives normalization. Leading/trailing punctuation stays outside.
    pub raw_range: Range<usize>,
}

/// Tokenizes raw text while keeping each token's byte range in `raw`.
///
/// The token surfaces are exactly `tokenize_raw(raw)`; raw segments that
/// normalize to nothing (bare punctuation) produce no token.
pub fn tokenize_located(raw: &str) -> Vec<LocatedToken> {
    scan_words(raw)
        .into_iter()
        .filter_map(|seg| {
            let text = &raw[seg.clone()];
            let surface = normalize(text);
            if surface.is_empty() {
                return None;
            }
            let mut kept = text
                .char_indices()
                .filter(|&(_, c)| !is_punctuation(c));
            let (first, _) = kept.next()?;
            let (last, last_c) = kept.last().unwrap_or((first, text[first..].chars().next()?));
            let start = seg.start + first;
            let end = seg.start + last + last_c.len_utf8();
            Some(LocatedToken {
                token: Token::new(surface),
                raw_range: start..end,
            })
        })
        .collect()
}

/// A model-output preamble such as `The original content of this audio is: {content}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreambleTemplate {
    prefix: String,
    suffix: Option<String>,
}

impl PreambleTemplate {
    /// A template with a `{content}` slot, or a literal prefix when the slot is absent.
    pub fn parse(line: &str) -> Result<Self> {
        let line = line.trim();
        if line.is_empty() {
            return Err(Error::Config("empty preamble template".into()));
        }
        match line.find(CONTENT_SLOT) {
            Some(at) => {
                let suffix = &line[at + CONTENT_SLOT.len()..];
                if suffix.contains(CONTENT_SLOT) {
                    return Err(Error::Config(format!(
                        "preamble template has more than one content slot: {line}"
                    )));
                }
                Ok(PreambleTemplate {
                    prefix: line[..at].to_string(),
                    suffix: Some(suffix.to_string()),
                })
            }
            None => Ok(PreambleTemplate {
                prefix: line.to_string(),
                suffix: None,
            }),
        }
    }

    fn extract<'a>(&self, raw: &'a str) -> Option<&'a str> {
        let text = raw.trim();
        let after = strip_prefix_ci(text, self.prefix.trim_end())?;
        let content = match self.suffix.as_deref().map(str::trim) {
            Some(suffix) if !suffix.is_empty() => strip_suffix_ci(after, suffix)?,
            _ => after,
        };
        Some(unquote(content.trim()))
    }
}

/// Parses a template file: one template per line, `#` starts a comment line.
pub fn parse_preambles(text: &str) -> Result<Vec<PreambleTemplate>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PreambleTemplate::parse)
        .collect()
}

pub fn default_preambles() -> Vec<PreambleTemplate> {
    parse_preambles(DEFAULT_PREAMBLES).expect("bundled preamble templates parse")
}

/// Returns the content slot of the first matching template, or `raw` unchanged.
pub fn strip_model_preamble(raw: &str, patterns: &[PreambleTemplate]) -> String {
    patterns
        .iter()
        .find_map(|p| p.extract(raw))
        .unwrap_or(raw)
        .to_string()
}

fn chars_eq_ci(a: char, b: char) -> bool {
    a == b || a.to_lowercase().eq(b.to_lowercase())
}

fn strip_prefix_ci<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    let mut it = text.char_indices();
    for p in prefix.chars() {
        let (_, c) = it.next()?;
        if !chars_eq_ci(c, p) {
            return None;
        }
    }
    Some(it.as_str())
}

fn strip_suffix_ci<'a>(text: &'a str, suffix: &str) -> Option<&'a str> {
    let mut it = text.char_indices();
    for p in suffix.chars().rev() {
        let (_, c) = it.next_back()?;
        if !chars_eq_ci(c, p) {
            return None;
        }
    }
    Some(it.as_str())
}

fn unquote(s: &str) -> &str {
    const PAIRS: [(char, char); 5] = [
        ('\'', '\''),
        ('"', '"'),
        ('\u{201C}', '\u{201D}'),
        ('\u{2018}', '\u{2019}'),
        ('\u{300C}', '\u{300D}'),
    ];
    for (open, close) in PAIRS {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            return inner.trim();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surfaces(s: &str) -> Vec<String> {
        tokenize_mixed(s).tokens.into_iter().map(|t| t.surface).collect()
    }

    #[test]
    fn normalize_mixed_sentence() {
        assert_eq!(
            normalize("What grade are you? 真的很好哎，真的前途无限呀。"),
            "what grade are you 真的很好哎真的前途无限呀"
        );
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("Valentine's Day"), "valentines day");
    }

    #[test]
    fn normalize_collapses_and_trims() {
        assert_eq!(normalize("  Hello \t\n  World  "), "hello world");
        assert_eq!(normalize("（你好）！ ， "), "你好");
        assert_eq!(normalize("“Quoted” ‘text’ ok"), "quoted text ok");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            surfaces("我住 temasek poly 那边"),
            ["我", "住", "temasek", "poly", "那", "边"]
        );
        assert_eq!(surfaces("abc"), ["abc"]);
        assert_eq!(surfaces("它s"), ["它", "s"]);
        assert!(surfaces("").is_empty());
    }

    #[test]
    fn profile_counts() {
        let p = language_profile(&tokenize_mixed("我住 temasek poly 那边"));
        assert_eq!((p.mandarin, p.english, p.other), (4, 2, 0));
        assert_eq!(language_profile(&tokenize_mixed("")), LanguageProfile::default());
        let p = language_profile(&tokenize_mixed("pursue a healthy lifestyle"));
        assert_eq!((p.mandarin, p.english, p.other), (0, 4, 0));
    }

    #[test]
    fn non_latin_words_are_other() {
        let seq = tokenize_mixed("café ひらがな 2024");
        let langs: Vec<_> = seq.tokens.iter().map(|t| t.lang).collect();
        assert_eq!(
            langs,
            [LanguageTag::Other, LanguageTag::Other, LanguageTag::English]
        );
    }

    #[test]
    fn joined_attaches_cjk_tokens() {
        let s = normalize("我住 Temasek Poly 那边, ok?");
        assert_eq!(tokenize_mixed(&s).joined(), "我住temasek poly那边ok");
    }

    #[test]
    fn preamble_examples() {
        let pats = default_preambles();
        assert_eq!(
            strip_model_preamble("The original content of this audio is: 'hello 你好'", &pats),
            "hello 你好"
        );
        assert_eq!(strip_model_preamble("hello 你好", &pats), "hello 你好");
        assert_eq!(
            strip_model_preamble("The original content of this audio is: ''", &pats),
            ""
        );
    }

    #[test]
    fn preamble_match_is_case_insensitive_on_template() {
        let pats = default_preambles();
        assert_eq!(
            strip_model_preamble("THE ORIGINAL CONTENT OF THIS AUDIO IS: Hello 你好", &pats),
            "Hello 你好"
        );
    }

    #[test]
    fn preamble_with_suffix_and_literal_prefix() {
        let pats = parse_preambles("# comment\nTranscript: [{content}]\nSure!\n").unwrap();
        assert_eq!(strip_model_preamble("transcript: [我住 那边]", &pats), "我住 那边");
        assert_eq!(strip_model_preamble("Sure! hello", &pats), "hello");
        assert_eq!(strip_model_preamble("transcript: 我住", &pats), "transcript: 我住");
        assert!(PreambleTemplate::parse("{content} and {content}").is_err());
    }

    #[test]
    fn located_tokens_exclude_attached_punctuation() {
        let raw = "基本每天就是做题刷题。It's so boring and dull.";
        let located = tokenize_located(raw);
        let surf: Vec<_> = located.iter().map(|l| l.token.surface.as_str()).collect();
        assert_eq!(surf, tokenize_raw(raw).surfaces());
        let its = located.iter().find(|l| l.token.surface == "its").unwrap();
        assert_eq!(&raw[its.raw_range.clone()], "It's");
        let dull = located.last().unwrap();
        assert_eq!(&raw[dull.raw_range.clone()], "dull");
    }

    fn mixed_text() -> impl Strategy<Value = String> {
        let pieces = prop::sample::select(vec![
            "我", "住", "那", "边", "hello", "World", "it's", "，", "。", "?", " ", "  ", "\t",
            "Ａ", "！", "(", ")", "42", "é", "—", "「", "」", "s",
        ]);
        prop::collection::vec(pieces, 0..24).prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in any::<String>()) {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
        }

        #[test]
        fn tokens_satisfy_invariants(s in mixed_text()) {
            let n = normalize(&s);
            let seq = tokenize_mixed(&n);
            for t in &seq.tokens {
                prop_assert!(!t.surface.is_empty());
                prop_assert_eq!(t.surface.to_lowercase(), t.surface.clone());
                prop_assert!(!t.surface.chars().any(is_punctuation));
                match t.lang {
                    LanguageTag::Mandarin => prop_assert_eq!(t.surface.chars().count(), 1),
                    _ => prop_assert!(!t.surface.chars().any(is_cjk)),
                }
            }
            let cjk = n.chars().filter(|&c| is_cjk(c)).count();
            prop_assert_eq!(language_profile(&seq).mandarin, cjk);
            prop_assert_eq!(language_profile(&seq).total(), seq.len());
        }

        #[test]
        fn joined_matches_normalized_up_to_whitespace(s in mixed_text()) {
            let n = normalize(&s);
            let squash = |x: &str| x.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(squash(&tokenize_mixed(&n).joined()), squash(&n));
        }

        #[test]
        fn located_tokens_agree_with_tokenize_raw(s in mixed_text()) {
            let located: Vec<String> =
                tokenize_located(&s).into_iter().map(|l| l.token.surface).collect();
            let plain: Vec<String> =
                tokenize_raw(&s).tokens.into_iter().map(|t| t.surface).collect();
            prop_assert_eq!(located, plain);
        }
    }
}
