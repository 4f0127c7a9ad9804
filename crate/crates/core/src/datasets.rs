//! Code-switching manifest construction from corpus utterances, and the
//! sample-exact WAV concatenation that backs concatenated rows.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text_norm::{language_profile, tokenize_raw};

pub const DEFAULT_MAX_DURATION: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LangTag {
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "MIX")]
    Mix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub conversation_id: String,
    pub speaker_id: String,
    pub lang_tag: LangTag,
    pub text: String,
    pub audio_path: String,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub sample_rate: u32,
}

impl Utterance {
    /// Positive duration and a language tag that agrees with the transcript.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidRow {
            row_id: self.id.clone(),
            reason,
        };
        if !(self.duration > 0.0) {
            return Err(invalid(format!("duration must be positive, got {}", self.duration)));
        }
        let p = language_profile(&tokenize_raw(&self.text));
        let consistent = match self.lang_tag {
            LangTag::Mix => p.is_mixed(),
            LangTag::En => p.english > 0 && p.mandarin == 0,
            LangTag::Cn => p.mandarin > 0 && p.english == 0,
        };
        if !consistent {
            return Err(invalid(format!(
                "tag {:?} disagrees with transcript ({} Mandarin, {} English tokens)",
                self.lang_tag, p.mandarin, p.english
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestSource {
    NaturalMix,
    ConcatIntraCorpus,
    ConcatCrossCorpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub audio_ref: String,
    pub transcript: String,
    pub source: ManifestSource,
    pub component_ids: Vec<String>,
    /// Seconds, including inter-clip gaps.
    pub duration: f64,
}

fn gap_seconds(gap_ms: u32) -> f64 {
    f64::from(gap_ms) / 1000.0
}

fn make_row(parts: &[&Utterance], source: ManifestSource, id: String, gap_ms: u32) -> ManifestRow {
    let gaps = parts.len().saturating_sub(1) as f64 * gap_seconds(gap_ms);
    ManifestRow {
        audio_ref: format!("audio/{}.wav", id.replace(['/', '\\'], "_")),
        id,
        transcript: parts.iter().map(|u| u.text.trim()).collect::<Vec<_>>().join(" "),
        source,
        component_ids: parts.iter().map(|u| u.id.clone()).collect(),
        duration: parts.iter().map(|u| u.duration).sum::<f64>() + gaps,
    }
}

/// Utterances grouped by conversation, conversations in first-seen order.
fn by_conversation(utterances: &[Utterance]) -> Vec<Vec<&Utterance>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Utterance>> = HashMap::new();
    for u in utterances {
        groups
            .entry(&u.conversation_id)
            .or_insert_with(|| {
                order.push(&u.conversation_id);
                Vec::new()
            })
            .push(u);
    }
    order.into_iter().map(|c| groups.remove(c).unwrap_or_default()).collect()
}

/// Maximal runs of consecutive MIX utterances per conversation, greedily cut
/// so each group stays within `max_duration`. A single utterance longer than
/// the cap is emitted alone and reported in the returned warnings.
pub fn group_mix_runs(
    utterances: &[Utterance],
    max_duration: f64,
    gap_ms: u32,
) -> (Vec<ManifestRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let gap = gap_seconds(gap_ms);
    for conv in by_conversation(utterances) {
        for run in conv.split(|u| u.lang_tag != LangTag::Mix).filter(|r| !r.is_empty()) {
            let mut group: Vec<&Utterance> = Vec::new();
            let mut dur = 0.0;
            for &u in run {
                let added = if group.is_empty() { u.duration } else { dur + gap + u.duration };
                if !group.is_empty() && added > max_duration {
                    rows.push(mix_row(&group, gap_ms));
                    group.clear();
                }
                dur = if group.is_empty() { u.duration } else { dur + gap + u.duration };
                group.push(u);
                if group.len() == 1 && u.duration > max_duration {
                    let w = format!(
                        "utterance {} lasts {:.2} s, over the {:.2} s cap; emitted alone",
                        u.id, u.duration, max_duration
                    );
                    log::warn!("{w}");
                    warnings.push(w);
                }
            }
            if !group.is_empty() {
                rows.push(mix_row(&group, gap_ms));
            }
        }
    }
    (rows, warnings)
}

fn mix_row(group: &[&Utterance], gap_ms: u32) -> ManifestRow {
    let id = group.iter().map(|u| u.id.as_str()).collect::<Vec<_>>().join("+");
    make_row(group, ManifestSource::NaturalMix, id, gap_ms)
}

/// Greedy left-to-right pairing of adjacent EN/CN utterances within a
/// conversation; each utterance is used at most once.
pub fn pair_en_cn(utterances: &[Utterance], gap_ms: u32) -> Vec<ManifestRow> {
    let mut rows = Vec::new();
    for conv in by_conversation(utterances) {
        let mut i = 0;
        while i + 1 < conv.len() {
            let (a, b) = (conv[i], conv[i + 1]);
            let alternates = matches!(
                (a.lang_tag, b.lang_tag),
                (LangTag::En, LangTag::Cn) | (LangTag::Cn, LangTag::En)
            );
            if alternates {
                let id = format!("{}+{}", a.id, b.id);
                rows.push(make_row(&[a, b], ManifestSource::ConcatIntraCorpus, id, gap_ms));
                i += 2;
            } else {
                i += 1;
            }
        }
    }
    rows
}

/// `n_pairs` rows, each one English and one Mandarin clip drawn uniformly with
/// replacement, in a uniformly random order.
pub fn synth_cross_corpus(
    en_pool: &[Utterance],
    zh_pool: &[Utterance],
    n_pairs: usize,
    seed: u64,
    gap_ms: u32,
) -> Result<Vec<ManifestRow>> {
    if en_pool.is_empty() {
        return Err(Error::EmptyPool("english clip"));
    }
    if zh_pool.is_empty() {
        return Err(Error::EmptyPool("mandarin clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n_pairs)
        .map(|k| {
            let en = &en_pool[rng.gen_range(0..en_pool.len())];
            let zh = &zh_pool[rng.gen_range(0..zh_pool.len())];
            let parts = if rng.gen_bool(0.5) { [en, zh] } else { [zh, en] };
            make_row(&parts, ManifestSource::ConcatCrossCorpus, format!("synth-{k:06}"), gap_ms)
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub rows: usize,
    pub hours: f64,
    pub natural_mix: usize,
    pub concat_intra_corpus: usize,
    pub concat_cross_corpus: usize,
}

pub fn manifest_stats(rows: &[ManifestRow]) -> ManifestStats {
    let count = |s| rows.iter().filter(|r| r.source == s).count();
    ManifestStats {
        rows: rows.len(),
        hours: rows.iter().map(|r| r.duration).sum::<f64>() / 3600.0,
        natural_mix: count(ManifestSource::NaturalMix),
        concat_intra_corpus: count(ManifestSource::ConcatIntraCorpus),
        concat_cross_corpus: count(ManifestSource::ConcatCrossCorpus),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcatInfo {
    /// Frames (samples per channel).
    pub frames: u64,
    pub sample_rate: u32,
    pub channels: u16,
    pub duration: f64,
}

/// Concatenates 16-bit PCM WAV files with `gap_ms` of digital silence between
/// clips. All inputs must share sample rate and channel count.
pub fn concat_audio(paths: &[impl AsRef<Path>], gap_ms: u32, out_path: impl AsRef<Path>) -> Result<ConcatInfo> {
    let out_path = out_path.as_ref();
    let unreadable = |p: &Path, reason: String| Error::UnreadableAudio {
        path: p.to_path_buf(),
        reason,
    };
    let first = paths
        .first()
        .ok_or_else(|| unreadable(out_path, "no input clips".into()))?
        .as_ref();

    let mut readers = Vec::with_capacity(paths.len());
    let mut spec: Option<hound::WavSpec> = None;
    for p in paths {
        let p = p.as_ref();
        let r = hound::WavReader::open(p).map_err(|e| unreadable(p, e.to_string()))?;
        let s = r.spec();
        if s.sample_format != hound::SampleFormat::Int || s.bits_per_sample != 16 {
            return Err(unreadable(
                p,
                format!("expected 16-bit integer PCM, found {}-bit {:?}", s.bits_per_sample, s.sample_format),
            ));
        }
        match spec {
            None => spec = Some(s),
            Some(e) if e.sample_rate != s.sample_rate => {
                return Err(Error::SampleRateMismatch {
                    path: p.to_path_buf(),
                    expected: e.sample_rate,
                    found: s.sample_rate,
                })
            }
            Some(e) if e.channels != s.channels => {
                return Err(Error::ChannelMismatch {
                    path: p.to_path_buf(),
                    expected: e.channels,
                    found: s.channels,
                })
            }
            Some(_) => {}
        }
        readers.push((p, r));
    }
    let spec = spec.expect("at least one input");

    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let write_err = |e: hound::Error| unreadable(out_path, format!("write failed: {e}"));
    let mut writer = hound::WavWriter::create(out_path, spec).map_err(write_err)?;
    let gap_frames = (u64::from(gap_ms) * u64::from(spec.sample_rate) + 500) / 1000;
    let mut frames = 0u64;
    for (k, (p, mut r)) in readers.into_iter().enumerate() {
        if k > 0 {
            for _ in 0..gap_frames * u64::from(spec.channels) {
                writer.write_sample(0i16).map_err(write_err)?;
            }
            frames += gap_frames;
        }
        let mut samples = 0u64;
        for s in r.samples::<i16>() {
            writer.write_sample(s.map_err(|e| unreadable(p, e.to_string()))?).map_err(write_err)?;
            samples += 1;
        }
        frames += samples / u64::from(spec.channels);
    }
    writer.finalize().map_err(write_err)?;
    log::debug!("wrote {} ({} frames from {} clips, first {})", out_path.display(), frames, paths.len(), first.display());
    Ok(ConcatInfo {
        frames,
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        duration: frames as f64 / f64::from(spec.sample_rate),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatOutcome {
    pub id: String,
    pub audio_path: PathBuf,
    pub manifest_duration: f64,
    pub audio_duration: Option<f64>,
    pub error: Option<String>,
}

/// Builds the audio for every manifest row under `out_dir`, resolving
/// component ids through `corpus`. Rows are processed in parallel; results
/// keep manifest order.
pub fn concat_manifest(
    rows: &[ManifestRow],
    corpus: &[Utterance],
    audio_root: &Path,
    out_dir: &Path,
    gap_ms: u32,
) -> Vec<ConcatOutcome> {
    let index: HashMap<&str, &Utterance> = corpus.iter().map(|u| (u.id.as_str(), u)).collect();
    rows.par_iter()
        .map(|row| {
            let out = out_dir.join(&row.audio_ref);
            let result = row
                .component_ids
                .iter()
                .map(|id| {
                    index.get(id.as_str()).map(|u| audio_root.join(&u.audio_path)).ok_or_else(|| {
                        Error::InvalidRow {
                            row_id: row.id.clone(),
                            reason: format!("component {id} not in corpus"),
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()
                .and_then(|paths| concat_audio(&paths, gap_ms, &out));
            ConcatOutcome {
                id: row.id.clone(),
                audio_path: out,
                manifest_duration: row.duration,
                audio_duration: result.as_ref().ok().map(|i| i.duration),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect()
}
