use csalign_core::datasets::{group_mix_runs, LangTag, Utterance};
use csalign_core::evalharness::{evaluate, BenchmarkRun, HypothesisRecord};
use csalign_core::failure_modes::{ClassifierThresholds, FailureLabel};
use csalign_core::pairgen::{build_pairs, DictionaryTranslator, PairGenConfig, PromptPool, StrategyKind};
use csalign_core::text_norm::default_preambles;

fn utt(id: &str, conv: &str, tag: LangTag, text: &str) -> Utterance {
    Utterance {
        id: id.into(),
        conversation_id: conv.into(),
        speaker_id: "s".into(),
        lang_tag: tag,
        text: text.into(),
        audio_path: format!("wav/{id}.wav"),
        duration: 1.0,
        sample_rate: 16000,
    }
}

fn corpus() -> Vec<Utterance> {
    vec![
        utt("a", "c1", LangTag::Mix, "我住 temasek poly 那边"),
        utt("b", "c1", LangTag::Mix, "我们都应该 pursue a healthy lifestyle"),
        utt("c", "c2", LangTag::En, "what grade are you"),
        utt("d", "c3", LangTag::Mix, "我们二月多有 valentine's day"),
        utt("e", "c3", LangTag::Cn, "真的很好哎"),
        utt("f", "c4", LangTag::Mix, "这个 problem 很难 solve 啦"),
    ]
}

fn run(records: Vec<HypothesisRecord>) -> BenchmarkRun {
    BenchmarkRun::from_records("toy", "model", records, "test").unwrap()
}

#[test]
fn chosen_transcripts_score_zero_and_rejected_ones_are_flagged() {
    let (manifest, _) = group_mix_runs(&corpus(), 1.5, 0);
    assert!(!manifest.is_empty());
    let batch = build_pairs(
        &manifest,
        &DictionaryTranslator::bundled(),
        &PromptPool::bundled(),
        11,
        &PairGenConfig::default(),
    );
    assert!(batch.rejects.is_empty(), "{:?}", batch.rejects);
    assert_eq!(batch.pairs.len(), manifest.len());

    let thresholds = ClassifierThresholds::default();
    let patterns = default_preambles();

    let chosen = run(batch
        .pairs
        .iter()
        .map(|p| HypothesisRecord { id: p.id.clone(), hypothesis: p.chosen.clone() })
        .collect());
    let report = evaluate(&manifest, &chosen, &thresholds, &patterns).unwrap();
    assert_eq!(report.summary.pooled_mer, 0.0);
    assert_eq!(report.summary.scored, manifest.len());

    let rejected = run(batch
        .pairs
        .iter()
        .map(|p| HypothesisRecord { id: p.id.clone(), hypothesis: p.rejected.clone() })
        .collect());
    let report = evaluate(&manifest, &rejected, &thresholds, &patterns).unwrap();
    assert!(report.summary.pooled_mer > 0.0);
    for (pair, row) in batch.pairs.iter().zip(&report.rows) {
        assert_eq!(pair.id, row.id);
        assert!(row.mer.unwrap() > 0.0, "{}: {}", pair.id, pair.rejected);
        if pair.strategy.kind == StrategyKind::GlobalTranslation {
            assert!(row.labels.contains(&FailureLabel::Translation), "{}: {:?}", pair.rejected, row.labels);
        }
    }
}

#[test]
fn pair_generation_is_seed_deterministic() {
    let (manifest, _) = group_mix_runs(&corpus(), 10.0, 0);
    let gen = |seed| {
        build_pairs(
            &manifest,
            &DictionaryTranslator::bundled(),
            &PromptPool::bundled(),
            seed,
            &PairGenConfig::default(),
        )
        .pairs
    };
    assert_eq!(gen(3), gen(3));
}
