//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Built with `harness = false`.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use csalign_core::datasets::concat_audio;
use csalign_core::dpo_core::{
    behavior_sweep, dpo_grad, dpo_loss, ExperimentSettings, PreferenceBatch, PreferenceItem, ReferencePolicy,
    ToyPolicy,
};
use csalign_core::evalharness::ComparisonRow;
use csalign_core::failure_modes::{classify, ClassifierThresholds, FailureLabel};
use csalign_core::mer::{edit_script, mer, round_percent, ErrorCounts};
use csalign_core::pairgen::{
    make_rejected, outside_spans_identical, sample_strategy, DictionaryTranslator, StrategyConfig, StrategyKind,
};
use csalign_core::text_norm::tokenize_raw;
use csalign_core::{derive_seed, Error};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mer_vectors() -> Check {
    let cases = [
        ("我们都应该 pursue a healthy lifestyle", "我们都应该追求健康的生活方式", 100.00),
        ("我们都应该 pursue a healthy lifestyle", "我们都应该 pursue a healthy lifestyle", 0.00),
        ("我住 temasek poly 那边", "我住达马士科波利那边", 100.00),
        ("我住 temasek poly 那边", "我住 tamasek poly 那边", 16.67),
    ];
    let mut got = Vec::new();
    for (r, h, want) in cases {
        let p = round_percent(mer(r, h, &[]).map_err(|e| e.to_string())?.percent());
        ensure(p == want, || format!("{h:?}: {p:.2}% != {want:.2}%"))?;
        got.push(format!("{p:.2}"));
    }
    let whole = mer(cases[3].0, cases[3].1, &[]).unwrap().percent().round();
    ensure(whole == 17.0, || format!("whole-percent rounding gave {whole}"))?;
    Ok(format!("{}%", got.join("%, ")))
}

/// Plain recursive edit distance with a memo table; no backtrace involved.
fn oracle_distance(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut [[usize; 7]; 7]) -> usize {
        if memo[i][j] != usize::MAX {
            return memo[i][j];
        }
        let d = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = d;
        d
    }
    let mut memo = [[usize::MAX; 7]; 7];
    go(a, b, a.len(), b.len(), &mut memo)
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn edit_distance_oracle() -> Check {
    let seqs = all_sequences(6, 3);
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for a in &seqs {
        for b in &seqs {
            cases += 1;
            let c = ErrorCounts::from_ops(&edit_script(a, b));
            let consistent = c.hits + c.substitutions + c.deletions == a.len()
                && c.hits + c.substitutions + c.insertions == b.len();
            if !consistent || c.errors() != oracle_distance(a, b) {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches in {cases} pairs"))?;
    ensure(cases >= 3200, || format!("only {cases} pairs"))?;
    Ok(format!("{cases} pairs, 0 mismatches"))
}

fn random_policy(rng: &mut ChaCha8Rng, nx: usize, ny: usize) -> ToyPolicy {
    let mut p = ToyPolicy::uniform(nx, ny);
    for t in &mut p.theta {
        *t = rng.gen_range(-4.0..4.0);
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, nx: usize, ny: usize) -> PreferenceBatch {
    let n = rng.gen_range(1..12);
    PreferenceBatch::new(
        (0..n)
            .map(|_| {
                let chosen = rng.gen_range(0..ny);
                PreferenceItem {
                    context: rng.gen_range(0..nx),
                    chosen,
                    rejected: (chosen + rng.gen_range(1..ny)) % ny,
                }
            })
            .collect(),
    )
}

fn dpo_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20240613);
    let mut worst_ln2: f64 = 0.0;
    for _ in 0..50 {
        let (nx, ny) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let p = random_policy(&mut rng, nx, ny);
        let r = ReferencePolicy::freeze(&p);
        let b = random_batch(&mut rng, nx, ny);
        let beta = rng.gen_range(0.001..5.0);
        worst_ln2 = worst_ln2.max((dpo_loss(&p, &r, &b, beta) - std::f64::consts::LN_2).abs());
    }
    ensure(worst_ln2 <= 1e-12, || format!("loss at reference off ln 2 by {worst_ln2:e}"))?;

    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for _ in 0..100 {
        let (nx, ny) = (rng.gen_range(1..4), rng.gen_range(2..6));
        let p = random_policy(&mut rng, nx, ny);
        let r = ReferencePolicy::freeze(&random_policy(&mut rng, nx, ny));
        let b = random_batch(&mut rng, nx, ny);
        let beta = rng.gen_range(0.01..2.0);
        let g = dpo_grad(&p, &r, &b, beta);
        let fd: Vec<f64> = (0..p.theta.len())
            .map(|i| {
                let mut plus = p.clone();
                plus.theta[i] += h;
                let mut minus = p.clone();
                minus.theta[i] -= h;
                (dpo_loss(&plus, &r, &b, beta) - dpo_loss(&minus, &r, &b, beta)) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&g).max(norm(&fd));
        let rel = if scale == 0.0 { norm(&diff) } else { norm(&diff) / scale };
        worst_rel = worst_rel.max(rel);
    }
    ensure(worst_rel < 1e-6, || format!("gradient relative error {worst_rel:e}"))?;
    Ok(format!("max |loss - ln 2| = {worst_ln2:.1e}, max gradient rel. error = {worst_rel:.1e}"))
}

fn behavior_alignment() -> Check {
    let settings = ExperimentSettings::default();
    let first = behavior_sweep(7, &settings).map_err(|e| e.to_string())?;
    let second = behavior_sweep(7, &settings).map_err(|e| e.to_string())?;
    ensure(first == second, || "two runs with one seed differ".into())?;
    let mut parts = Vec::new();
    for r in &first {
        ensure(r.steps <= 1000, || format!("beta {} trained {} steps", r.beta, r.steps))?;
        ensure(r.pre_translation_mass >= 0.6, || {
            format!("beta {}: initial translation mass {:.3}", r.beta, r.pre_translation_mass)
        })?;
        ensure(r.min_post_verbatim > 0.95, || {
            format!("beta {}: min P(verbatim) {:.4}", r.beta, r.min_post_verbatim)
        })?;
        ensure(r.post_sampled_mer < r.pre_sampled_mer, || {
            format!("beta {}: sampled MER {:.2} -> {:.2}", r.beta, r.pre_sampled_mer, r.post_sampled_mer)
        })?;
        parts.push(format!(
            "beta {} -> P(verbatim) {:.4} by step {}, MER {:.2}% -> {:.2}%",
            r.beta,
            r.min_post_verbatim,
            r.steps_to_threshold.map_or("-".into(), |s| s.to_string()),
            r.pre_sampled_mer,
            r.post_sampled_mer
        ));
    }
    let mut betas: Vec<f64> = first.iter().map(|r| r.beta).collect();
    betas.sort_by(f64::total_cmp);
    ensure(betas == [0.05, 0.3, 0.5], || format!("betas {betas:?}"))?;
    Ok(parts.join("; "))
}

const MIXED: [&str; 10] = [
    "我住 temasek poly 那边",
    "我们都应该 pursue a healthy lifestyle",
    "What grade are you? 真的很好哎，真的前途无限呀。",
    "基本每天就是做题刷题。It's so boring and dull.",
    "我们二月多有 valentine's day",
    "今天的 meeting 好忙 because deadline 是明天",
    "你要不要 join 我们 for dinner 今晚",
    "这个 project 的 timeline 有点 tight",
    "I think 我们 should 先 go home",
    "他说 the weather 很好 so 我们去 beach",
];

fn pairgen_statistics() -> Check {
    let cfg = StrategyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut global = 0usize;
    for i in 0..10_000 {
        let toks = tokenize_raw(MIXED[i % MIXED.len()]).tokens;
        let s = sample_strategy(&mut rng, &toks, &cfg).map_err(|e| e.to_string())?;
        global += usize::from(s.kind == StrategyKind::GlobalTranslation);
    }
    let frac = global as f64 / 10_000.0;
    ensure((0.78..=0.82).contains(&frac), || format!("global fraction {frac}"))?;

    let partial_only = StrategyConfig {
        global_fraction: 0.0,
        ..cfg
    };
    let translator = DictionaryTranslator::bundled();
    let mut identical = 0usize;
    for i in 0..1000u64 {
        let chosen = MIXED[i as usize % MIXED.len()];
        let toks = tokenize_raw(chosen).tokens;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, &i.to_string()));
        let strategy = sample_strategy(&mut rng, &toks, &partial_only).map_err(|e| e.to_string())?;
        let rejected = make_rejected(chosen, &strategy, &translator, 3).map_err(|e| format!("pair {i}: {e}"))?;
        if outside_spans_identical(&toks, &tokenize_raw(&rejected).tokens, &strategy.spans) {
            identical += 1;
        }
    }
    ensure(identical == 1000, || format!("{identical}/1000 partial pairs preserved outside spans"))?;
    Ok(format!("global fraction {frac:.4}; 1000/1000 partial pairs identical outside spans"))
}

fn classifier_examples() -> Check {
    let t = ClassifierThresholds::default();
    let ah = vec!["ah month"; 250].join(" ");
    let cases = [
        ("我住 temasek poly 那边", "我住那边", FailureLabel::LanguageOmission),
        ("我们都应该 pursue a healthy lifestyle", "我们都应该追求健康的生活方式", FailureLabel::Translation),
        ("我们二月多有 valentine's day", ah.as_str(), FailureLabel::Hallucination),
    ];
    for (r, h, want) in cases {
        let got = classify(r, h, &t).map_err(|e| e.to_string())?.labels;
        ensure(got.len() == 1 && got.contains(&want), || format!("{r:?}: {got:?}, expected {{{want}}}"))?;
        let same = classify(r, r, &t).map_err(|e| e.to_string())?.labels;
        ensure(same.len() == 1 && same.contains(&FailureLabel::None), || {
            format!("identical pair {r:?}: {same:?}")
        })?;
    }
    Ok("omission, translation, hallucination and identical pairs as expected".into())
}

fn relative_change_table() -> Check {
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
        let got = ComparisonRow::from_scores("row", b, t).delta_rel();
        ensure(got == want, || format!("{b} -> {t}: {got}, expected {want}"))?;
    }
    Ok("12/12 rows".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_csalign"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn pipeline_outputs(dir: &Path) -> Result<HashMap<String, Vec<u8>>, String> {
    let en = [
        ("en1", "it is so boring and dull"),
        ("en2", "what grade are you"),
        ("en3", "pursue a healthy lifestyle"),
    ];
    let zh = [("zh1", "我住那边"), ("zh2", "真的很好哎"), ("zh3", "基本每天就是做题刷题")];
    let utt = |(id, text): (&str, &str), tag: &str| {
        serde_json::json!({
            "id": id, "conversation_id": format!("c-{id}"), "speaker_id": "s", "lang_tag": tag,
            "text": text, "audio_path": format!("{id}.wav"), "duration": 1.0, "sample_rate": 16000
        })
        .to_string()
    };
    let write = |name: &str, lines: Vec<String>| std::fs::write(dir.join(name), lines.join("\n") + "\n");
    write("en.jsonl", en.iter().map(|&u| utt(u, "EN")).collect()).map_err(|e| e.to_string())?;
    write("zh.jsonl", zh.iter().map(|&u| utt(u, "CN")).collect()).map_err(|e| e.to_string())?;

    run_cli(dir, &["dataset", "synth", "--en", "en.jsonl", "--zh", "zh.jsonl", "--n", "40", "--seed", "11", "--out", "manifest.jsonl"])?;
    run_cli(dir, &["pairgen", "--manifest", "manifest.jsonl", "--seed", "11", "--out", "pairs.jsonl"])?;
    run_cli(dir, &["behavior-exp", "--seed", "11", "--out", "behavior.jsonl"])?;

    let mut files = HashMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn end_to_end_reproducibility() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = pipeline_outputs(a.path())?;
    let fb = pipeline_outputs(b.path())?;
    for name in ["manifest.jsonl", "pairs.jsonl", "behavior.jsonl"] {
        let content = fa.get(name).ok_or_else(|| format!("{name} missing"))?;
        ensure(!content.is_empty(), || format!("{name} is empty"))?;
    }
    let mut names: Vec<&String> = fa.keys().collect();
    names.sort();
    ensure(fa == fb, || format!("outputs differ between runs ({names:?})"))?;
    Ok(format!("{} files byte-identical", fa.len()))
}

fn write_wav(path: &Path, rate: u32, frames: usize) -> Result<(), String> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| e.to_string())?;
    for i in 0..frames {
        w.write_sample(((i % 200) as i16 - 100) * 50).map_err(|e| e.to_string())?;
    }
    w.finalize().map_err(|e| e.to_string())
}

fn audio_concatenation() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b, slow) = (dir.path().join("a.wav"), dir.path().join("b.wav"), dir.path().join("c.wav"));
    write_wav(&a, 16_000, 16_000)?;
    write_wav(&b, 16_000, 16_000)?;
    write_wav(&slow, 8_000, 8_000)?;
    let mut frames = Vec::new();
    for (gap, want) in [(0u32, 32_000u32), (100, 33_600)] {
        let out = dir.path().join(format!("out{gap}.wav"));
        let info = concat_audio(&[&a, &b], gap, &out).map_err(|e| e.to_string())?;
        let on_disk = hound::WavReader::open(&out).map_err(|e| e.to_string())?.duration();
        ensure(info.frames == u64::from(want) && on_disk == want, || {
            format!("gap {gap} ms: {} frames reported, {on_disk} on disk, expected {want}", info.frames)
        })?;
        frames.push(on_disk);
    }
    match concat_audio(&[&a, &slow], 0, dir.path().join("bad.wav")) {
        Err(Error::SampleRateMismatch { expected: 16_000, found: 8_000, .. }) => {}
        other => return Err(format!("mixed rates gave {other:?}")),
    }
    Ok(format!("{} and {} samples; mixed rates raise SampleRateMismatch", frames[0], frames[1]))
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { name: "MER on qualitative examples", limit: Some(Duration::from_secs(1)), run: mer_vectors },
        Criterion { name: "edit distance vs exhaustive oracle", limit: Some(Duration::from_secs(30)), run: edit_distance_oracle },
        Criterion { name: "DPO loss and gradient identities", limit: Some(Duration::from_secs(10)), run: dpo_identities },
        Criterion { name: "behavior alignment experiment", limit: Some(Duration::from_secs(60)), run: behavior_alignment },
        Criterion { name: "pair generation statistics", limit: Some(Duration::from_secs(30)), run: pairgen_statistics },
        Criterion { name: "failure classifier examples", limit: Some(Duration::from_secs(1)), run: classifier_examples },
        Criterion { name: "relative change table", limit: None, run: relative_change_table },
        Criterion { name: "end-to-end reproducibility", limit: None, run: end_to_end_reproducibility },
        Criterion { name: "audio concatenation", limit: None, run: audio_concatenation },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut result = (c.run)();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&result, c.limit) {
            if elapsed > limit {
                result = Err(format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()));
            }
        }
        match result {
            Ok(detail) => println!("criterion {} PASS  {} ({:.2} s): {detail}", i + 1, c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {} ({:.2} s): {why}", i + 1, c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
