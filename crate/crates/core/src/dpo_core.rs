//! DPO over a tabular softmax policy.
//!
//! The policy holds one logit per (context, response); `log π(y|x)` is the
//! logit minus the row's log-sum-exp. The loss per preference item is
//! `-log σ(β·Δ)` with
//!
//! ```text
//! Δ = [log π(y_c|x) - log π_ref(y_c|x)] - [log π(y_r|x) - log π_ref(y_r|x)]
//! ```
//!
//! averaged over the batch. Everything here is closed form, so the analytic
//! gradient can be checked against finite differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mer::{corpus_mer, mer, ScoringRow};
use crate::pairgen::{make_rejected, DictionaryTranslator, Direction, RejectionStrategy, Span};
use crate::text_norm::{tokenize_located, LanguageTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub contexts: Vec<String>,
    pub responses: Vec<String>,
    /// Row-major logits, `contexts.len() × responses.len()`.
    pub theta: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(contexts: Vec<String>, responses: Vec<String>, theta: Vec<f64>) -> Result<Self> {
        if contexts.is_empty() || responses.len() < 2 {
            return Err(Error::Config("toy policy needs a context and at least two responses".into()));
        }
        if theta.len() != contexts.len() * responses.len() {
            return Err(Error::Config(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                contexts.len() * responses.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("theta must be finite".into()));
        }
        Ok(ToyPolicy {
            contexts,
            responses,
            theta,
        })
    }

    pub fn uniform(n_contexts: usize, n_responses: usize) -> Self {
        ToyPolicy {
            contexts: (0..n_contexts).map(|i| format!("x{i}")).collect(),
            responses: (0..n_responses).map(|i| format!("y{i}")).collect(),
            theta: vec![0.0; n_contexts * n_responses],
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_responses(&self) -> usize {
        self.responses.len()
    }

    pub fn row(&self, x: usize) -> &[f64] {
        let n = self.n_responses();
        &self.theta[x * n..(x + 1) * n]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        let n = self.n_responses();
        &mut self.theta[x * n..(x + 1) * n]
    }

    pub fn log_probs(&self, x: usize) -> Vec<f64> {
        let row = self.row(x);
        let lse = log_sum_exp(row);
        row.iter().map(|t| t - lse).collect()
    }

    pub fn logprob(&self, x: usize, y: usize) -> f64 {
        let row = self.row(x);
        row[y] - log_sum_exp(row)
    }

    pub fn probs(&self, x: usize) -> Vec<f64> {
        self.log_probs(x).into_iter().map(f64::exp).collect()
    }

    /// Draws a response for context `x`.
    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        let p = self.probs(x);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (y, py) in p.iter().enumerate() {
            acc += py;
            if u < acc {
                return y;
            }
        }
        p.len() - 1
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(z)`, stable for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Frozen copy of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(ToyPolicy);

impl ReferencePolicy {
    pub fn freeze(policy: &ToyPolicy) -> Self {
        ReferencePolicy(policy.clone())
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceItem {
    pub context: usize,
    pub chosen: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceBatch {
    pub items: Vec<PreferenceItem>,
}

impl PreferenceBatch {
    pub fn new(items: Vec<PreferenceItem>) -> Self {
        PreferenceBatch { items }
    }

    pub fn validate(&self, policy: &ToyPolicy) -> Result<()> {
        for (i, it) in self.items.iter().enumerate() {
            let ok = it.context < policy.n_contexts()
                && it.chosen < policy.n_responses()
                && it.rejected < policy.n_responses()
                && it.chosen != it.rejected;
            if !ok {
                return Err(Error::InvalidRow {
                    row_id: i.to_string(),
                    reason: format!("bad preference item {it:?}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Items per step; `None` means the full batch every step.
    pub batch_size: Option<usize>,
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// β values tuned per model for the full-scale runs, kept as named presets.
/// Learning rate and step budget are toy-scale choices.
pub const REFERENCE_BETAS: [(&str, f64); 3] = [
    ("meralion-2-3b", 0.5),
    ("phi-4-multimodal-instruct", 0.05),
    ("qwen2-audio-7b-instruct", 0.3),
];

pub fn reference_config(beta: f64, seed: u64) -> DpoConfig {
    DpoConfig {
        beta,
        learning_rate: 1.0,
        steps: 1000,
        seed,
        batch_size: None,
    }
}

/// Δ for one item.
pub fn margin(policy: &ToyPolicy, reference: &ReferencePolicy, item: &PreferenceItem) -> f64 {
    let r = reference.policy();
    let x = item.context;
    (policy.logprob(x, item.chosen) - r.logprob(x, item.chosen))
        - (policy.logprob(x, item.rejected) - r.logprob(x, item.rejected))
}

fn items_loss(policy: &ToyPolicy, reference: &ReferencePolicy, items: &[PreferenceItem], beta: f64) -> (f64, f64) {
    if items.is_empty() {
        return (0.0, 0.0);
    }
    let (loss, m) = items.iter().fold((0.0, 0.0), |(l, m), it| {
        let z = beta * margin(policy, reference, it);
        (l + neg_log_sigmoid(z), m + z)
    });
    let n = items.len() as f64;
    (loss / n, m / n)
}

pub fn dpo_loss(policy: &ToyPolicy, reference: &ReferencePolicy, batch: &PreferenceBatch, beta: f64) -> f64 {
    items_loss(policy, reference, &batch.items, beta).0
}

fn items_grad(policy: &ToyPolicy, reference: &ReferencePolicy, items: &[PreferenceItem], beta: f64) -> Vec<f64> {
    let nr = policy.n_responses();
    let mut grad = vec![0.0; policy.theta.len()];
    if items.is_empty() {
        return grad;
    }
    let scale = 1.0 / items.len() as f64;
    for it in items {
        let d = margin(policy, reference, it);
        let coef = -beta * sigmoid(-beta * d) * scale;
        let p = policy.probs(it.context);
        let row = &mut grad[it.context * nr..(it.context + 1) * nr];
        for (y, g) in row.iter_mut().enumerate() {
            let grad_chosen = f64::from(u8::from(y == it.chosen)) - p[y];
            let grad_rejected = f64::from(u8::from(y == it.rejected)) - p[y];
            *g += coef * (grad_chosen - grad_rejected);
        }
    }
    grad
}

/// Analytic gradient of [`dpo_loss`] with respect to `policy.theta`.
pub fn dpo_grad(policy: &ToyPolicy, reference: &ReferencePolicy, batch: &PreferenceBatch, beta: f64) -> Vec<f64> {
    items_grad(policy, reference, &batch.items, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Mean implicit-reward margin β·Δ over the step's items.
    pub mean_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub policy: ToyPolicy,
    /// Loss and margin measured before each step's update.
    pub trace: Vec<TraceRow>,
}

/// Plain gradient descent. Mini-batches, when configured, are drawn from a
/// seeded shuffle of the items each epoch.
pub fn train(
    policy: &ToyPolicy,
    reference: &ReferencePolicy,
    batch: &PreferenceBatch,
    config: &DpoConfig,
) -> Result<TrainOutput> {
    train_observed(policy, reference, batch, config, |_, _| {})
}

/// [`train`], calling `observe(step, policy)` before every update and once
/// more with `step == config.steps` on the final policy.
pub fn train_observed(
    policy: &ToyPolicy,
    reference: &ReferencePolicy,
    batch: &PreferenceBatch,
    config: &DpoConfig,
    mut observe: impl FnMut(usize, &ToyPolicy),
) -> Result<TrainOutput> {
    config.validate()?;
    batch.validate(policy)?;
    let mut policy = policy.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = batch.items.len();
    let size = config.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut step_items = Vec::with_capacity(size);

    for step in 0..config.steps {
        observe(step, &policy);
        step_items.clear();
        if size == n {
            step_items.extend_from_slice(&batch.items);
        } else {
            while step_items.len() < size {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                step_items.push(batch.items[order[cursor]]);
                cursor += 1;
            }
        }
        let (loss, mean_margin) = items_loss(&policy, reference, &step_items, config.beta);
        trace.push(TraceRow {
            step,
            loss,
            mean_margin,
        });
        let grad = items_grad(&policy, reference, &step_items, config.beta);
        for (t, g) in policy.theta.iter_mut().zip(&grad) {
            *t -= config.learning_rate * g;
        }
    }
    observe(config.steps, &policy);
    Ok(TrainOutput { policy, trace })
}

/// Response slots of the behavior experiment.
pub const BEHAVIORS: [&str; 5] = [
    "verbatim",
    "global_translation",
    "partial_translation",
    "omission",
    "hallucination",
];
pub const VERBATIM: usize = 0;
pub const GLOBAL_TRANSLATION: usize = 1;
pub const PARTIAL_TRANSLATION: usize = 2;

/// Initial logits per behavior; translation holds about 86% of the mass.
pub const INITIAL_LOGITS: [f64; 5] = [0.0, 2.0, 1.0, -1.0, -1.5];

pub const EXPERIMENT_UTTERANCES: [&str; 6] = [
    "我住 temasek poly 那边",
    "我们都应该 pursue a healthy lifestyle",
    "What grade are you? 真的很好哎，真的前途无限呀。",
    "基本每天就是做题刷题。It's so boring and dull.",
    "我们二月多有 valentine's day",
    "今天的 meeting 好忙 because deadline 是明天",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub items_per_context: usize,
    pub global_fraction: f64,
    pub samples_per_context: usize,
    pub threshold: f64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            items_per_context: 50,
            global_fraction: 0.8,
            samples_per_context: 200,
            threshold: 0.95,
        }
    }
}

/// The five response texts for one utterance, in [`BEHAVIORS`] order.
pub fn behavior_texts(utterance: &str, translator: &DictionaryTranslator) -> Result<Vec<String>> {
    let located = tokenize_located(utterance);
    let first_en = located
        .iter()
        .position(|l| l.token.lang == LanguageTag::English)
        .ok_or_else(|| Error::NotMixed(utterance.to_string()))?;
    let global = make_rejected(utterance, &RejectionStrategy::global(Direction::EnToZh), translator, 1)?;
    let partial = make_rejected(
        utterance,
        &RejectionStrategy::partial(Direction::EnToZh, vec![Span(first_en, first_en + 1)]),
        translator,
        1,
    )?;
    let omission: String = located
        .iter()
        .filter(|l| l.token.lang == LanguageTag::Mandarin)
        .map(|l| l.token.surface.as_str())
        .collect();
    let head: Vec<&str> = located.iter().take(2).map(|l| l.token.surface.as_str()).collect();
    let hallucination = vec![head.join(" "); 30].join(" ");
    Ok(vec![utterance.to_string(), global, partial, omission, hallucination])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub context: String,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub seed: u64,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub behaviors: Vec<String>,
    pub contexts: Vec<ContextReport>,
    pub pre_translation_mass: f64,
    pub min_post_verbatim: f64,
    /// First step after which every context exceeds the verbatim threshold.
    pub steps_to_threshold: Option<usize>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Pooled MER (%) of responses sampled from the policy.
    pub pre_sampled_mer: f64,
    pub post_sampled_mer: f64,
    /// Probability-weighted MER (%) over all responses.
    pub pre_expected_mer: f64,
    pub post_expected_mer: f64,
}

impl BehaviorReport {
    /// One JSON object per context followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.contexts {
            let row = serde_json::json!({
                "kind": "context",
                "beta": self.beta,
                "context": c.context,
                "pre": c.pre,
                "post": c.post,
            });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        let mut summary = serde_json::to_value(self).expect("report serializes");
        let obj = summary.as_object_mut().expect("object");
        obj.remove("contexts");
        obj.insert("kind".into(), "summary".into());
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

fn sampled_mer(policy: &ToyPolicy, texts: &[Vec<String>], samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(texts.len() * samples);
    for (x, responses) in texts.iter().enumerate() {
        for k in 0..samples {
            let y = policy.sample(x, &mut rng);
            rows.push(ScoringRow {
                id: format!("{x}-{k}"),
                reference: responses[VERBATIM].clone(),
                hypothesis: responses[y].clone(),
            });
        }
    }
    Ok(corpus_mer(&rows, &[])?.percent())
}

fn expected_mer(policy: &ToyPolicy, texts: &[Vec<String>]) -> Result<f64> {
    let mut errors = 0.0;
    let mut ref_len = 0.0;
    for (x, responses) in texts.iter().enumerate() {
        let p = policy.probs(x);
        for (y, text) in responses.iter().enumerate() {
            let s = mer(&responses[VERBATIM], text, &[])?;
            errors += p[y] * s.breakdown.counts.errors() as f64;
            ref_len += p[y] * s.breakdown.counts.ref_len as f64;
        }
    }
    Ok(100.0 * errors / ref_len)
}

/// Everything needed to run the experiment: policy, reference, preference
/// items and the response texts per context.
pub struct ExperimentSetup {
    pub policy: ToyPolicy,
    pub reference: ReferencePolicy,
    pub batch: PreferenceBatch,
    pub texts: Vec<Vec<String>>,
}

pub fn experiment_setup(seed: u64, settings: &ExperimentSettings) -> Result<ExperimentSetup> {
    let translator = DictionaryTranslator::bundled();
    let texts = EXPERIMENT_UTTERANCES
        .iter()
        .map(|u| behavior_texts(u, &translator))
        .collect::<Result<Vec<_>>>()?;
    let theta = EXPERIMENT_UTTERANCES.iter().flat_map(|_| INITIAL_LOGITS).collect();
    let policy = ToyPolicy::new(
        EXPERIMENT_UTTERANCES.iter().map(|s| s.to_string()).collect(),
        BEHAVIORS.iter().map(|s| s.to_string()).collect(),
        theta,
    )?;
    let reference = ReferencePolicy::freeze(&policy);

    // Exact global/partial proportion per context, in seeded order.
    let n_global = (settings.global_fraction * settings.items_per_context as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(texts.len() * settings.items_per_context);
    for x in 0..texts.len() {
        let mut kinds: Vec<usize> = (0..settings.items_per_context)
            .map(|i| if i < n_global { GLOBAL_TRANSLATION } else { PARTIAL_TRANSLATION })
            .collect();
        kinds.shuffle(&mut rng);
        items.extend(kinds.into_iter().map(|rejected| PreferenceItem {
            context: x,
            chosen: VERBATIM,
            rejected,
        }));
    }
    Ok(ExperimentSetup {
        policy,
        reference,
        batch: PreferenceBatch::new(items),
        texts,
    })
}

/// Trains the biased toy transcriber towards verbatim output and reports
/// the behavior distribution and MER before and after.
///
/// Each context is trained on its own items. Contexts share no parameters,
/// so this is the joint problem with the loss averaged per context rather
/// than over the pooled batch, which would shrink every context's step by
/// the number of contexts.
pub fn behavior_experiment(config: &DpoConfig, settings: &ExperimentSettings) -> Result<BehaviorReport> {
    config.validate()?;
    let setup = experiment_setup(config.seed, settings)?;
    let responses = setup.policy.responses.clone();
    let mut trained = setup.policy.clone();
    let mut steps_to_threshold = Some(0);

    for x in 0..setup.policy.n_contexts() {
        let local = ToyPolicy {
            contexts: vec![setup.policy.contexts[x].clone()],
            responses: responses.clone(),
            theta: setup.policy.row(x).to_vec(),
        };
        let local_ref = ReferencePolicy::freeze(&local);
        let items = setup
            .batch
            .items
            .iter()
            .filter(|it| it.context == x)
            .map(|it| PreferenceItem { context: 0, ..*it })
            .collect();
        let local_config = DpoConfig {
            seed: crate::derive_seed(config.seed, &local.contexts[0]),
            ..*config
        };
        let mut crossed = None;
        let out = train_observed(&local, &local_ref, &PreferenceBatch::new(items), &local_config, |step, p| {
            if crossed.is_none() && p.probs(0)[VERBATIM] > settings.threshold {
                crossed = Some(step);
            }
        })?;
        trained.row_mut(x).copy_from_slice(&out.policy.theta);
        steps_to_threshold = steps_to_threshold.zip(crossed).map(|(a, b)| a.max(b));
    }

    let contexts: Vec<ContextReport> = (0..setup.policy.n_contexts())
        .map(|x| ContextReport {
            context: setup.policy.contexts[x].clone(),
            pre: setup.policy.probs(x),
            post: trained.probs(x),
        })
        .collect();
    let pre_translation_mass = contexts
        .iter()
        .map(|c| c.pre[GLOBAL_TRANSLATION] + c.pre[PARTIAL_TRANSLATION])
        .fold(f64::INFINITY, f64::min);
    let min_post_verbatim = contexts.iter().map(|c| c.post[VERBATIM]).fold(f64::INFINITY, f64::min);
    let mer_seed = crate::derive_seed(config.seed, "sampled-mer");

    Ok(BehaviorReport {
        seed: config.seed,
        beta: config.beta,
        learning_rate: config.learning_rate,
        steps: config.steps,
        behaviors: responses,
        pre_translation_mass,
        min_post_verbatim,
        steps_to_threshold,
        initial_loss: dpo_loss(&setup.policy, &setup.reference, &setup.batch, config.beta),
        final_loss: dpo_loss(&trained, &setup.reference, &setup.batch, config.beta),
        pre_sampled_mer: sampled_mer(&setup.policy, &setup.texts, settings.samples_per_context, mer_seed)?,
        post_sampled_mer: sampled_mer(&trained, &setup.texts, settings.samples_per_context, mer_seed)?,
        pre_expected_mer: expected_mer(&setup.policy, &setup.texts)?,
        post_expected_mer: expected_mer(&trained, &setup.texts)?,
        contexts,
    })
}

/// Behavior experiment at every reference β.
pub fn behavior_sweep(seed: u64, settings: &ExperimentSettings) -> Result<Vec<BehaviorReport>> {
    REFERENCE_BETAS
        .iter()
        .map(|&(_, beta)| behavior_experiment(&reference_config(beta, seed), settings))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroBetaCheck {
    pub loss: f64,
    pub max_abs_grad: f64,
    pub distribution_unchanged: bool,
}

/// The β → 0 limit on the experiment: constant loss ln 2, zero gradient, no
/// movement. β = 0 is accepted only here, not by [`DpoConfig`].
pub fn zero_beta_check(seed: u64) -> Result<ZeroBetaCheck> {
    let setup = experiment_setup(seed, &ExperimentSettings::default())?;
    let mut policy = setup.policy.clone();
    let mut loss = 0.0;
    let mut max_abs_grad: f64 = 0.0;
    for _ in 0..10 {
        loss = dpo_loss(&policy, &setup.reference, &setup.batch, 0.0);
        let g = dpo_grad(&policy, &setup.reference, &setup.batch, 0.0);
        max_abs_grad = g.iter().fold(max_abs_grad, |m, v| m.max(v.abs()));
        for (t, gi) in policy.theta.iter_mut().zip(&g) {
            *t -= gi;
        }
    }
    Ok(ZeroBetaCheck {
        loss,
        max_abs_grad,
        distribution_unchanged: policy == setup.policy,
    })
}
