//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use harmreason::grpo::{normalize_advantages, RolloutGroup};
use harmreason::policy::{Decoding, ToyPolicy};
use harmreason::{Label, Sample, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tag occurrences not glued to a word character, counted char by char.
pub fn tag_count_oracle(text: &str, tag: &str) -> usize {
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    let mut n = 0;
    let mut from = 0;
    while let Some(off) = text[from..].find(tag) {
        let start = from + off;
        let end = start + tag.len();
        if !is_word(text[..start].chars().next_back()) && !is_word(text[end..].chars().next()) {
            n += 1;
        }
        from = start + 1;
        while !text.is_char_boundary(from) {
            from += 1;
        }
    }
    n
}

/// Macro-F1 by explicit per-class confusion tables, counting only classes
/// seen in golds or predictions.
pub fn brute_macro_f1(preds: &[Verdict], golds: &[Label]) -> f64 {
    let mut f1s = Vec::new();
    for class in [Label::Benign, Label::Harmful] {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (p, g) in preds.iter().zip(golds) {
            let pred_is = *p == Verdict::from(class);
            let gold_is = *g == class;
            if pred_is && gold_is {
                tp += 1.0;
            } else if pred_is {
                fp += 1.0;
            } else if gold_is {
                fn_ += 1.0;
            }
        }
        if tp + fp + fn_ > 0.0 {
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            f1s.push(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 });
        }
    }
    if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

/// Every sequence of `n` items drawn from `choices`.
pub fn all_assignments<T: Copy>(choices: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                choices.iter().map(move |c| {
                    let mut v = prefix.clone();
                    v.push(*c);
                    v
                })
            })
            .collect();
    }
    out
}

/// A random small GRPO instance: policy, reference, samples and groups
/// sampled from the policy with random rewards.
pub struct GradientInstance {
    pub policy: ToyPolicy,
    pub samples: Vec<Sample>,
    pub groups: Vec<RolloutGroup>,
    pub kl_coefficient: f64,
}

pub fn random_instance(seed: u64) -> GradientInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = rng.gen_range(1..=3);
    let max_len = rng.gen_range(2..=6);
    let mut policy = ToyPolicy::with_default_vocab(features, max_len);
    policy.randomize(rng.gen(), 1.0);
    let mut reference = policy.clone();
    reference.randomize(rng.gen(), 1.0);
    let n_samples = rng.gen_range(1..=3);
    let group_size = rng.gen_range(2..=5);
    let samples: Vec<Sample> = (0..n_samples)
        .map(|i| {
            Sample::new(format!("s{i}"), if rng.gen() { Label::Harmful } else { Label::Benign }, rng.gen_range(0..5))
        })
        .collect();
    let groups = samples
        .iter()
        .map(|s| {
            let completions: Vec<Vec<usize>> = (0..group_size)
                .map(|_| policy.generate(s, Decoding::Sample { temperature: 1.0 }, max_len, rng.gen()).tokens)
                .collect();
            let rewards: Vec<f64> = (0..group_size).map(|_| rng.gen_range(-3.0..1.5)).collect();
            RolloutGroup {
                sample_id: s.id.clone(),
                log_probs: completions.iter().map(|c| policy.token_log_probs(s, c).unwrap()).collect(),
                ref_log_probs: completions.iter().map(|c| reference.token_log_probs(s, c).unwrap()).collect(),
                advantages: normalize_advantages(&rewards, 1e-6).unwrap(),
                completions,
                rewards,
            }
        })
        .collect();
    GradientInstance { policy, samples, groups, kl_coefficient: rng.gen_range(0.0..0.5) }
}

/// Central finite differences of `f` at every parameter of `policy`.
pub fn finite_difference(policy: &ToyPolicy, h: f64, f: impl Fn(&ToyPolicy) -> f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..policy.param_count())
        .map(|i| {
            let x = policy.param(i);
            p.set_param(i, x + h);
            let up = f(&p);
            p.set_param(i, x - h);
            let down = f(&p);
            p.set_param(i, x);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A completion for a harmful sample that earns the top value of every
/// reward component.
pub fn perfect_harmful_completion() -> String {
    let filler = "the figure on the left stands near a wall while the overlaid caption reads a short line";
    let mut words =
        vec!["[GROUNDING]", "The", "image", "shows", "a", "person", "and", "the", "text", "says", "something."];
    words.extend(filler.split(' '));
    words.extend([
        "[INFERENCE]",
        "Together",
        "the",
        "picture",
        "and",
        "words",
        "mock",
        "the",
        "person",
        "which",
        "is",
        "harmful",
        "and",
        "mocks",
        "their",
        "faith.",
    ]);
    words.extend(filler.split(' '));
    words.extend(filler.split(' '));
    words.extend(["[VERDICT]", "HARMFUL"]);
    words.join(" ")
}
