//! Group-relative policy optimization over the toy policy.
//!
//! For each prompt a group of `G` completions is sampled and scored; rewards
//! are normalized within the group into advantages `(R_g - mean) / (std + ε)`
//! (population std), and the policy ascends
//!
//! ```text
//! J(θ) = mean_groups (1/G) Σ_g Â_g · log P_θ(s_g)  -  λ · KL(P_θ ‖ P_ref)
//! ```
//!
//! where the KL term is estimated by the summed per-token log-ratio of each
//! sampled sequence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicon;
use crate::policy::{Decoding, PolicyError, PolicyGradient, ToyPolicy};
use crate::rationale::{parse_completion, Sample};
use crate::rewards::{format_reward, total_reward, EvidenceWeights, RewardWeights};

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("group {sample_id}: {message}")]
    InvalidGroup { sample_id: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("policy and reference policy differ in architecture")]
    ArchitectureMismatch,
    #[error("reward function failed on sample {sample_id}: {source}")]
    Reward {
        sample_id: String,
        #[source]
        source: BoxError,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coefficient: f64,
    pub epsilon: f64,
    /// Desk-scale step size for the toy policy; large models use ~1e-7.
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub temperature: f64,
    pub max_response_length: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            kl_coefficient: 0.03,
            epsilon: 1e-6,
            learning_rate: 1e-2,
            ppo_epochs: 3,
            temperature: 1.0,
            max_response_length: 350,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.epsilon > 0.0) {
            return Err(GrpoError::Config("epsilon must be > 0".into()));
        }
        if !(self.kl_coefficient >= 0.0) {
            return Err(GrpoError::Config("kl_coefficient must be >= 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(GrpoError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// `(R_g - mean) / (σ + ε)` with σ the population standard deviation.
///
/// `epsilon` may be 0 here (useful for exact scale-invariance checks); a
/// constant group then yields all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect())
}

/// Sampled KL estimate: Σ_t (log P_θ − log P_ref).
pub fn kl_estimate(log_probs: &[f64], ref_log_probs: &[f64]) -> Result<f64, GrpoError> {
    if log_probs.len() != ref_log_probs.len() {
        return Err(GrpoError::LengthMismatch { left: log_probs.len(), right: ref_log_probs.len() });
    }
    Ok(log_probs.iter().zip(ref_log_probs).map(|(a, b)| a - b).sum())
}

/// G completions for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub completions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<Vec<f64>>,
    pub ref_log_probs: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.completions.len()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |message: String| GrpoError::InvalidGroup { sample_id: self.sample_id.clone(), message };
        let g = self.completions.len();
        if g < 2 {
            return Err(bad(format!("group size {g} < 2")));
        }
        for (name, len) in [
            ("rewards", self.rewards.len()),
            ("log_probs", self.log_probs.len()),
            ("ref_log_probs", self.ref_log_probs.len()),
            ("advantages", self.advantages.len()),
        ] {
            if len != g {
                return Err(bad(format!("{name} has {len} entries, expected {g}")));
            }
        }
        for (i, c) in self.completions.iter().enumerate() {
            if self.log_probs[i].len() != c.len() || self.ref_log_probs[i].len() != c.len() {
                return Err(bad(format!("completion {i}: per-token log-prob lengths do not match {} tokens", c.len())));
            }
        }
        Ok(())
    }

    pub fn sequence_log_probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.iter().sum()).collect()
    }

    pub fn kl_estimates(&self) -> Result<Vec<f64>, GrpoError> {
        self.log_probs.iter().zip(&self.ref_log_probs).map(|(a, b)| kl_estimate(a, b)).collect()
    }
}

/// Mean KL estimate over every completion of every group.
pub fn mean_kl(groups: &[RolloutGroup]) -> Result<f64, GrpoError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for g in groups {
        for k in g.kl_estimates()? {
            sum += k;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Scalar objective to maximize.
pub fn grpo_objective(groups: &[RolloutGroup], kl_coefficient: f64) -> Result<f64, GrpoError> {
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut pg = 0.0;
    for g in groups {
        g.validate()?;
        let seq = g.sequence_log_probs();
        pg += g.advantages.iter().zip(&seq).map(|(a, lp)| a * lp).sum::<f64>() / g.size() as f64;
    }
    pg /= groups.len() as f64;
    Ok(pg - kl_coefficient * mean_kl(groups)?)
}

/// Recomputes every group's `log_probs` under `policy`.
pub fn refresh_log_probs(policy: &ToyPolicy, samples: &[Sample], groups: &mut [RolloutGroup]) -> Result<(), GrpoError> {
    for (s, g) in samples.iter().zip(groups.iter_mut()) {
        g.log_probs = g.completions.iter().map(|c| policy.token_log_probs(s, c)).collect::<Result<_, _>>()?;
    }
    Ok(())
}

/// `grpo_objective` as a function of the policy parameters, holding the
/// sampled completions, advantages and reference log-probs fixed.
pub fn objective_for_policy(
    policy: &ToyPolicy,
    samples: &[Sample],
    groups: &[RolloutGroup],
    kl_coefficient: f64,
) -> Result<f64, GrpoError> {
    let mut groups = groups.to_vec();
    refresh_log_probs(policy, samples, &mut groups)?;
    grpo_objective(&groups, kl_coefficient)
}

/// Σ over groups and completions of `weights[i][g] · ∇ log P_θ(s_g)`, scaled
/// by `1 / (#groups · G)`.
pub fn weighted_log_prob_gradient(
    policy: &ToyPolicy,
    samples: &[Sample],
    groups: &[RolloutGroup],
    weights: &[Vec<f64>],
) -> Result<PolicyGradient, GrpoError> {
    let mut grad = policy.zero_gradient();
    let n_groups = groups.len() as f64;
    for ((s, g), w) in samples.iter().zip(groups).zip(weights) {
        let scale = 1.0 / (n_groups * g.size() as f64);
        for (c, wg) in g.completions.iter().zip(w) {
            policy.accumulate_log_prob_gradient(s, c, wg * scale, &mut grad)?;
        }
    }
    Ok(grad)
}

/// Exact gradient of [`objective_for_policy`]: the sampled KL estimate
/// differentiates to `∇ log P_θ(s_g)`, so each completion carries weight `Â_g − λ`.
pub fn objective_gradient(
    policy: &ToyPolicy,
    samples: &[Sample],
    groups: &[RolloutGroup],
    kl_coefficient: f64,
) -> Result<PolicyGradient, GrpoError> {
    let weights: Vec<Vec<f64>> =
        groups.iter().map(|g| g.advantages.iter().map(|a| a - kl_coefficient).collect()).collect();
    weighted_log_prob_gradient(policy, samples, groups, &weights)
}

/// Per-completion weights of the score-function update direction:
/// `Â_g − λ · (k_g − b_g)`, where `k_g` is the completion's log-ratio and
/// `b_g` the mean log-ratio of the other members of its group.
///
/// Differentiating the sampled KL estimate with the samples held fixed has
/// zero mean under `P_θ`; the score-function form is what actually pulls the
/// policy toward the reference.
pub fn update_weights(groups: &[RolloutGroup], kl_coefficient: f64) -> Result<Vec<Vec<f64>>, GrpoError> {
    groups
        .iter()
        .map(|g| {
            let kl = g.kl_estimates()?;
            let total: f64 = kl.iter().sum();
            let others = (kl.len() - 1) as f64;
            Ok(g.advantages.iter().zip(&kl).map(|(a, k)| a - kl_coefficient * (k - (total - k) / others)).collect())
        })
        .collect()
}

pub fn update_direction(
    policy: &ToyPolicy,
    samples: &[Sample],
    groups: &[RolloutGroup],
    kl_coefficient: f64,
) -> Result<PolicyGradient, GrpoError> {
    let w = update_weights(groups, kl_coefficient)?;
    weighted_log_prob_gradient(policy, samples, groups, &w)
}

/// Scores one completion for one sample.
pub trait RewardFn: Sync {
    fn score(&self, sample: &Sample, completion: &str) -> Result<f64, BoxError>;
}

impl<F> RewardFn for F
where
    F: Fn(&Sample, &str) -> Result<f64, BoxError> + Sync,
{
    fn score(&self, sample: &Sample, completion: &str) -> Result<f64, BoxError> {
        self(sample, completion)
    }
}

/// The weighted rationale reward as a [`RewardFn`].
#[derive(Debug, Clone)]
pub struct RationaleReward {
    pub lexicon: Lexicon,
    pub evidence_weights: EvidenceWeights,
    pub reward_weights: RewardWeights,
}

impl RewardFn for RationaleReward {
    fn score(&self, sample: &Sample, completion: &str) -> Result<f64, BoxError> {
        Ok(total_reward(sample, completion, &self.lexicon, &self.evidence_weights, &self.reward_weights).total)
    }
}

/// Summary of one optimization step. All statistics describe the rollouts
/// sampled at the start of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Seed of the whole run (`GrpoConfig::seed`).
    pub run_seed: u64,
    /// Seed this step's rollouts were drawn with.
    pub step_seed: u64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub objective: f64,
    /// Fraction of rollouts whose parsed verdict equals the gold label.
    pub verdict_accuracy: f64,
    pub mean_format_reward: f64,
    pub mean_length: f64,
    pub update_norm: f64,
}

struct Rollout {
    tokens: Vec<usize>,
    reward: f64,
    correct: bool,
    format: f64,
}

fn sample_group(
    policy: &ToyPolicy,
    sample: &Sample,
    index: usize,
    reward_fn: &dyn RewardFn,
    config: &GrpoConfig,
    seed: u64,
) -> Result<Vec<Rollout>, GrpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let decoding = Decoding::Sample { temperature: config.temperature };
    (0..config.group_size)
        .map(|_| {
            let gen = policy.generate_with(sample, decoding, config.max_response_length, &mut rng);
            let text = policy.render(&gen.tokens);
            let reward = reward_fn
                .score(sample, &text)
                .map_err(|source| GrpoError::Reward { sample_id: sample.id.clone(), source })?;
            let parsed = parse_completion(&text);
            Ok(Rollout {
                tokens: gen.tokens,
                reward,
                correct: parsed.verdict.matches(sample.label),
                format: format_reward(&parsed),
            })
        })
        .collect()
}

/// One GRPO step: sample groups, score, normalize, then `ppo_epochs`
/// gradient-ascent passes over the same rollouts with recomputed log-probs.
pub fn grpo_step(
    policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    batch: &[Sample],
    reward_fn: &dyn RewardFn,
    config: &GrpoConfig,
    seed: u64,
) -> Result<(ToyPolicy, StepReport), GrpoError> {
    config.validate()?;
    if !policy.same_architecture(ref_policy) {
        return Err(GrpoError::ArchitectureMismatch);
    }
    let sampled: Vec<Vec<Rollout>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_group(policy, s, i, reward_fn, config, seed))
        .collect::<Result<_, _>>()?;

    let mut groups = Vec::with_capacity(batch.len());
    for (s, rollouts) in batch.iter().zip(&sampled) {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let completions: Vec<Vec<usize>> = rollouts.iter().map(|r| r.tokens.clone()).collect();
        let ref_log_probs = completions.iter().map(|c| ref_policy.token_log_probs(s, c)).collect::<Result<_, _>>()?;
        groups.push(RolloutGroup {
            sample_id: s.id.clone(),
            advantages: normalize_advantages(&rewards, config.epsilon)?,
            completions,
            rewards,
            log_probs: Vec::new(),
            ref_log_probs,
        });
    }

    let mut current = policy.clone();
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut update_norm = 0.0;
    for epoch in 0..config.ppo_epochs.max(1) {
        refresh_log_probs(&current, batch, &mut groups)?;
        if epoch == 0 {
            objective = grpo_objective(&groups, config.kl_coefficient)?;
            kl = mean_kl(&groups)?;
        }
        if epoch < config.ppo_epochs {
            let dir = update_direction(&current, batch, &groups, config.kl_coefficient)?;
            update_norm += dir.norm() * config.learning_rate;
            current.apply_gradient(&dir, config.learning_rate);
        }
    }

    let all: Vec<&Rollout> = sampled.iter().flatten().collect();
    let n = all.len().max(1) as f64;
    let report = StepReport {
        step: 0,
        run_seed: config.seed,
        step_seed: seed,
        mean_reward: all.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_kl: kl,
        objective,
        verdict_accuracy: all.iter().filter(|r| r.correct).count() as f64 / n,
        mean_format_reward: all.iter().map(|r| r.format).sum::<f64>() / n,
        mean_length: all.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / n,
        update_norm,
    };
    Ok((current, report))
}

/// Options for a multi-step GRPO run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub steps: usize,
    pub batch_size: usize,
}

/// Seed of step `step` within a run seeded by `run_seed`.
pub fn step_seed(run_seed: u64, step: usize) -> u64 {
    // splitmix64 increment keeps neighbouring steps decorrelated.
    run_seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `steps` GRPO steps over shuffled minibatches of `corpus`, calling
/// `on_step` after each one. Returning `false` from `on_step` stops early.
pub fn run_grpo(
    policy: &ToyPolicy,
    ref_policy: &ToyPolicy,
    corpus: &[Sample],
    reward_fn: &dyn RewardFn,
    config: &GrpoConfig,
    options: RunOptions,
    mut on_step: impl FnMut(&ToyPolicy, &StepReport) -> bool,
) -> Result<(ToyPolicy, Vec<StepReport>), GrpoError> {
    if corpus.is_empty() {
        return Err(GrpoError::Config("training corpus is empty".into()));
    }
    let batch_size = options.batch_size.clamp(1, corpus.len());
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut current = policy.clone();
    let mut reports = Vec::with_capacity(options.steps);
    for step in 0..options.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].clone());
            cursor += 1;
        }
        let (next, mut report) =
            grpo_step(&current, ref_policy, &batch, reward_fn, config, step_seed(config.seed, step))?;
        report.step = step;
        current = next;
        let keep_going = on_step(&current, &report);
        reports.push(report);
        if !keep_going {
            break;
        }
    }
    Ok((current, reports))
}
