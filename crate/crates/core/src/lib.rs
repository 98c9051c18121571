//! Rule-based rewards for structured harm rationales, group-relative policy
//! optimization on a toy autoregressive policy, and evaluation metrics.

pub mod data_io;
pub mod grpo;
pub mod lexicon;
pub mod metrics;
pub mod policy;
pub mod rationale;
pub mod rewards;

pub use grpo::{GrpoConfig, GrpoError, RewardFn, RolloutGroup, StepReport};
pub use lexicon::{Lexicon, LexiconError};
pub use policy::{PolicyError, ToyPolicy};
pub use rationale::{parse_completion, DatasetName, HarmClass, Label, ParsedCompletion, Sample, Verdict};
pub use rewards::{total_reward, EvidenceWeights, RewardBreakdown, RewardWeights};
