//! Rule-based reward components for structured rationales and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::lexicon::{tokenize, Lexicon, PhraseCounts};
use crate::rationale::{parse_completion, Label, ParsedCompletion, Sample, Verdict};

pub const OUTCOME_INVALID: f64 = -3.0;
pub const OUTCOME_CORRECT: f64 = 0.2;
pub const OUTCOME_WRONG: f64 = -2.0;

pub const CONSISTENCY_NO_VERDICT: f64 = -0.5;
pub const CONSISTENCY_CONTRADICTION: f64 = -0.75;
pub const CONSISTENCY_SUPPORTED: f64 = 1.0;
pub const CONSISTENCY_NEUTRAL: f64 = 0.35;

/// Coefficients of the evidence-alignment indicators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl Default for EvidenceWeights {
    fn default() -> Self {
        EvidenceWeights { a: 0.3, b: 0.3, c: 0.35, d: 0.15, e: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub outcome: f64,
    pub format: f64,
    pub evidence: f64,
    pub consistency: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { outcome: 5.0, format: 0.15, evidence: 0.07, consistency: 0.02 }
    }
}

impl RewardWeights {
    pub const ZERO: RewardWeights = RewardWeights { outcome: 0.0, format: 0.0, evidence: 0.0, consistency: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub outcome: f64,
    pub format: f64,
    pub evidence: f64,
    pub consistency: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Reweights already-computed components.
    pub fn with_weights(&self, w: &RewardWeights) -> RewardBreakdown {
        RewardBreakdown {
            total: w.outcome * self.outcome
                + w.format * self.format
                + w.evidence * self.evidence
                + w.consistency * self.consistency,
            ..*self
        }
    }
}

pub fn outcome_reward(gold: Label, verdict: Verdict) -> f64 {
    match verdict.label() {
        None => OUTCOME_INVALID,
        Some(l) if l == gold => OUTCOME_CORRECT,
        Some(_) => OUTCOME_WRONG,
    }
}

/// Per-term contributions of the format reward before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FormatTerms {
    pub grounding: f64,
    pub inference: f64,
    pub verdict_tag: f64,
    pub label: f64,
    pub length: f64,
    pub conflict: f64,
}

impl FormatTerms {
    pub fn of(parsed: &ParsedCompletion) -> Self {
        let one = |n: usize, miss: f64| if n == 1 { 0.25 } else { miss };
        let w = parsed.word_count;
        FormatTerms {
            grounding: one(parsed.grounding_count, -0.25),
            inference: one(parsed.inference_count, -0.25),
            verdict_tag: one(parsed.verdict_count, -0.35),
            label: if parsed.has_single_valid_label() { 0.25 } else { -0.35 },
            length: if (60..=240).contains(&w) {
                0.15
            } else if !(35..=420).contains(&w) {
                -0.20
            } else {
                0.0
            },
            conflict: if parsed.conflicting_verdicts { -0.50 } else { 0.0 },
        }
    }

    pub fn sum(&self) -> f64 {
        self.grounding + self.inference + self.verdict_tag + self.label + self.length + self.conflict
    }
}

pub fn format_reward(parsed: &ParsedCompletion) -> f64 {
    FormatTerms::of(parsed).sum().clamp(-1.0, 1.0)
}

/// Which evidence indicators fired on a completion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EvidenceIndicators {
    pub visual: bool,
    pub textual: bool,
    pub bridge: bool,
    pub generic: bool,
}

impl EvidenceIndicators {
    pub fn of(raw_completion: &str, lexicon: &Lexicon) -> Self {
        let tokens = tokenize(raw_completion);
        EvidenceIndicators {
            visual: lexicon.visual_terms.matches_tokens(&tokens),
            textual: lexicon.textual_terms.matches_tokens(&tokens),
            bridge: lexicon.bridge_terms.matches_tokens(&tokens),
            generic: lexicon.generic_patterns.matches_tokens(&tokens),
        }
    }

    pub fn all(&self) -> bool {
        self.visual && self.textual && self.bridge
    }

    pub fn score(&self, w: &EvidenceWeights) -> f64 {
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        let raw = w.a * ind(self.visual) + w.b * ind(self.textual) + w.c * ind(self.bridge) + w.d * ind(self.all())
            - w.e * ind(self.generic);
        raw.clamp(-0.5, 1.0)
    }
}

pub fn evidence_reward(raw_completion: &str, lexicon: &Lexicon, w: &EvidenceWeights) -> f64 {
    EvidenceIndicators::of(raw_completion, lexicon).score(w)
}

/// Consistency between the rationale's phrase counts and the final verdict.
pub fn consistency_from_counts(verdict: Verdict, c: PhraseCounts) -> f64 {
    let (harm, benign, neg) = (c.harm, c.benign, c.negated_harm);
    match verdict {
        Verdict::Invalid => CONSISTENCY_NO_VERDICT,
        Verdict::Harmful => {
            if benign > harm && neg > 0 {
                CONSISTENCY_CONTRADICTION
            } else if harm > benign {
                CONSISTENCY_SUPPORTED
            } else {
                CONSISTENCY_NEUTRAL
            }
        }
        Verdict::Benign => {
            if harm > benign + neg + 1 {
                CONSISTENCY_CONTRADICTION
            } else if benign > 0 || neg > 0 {
                CONSISTENCY_SUPPORTED
            } else {
                CONSISTENCY_NEUTRAL
            }
        }
    }
}

pub fn consistency_reward(parsed: &ParsedCompletion, lexicon: &Lexicon) -> f64 {
    if !parsed.verdict.is_valid() {
        return CONSISTENCY_NO_VERDICT;
    }
    consistency_from_counts(parsed.verdict, lexicon.phrase_counts(parsed.rationale_body()))
}

pub fn score_parsed(
    gold: Label,
    parsed: &ParsedCompletion,
    lexicon: &Lexicon,
    ew: &EvidenceWeights,
    rw: &RewardWeights,
) -> RewardBreakdown {
    RewardBreakdown {
        outcome: outcome_reward(gold, parsed.verdict),
        format: format_reward(parsed),
        evidence: evidence_reward(&parsed.raw, lexicon, ew),
        consistency: consistency_reward(parsed, lexicon),
        total: 0.0,
    }
    .with_weights(rw)
}

pub fn total_reward(
    sample: &Sample,
    completion_text: &str,
    lexicon: &Lexicon,
    ew: &EvidenceWeights,
    rw: &RewardWeights,
) -> RewardBreakdown {
    score_parsed(sample.label, &parse_completion(completion_text), lexicon, ew, rw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parsed_with(g: usize, i: usize, v: usize, verdict: Verdict, words: usize, conflict: bool) -> ParsedCompletion {
        ParsedCompletion {
            raw: String::new(),
            grounding_count: g,
            inference_count: i,
            verdict_count: v,
            grounding_text: None,
            inference_text: None,
            verdict_text: None,
            verdict,
            word_count: words,
            conflicting_verdicts: conflict,
        }
    }

    #[test]
    fn outcome_branches() {
        assert_eq!(outcome_reward(Label::Harmful, Verdict::Harmful), 0.2);
        assert_eq!(outcome_reward(Label::Harmful, Verdict::Invalid), -3.0);
        assert_eq!(outcome_reward(Label::Benign, Verdict::Harmful), -2.0);
        assert_eq!(outcome_reward(Label::Benign, Verdict::Benign), 0.2);
    }

    #[test]
    fn format_examples() {
        let good = parsed_with(1, 1, 1, Verdict::Harmful, 100, false);
        assert_eq!(FormatTerms::of(&good).sum(), 1.15);
        assert_eq!(format_reward(&good), 1.0);

        let empty = parse_completion("");
        let t = FormatTerms::of(&empty);
        assert_eq!(
            (t.grounding, t.inference, t.verdict_tag, t.label, t.length, t.conflict),
            (-0.25, -0.25, -0.35, -0.35, -0.20, 0.0)
        );
        assert_eq!(format_reward(&empty), -1.0);

        assert_eq!(format_reward(&parsed_with(1, 1, 1, Verdict::Benign, 300, false)), 1.0);
    }

    #[test]
    fn length_band_edges() {
        let len = |w| FormatTerms::of(&parsed_with(1, 1, 1, Verdict::Benign, w, false)).length;
        assert_eq!(len(34), -0.20);
        assert_eq!(len(35), 0.0);
        assert_eq!(len(59), 0.0);
        assert_eq!(len(60), 0.15);
        assert_eq!(len(240), 0.15);
        assert_eq!(len(241), 0.0);
        assert_eq!(len(420), 0.0);
        assert_eq!(len(421), -0.20);
    }

    #[test]
    fn conflict_penalises_label_and_sum() {
        let p = parsed_with(1, 1, 2, Verdict::Benign, 100, true);
        let t = FormatTerms::of(&p);
        assert_eq!(t.label, -0.35);
        assert_eq!(t.conflict, -0.5);
        assert_eq!(t.verdict_tag, -0.35);
        // 0.25 + 0.25 - 0.35 - 0.35 + 0.15 - 0.5
        assert!((format_reward(&p) - (-0.55)).abs() < 1e-12);
    }

    #[test]
    fn evidence_examples() {
        let lex = Lexicon::default_lexicon();
        let w = EvidenceWeights::default();
        assert_eq!(evidence_reward("the image and its caption together", &lex, &w), 1.0);
        assert_eq!(evidence_reward("nothing relevant here", &lex, &w), 0.0);
        assert_eq!(evidence_reward("obviously", &lex, &w), -0.3);
        // Unclipped sum is 0.3 + 0.3 + 0.35 + 0.15 = 1.1.
        let all = EvidenceIndicators { visual: true, textual: true, bridge: true, generic: false };
        let unclipped = EvidenceWeights { a: 0.3, b: 0.3, c: 0.35, d: 0.15, e: 0.3 };
        assert_eq!(all.score(&unclipped), 1.0);
        let half = EvidenceWeights { a: 0.15, b: 0.15, c: 0.175, d: 0.075, e: 0.15 };
        assert!((all.score(&half) - 0.55).abs() < 1e-12);
        // Generic penalty stacks with positive indicators.
        let mixed = EvidenceIndicators { visual: true, generic: true, ..Default::default() };
        assert!(mixed.score(&w).abs() < 1e-12);
    }

    #[test]
    fn evidence_lower_clip() {
        let w = EvidenceWeights { a: 0.0, b: 0.0, c: 0.0, d: 0.0, e: 2.0 };
        let i = EvidenceIndicators { generic: true, ..Default::default() };
        assert_eq!(i.score(&w), -0.5);
    }

    #[test]
    fn consistency_branches() {
        let c = |h, b, n| PhraseCounts { harm: h, benign: b, negated_harm: n };
        assert_eq!(consistency_from_counts(Verdict::Harmful, c(3, 0, 0)), 1.0);
        assert_eq!(consistency_from_counts(Verdict::Harmful, c(0, 2, 1)), -0.75);
        assert_eq!(consistency_from_counts(Verdict::Harmful, c(1, 1, 0)), 0.35);
        assert_eq!(consistency_from_counts(Verdict::Harmful, c(0, 2, 0)), 0.35);
        assert_eq!(consistency_from_counts(Verdict::Invalid, c(3, 0, 0)), -0.5);
        assert_eq!(consistency_from_counts(Verdict::Benign, c(4, 1, 1)), -0.75);
        // 3 > 0 + 1 + 1 is also a contradiction even though c_neg > 0.
        assert_eq!(consistency_from_counts(Verdict::Benign, c(3, 0, 1)), -0.75);
        assert_eq!(consistency_from_counts(Verdict::Benign, c(2, 0, 1)), 1.0);
        assert_eq!(consistency_from_counts(Verdict::Benign, c(0, 0, 0)), 0.35);
        assert_eq!(consistency_from_counts(Verdict::Benign, c(2, 0, 0)), -0.75);
    }

    #[test]
    fn consistency_uses_rationale_body_only() {
        let lex = Lexicon::default_lexicon();
        // Harm phrase sits in the grounding section, so the body has no counts.
        let p = parse_completion("[GROUNDING] hateful [INFERENCE] a picture [VERDICT] HARMFUL");
        assert_eq!(consistency_reward(&p, &lex), 0.35);
        let p = parse_completion("[GROUNDING] x [INFERENCE] hateful [VERDICT] HARMFUL");
        assert_eq!(consistency_reward(&p, &lex), 1.0);
    }

    #[test]
    fn zero_weights_total_zero() {
        let lex = Lexicon::default_lexicon();
        let s = Sample::new("s", Label::Harmful, 0);
        for text in ["", "[VERDICT] HARMFUL", "garbage [INFERENCE]"] {
            let r = total_reward(&s, text, &lex, &EvidenceWeights::default(), &RewardWeights::ZERO);
            assert_eq!(r.total, 0.0);
        }
    }

    #[test]
    fn empty_completion_total() {
        let lex = Lexicon::default_lexicon();
        let s = Sample::new("s", Label::Harmful, 0);
        let r = total_reward(&s, "", &lex, &EvidenceWeights::default(), &RewardWeights::default());
        assert_eq!((r.outcome, r.format, r.evidence, r.consistency), (-3.0, -1.0, 0.0, -0.5));
        assert!((r.total - (-15.16)).abs() < 1e-9);
    }
}
