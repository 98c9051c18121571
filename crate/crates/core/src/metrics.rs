//! Classification and reasoning-quality evaluation.
//!
//! Invalid verdicts are never correct: they count as a miss (false negative)
//! for the gold class and as a prediction of neither class.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rationale::{DatasetName, HarmClass, Label, Sample, Verdict};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("predictions ({preds}) and gold labels ({golds}) differ in length")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("transfer matrix needs at least two datasets, got {0}")]
    TooFewDatasets(usize),
    #[error("no predictor for dataset {0}")]
    MissingPredictor(String),
    #[error("pair references unknown sample {0:?}")]
    DanglingPair(String),
    #[error("rubric score out of range: {0}")]
    RubricRange(String),
}

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn for_class(class: Label, preds: &[Verdict], golds: &[Label]) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, g) in preds.iter().zip(golds) {
            let predicted = p.label() == Some(class);
            let actual = *g == class;
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `None` when the class occurs in neither golds nor predictions.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub harmful: ConfusionCounts,
    pub benign: ConfusionCounts,
}

impl fmt::Display for ClassificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} accuracy={} macro_f1={}", self.n, pct(self.accuracy), pct(self.macro_f1))
    }
}

/// Percentage with one decimal, the precision used in reports.
pub fn pct(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// Mean of per-class F1 over the classes present in golds or predictions.
pub fn macro_f1_of(counts: &[ConfusionCounts]) -> f64 {
    let f1s: Vec<f64> = counts.iter().filter_map(ConfusionCounts::f1).collect();
    if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

pub fn classification_report(preds: &[Verdict], golds: &[Label]) -> Result<ClassificationReport, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let harmful = ConfusionCounts::for_class(Label::Harmful, preds, golds);
    let benign = ConfusionCounts::for_class(Label::Benign, preds, golds);
    let correct = preds.iter().zip(golds).filter(|(p, g)| p.matches(**g)).count();
    Ok(ClassificationReport {
        n: golds.len(),
        accuracy: correct as f64 / golds.len() as f64,
        macro_f1: macro_f1_of(&[harmful, benign]),
        harmful,
        benign,
    })
}

pub fn accuracy_and_macro_f1(preds: &[Verdict], golds: &[Label]) -> Result<(f64, f64), MetricsError> {
    classification_report(preds, golds).map(|r| (r.accuracy, r.macro_f1))
}

/// Expected accuracy and macro-F1 of a uniform coin-flip classifier, computed
/// from the expected confusion counts.
pub fn random_baseline(golds: &[Label]) -> Result<(f64, f64), MetricsError> {
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = golds.iter().filter(|g| **g == Label::Harmful).count() as f64;
    let neg = golds.len() as f64 - pos;
    // Each class: tp = n_c/2, fp = n_other/2, fn = n_c/2.
    let f1 = |c: f64, other: f64| {
        let denom = c + other / 2.0 + c / 2.0;
        (denom > 0.0).then(|| c / denom)
    };
    let present: Vec<f64> = [f1(pos, neg), f1(neg, pos)].into_iter().flatten().collect();
    Ok((0.5, present.iter().sum::<f64>() / present.len() as f64))
}

pub trait Predictor {
    fn predict(&self, sample: &Sample) -> Verdict;
}

impl<F: Fn(&Sample) -> Verdict> Predictor for F {
    fn predict(&self, sample: &Sample) -> Verdict {
        self(sample)
    }
}

/// Macro-F1 for every (training dataset, evaluation dataset) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferMatrix {
    pub datasets: Vec<DatasetName>,
    /// `f1[train][eval]`, fractions in `[0, 1]`.
    pub f1: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn from_cells(datasets: Vec<DatasetName>, f1: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if datasets.len() < 2 {
            return Err(MetricsError::TooFewDatasets(datasets.len()));
        }
        if f1.len() != datasets.len() || f1.iter().any(|r| r.len() != datasets.len()) {
            return Err(MetricsError::LengthMismatch { preds: f1.len(), golds: datasets.len() });
        }
        Ok(TransferMatrix { datasets, f1 })
    }

    pub fn in_domain(&self, row: usize) -> f64 {
        self.f1[row][row]
    }

    pub fn out_of_domain(&self, row: usize) -> Vec<(DatasetName, f64)> {
        self.datasets.iter().enumerate().filter(|(j, _)| *j != row).map(|(j, d)| (d.clone(), self.f1[row][j])).collect()
    }

    /// In-domain F1 minus the mean out-of-domain F1 of the row.
    pub fn delta(&self, row: usize) -> f64 {
        let ood = self.out_of_domain(row);
        self.in_domain(row) - ood.iter().map(|(_, v)| v).sum::<f64>() / ood.len() as f64
    }

    pub fn deltas(&self) -> Vec<f64> {
        (0..self.datasets.len()).map(|r| self.delta(r)).collect()
    }
}

impl fmt::Display for TransferMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "Train")?;
        for d in &self.datasets {
            write!(f, " {:>9}", format!("->{d}"))?;
        }
        writeln!(f, " {:>7}", "Delta")?;
        for (i, d) in self.datasets.iter().enumerate() {
            write!(f, "{:<10}", d.as_str())?;
            for v in &self.f1[i] {
                write!(f, " {:>9}", pct(*v))?;
            }
            writeln!(f, " {:>7}", pct(self.delta(i)))?;
        }
        Ok(())
    }
}

pub fn transfer_matrix(
    predictors: &BTreeMap<DatasetName, Box<dyn Predictor + '_>>,
    datasets: &BTreeMap<DatasetName, Vec<Sample>>,
) -> Result<TransferMatrix, MetricsError> {
    if datasets.len() < 2 {
        return Err(MetricsError::TooFewDatasets(datasets.len()));
    }
    let names: Vec<DatasetName> = datasets.keys().cloned().collect();
    let mut f1 = Vec::with_capacity(names.len());
    for train in &names {
        let predictor = predictors.get(train).ok_or_else(|| MetricsError::MissingPredictor(train.to_string()))?;
        let mut row = Vec::with_capacity(names.len());
        for eval in &names {
            let samples = &datasets[eval];
            let preds: Vec<Verdict> = samples.iter().map(|s| predictor.predict(s)).collect();
            let golds: Vec<Label> = samples.iter().map(|s| s.label).collect();
            row.push(classification_report(&preds, &golds)?.macro_f1);
        }
        f1.push(row);
    }
    TransferMatrix::from_cells(names, f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeldOutReport {
    pub held_out: HarmClass,
    pub harmful_samples: usize,
    pub benign_samples: usize,
    pub macro_f1: f64,
}

/// Macro-F1 on the held-out class's harmful samples plus every benign sample
/// of `samples`. Harmful samples of other classes are excluded.
pub fn leave_one_class_out_eval(
    preds: &HashMap<String, Verdict>,
    samples: &[Sample],
    held_out: HarmClass,
) -> Result<HeldOutReport, MetricsError> {
    let subset: Vec<&Sample> =
        samples.iter().filter(|s| s.label == Label::Benign || s.harm_class == Some(held_out)).collect();
    if subset.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut p = Vec::with_capacity(subset.len());
    for s in &subset {
        p.push(*preds.get(&s.id).ok_or_else(|| MetricsError::DanglingPair(s.id.clone()))?);
    }
    let golds: Vec<Label> = subset.iter().map(|s| s.label).collect();
    let harmful_samples = golds.iter().filter(|g| **g == Label::Harmful).count();
    Ok(HeldOutReport {
        held_out,
        harmful_samples,
        benign_samples: golds.len() - harmful_samples,
        macro_f1: classification_report(&p, &golds)?.macro_f1,
    })
}

/// Fraction of pairs whose two members are both classified correctly.
pub fn counterfactual_pair_accuracy(
    preds: &HashMap<String, Verdict>,
    golds: &HashMap<String, Label>,
    pairs: &[(String, String)],
) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = |id: &String| -> Result<bool, MetricsError> {
        let p = preds.get(id).ok_or_else(|| MetricsError::DanglingPair(id.clone()))?;
        let g = golds.get(id).ok_or_else(|| MetricsError::DanglingPair(id.clone()))?;
        Ok(p.matches(*g))
    };
    let mut hits = 0;
    for (a, b) in pairs {
        // Evaluate both so a dangling second id is still reported.
        let (ca, cb) = (correct(a)?, correct(b)?);
        if ca && cb {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Pairs implied by `counterfactual_pair_id` links, each reported once.
pub fn pairs_from_samples(samples: &[Sample]) -> Vec<(String, String)> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for s in samples {
        if let Some(other) = &s.counterfactual_pair_id {
            let key = if s.id <= *other { (s.id.clone(), other.clone()) } else { (other.clone(), s.id.clone()) };
            if seen.insert(key.clone()) {
                out.push(key);
            }
        }
    }
    out
}

/// Judge scores for one rationale: four 0–3 dimensions and binary verdict consistency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRubric")]
pub struct RubricScore {
    pub vg: u8,
    pub tg: u8,
    pub cm: u8,
    pub hm: u8,
    pub vc: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRubric {
    vg: u8,
    tg: u8,
    cm: u8,
    hm: u8,
    vc: u8,
}

impl TryFrom<RawRubric> for RubricScore {
    type Error = MetricsError;
    fn try_from(r: RawRubric) -> Result<Self, Self::Error> {
        RubricScore::new(r.vg, r.tg, r.cm, r.hm, r.vc)
    }
}

impl RubricScore {
    pub fn new(vg: u8, tg: u8, cm: u8, hm: u8, vc: u8) -> Result<Self, MetricsError> {
        for (name, v) in [("vg", vg), ("tg", tg), ("cm", cm), ("hm", hm)] {
            if v > 3 {
                return Err(MetricsError::RubricRange(format!("{name}={v}, expected 0..=3")));
            }
        }
        if vc > 1 {
            return Err(MetricsError::RubricRange(format!("vc={vc}, expected 0 or 1")));
        }
        Ok(RubricScore { vg, tg, cm, hm, vc })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimensionSummary {
    /// Percentage of examples counted as valid (≥ 2, or = 1 for VC).
    pub valid_pct: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RubricReport {
    pub n: usize,
    pub vg: DimensionSummary,
    pub tg: DimensionSummary,
    pub cm: DimensionSummary,
    pub hm: DimensionSummary,
    pub vc: DimensionSummary,
}

impl RubricReport {
    /// Valid percentages in column order VG, TG, CM, HM, VC.
    pub fn row(&self) -> [f64; 5] {
        [self.vg.valid_pct, self.tg.valid_pct, self.cm.valid_pct, self.hm.valid_pct, self.vc.valid_pct]
    }
}

impl fmt::Display for RubricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>6} {:>6} {:>6} {:>6}", "VG", "TG", "CM", "HM", "VC")?;
        let r = self.row();
        writeln!(f, "{:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1}", r[0], r[1], r[2], r[3], r[4])?;
        write!(
            f,
            "{:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            self.vg.mean, self.tg.mean, self.cm.mean, self.hm.mean, self.vc.mean
        )
    }
}

pub fn aggregate_rubric(scores: &[RubricScore]) -> Result<RubricReport, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = scores.len() as f64;
    let summarize = |get: fn(&RubricScore) -> u8, threshold: u8| DimensionSummary {
        valid_pct: 100.0 * scores.iter().filter(|s| get(s) >= threshold).count() as f64 / n,
        mean: scores.iter().map(|s| f64::from(get(s))).sum::<f64>() / n,
    };
    Ok(RubricReport {
        n: scores.len(),
        vg: summarize(|s| s.vg, 2),
        tg: summarize(|s| s.tg, 2),
        cm: summarize(|s| s.cm, 2),
        hm: summarize(|s| s.hm, 2),
        vc: summarize(|s| s.vc, 1),
    })
}
