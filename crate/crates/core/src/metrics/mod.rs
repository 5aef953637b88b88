//! Metric computation as pure folds over parsed answers.
//!
//! Every metric is a [`Metric`]: `None` marks an undefined value (an empty
//! group, a zero denominator) and is never replaced by zero or NaN. Format
//! errors count toward the format error rate and are excluded from every
//! confusion-matrix metric.

mod report;
mod stereo;

pub use report::{
    assemble_report, first_difference, GroupSpec, MetricReport, Provenance, ReportCounts, ScoringInput,
    INVALID_ANSWER_POLICY, REPORT_FORMAT,
};
pub use stereo::{stereo_scores, StereoCell, StereoScores, StereoSelector, StereoTally};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ReadingLabel;
use crate::exec::Exec;
use crate::parser::{Choice, ModelAnswer, Verdict};

/// A metric value; `None` when undefined.
pub type Metric = Option<f64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("instance {0} has no group assignment")]
    MissingGroup(String),
    #[error("value {value:?} of protected attribute {attribute:?} is not mapped to a group")]
    UnmappedGroupValue { attribute: String, value: String },
    #[error("instance {0} has no ground truth")]
    MissingTruth(String),
    #[error("answer for {instance_id} does not fit the task: {detail}")]
    TaskMismatch { instance_id: String, detail: String },
}

/// Protected-attribute group, `A ∈ {0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Group {
    Zero,
    One,
}

impl Group {
    pub fn index(self) -> usize {
        match self {
            Group::Zero => 0,
            Group::One => 1,
        }
    }

    pub fn swapped(self) -> Group {
        match self {
            Group::Zero => Group::One,
            Group::One => Group::Zero,
        }
    }
}

impl TryFrom<u8> for Group {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Group::Zero),
            1 => Ok(Group::One),
            other => Err(format!("group must be 0 or 1, got {other}")),
        }
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.index() as u8
    }
}

/// Which group each scored instance belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub protected_attribute: String,
    pub value_to_group: BTreeMap<String, Group>,
    members: BTreeMap<String, Group>,
}

impl GroupAssignment {
    pub fn new(protected_attribute: impl Into<String>, value_to_group: BTreeMap<String, Group>) -> Self {
        GroupAssignment {
            protected_attribute: protected_attribute.into(),
            value_to_group,
            members: BTreeMap::new(),
        }
    }

    /// Assigns an instance through the value map; unmapped values are an error.
    pub fn assign(&mut self, instance_id: &str, value: &str) -> Result<Group, MetricsError> {
        let group = *self
            .value_to_group
            .get(value)
            .ok_or_else(|| MetricsError::UnmappedGroupValue {
                attribute: self.protected_attribute.clone(),
                value: value.to_owned(),
            })?;
        self.members.insert(instance_id.to_owned(), group);
        Ok(group)
    }

    /// Assigns an instance directly, bypassing the value map.
    pub fn insert(&mut self, instance_id: impl Into<String>, group: Group) {
        self.members.insert(instance_id.into(), group);
    }

    pub fn group_of(&self, instance_id: &str) -> Option<Group> {
        self.members.get(instance_id).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl GroupCounts {
    pub fn valid(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn actual_positive(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn actual_negative(&self) -> u64 {
        self.fp + self.tn
    }

    fn add(self, o: GroupCounts) -> GroupCounts {
        GroupCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// P(Ŷ = 1) within the group.
    pub fn positive_rate(&self) -> Metric {
        ratio(self.predicted_positive(), self.valid())
    }

    pub fn true_positive_rate(&self) -> Metric {
        ratio(self.tp, self.actual_positive())
    }

    pub fn false_positive_rate(&self) -> Metric {
        ratio(self.fp, self.actual_negative())
    }
}

/// Per-group confusion tallies. Invariant: the cells of both groups plus
/// `invalid_count` sum to `total_count`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub groups: [GroupCounts; 2],
    pub invalid_count: u64,
    pub total_count: u64,
}

impl ConfusionCounts {
    pub fn group(&self, g: Group) -> &GroupCounts {
        &self.groups[g.index()]
    }

    pub fn pooled(&self) -> GroupCounts {
        self.groups[0].add(self.groups[1])
    }

    pub fn valid_count(&self) -> u64 {
        self.pooled().valid()
    }

    /// Same counts with the group labels exchanged.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts {
            groups: [self.groups[1], self.groups[0]],
            ..*self
        }
    }

    pub fn accuracy_counts(&self) -> AccuracyCounts {
        let pooled = self.pooled();
        AccuracyCounts {
            correct: pooled.tp + pooled.tn,
            valid: pooled.valid(),
            total: self.total_count,
        }
    }

    fn merge(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            groups: [self.groups[0].add(o.groups[0]), self.groups[1].add(o.groups[1])],
            invalid_count: self.invalid_count + o.invalid_count,
            total_count: self.total_count + o.total_count,
        }
    }
}

pub(crate) fn ratio(num: u64, den: u64) -> Metric {
    (den > 0).then(|| num as f64 / den as f64)
}

fn diff(a: Metric, b: Metric) -> Metric {
    Some(a? - b?)
}

/// Tallies answers into per-group confusion cells with `positive` as Ŷ = 1.
/// Format errors only increment `invalid_count`.
pub fn build_confusion(
    answers: &[ModelAnswer],
    truths: &BTreeMap<String, ReadingLabel>,
    groups: &GroupAssignment,
    positive: ReadingLabel,
    exec: Exec,
) -> Result<ConfusionCounts, MetricsError> {
    let tally_one = |answer: &ModelAnswer| -> Result<ConfusionCounts, MetricsError> {
        let id = &answer.prompt_ref.instance_id;
        let group = groups
            .group_of(id)
            .ok_or_else(|| MetricsError::MissingGroup(id.clone()))?;
        let truth = *truths
            .get(id)
            .ok_or_else(|| MetricsError::MissingTruth(id.clone()))?;
        let mut c = ConfusionCounts {
            total_count: 1,
            ..Default::default()
        };
        match answer.verdict {
            Verdict::FormatError => c.invalid_count = 1,
            Verdict::Valid(Choice::Reading(predicted)) => {
                let cell = &mut c.groups[group.index()];
                match (predicted == positive, truth == positive) {
                    (true, true) => cell.tp = 1,
                    (true, false) => cell.fp = 1,
                    (false, false) => cell.tn = 1,
                    (false, true) => cell.fn_ = 1,
                }
            }
            Verdict::Valid(other) => {
                return Err(MetricsError::TaskMismatch {
                    instance_id: id.clone(),
                    detail: format!("expected an H/L answer, got {other:?}"),
                })
            }
        }
        Ok(c)
    };
    exec.fold(
        answers,
        || Ok(ConfusionCounts::default()),
        |acc, a| Ok(acc?.merge(tally_one(a)?)),
        |a, b| Ok(a?.merge(b?)),
    )
}

/// P(Ŷ=1 | A=0) − P(Ŷ=1 | A=1).
pub fn statistical_parity_difference(c: &ConfusionCounts) -> Metric {
    diff(c.groups[0].positive_rate(), c.groups[1].positive_rate())
}

/// TPR₀ − TPR₁.
pub fn equal_opportunity_difference(c: &ConfusionCounts) -> Metric {
    diff(c.groups[0].true_positive_rate(), c.groups[1].true_positive_rate())
}

/// ((FPR₀ − FPR₁) + (TPR₀ − TPR₁)) / 2.
pub fn average_odds_difference(c: &ConfusionCounts) -> Metric {
    let fpr = diff(c.groups[0].false_positive_rate(), c.groups[1].false_positive_rate())?;
    let tpr = diff(c.groups[0].true_positive_rate(), c.groups[1].true_positive_rate())?;
    Some((fpr + tpr) / 2.0)
}

/// P(Ŷ=1 | A=0) / P(Ŷ=1 | A=1); undefined when the denominator is zero.
pub fn disparate_impact_ratio(c: &ConfusionCounts) -> Metric {
    let num = c.groups[0].positive_rate()?;
    let den = c.groups[1].positive_rate()?;
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationScores {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
}

/// Accuracy, precision and recall pooled over both groups, valid answers only.
pub fn classification_scores(c: &ConfusionCounts) -> ClassificationScores {
    let p = c.pooled();
    ClassificationScores {
        accuracy: ratio(p.tp + p.tn, p.valid()),
        precision: ratio(p.tp, p.predicted_positive()),
        recall: ratio(p.tp, p.actual_positive()),
    }
}

/// Invalid answers over all answers.
pub fn format_error_rate(answers: &[ModelAnswer]) -> Metric {
    let invalid = answers.iter().filter(|a| !a.verdict.is_valid()).count();
    ratio(invalid as u64, answers.len() as u64)
}

/// Correct / valid / total counts for accuracy with and without format errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyCounts {
    pub correct: u64,
    pub valid: u64,
    pub total: u64,
}

impl AccuracyCounts {
    /// Correct over all answers; a format error counts as wrong.
    pub fn overall_accuracy(&self) -> Metric {
        ratio(self.correct, self.total)
    }

    /// Correct over answers that named one of the options.
    pub fn valid_accuracy(&self) -> Metric {
        ratio(self.correct, self.valid)
    }

    pub fn format_error_rate(&self) -> Metric {
        ratio(self.total - self.valid, self.total)
    }
}

/// Tallies multiple-choice answers against their correct option index.
pub fn accuracy_counts<'a>(items: impl IntoIterator<Item = (&'a Verdict, usize)>) -> AccuracyCounts {
    let mut c = AccuracyCounts::default();
    for (verdict, correct) in items {
        c.total += 1;
        if let Verdict::Valid(choice) = verdict {
            c.valid += 1;
            if *choice == Choice::Option(correct) {
                c.correct += 1;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterfactualSummary {
    pub rate: Metric,
    /// Pairs with a valid answer on both sides.
    pub usable: u64,
    /// Pairs dropped because either side was a format error.
    pub excluded: u64,
}

/// Fraction of (original, counterfactual) pairs whose valid answers differ.
pub fn counterfactual_change_rate(pairs: &[(ModelAnswer, ModelAnswer)]) -> CounterfactualSummary {
    let mut usable = 0u64;
    let mut changed = 0u64;
    for (original, flipped) in pairs {
        if let (Some(a), Some(b)) = (original.verdict.choice(), flipped.verdict.choice()) {
            usable += 1;
            if a != b {
                changed += 1;
            }
        }
    }
    CounterfactualSummary {
        rate: ratio(changed, usable),
        usable,
        excluded: pairs.len() as u64 - usable,
    }
}
