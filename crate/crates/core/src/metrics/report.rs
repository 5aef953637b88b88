//! Assembles every metric of one evaluation into a [`MetricReport`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, Language, ReadingLabel, StereoCategory, TaskKind};
use crate::exec::Exec;
use crate::parser::{ModelAnswer, TaskContext};
use crate::prompt::COUNTERFACTUAL_SUFFIX;

use super::{
    accuracy_counts, average_odds_difference, build_confusion, classification_scores,
    counterfactual_change_rate, disparate_impact_ratio, equal_opportunity_difference,
    format_error_rate, statistical_parity_difference, stereo_scores, Group, GroupAssignment,
    Metric, MetricsError, StereoSelector, StereoTally,
};

pub const REPORT_FORMAT: &str = "fairproof-report-v1";

/// Recorded in every report so readers know how format errors were treated.
pub const INVALID_ANSWER_POLICY: &str = "format-errors-excluded-from-confusion-metrics";

/// Group binarization and favorable label for the PISA fairness metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub protected_attribute: String,
    pub value_to_group: BTreeMap<String, Group>,
    pub positive_label: ReadingLabel,
}

/// Parsed answers of one run, each with the context it was scored against.
/// Counterfactual answers are marked through their prompt reference.
#[derive(Debug, Clone, Copy)]
pub struct ScoringInput<'a> {
    pub model: &'a str,
    pub dataset: DatasetKind,
    pub language: Option<Language>,
    pub items: &'a [(ModelAnswer, TaskContext)],
    pub groups: Option<&'a GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Ledger head hash at the moment the report was assembled.
    pub ledger_head: String,
    pub config_digest: String,
    pub parser_policy: String,
    pub invalid_answer_policy: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportCounts {
    pub total: u64,
    pub valid: u64,
    pub invalid: u64,
    pub counterfactual_pairs: u64,
    pub counterfactual_usable: u64,
    pub counterfactual_excluded: u64,
}

/// Every metric of one run. Field order is fixed; `null` marks an undefined
/// or non-applicable metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub format: String,
    pub model: String,
    pub dataset: DatasetKind,
    pub language: Option<Language>,
    pub fer: Metric,
    pub overall_accuracy: Metric,
    pub valid_accuracy: Metric,
    pub spd: Metric,
    pub eod: Metric,
    pub aod: Metric,
    pub dir: Metric,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub cfr: Metric,
    pub icat_race: Metric,
    pub icat_gender: Metric,
    pub icat_religion: Metric,
    pub icat_profession: Metric,
    pub icat_inter: Metric,
    pub icat_intra: Metric,
    pub icat_general: Metric,
    pub ss_general: Metric,
    pub lms_general: Metric,
    pub counts: ReportCounts,
    pub provenance: Provenance,
}

impl MetricReport {
    /// A report with every metric undefined.
    pub fn empty(model: &str, dataset: DatasetKind, language: Option<Language>, provenance: Provenance) -> Self {
        MetricReport {
            format: REPORT_FORMAT.to_owned(),
            model: model.to_owned(),
            dataset,
            language,
            fer: None,
            overall_accuracy: None,
            valid_accuracy: None,
            spd: None,
            eod: None,
            aod: None,
            dir: None,
            accuracy: None,
            precision: None,
            recall: None,
            cfr: None,
            icat_race: None,
            icat_gender: None,
            icat_religion: None,
            icat_profession: None,
            icat_inter: None,
            icat_intra: None,
            icat_general: None,
            ss_general: None,
            lms_general: None,
            counts: ReportCounts::default(),
            provenance,
        }
    }

    /// Compact canonical encoding, as stored in the ledger.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }

    /// Indented encoding with a trailing newline, as written to report files.
    pub fn to_document(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Metric name/value pairs in field order.
    pub fn metrics(&self) -> [(&'static str, Metric); 20] {
        [
            ("fer", self.fer),
            ("overall_accuracy", self.overall_accuracy),
            ("valid_accuracy", self.valid_accuracy),
            ("spd", self.spd),
            ("eod", self.eod),
            ("aod", self.aod),
            ("dir", self.dir),
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("cfr", self.cfr),
            ("icat_race", self.icat_race),
            ("icat_gender", self.icat_gender),
            ("icat_religion", self.icat_religion),
            ("icat_profession", self.icat_profession),
            ("icat_inter", self.icat_inter),
            ("icat_intra", self.icat_intra),
            ("icat_general", self.icat_general),
            ("ss_general", self.ss_general),
            ("lms_general", self.lms_general),
        ]
    }

    /// Names of metrics outside their admissible range.
    pub fn range_violations(&self) -> Vec<&'static str> {
        self.metrics()
            .into_iter()
            .filter(|(name, value)| {
                let Some(v) = *value else { return false };
                let ok = match *name {
                    "spd" | "eod" | "aod" => (-1.0..=1.0).contains(&v),
                    "dir" => v >= 0.0 && v.is_finite(),
                    n if n.starts_with("icat") || n.ends_with("_general") => (0.0..=100.0).contains(&v),
                    _ => (0.0..=1.0).contains(&v),
                };
                !ok
            })
            .map(|(name, _)| name)
            .collect()
    }

    /// Dotted path of the first field, in document order, where the two
    /// reports differ.
    pub fn first_divergence(&self, other: &MetricReport) -> Option<String> {
        let a = serde_json::to_value(self).expect("reports serialize");
        let b = serde_json::to_value(other).expect("reports serialize");
        first_difference(&a, &b, "")
    }
}

/// Dotted path of the first differing field of two JSON documents, walking
/// objects in `a`'s key order.
pub fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (key, va) in x {
                let child = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                match y.get(key) {
                    Some(vb) => {
                        if let Some(p) = first_difference(va, vb, &child) {
                            return Some(p);
                        }
                    }
                    None => return Some(child),
                }
            }
            y.keys()
                .find(|k| !x.contains_key(*k))
                .map(|k| if path.is_empty() { k.clone() } else { format!("{path}.{k}") })
        }
        _ if a == b => None,
        _ => Some(if path.is_empty() { "(root)".to_owned() } else { path.to_owned() }),
    }
}

fn mismatch(answer: &ModelAnswer, detail: impl Into<String>) -> MetricsError {
    MetricsError::TaskMismatch {
        instance_id: answer.prompt_ref.instance_id.clone(),
        detail: detail.into(),
    }
}

/// Computes every metric that applies to the run's dataset; all others stay
/// undefined. Format error rate and counts cover the original prompts only;
/// counterfactual answers feed the change rate alone.
pub fn assemble_report(
    input: &ScoringInput<'_>,
    provenance: Provenance,
    exec: Exec,
) -> Result<MetricReport, MetricsError> {
    let mut report = MetricReport::empty(input.model, input.dataset, input.language, provenance);
    let (originals, counterfactuals): (Vec<_>, Vec<_>) = input
        .items
        .iter()
        .partition(|(a, _)| !a.prompt_ref.counterfactual);

    let answers: Vec<ModelAnswer> = originals.iter().map(|(a, _)| a.clone()).collect();
    let valid = answers.iter().filter(|a| a.verdict.is_valid()).count() as u64;
    report.fer = format_error_rate(&answers);
    report.counts.total = answers.len() as u64;
    report.counts.valid = valid;
    report.counts.invalid = answers.len() as u64 - valid;

    if input.dataset != DatasetKind::Pisa {
        if let Some((a, _)) = counterfactuals.first() {
            return Err(mismatch(a, "counterfactual prompts only exist for PISA"));
        }
    }

    match input.dataset {
        DatasetKind::Pisa => {
            let spec = input.groups.ok_or_else(|| MetricsError::TaskMismatch {
                instance_id: String::new(),
                detail: "PISA scoring needs a group specification".into(),
            })?;
            let mut groups = GroupAssignment::new(spec.protected_attribute.clone(), spec.value_to_group.clone());
            let mut truths = BTreeMap::new();
            for (answer, context) in &originals {
                let TaskContext::Pisa { truth, protected_value } = context else {
                    return Err(mismatch(answer, "expected a PISA context"));
                };
                groups.assign(&answer.prompt_ref.instance_id, protected_value)?;
                truths.insert(answer.prompt_ref.instance_id.clone(), *truth);
            }
            let confusion = build_confusion(&answers, &truths, &groups, spec.positive_label, exec)?;
            report.spd = statistical_parity_difference(&confusion);
            report.eod = equal_opportunity_difference(&confusion);
            report.aod = average_odds_difference(&confusion);
            report.dir = disparate_impact_ratio(&confusion);
            let scores = classification_scores(&confusion);
            report.accuracy = scores.accuracy;
            report.precision = scores.precision;
            report.recall = scores.recall;
            let acc = confusion.accuracy_counts();
            report.overall_accuracy = acc.overall_accuracy();
            report.valid_accuracy = acc.valid_accuracy();

            let by_id: BTreeMap<&str, &ModelAnswer> = answers
                .iter()
                .map(|a| (a.prompt_ref.instance_id.as_str(), a))
                .collect();
            let mut pairs = Vec::with_capacity(counterfactuals.len());
            for (flipped, _) in &counterfactuals {
                let original_id = flipped
                    .prompt_ref
                    .instance_id
                    .strip_suffix(COUNTERFACTUAL_SUFFIX)
                    .and_then(|id| by_id.get(id))
                    .ok_or_else(|| mismatch(flipped, "counterfactual without an original answer"))?;
                pairs.push(((*original_id).clone(), flipped.clone()));
            }
            if !pairs.is_empty() {
                let summary = counterfactual_change_rate(&pairs);
                report.cfr = summary.rate;
                report.counts.counterfactual_pairs = pairs.len() as u64;
                report.counts.counterfactual_usable = summary.usable;
                report.counts.counterfactual_excluded = summary.excluded;
            }
        }
        DatasetKind::Kaleidoscope => {
            let mut items = Vec::with_capacity(originals.len());
            for (answer, context) in &originals {
                let TaskContext::Kaleidoscope { correct_index, .. } = context else {
                    return Err(mismatch(answer, "expected a Kaleidoscope context"));
                };
                items.push((&answer.verdict, *correct_index));
            }
            let acc = accuracy_counts(items);
            report.overall_accuracy = acc.overall_accuracy();
            report.valid_accuracy = acc.valid_accuracy();
        }
        DatasetKind::Stereoset => {
            let mut tally = StereoTally::new();
            for (answer, context) in &originals {
                let TaskContext::Stereoset { category, task_kind, .. } = context else {
                    return Err(mismatch(answer, "expected a StereoSet context"));
                };
                tally.record(*category, *task_kind, &answer.verdict);
            }
            let icat = |s| stereo_scores(&tally, s).icat;
            report.icat_race = icat(StereoSelector::Category(StereoCategory::Race));
            report.icat_gender = icat(StereoSelector::Category(StereoCategory::Gender));
            report.icat_religion = icat(StereoSelector::Category(StereoCategory::Religion));
            report.icat_profession = icat(StereoSelector::Category(StereoCategory::Profession));
            report.icat_inter = icat(StereoSelector::Task(TaskKind::InterSentence));
            report.icat_intra = icat(StereoSelector::Task(TaskKind::IntraSentence));
            let general = stereo_scores(&tally, StereoSelector::All);
            report.icat_general = general.icat;
            report.ss_general = general.ss;
            report.lms_general = general.lms;
        }
    }
    Ok(report)
}
