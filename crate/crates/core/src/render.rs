//! Plain-text tables for metric reports.

use crate::dataset::{DatasetKind, Language};
use crate::metrics::{Metric, MetricReport};

/// Placeholder for undefined metrics.
pub const UNDEFINED: &str = "—";

/// Four decimals; negative zero prints as zero.
pub fn format_metric(value: Metric) -> String {
    match value {
        None => UNDEFINED.to_owned(),
        Some(v) => {
            let s = format!("{v:.4}");
            if s == "-0.0000" {
                "0.0000".to_owned()
            } else {
                s
            }
        }
    }
}

pub fn language_name(language: Language) -> &'static str {
    match language {
        Language::En => "English",
        Language::Es => "Spanish",
        Language::Pt => "Portuguese",
    }
}

/// `overall − valid · (1 − fer)`. Every invalid answer is wrong, so overall
/// accuracy equals valid-only accuracy scaled by the valid share and the gap
/// is zero up to rounding of the inputs.
pub fn accuracy_identity_gap(overall: f64, valid_only: f64, fer: f64) -> f64 {
    overall - valid_only * (1.0 - fer)
}

/// Gap of a report's accuracy identity, when all three terms are defined.
pub fn report_identity_gap(report: &MetricReport) -> Option<f64> {
    Some(accuracy_identity_gap(report.overall_accuracy?, report.valid_accuracy?, report.fer?))
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell}{}", " ".repeat(widths[c] - cell.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

fn owned(cells: &[&str]) -> Vec<String> {
    cells.iter().map(|s| s.to_string()).collect()
}

/// Renders the table layout that matches the report's dataset.
pub fn render_table(report: &MetricReport) -> String {
    let f = format_metric;
    match report.dataset {
        DatasetKind::Pisa => {
            let mut out = table(&[
                owned(&["Dataset", "Model", "SPD", "EOD", "AOD", "DI", "Acc", "Prec", "Rec", "CFR"]),
                vec![
                    "PISA".into(),
                    report.model.clone(),
                    f(report.spd),
                    f(report.eod),
                    f(report.aod),
                    f(report.dir),
                    f(report.accuracy),
                    f(report.precision),
                    f(report.recall),
                    f(report.cfr),
                ],
            ]);
            out.push_str(&format!("Format Error Rate: {}\n", f(report.fer)));
            out
        }
        DatasetKind::Stereoset => table(&[
            vec!["Metric".into(), report.model.clone()],
            vec!["ICAT Race".into(), f(report.icat_race)],
            vec!["ICAT Gender".into(), f(report.icat_gender)],
            vec!["ICAT Religion".into(), f(report.icat_religion)],
            vec!["ICAT Profession".into(), f(report.icat_profession)],
            vec!["ICAT Inter-sentence".into(), f(report.icat_inter)],
            vec!["ICAT Intra-sentence".into(), f(report.icat_intra)],
            vec!["ICAT General".into(), f(report.icat_general)],
            vec!["Stereotype Score (SS)".into(), f(report.ss_general)],
            vec!["LLM Score (LMS)".into(), f(report.lms_general)],
        ]),
        DatasetKind::Kaleidoscope => {
            let mut out = table(&[
                owned(&["Model", "Language", "Overall Accuracy", "Format Error Rate", "Accuracy on Valid Responses"]),
                vec![
                    report.model.clone(),
                    report.language.map_or(UNDEFINED, language_name).to_owned(),
                    f(report.overall_accuracy),
                    f(report.fer),
                    f(report.valid_accuracy),
                ],
            ]);
            out.push_str(&format!(
                "Identity check (overall - valid * (1 - FER)): {}\n",
                f(report_identity_gap(report))
            ));
            out
        }
    }
}
