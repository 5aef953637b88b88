//! Recomputes a run's report from the evidence in its ledger.

use std::fmt;
use std::path::Path;

use crate::client::ExchangeRecord;
use crate::config::LedgeredConfig;
use crate::digest::sha256_hex;
use crate::exec::Exec;
use crate::ledger::{read_ledger, LedgerError, LedgerRecord, ParseRecord, RecordKind};
use crate::metrics::{
    assemble_report, first_difference, MetricReport, MetricsError, Provenance, ScoringInput, INVALID_ANSWER_POLICY,
};
use crate::parser::{parse_batch, ParseJob, PARSER_POLICY};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("incomplete run: {0}")]
    Incomplete(String),
    #[error("record {sequence}: {message}")]
    Inconsistent { sequence: u64, message: String },
    #[error("ledger was parsed under policy {0:?}, which this build does not implement")]
    UnsupportedPolicy(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    /// Dotted path of the first differing field.
    pub field: String,
    pub stored: String,
    pub recomputed: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (stored {}, recomputed {})", self.field, self.stored, self.recomputed)
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub recomputed: MetricReport,
    pub divergence: Option<Divergence>,
}

impl ReplayOutcome {
    pub fn passed(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Evidence of one run, split by record kind.
pub struct RunEvidence {
    pub config: LedgeredConfig,
    pub config_digest: String,
    pub exchanges: Vec<ExchangeRecord>,
    pub parses: Vec<ParseRecord>,
    /// Stored report payload, verbatim.
    pub report: String,
    /// Hash of the record preceding the report.
    pub report_prev_hash: String,
}

const ORDER: [RecordKind; 6] = [
    RecordKind::Config,
    RecordKind::Manifest,
    RecordKind::Template,
    RecordKind::Exchange,
    RecordKind::Parse,
    RecordKind::Report,
];

fn phase(kind: RecordKind) -> usize {
    ORDER.iter().position(|k| *k == kind).expect("every kind has a phase")
}

impl RunEvidence {
    /// Checks that the records form one complete run in the expected order
    /// and that parses line up with exchanges.
    pub fn from_records(records: &[LedgerRecord]) -> Result<Self, ReplayError> {
        let mut counts = [0usize; 6];
        let mut last_phase = 0;
        for r in records {
            let p = phase(r.kind);
            if p < last_phase {
                return Err(ReplayError::Inconsistent {
                    sequence: r.sequence,
                    message: format!("{} record after {} records", r.kind, ORDER[last_phase]),
                });
            }
            last_phase = p;
            counts[p] += 1;
        }
        for (kind, n, want) in [
            (RecordKind::Config, counts[0], "exactly one"),
            (RecordKind::Template, counts[2], "exactly one"),
            (RecordKind::Report, counts[5], "exactly one"),
        ] {
            if n != 1 {
                return Err(ReplayError::Incomplete(format!("expected {want} {kind} record, found {n}")));
            }
        }
        if counts[1] == 0 {
            return Err(ReplayError::Incomplete("no manifest record".into()));
        }
        if counts[3] != counts[4] {
            return Err(ReplayError::Incomplete(format!("{} exchanges but {} parses", counts[3], counts[4])));
        }

        let of = |kind| records.iter().filter(move |r: &&LedgerRecord| r.kind == kind);
        let config_record = of(RecordKind::Config).next().expect("counted");
        let report_record = of(RecordKind::Report).next().expect("counted");
        let exchanges = of(RecordKind::Exchange).map(|r| r.payload_as()).collect::<Result<Vec<ExchangeRecord>, _>>()?;
        let parses = of(RecordKind::Parse).map(|r| r.payload_as()).collect::<Result<Vec<ParseRecord>, _>>()?;

        let parse_records = of(RecordKind::Parse);
        for ((i, (exchange, parse)), record) in exchanges.iter().zip(&parses).enumerate().zip(parse_records) {
            let fail = |message: String| Err(ReplayError::Inconsistent { sequence: record.sequence, message });
            if exchange.sequence != i as u64 || parse.exchange_sequence != i as u64 {
                return fail(format!("parse {i} does not refer to exchange {i}"));
            }
            if parse.prompt_ref != exchange.prompt_ref || parse.answer.prompt_ref != exchange.prompt_ref {
                return fail(format!("parse {i} names a different prompt than its exchange"));
            }
        }

        Ok(RunEvidence {
            config: config_record.payload_as()?,
            config_digest: sha256_hex(config_record.payload.get().as_bytes()),
            exchanges,
            parses,
            report: report_record.payload.get().to_owned(),
            report_prev_hash: report_record.prev_hash.clone(),
        })
    }
}

/// Re-parses every exchange and recomputes the report, then compares it
/// with the stored one byte for byte. Stored parse records must also match
/// the re-parse.
pub fn replay_records(records: &[LedgerRecord], exec: Exec) -> Result<ReplayOutcome, ReplayError> {
    let evidence = RunEvidence::from_records(records)?;
    if evidence.config.parser_policy != PARSER_POLICY {
        return Err(ReplayError::UnsupportedPolicy(evidence.config.parser_policy.clone()));
    }
    let jobs: Vec<ParseJob<'_>> = evidence
        .exchanges
        .iter()
        .zip(&evidence.parses)
        .map(|(exchange, parse)| ParseJob {
            prompt_ref: &exchange.prompt_ref,
            raw: exchange.raw_response_text.as_deref().filter(|_| exchange.is_ok()),
            context: &parse.context,
        })
        .collect();
    let answers = parse_batch(&jobs, exec);
    let items: Vec<_> = answers
        .iter()
        .cloned()
        .zip(evidence.parses.iter().map(|p| p.context.clone()))
        .collect();

    let groups = evidence.config.group_spec();
    let input = ScoringInput {
        model: &evidence.config.endpoint.model_id,
        dataset: evidence.config.dataset.kind,
        language: evidence.config.dataset.language,
        items: &items,
        groups: groups.as_ref(),
    };
    let provenance = Provenance {
        ledger_head: evidence.report_prev_hash.clone(),
        config_digest: evidence.config_digest.clone(),
        parser_policy: evidence.config.parser_policy.clone(),
        invalid_answer_policy: INVALID_ANSWER_POLICY.to_owned(),
    };
    let recomputed = assemble_report(&input, provenance, exec)?;
    let canonical = recomputed.to_canonical();

    let mut divergence = None;
    if canonical != evidence.report {
        let fresh = serde_json::to_value(&recomputed).expect("reports serialize");
        let stored: serde_json::Value = serde_json::from_str(&evidence.report).unwrap_or(serde_json::Value::Null);
        let field = first_difference(&fresh, &stored, "").unwrap_or_else(|| "(encoding)".to_owned());
        let pick = |v: &serde_json::Value| {
            field
                .split('.')
                .try_fold(v, |v, k| v.get(k))
                .map_or("absent".to_owned(), |v| v.to_string())
        };
        divergence = Some(Divergence { stored: pick(&stored), recomputed: pick(&fresh), field });
    } else if let Some(i) = answers.iter().zip(&evidence.parses).position(|(a, p)| *a != p.answer) {
        divergence = Some(Divergence {
            field: format!("parse[{i}].answer"),
            stored: serde_json::to_string(&evidence.parses[i].answer).expect("answers serialize"),
            recomputed: serde_json::to_string(&answers[i]).expect("answers serialize"),
        });
    }
    Ok(ReplayOutcome { recomputed, divergence })
}

pub fn replay(path: &Path, exec: Exec) -> Result<ReplayOutcome, ReplayError> {
    let records = read_ledger(path, exec)?;
    replay_records(&records, exec)
}
