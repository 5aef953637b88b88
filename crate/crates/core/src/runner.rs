//! End-to-end evaluation runs and the operator commands built on them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::client::{Clock, ClientError, EndpointClient, ExchangeOutcome, ExchangeRecord, HttpTransport, SystemClock, Transport};
use crate::config::{resolve, ConfigError, LedgeredConfig, RunConfig};
use crate::dataset::{
    load_kaleidoscope, load_pisa, load_stereoset, DatasetError, DatasetKind, DatasetManifest,
};
use crate::exec::Exec;
use crate::ledger::{
    head_path, normalize_time, verify_bytes, verify_file, LedgerError, LedgerHead, LedgerWriter, ParseRecord,
    RecordKind,
};
use crate::metrics::{assemble_report, MetricReport, MetricsError, Provenance, ScoringInput, INVALID_ANSWER_POLICY};
use crate::parser::{parse_batch, ParseJob, TaskContext};
use crate::prompt::{
    make_counterfactual, render_kaleidoscope, render_pisa, render_pisa_counterfactual, render_stereoset,
    CounterfactualError, PromptTemplate, RenderedPrompt, TemplateError,
};
use crate::render::render_table;
use crate::replay::{replay, ReplayError};

/// Process exit statuses of the operator commands.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const INTEGRITY: u8 = 2;
    pub const DIVERGENCE: u8 = 3;
    pub const TRANSPORT: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Dataset(DatasetError::Integrity { .. } | DatasetError::CountMismatch { .. })
            | RunError::Template(TemplateError::Integrity { .. })
            | RunError::Ledger(LedgerError::Integrity(_)) => exit::INTEGRITY,
            _ => exit::USAGE,
        }
    }
}

/// Rendered prompts of a run with the context each answer is scored in.
/// Original prompts come first, counterfactual twins after them.
#[derive(Debug, Clone)]
pub struct Plan {
    pub manifest: DatasetManifest,
    pub template: PromptTemplate,
    pub prompts: Vec<RenderedPrompt>,
    pub contexts: Vec<TaskContext>,
}

fn collect<T, E>(results: Vec<Result<T, E>>) -> Result<Vec<T>, E> {
    results.into_iter().collect()
}

/// Loads and checks every input and renders all prompts. Nothing here
/// touches the network or the output paths.
pub fn prepare(config: &RunConfig, base: &Path, exec: Exec) -> Result<Plan, RunError> {
    config.validate()?;
    let d = &config.dataset;
    let manifest = DatasetManifest::load(&resolve(base, &d.manifest))?;
    let template = PromptTemplate::load(&resolve(base, &config.template.path), Some(&config.template.digest))?;
    if template.template_id != config.template.id {
        return Err(RunError::Invalid(format!(
            "template file declares id {:?}, config expects {:?}",
            template.template_id, config.template.id
        )));
    }
    let data_path = resolve(base, &d.path);

    let (prompts, contexts): (Vec<_>, Vec<_>) = match d.kind {
        DatasetKind::Pisa => {
            let instances = load_pisa(&data_path, &manifest)?;
            let spec = config.ledgered().group_spec().expect("validated pisa config");
            let protected = |inst: &crate::dataset::PisaInstance| -> Result<String, RunError> {
                let value = inst.student_attributes.get(&spec.protected_attribute).ok_or_else(|| {
                    RunError::Invalid(format!(
                        "instance {} has no protected attribute {:?}",
                        inst.instance_id, spec.protected_attribute
                    ))
                })?;
                Ok(value.clone())
            };
            let mut originals = collect(exec.map(&instances, |inst| {
                let value = protected(inst)?;
                if !spec.value_to_group.contains_key(&value) {
                    return Err(RunError::Metrics(MetricsError::UnmappedGroupValue {
                        attribute: spec.protected_attribute.clone(),
                        value,
                    }));
                }
                let prompt = render_pisa(inst, &template)?;
                Ok((prompt, TaskContext::Pisa { truth: inst.reading_label, protected_value: value }))
            }))?;
            if let Some(cf) = &d.counterfactual {
                let eligible: Vec<_> = instances
                    .iter()
                    .filter(|i| i.student_attributes.get(&cf.attribute).is_some_and(|v| cf.flip_map.contains_key(v)))
                    .collect();
                let twins = collect(exec.map(&eligible, |inst| {
                    let twin = make_counterfactual(inst, &cf.attribute, &cf.flip_map)?;
                    let value = protected(&twin.instance)?;
                    let prompt = render_pisa_counterfactual(&twin, &template)?;
                    Ok::<_, RunError>((prompt, TaskContext::Pisa { truth: inst.reading_label, protected_value: value }))
                }))?;
                originals.extend(twins);
            }
            originals.into_iter().unzip()
        }
        DatasetKind::Kaleidoscope => {
            let language = d.language.expect("validated kaleidoscope config");
            let instances = load_kaleidoscope(&data_path, language, &manifest)?;
            collect(exec.map(&instances, |inst| {
                let prompt = render_kaleidoscope(inst, &template)?;
                let context = TaskContext::Kaleidoscope { options: inst.options.clone(), correct_index: inst.correct_index };
                Ok::<_, RunError>((prompt, context))
            }))?
            .into_iter()
            .unzip()
        }
        DatasetKind::Stereoset => {
            let instances = load_stereoset(&data_path, &manifest)?;
            collect(exec.map(&instances, |inst| {
                let (prompt, option_order) = render_stereoset(inst, &template, config.seed)?;
                let context = TaskContext::Stereoset { option_order, category: inst.category, task_kind: inst.task_kind };
                Ok::<_, RunError>((prompt, context))
            }))?
            .into_iter()
            .unzip()
        }
    };
    Ok(Plan { manifest, template, prompts, contexts })
}

pub struct RunOptions {
    pub exec: Exec,
    /// Overrides the HTTP transport, e.g. with an in-process simulator.
    pub transport: Option<Arc<dyn Transport>>,
    pub clock: Arc<dyn Clock>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { exec: Exec::default(), transport: None, clock: Arc::new(SystemClock) }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub head: LedgerHead,
    pub ledger_path: PathBuf,
    pub report_path: PathBuf,
    /// Exchanges whose endpoint call failed for good.
    pub transport_failures: usize,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// Runs one evaluation: every input is checked before the first endpoint
/// call, then config, manifest, template, exchanges, parses and the report
/// are ledgered in that order.
pub fn run_evaluation(config: &RunConfig, base: &Path, options: &RunOptions) -> Result<RunOutcome, RunError> {
    let exec = options.exec;
    let plan = prepare(config, base, exec)?;
    let ledgered: LedgeredConfig = config.ledgered();
    let transport = match &options.transport {
        Some(t) => t.clone(),
        None => Arc::new(HttpTransport::new(config.endpoint.timeout())) as Arc<dyn Transport>,
    };
    let client = EndpointClient::new(config.endpoint.clone(), transport, options.clock.clone())?;

    let ledger_path = resolve(base, &config.output.ledger);
    let report_path = resolve(base, &config.output.report);
    for p in [&ledger_path, &report_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        }
    }
    let mut ledger = LedgerWriter::create(&ledger_path)?;
    ledger.append_canonical(RecordKind::Config, ledgered.canonical())?;
    ledger.append(RecordKind::Manifest, &plan.manifest)?;
    ledger.append(RecordKind::Template, &plan.template)?;

    let exchanges: Vec<ExchangeRecord> = client.run_batch(&plan.prompts, exec);
    for exchange in &exchanges {
        ledger.append(RecordKind::Exchange, exchange)?;
    }
    let transport_failures = exchanges.iter().filter(|e| e.outcome == ExchangeOutcome::TransportError).count();

    let jobs: Vec<ParseJob<'_>> = exchanges
        .iter()
        .zip(&plan.contexts)
        .map(|(e, context)| ParseJob {
            prompt_ref: &e.prompt_ref,
            raw: e.raw_response_text.as_deref().filter(|_| e.is_ok()),
            context,
        })
        .collect();
    let answers = parse_batch(&jobs, exec);
    for ((exchange, context), answer) in exchanges.iter().zip(&plan.contexts).zip(&answers) {
        let record = ParseRecord {
            exchange_sequence: exchange.sequence,
            prompt_ref: exchange.prompt_ref.clone(),
            context: context.clone(),
            answer: answer.clone(),
        };
        ledger.append(RecordKind::Parse, &record)?;
    }

    let items: Vec<_> = answers.into_iter().zip(plan.contexts.iter().cloned()).collect();
    let groups = ledgered.group_spec();
    let input = ScoringInput {
        model: &config.endpoint.model_id,
        dataset: config.dataset.kind,
        language: config.dataset.language,
        items: &items,
        groups: groups.as_ref(),
    };
    let provenance = Provenance {
        ledger_head: ledger.head_hash(),
        config_digest: ledgered.digest(),
        parser_policy: config.parser_policy.clone(),
        invalid_answer_policy: INVALID_ANSWER_POLICY.to_owned(),
    };
    let report = assemble_report(&input, provenance, exec)?;
    ledger.append_canonical(RecordKind::Report, report.to_canonical())?;
    let head = ledger.seal()?;
    std::fs::write(&report_path, report.to_document()).map_err(io_error(&report_path))?;

    Ok(RunOutcome { report, head, ledger_path, report_path, transport_failures })
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `run --config <file>`.
pub fn cmd_run(config_path: &Path, options: &RunOptions, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let result = RunConfig::load(config_path)
        .map_err(RunError::from)
        .and_then(|c| run_evaluation(&c, &base_dir(config_path), options));
    match result {
        Ok(outcome) => {
            let _ = write!(out, "{}", render_table(&outcome.report));
            let _ = writeln!(out, "ledger {} ({} records, head {})", outcome.ledger_path.display(), outcome.head.length, outcome.head.head_hash);
            let _ = writeln!(out, "report {}", outcome.report_path.display());
            if outcome.transport_failures > 0 {
                let _ = writeln!(err, "{} prompt(s) exhausted their endpoint retries", outcome.transport_failures);
                exit::TRANSPORT
            } else {
                exit::OK
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn read(path: &Path, err: &mut dyn Write) -> Option<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Some(b),
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            None
        }
    }
}

/// `verify <ledger> [--compare <other>] [--normalize-time]`.
///
/// Without `--compare` this checks one ledger (and its head file). With it
/// both ledgers must verify and be byte-identical, after zeroing wall-clock
/// fields when `normalize` is set.
pub fn cmd_verify(ledger: &Path, compare: Option<&Path>, normalize: bool, exec: Exec, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let mut normalized = Vec::new();
    for path in std::iter::once(ledger).chain(compare) {
        let v = match verify_file(path, exec) {
            Ok(v) => v,
            Err(LedgerError::Io { path, source }) => {
                let _ = writeln!(err, "error: {}: {source}", path.display());
                return exit::USAGE;
            }
            Err(e) => {
                let _ = writeln!(err, "BREACH {}: {e}", path.display());
                return exit::INTEGRITY;
            }
        };
        if let Some(b) = &v.breach {
            let _ = writeln!(out, "BREACH {} at record {}: {:?}: {}", path.display(), b.index, b.kind, b.detail);
            return exit::INTEGRITY;
        }
        let sealed = if head_path(path).exists() { "sealed" } else { "unsealed" };
        let _ = writeln!(out, "CLEAN {} records={} head={} {sealed}", path.display(), v.verified, v.head_hash);
        let Some(bytes) = read(path, err) else { return exit::USAGE };
        let bytes = if normalize {
            match normalize_time(&bytes, exec) {
                Ok(b) => b,
                Err(e) => {
                    let _ = writeln!(err, "error: {}: {e}", path.display());
                    return exit::INTEGRITY;
                }
            }
        } else {
            bytes
        };
        if normalize && compare.is_none() {
            let _ = writeln!(out, "normalized head={}", verify_bytes(&bytes, exec).head_hash);
        }
        normalized.push(bytes);
    }
    if let [a, b] = normalized.as_slice() {
        if a == b {
            let _ = writeln!(out, "IDENTICAL");
        } else {
            let line = a.split(|&c| c == b'\n').zip(b.split(|&c| c == b'\n')).position(|(x, y)| x != y);
            let at = match line {
                Some(0) => "header".to_owned(),
                Some(i) => format!("record {}", i - 1),
                None => "length".to_owned(),
            };
            let _ = writeln!(out, "DIFFERENT at {at}");
            return exit::DIVERGENCE;
        }
    }
    exit::OK
}

/// `replay <ledger>`.
pub fn cmd_replay(ledger: &Path, exec: Exec, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    match replay(ledger, exec) {
        Ok(outcome) => match &outcome.divergence {
            None => {
                let _ = writeln!(out, "PASS");
                exit::OK
            }
            Some(d) => {
                let _ = writeln!(out, "FAIL first divergent field: {d}");
                exit::DIVERGENCE
            }
        },
        Err(ReplayError::Ledger(LedgerError::Io { path, source })) => {
            let _ = writeln!(err, "error: {}: {source}", path.display());
            exit::USAGE
        }
        Err(e @ ReplayError::UnsupportedPolicy(_)) => {
            let _ = writeln!(err, "error: {e}");
            exit::USAGE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit::INTEGRITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Document,
}

/// `report <file> --format table|document`.
pub fn cmd_report(path: &Path, format: ReportFormat, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let Some(bytes) = read(path, err) else { return exit::USAGE };
    let report: MetricReport = match serde_json::from_slice(&bytes) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {}: malformed report: {e}", path.display());
            return exit::USAGE;
        }
    };
    let text = match format {
        ReportFormat::Table => render_table(&report),
        ReportFormat::Document => report.to_document(),
    };
    let _ = write!(out, "{text}");
    exit::OK
}
