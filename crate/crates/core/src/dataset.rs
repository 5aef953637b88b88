//! Loading and validation of the three benchmark datasets.
//!
//! PISA is a delimited file with a header; StereoSet and Kaleidoscope are JSON
//! Lines with one instance per line. Every load is pinned by a
//! [`DatasetManifest`] whose digest covers the raw file bytes, so any byte-level
//! change to a dataset is caught before a single prompt is rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

/// Column holding the ground truth in PISA files.
pub const PISA_LABEL_COLUMN: &str = "readingScore";
/// Optional column holding a stable instance identifier in PISA files.
pub const PISA_ID_COLUMN: &str = "id";
/// Scores at or above this threshold binarize to `H`.
pub const PISA_HIGH_THRESHOLD: f64 = 500.0;

/// Prompt counts of the standard evaluation subsets.
pub mod subset_sizes {
    pub const PISA: usize = 500;
    pub const STEREOSET: usize = 4229;
    pub const KALEIDOSCOPE_EN: usize = 814;
    pub const KALEIDOSCOPE_ES: usize = 741;
    pub const KALEIDOSCOPE_PT: usize = 1000;
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity check failed for {path}: manifest pins {expected}, file hashes to {actual}")]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("schema error at record {record}: {message}")]
    Schema { record: usize, message: String },
    #[error("manifest expects {expected} instances but the file yields {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

fn schema(record: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        record,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Pisa,
    Stereoset,
    Kaleidoscope,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Pisa => "pisa",
            DatasetKind::Stereoset => "stereoset",
            DatasetKind::Kaleidoscope => "kaleidoscope",
        }
    }
}

/// Binary PISA ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReadingLabel {
    #[serde(rename = "H")]
    High,
    #[serde(rename = "L")]
    Low,
}

impl ReadingLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadingLabel::High => "H",
            ReadingLabel::Low => "L",
        }
    }

    /// Accepts `H`/`L` or a numeric reading score, which is binarized at
    /// [`PISA_HIGH_THRESHOLD`].
    pub fn parse(text: &str) -> Option<Self> {
        match text.trim() {
            "H" => Some(ReadingLabel::High),
            "L" => Some(ReadingLabel::Low),
            other => {
                let score: f64 = other.parse().ok()?;
                if !score.is_finite() || score < 0.0 {
                    return None;
                }
                Some(if score >= PISA_HIGH_THRESHOLD {
                    ReadingLabel::High
                } else {
                    ReadingLabel::Low
                })
            }
        }
    }
}

impl fmt::Display for ReadingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PisaInstance {
    pub instance_id: String,
    /// Attribute name to raw value, in lexicographic name order.
    pub student_attributes: BTreeMap<String, String>,
    pub reading_label: ReadingLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "intersentence")]
    InterSentence,
    #[serde(alias = "intrasentence")]
    IntraSentence,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::InterSentence, TaskKind::IntraSentence];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StereoCategory {
    Race,
    Gender,
    Religion,
    Profession,
}

impl StereoCategory {
    pub const ALL: [StereoCategory; 4] = [
        StereoCategory::Race,
        StereoCategory::Gender,
        StereoCategory::Religion,
        StereoCategory::Profession,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StereoRole {
    Stereotype,
    #[serde(alias = "anti-stereotype")]
    AntiStereotype,
    Unrelated,
}

impl StereoRole {
    pub const ALL: [StereoRole; 3] = [
        StereoRole::Stereotype,
        StereoRole::AntiStereotype,
        StereoRole::Unrelated,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoOption {
    pub text: String,
    pub role: StereoRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoInstance {
    pub instance_id: String,
    pub task_kind: TaskKind,
    pub category: StereoCategory,
    pub context: String,
    pub options: [StereoOption; 3],
}

impl StereoInstance {
    pub fn option_for(&self, role: StereoRole) -> &StereoOption {
        self.options
            .iter()
            .find(|o| o.role == role)
            .expect("validated instances carry every role")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Es,
    Pt,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Es => "es",
            Language::Pt => "pt",
        }
    }
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "en" => Ok(Language::En),
            "es" => Ok(Language::Es),
            "pt" => Ok(Language::Pt),
            other => Err(format!("unsupported language {other:?} (expected en, es or pt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KaleidoInstance {
    pub instance_id: String,
    pub language: Language,
    pub question: String,
    pub options: Vec<String>,
    pub correct_index: usize,
}

impl KaleidoInstance {
    pub fn correct_answer(&self) -> &str {
        &self.options[self.correct_index]
    }
}

/// Pins one dataset file: its identity, expected size and content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub expected_count: usize,
    /// Lowercase hex SHA-256 of the raw file bytes.
    pub content_digest: String,
    pub source_path: String,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = read(path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
        if crate::digest::decode_digest(&manifest.content_digest).is_none() {
            return Err(DatasetError::Manifest(format!(
                "content_digest {:?} is not a lowercase 64-digit hex string",
                manifest.content_digest
            )));
        }
        Ok(manifest)
    }

    /// Builds a manifest for `bytes`, e.g. when an operator pins a new subset.
    pub fn describe(
        dataset_id: impl Into<String>,
        source_path: impl Into<String>,
        bytes: &[u8],
        expected_count: usize,
    ) -> Self {
        DatasetManifest {
            dataset_id: dataset_id.into(),
            expected_count,
            content_digest: sha256_hex(bytes),
            source_path: source_path.into(),
        }
    }

    fn check_digest(&self, path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
        let actual = sha256_hex(bytes);
        if actual != self.content_digest {
            return Err(DatasetError::Integrity {
                path: path.to_path_buf(),
                expected: self.content_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    fn check_count(&self, actual: usize) -> Result<(), DatasetError> {
        if actual != self.expected_count {
            return Err(DatasetError::CountMismatch {
                expected: self.expected_count,
                actual,
            });
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_pisa(path: &Path, manifest: &DatasetManifest) -> Result<Vec<PisaInstance>, DatasetError> {
    let bytes = read(path)?;
    manifest.check_digest(path, &bytes)?;
    let instances = parse_pisa(&bytes)?;
    manifest.check_count(instances.len())?;
    Ok(instances)
}

pub fn load_stereoset(
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<StereoInstance>, DatasetError> {
    let bytes = read(path)?;
    manifest.check_digest(path, &bytes)?;
    let instances = parse_stereoset(&bytes)?;
    manifest.check_count(instances.len())?;
    Ok(instances)
}

/// Loads the instances of one language. The manifest pins the whole file;
/// its `expected_count` refers to the filtered language subset.
pub fn load_kaleidoscope(
    path: &Path,
    language: Language,
    manifest: &DatasetManifest,
) -> Result<Vec<KaleidoInstance>, DatasetError> {
    let bytes = read(path)?;
    manifest.check_digest(path, &bytes)?;
    let instances: Vec<_> = parse_kaleidoscope(&bytes)?
        .into_iter()
        .filter(|i| i.language == language)
        .collect();
    manifest.check_count(instances.len())?;
    Ok(instances)
}

/// Parses a PISA file. Record numbers in errors are 1-based data rows.
pub fn parse_pisa(bytes: &[u8]) -> Result<Vec<PisaInstance>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(0, format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();

    let mut seen = BTreeSet::new();
    for name in &header {
        if name.is_empty() {
            return Err(schema(0, "empty column name in header"));
        }
        if !seen.insert(name.as_str()) {
            return Err(schema(0, format!("duplicate column {name:?}")));
        }
    }
    let label_col = header
        .iter()
        .position(|h| h == PISA_LABEL_COLUMN)
        .ok_or_else(|| schema(0, format!("missing label column {PISA_LABEL_COLUMN:?}")))?;
    let id_col = header.iter().position(|h| h == PISA_ID_COLUMN);
    if header.len() - 1 - usize::from(id_col.is_some()) == 0 {
        return Err(schema(0, "header names no student attributes"));
    }

    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let number = row + 1;
        let record = record.map_err(|e| schema(number, e.to_string()))?;
        let label_text = &record[label_col];
        let reading_label = ReadingLabel::parse(label_text).ok_or_else(|| {
            schema(number, format!("label {label_text:?} is neither H, L nor a reading score"))
        })?;
        let instance_id = match id_col {
            Some(c) if !record[c].is_empty() => record[c].to_owned(),
            Some(_) => return Err(schema(number, "empty id")),
            None => format!("pisa-{number:04}"),
        };
        if !ids.insert(instance_id.clone()) {
            return Err(schema(number, format!("duplicate instance id {instance_id:?}")));
        }
        let student_attributes = header
            .iter()
            .zip(record.iter())
            .enumerate()
            .filter(|(c, _)| *c != label_col && Some(*c) != id_col)
            .map(|(_, (k, v))| (k.clone(), v.to_owned()))
            .collect();
        out.push(PisaInstance {
            instance_id,
            student_attributes,
            reading_label,
        });
    }
    Ok(out)
}

fn parse_jsonl<T, V>(bytes: &[u8], validate: V) -> Result<Vec<T>, DatasetError>
where
    T: for<'de> Deserialize<'de>,
    V: Fn(&T) -> Result<String, String>,
{
    let text = std::str::from_utf8(bytes).map_err(|e| schema(0, format!("not UTF-8: {e}")))?;
    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let number = idx + 1;
        let item: T = serde_json::from_str(line).map_err(|e| schema(number, e.to_string()))?;
        let id = validate(&item).map_err(|m| schema(number, m))?;
        if !ids.insert(id.clone()) {
            return Err(schema(number, format!("duplicate instance id {id:?}")));
        }
        out.push(item);
    }
    Ok(out)
}

pub fn parse_stereoset(bytes: &[u8]) -> Result<Vec<StereoInstance>, DatasetError> {
    parse_jsonl(bytes, |i: &StereoInstance| {
        validate_stereo(i)?;
        Ok(i.instance_id.clone())
    })
}

pub fn parse_kaleidoscope(bytes: &[u8]) -> Result<Vec<KaleidoInstance>, DatasetError> {
    parse_jsonl(bytes, |i: &KaleidoInstance| {
        validate_kaleido(i)?;
        Ok(i.instance_id.clone())
    })
}

fn validate_stereo(i: &StereoInstance) -> Result<(), String> {
    if i.instance_id.is_empty() {
        return Err("empty instance_id".into());
    }
    let roles: BTreeSet<_> = i.options.iter().map(|o| o.role).collect();
    if roles.len() != 3 {
        return Err(format!(
            "instance {:?}: option roles must be one stereotype, one anti_stereotype and one unrelated",
            i.instance_id
        ));
    }
    if i.task_kind == TaskKind::IntraSentence && !i.context.contains("BLANK") {
        return Err(format!(
            "instance {:?}: intra_sentence context lacks the BLANK token",
            i.instance_id
        ));
    }
    Ok(())
}

fn validate_kaleido(i: &KaleidoInstance) -> Result<(), String> {
    if i.instance_id.is_empty() {
        return Err("empty instance_id".into());
    }
    if !(2..=6).contains(&i.options.len()) {
        return Err(format!(
            "instance {:?}: {} options, expected 2 to 6",
            i.instance_id,
            i.options.len()
        ));
    }
    if i.correct_index >= i.options.len() {
        return Err(format!(
            "instance {:?}: correct_index {} out of range for {} options",
            i.instance_id,
            i.correct_index,
            i.options.len()
        ));
    }
    let distinct: BTreeSet<_> = i.options.iter().collect();
    if distinct.len() != i.options.len() {
        return Err(format!("instance {:?}: duplicate option texts", i.instance_id));
    }
    Ok(())
}

/// Writes instances back in the PISA file format: `id`, the attributes in
/// name order, then the label. All instances must share one attribute set.
pub fn write_pisa(instances: &[PisaInstance]) -> Result<String, DatasetError> {
    let names: Vec<&String> = match instances.first() {
        Some(first) => first.student_attributes.keys().collect(),
        None => Vec::new(),
    };
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![PISA_ID_COLUMN];
    header.extend(names.iter().map(|s| s.as_str()));
    header.push(PISA_LABEL_COLUMN);
    let io = |e: csv::Error| schema(0, e.to_string());
    writer.write_record(&header).map_err(io)?;
    for (row, inst) in instances.iter().enumerate() {
        if !inst.student_attributes.keys().eq(names.iter().copied()) {
            return Err(schema(row + 1, "attribute names differ from the first instance"));
        }
        let mut fields = vec![inst.instance_id.as_str()];
        fields.extend(inst.student_attributes.values().map(String::as_str));
        fields.push(inst.reading_label.as_str());
        writer.write_record(&fields).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| schema(0, e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output of UTF-8 fields is UTF-8"))
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(instances: &[T]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).expect("dataset types serialize"));
        out.push('\n');
    }
    out
}
