//! Run configuration: what to evaluate, against which endpoint, and where
//! the evidence goes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, EndpointConfig};
use crate::dataset::{DatasetKind, Language, ReadingLabel};
use crate::digest::{decode_digest, sha256_hex};
use crate::metrics::{Group, GroupSpec};
use crate::parser::PARSER_POLICY;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Syntax {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Endpoint(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSpec {
    pub attribute: String,
    /// Original value to replacement value. Instances whose value is not a
    /// key get no counterfactual twin.
    pub flip_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSelection {
    pub kind: DatasetKind,
    pub path: String,
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Language>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected_attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_to_group: Option<BTreeMap<String, Group>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<ReadingLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual: Option<CounterfactualSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRef {
    pub id: String,
    pub path: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub ledger: String,
    pub report: String,
}

fn default_parser_policy() -> String {
    PARSER_POLICY.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSelection,
    pub template: TemplateRef,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parser_policy")]
    pub parser_policy: String,
    pub output: OutputPaths,
}

/// The part of a [`RunConfig`] committed to the ledger. Output locations
/// are left out so the same evaluation hashes the same wherever it is
/// written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgeredConfig {
    pub dataset: DatasetSelection,
    pub template: TemplateRef,
    pub endpoint: EndpointConfig,
    pub seed: u64,
    pub parser_policy: String,
}

impl LedgeredConfig {
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("configs serialize")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    /// Group binarization for PISA runs.
    pub fn group_spec(&self) -> Option<GroupSpec> {
        let d = &self.dataset;
        Some(GroupSpec {
            protected_attribute: d.protected_attribute.clone()?,
            value_to_group: d.value_to_group.clone()?,
            positive_label: d.positive_label.unwrap_or(ReadingLabel::High),
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Syntax { path: origin.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path)
    }

    pub fn ledgered(&self) -> LedgeredConfig {
        LedgeredConfig {
            dataset: self.dataset.clone(),
            template: self.template.clone(),
            endpoint: self.endpoint.clone(),
            seed: self.seed,
            parser_policy: self.parser_policy.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.endpoint.validate()?;
        if self.parser_policy != PARSER_POLICY {
            return invalid(format!("unsupported parser policy {:?} (this build implements {PARSER_POLICY})", self.parser_policy));
        }
        if decode_digest(&self.template.digest).is_none() {
            return invalid("template.digest must be a lowercase hex SHA-256".into());
        }
        let d = &self.dataset;
        let kind = d.kind.as_str();
        let pisa = d.kind == DatasetKind::Pisa;
        let present = [
            ("protected_attribute", d.protected_attribute.is_some()),
            ("value_to_group", d.value_to_group.is_some()),
            ("positive_label", d.positive_label.is_some()),
            ("counterfactual", d.counterfactual.is_some()),
        ];
        if !pisa {
            if let Some((name, _)) = present.iter().find(|(_, p)| *p) {
                return invalid(format!("dataset.{name} only applies to pisa, not {kind}"));
            }
        }
        match (d.kind, d.language) {
            (DatasetKind::Kaleidoscope, None) => return invalid("kaleidoscope needs dataset.language".into()),
            (DatasetKind::Kaleidoscope, Some(_)) => {}
            (_, Some(_)) => return invalid(format!("dataset.language only applies to kaleidoscope, not {kind}")),
            (_, None) => {}
        }
        if pisa {
            if d.protected_attribute.as_deref().is_none_or(str::is_empty) {
                return invalid("pisa needs dataset.protected_attribute".into());
            }
            if d.value_to_group.as_ref().is_none_or(BTreeMap::is_empty) {
                return invalid("pisa needs a non-empty dataset.value_to_group".into());
            }
            if let Some(cf) = &d.counterfactual {
                if cf.attribute.is_empty() || cf.flip_map.is_empty() {
                    return invalid("counterfactual needs an attribute and a non-empty flip_map".into());
                }
                if let Some((k, _)) = cf.flip_map.iter().find(|(k, v)| k == v) {
                    return invalid(format!("flip_map maps {k:?} to itself"));
                }
            }
        }
        Ok(())
    }
}

/// Resolves a config-relative path.
pub fn resolve(base: &Path, relative: &str) -> PathBuf {
    let p = Path::new(relative);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
