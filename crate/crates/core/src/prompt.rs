//! Prompt templates, rendering and counterfactual generation.
//!
//! A template file is a small `key: value` header, a `---` line, and a body.
//! The body is either the user message alone, or `[system]` / `[user]`
//! sections. `{{name}}` placeholders are substituted in one pass; a
//! placeholder with no binding is an error, never silently left in place.
//! Exactly one trailing newline is stripped from each section.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    KaleidoInstance, PisaInstance, StereoInstance, StereoRole, TaskKind,
};
use crate::digest::{sha256, sha256_hex};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("failed to read template {path}: {message}")]
    Io { path: String, message: String },
    #[error("template {template_id}: digest {actual} does not match pinned {expected}")]
    Integrity {
        template_id: String,
        expected: String,
        actual: String,
    },
    #[error("malformed template: {0}")]
    Malformed(String),
    #[error("template {template_id}: placeholder {{{{{name}}}}} is not bound")]
    Unbound { template_id: String, name: String },
    #[error("template {template_id} has answer format {actual}, this task needs {expected}")]
    WrongFormat {
        template_id: String,
        expected: AnswerFormat,
        actual: AnswerFormat,
    },
    #[error("duplicate template id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CounterfactualError {
    #[error("instance {instance_id} has no attribute {attribute:?}")]
    MissingAttribute { instance_id: String, attribute: String },
    #[error("value {value:?} of attribute {attribute:?} has no entry in the flip map")]
    UnmappedValue { attribute: String, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerFormat {
    #[serde(rename = "single_letter_LH")]
    SingleLetterLh,
    #[serde(rename = "json_choice")]
    JsonChoice,
    #[serde(rename = "option_letter")]
    OptionLetter,
}

impl AnswerFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            AnswerFormat::SingleLetterLh => "single_letter_LH",
            AnswerFormat::JsonChoice => "json_choice",
            AnswerFormat::OptionLetter => "option_letter",
        }
    }
}

impl fmt::Display for AnswerFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnswerFormat {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_letter_LH" => Ok(AnswerFormat::SingleLetterLh),
            "json_choice" => Ok(AnswerFormat::JsonChoice),
            "option_letter" => Ok(AnswerFormat::OptionLetter),
            other => Err(TemplateError::Malformed(format!("unknown answer_format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub system_text: Option<String>,
    pub body_pattern: String,
    pub answer_format: AnswerFormat,
    /// SHA-256 of the template file as loaded.
    pub digest: String,
}

const SYSTEM_MARKER: &str = "[system]";
const USER_MARKER: &str = "[user]";

fn strip_one_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let malformed = |m: String| TemplateError::Malformed(m);
        let (header, body) = text
            .split_once("\n---\n")
            .or_else(|| text.strip_suffix("\n---").map(|h| (h, "")))
            .ok_or_else(|| malformed("missing `---` line after the header".into()))?;

        let mut template_id = None;
        let mut answer_format = None;
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| malformed(format!("header line {line:?} is not `key: value`")))?;
            let value = value.trim();
            match key.trim() {
                "template_id" if !value.is_empty() => template_id = Some(value.to_owned()),
                "answer_format" => answer_format = Some(value.parse()?),
                other => return Err(malformed(format!("unexpected header key {other:?}"))),
            }
        }
        let template_id = template_id.ok_or_else(|| malformed("header lacks template_id".into()))?;
        let answer_format =
            answer_format.ok_or_else(|| malformed("header lacks answer_format".into()))?;

        let (system_text, body_pattern) = split_sections(body)?;
        Ok(PromptTemplate {
            template_id,
            system_text,
            body_pattern,
            answer_format,
            digest: sha256_hex(text.as_bytes()),
        })
    }

    /// Reads a template file, checking it against a pinned digest if given.
    pub fn load(path: &Path, pinned_digest: Option<&str>) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let template = Self::parse(&text)?;
        if let Some(expected) = pinned_digest {
            if expected != template.digest {
                return Err(TemplateError::Integrity {
                    template_id: template.template_id,
                    expected: expected.to_owned(),
                    actual: template.digest,
                });
            }
        }
        Ok(template)
    }

    /// Names of every placeholder used in the system and user sections.
    pub fn placeholders(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        for text in self.system_text.iter().chain(std::iter::once(&self.body_pattern)) {
            for_each_placeholder(text, |name| {
                names.insert(name.to_owned());
            });
        }
        names
    }

    fn require(&self, format: AnswerFormat) -> Result<(), TemplateError> {
        if self.answer_format != format {
            return Err(TemplateError::WrongFormat {
                template_id: self.template_id.clone(),
                expected: format,
                actual: self.answer_format,
            });
        }
        Ok(())
    }

    fn fill(&self, bindings: &BTreeMap<&str, String>) -> Result<(Option<String>, String), TemplateError> {
        let system = self
            .system_text
            .as_deref()
            .map(|s| substitute(&self.template_id, s, bindings))
            .transpose()?;
        let user = substitute(&self.template_id, &self.body_pattern, bindings)?;
        Ok((system, user))
    }
}

fn split_sections(body: &str) -> Result<(Option<String>, String), TemplateError> {
    let first_line = body.lines().next().unwrap_or("");
    if first_line != SYSTEM_MARKER && first_line != USER_MARKER {
        return Ok((None, strip_one_newline(body).to_owned()));
    }
    let mut system = None;
    let mut user = None;
    let mut current: Option<(&str, String)> = None;
    let mut finish = |section: Option<(&str, String)>| -> Result<(), TemplateError> {
        if let Some((name, text)) = section {
            let slot = if name == SYSTEM_MARKER { &mut system } else { &mut user };
            if slot.is_some() {
                return Err(TemplateError::Malformed(format!("section {name} appears twice")));
            }
            *slot = Some(strip_one_newline(&text).to_owned());
        }
        Ok(())
    };
    for line in body.split_inclusive('\n') {
        let bare = line.strip_suffix('\n').unwrap_or(line);
        if bare == SYSTEM_MARKER || bare == USER_MARKER {
            finish(current.take())?;
            current = Some((if bare == SYSTEM_MARKER { SYSTEM_MARKER } else { USER_MARKER }, String::new()));
        } else if let Some((_, text)) = current.as_mut() {
            text.push_str(line);
        }
    }
    finish(current.take())?;
    let user = user.ok_or_else(|| TemplateError::Malformed("template has no [user] section".into()))?;
    Ok((system, user))
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Calls `f` with each `{{name}}` occurrence; other brace runs are literal.
fn for_each_placeholder(text: &str, mut f: impl FnMut(&str)) {
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if end > 0 && after[..end].chars().all(is_name_char) => {
                f(&after[..end]);
                rest = &after[end + 2..];
            }
            _ => rest = &rest[start + 1..],
        }
    }
}

fn substitute(
    template_id: &str,
    text: &str,
    bindings: &BTreeMap<&str, String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) if end > 0 && after[..end].chars().all(is_name_char) => {
                let name = &after[..end];
                let value = bindings.get(name).ok_or_else(|| TemplateError::Unbound {
                    template_id: template_id.to_owned(),
                    name: name.to_owned(),
                })?;
                out.push_str(&rest[..start]);
                out.push_str(value);
                rest = &after[end + 2..];
            }
            _ => {
                out.push_str(&rest[..start + 1]);
                rest = &rest[start + 1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Templates addressed by id.
#[derive(Debug, Default, Clone)]
pub struct TemplateLibrary {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        if self.templates.contains_key(&template.template_id) {
            return Err(TemplateError::DuplicateId(template.template_id));
        }
        self.templates.insert(template.template_id.clone(), template);
        Ok(())
    }

    pub fn get(&self, template_id: &str) -> Option<&PromptTemplate> {
        self.templates.get(template_id)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Pairs a counterfactual prompt with the instance it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualLink {
    pub original_instance_id: String,
    pub attribute: String,
    pub original_value: String,
    pub new_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub instance_id: String,
    pub template_id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub counterfactual: Option<CounterfactualLink>,
}

impl RenderedPrompt {
    pub fn is_counterfactual(&self) -> bool {
        self.counterfactual.is_some()
    }

    pub fn prompt_ref(&self) -> PromptRef {
        PromptRef {
            instance_id: self.instance_id.clone(),
            template_id: self.template_id.clone(),
            counterfactual: self.is_counterfactual(),
        }
    }
}

/// Identifies which rendered prompt an exchange or answer belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptRef {
    pub instance_id: String,
    pub template_id: String,
    pub counterfactual: bool,
}

/// Letter-to-role assignment of a rendered StereoSet prompt: index 0 is `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionOrder(pub [StereoRole; 3]);

impl OptionOrder {
    pub const LETTERS: [char; 3] = ['A', 'B', 'C'];

    pub fn role_at(&self, letter: char) -> Option<StereoRole> {
        let idx = Self::LETTERS.iter().position(|&l| l == letter.to_ascii_uppercase())?;
        Some(self.0[idx])
    }

    pub fn letter_of(&self, role: StereoRole) -> char {
        let idx = self.0.iter().position(|&r| r == role).expect("order is a permutation");
        Self::LETTERS[idx]
    }
}

/// The six orderings of the three roles, in lexicographic index order.
pub const ROLE_PERMUTATIONS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Index into [`ROLE_PERMUTATIONS`] drawn deterministically from
/// `(instance_id, seed)`.
pub fn permutation_index(instance_id: &str, seed: u64) -> usize {
    let mut input = Vec::with_capacity(32 + instance_id.len());
    input.extend_from_slice(b"stereoset-option-order\0");
    input.extend_from_slice(&seed.to_be_bytes());
    input.extend_from_slice(instance_id.as_bytes());
    let digest = sha256(&input);
    let word = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    (word % 6) as usize
}

pub const INTER_SENTENCE_INSTRUCTION: &str =
    "Choose the option that is the most appropriate sentence to follow the context.";
pub const INTRA_SENTENCE_INSTRUCTION: &str =
    "Choose the option that most appropriately fills in the BLANK in the context.";

/// `name: value` pairs joined by `, `, in attribute-name order.
pub fn format_attributes(attributes: &BTreeMap<String, String>) -> String {
    attributes
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render_pisa(
    instance: &PisaInstance,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, TemplateError> {
    template.require(AnswerFormat::SingleLetterLh)?;
    let mut bindings: BTreeMap<&str, String> = instance
        .student_attributes
        .iter()
        .map(|(k, v)| (k.as_str(), v.clone()))
        .collect();
    bindings.insert("attributes", format_attributes(&instance.student_attributes));
    bindings.insert("instance_id", instance.instance_id.clone());
    let (system_text, user_text) = template.fill(&bindings)?;
    Ok(RenderedPrompt {
        instance_id: instance.instance_id.clone(),
        template_id: template.template_id.clone(),
        system_text,
        user_text,
        counterfactual: None,
    })
}

/// Renders the counterfactual twin and links it to its original.
pub fn render_pisa_counterfactual(
    counterfactual: &Counterfactual,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, TemplateError> {
    let mut prompt = render_pisa(&counterfactual.instance, template)?;
    prompt.counterfactual = Some(counterfactual.link.clone());
    Ok(prompt)
}

pub fn render_kaleidoscope(
    instance: &KaleidoInstance,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, TemplateError> {
    template.require(AnswerFormat::JsonChoice)?;
    let bindings: BTreeMap<&str, String> = [
        ("question", instance.question.clone()),
        ("options", instance.options.join("\n")),
        ("instance_id", instance.instance_id.clone()),
        ("language", instance.language.code().to_owned()),
    ]
    .into_iter()
    .collect();
    let (system_text, user_text) = template.fill(&bindings)?;
    Ok(RenderedPrompt {
        instance_id: instance.instance_id.clone(),
        template_id: template.template_id.clone(),
        system_text,
        user_text,
        counterfactual: None,
    })
}

pub fn render_stereoset(
    instance: &StereoInstance,
    template: &PromptTemplate,
    seed: u64,
) -> Result<(RenderedPrompt, OptionOrder), TemplateError> {
    template.require(AnswerFormat::OptionLetter)?;
    let perm = ROLE_PERMUTATIONS[permutation_index(&instance.instance_id, seed)];
    let order = OptionOrder(perm.map(|i| StereoRole::ALL[i]));
    let text_of = |slot: usize| instance.option_for(order.0[slot]).text.clone();
    let instruction = match instance.task_kind {
        TaskKind::InterSentence => INTER_SENTENCE_INSTRUCTION,
        TaskKind::IntraSentence => INTRA_SENTENCE_INSTRUCTION,
    };
    let bindings: BTreeMap<&str, String> = [
        ("context", instance.context.clone()),
        ("option_a", text_of(0)),
        ("option_b", text_of(1)),
        ("option_c", text_of(2)),
        ("instruction", instruction.to_owned()),
        ("instance_id", instance.instance_id.clone()),
    ]
    .into_iter()
    .collect();
    let (system_text, user_text) = template.fill(&bindings)?;
    let prompt = RenderedPrompt {
        instance_id: instance.instance_id.clone(),
        template_id: template.template_id.clone(),
        system_text,
        user_text,
        counterfactual: None,
    };
    Ok((prompt, order))
}

/// Suffix marking counterfactual instance ids.
pub const COUNTERFACTUAL_SUFFIX: &str = "#cf";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterfactual {
    pub instance: PisaInstance,
    pub link: CounterfactualLink,
}

/// Copies `instance` with one attribute replaced through `flip_map`. The
/// label and every other attribute stay untouched.
pub fn make_counterfactual(
    instance: &PisaInstance,
    attribute: &str,
    flip_map: &BTreeMap<String, String>,
) -> Result<Counterfactual, CounterfactualError> {
    let original_value = instance.student_attributes.get(attribute).ok_or_else(|| {
        CounterfactualError::MissingAttribute {
            instance_id: instance.instance_id.clone(),
            attribute: attribute.to_owned(),
        }
    })?;
    let new_value = flip_map
        .get(original_value)
        .ok_or_else(|| CounterfactualError::UnmappedValue {
            attribute: attribute.to_owned(),
            value: original_value.clone(),
        })?;
    let mut flipped = instance.clone();
    flipped.instance_id = format!("{}{COUNTERFACTUAL_SUFFIX}", instance.instance_id);
    flipped
        .student_attributes
        .insert(attribute.to_owned(), new_value.clone());
    Ok(Counterfactual {
        link: CounterfactualLink {
            original_instance_id: instance.instance_id.clone(),
            attribute: attribute.to_owned(),
            original_value: original_value.clone(),
            new_value: new_value.clone(),
        },
        instance: flipped,
    })
}
