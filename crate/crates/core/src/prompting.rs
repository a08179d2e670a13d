//! Chat message rendering for every pipeline stage.
//!
//! Templates use `{name}` placeholders drawn from a fixed variable set;
//! `{{` and `}}` produce literal braces.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::{Language, OptionEntry};
use crate::perturb::TransformedItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Answer,
    CotStep1,
    CotStep2,
    SummStep1,
    SummStep2,
    ParStep1,
    ParStep2,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Answer,
        Stage::CotStep1,
        Stage::CotStep2,
        Stage::SummStep1,
        Stage::SummStep2,
        Stage::ParStep1,
        Stage::ParStep2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Answer => "answer",
            Stage::CotStep1 => "cot_step1",
            Stage::CotStep2 => "cot_step2",
            Stage::SummStep1 => "summ_step1",
            Stage::SummStep2 => "summ_step2",
            Stage::ParStep1 => "par_step1",
            Stage::ParStep2 => "par_step2",
        }
    }

    /// Stages whose reply is scored against the single-label contract.
    pub fn is_answer(self) -> bool {
        matches!(
            self,
            Stage::Answer | Stage::CotStep2 | Stage::SummStep2 | Stage::ParStep2
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    Question,
    OptionsBlock,
    LabelList,
    Rationale,
    Summary,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "question" => Placeholder::Question,
            "options_block" => Placeholder::OptionsBlock,
            "label_list" => Placeholder::LabelList,
            "rationale" => Placeholder::Rationale,
            "summary" => Placeholder::Summary,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Question => "question",
            Placeholder::OptionsBlock => "options_block",
            Placeholder::LabelList => "label_list",
            Placeholder::Rationale => "rationale",
            Placeholder::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Var(Placeholder),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("stage {stage}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("stage {stage}: unbalanced brace at byte {offset}")]
    UnbalancedBrace { stage: Stage, offset: usize },
    #[error("prompt config {id}: missing template for stage {stage}")]
    MissingTemplate { id: String, stage: Stage },
    #[error("prompt config {id}: stage {stage} must use {{{placeholder}}}")]
    RequiredPlaceholder {
        id: String,
        stage: Stage,
        placeholder: &'static str,
    },
    #[error("prompt config {id}: stage {stage} may not use {{{placeholder}}}")]
    ForbiddenPlaceholder {
        id: String,
        stage: Stage,
        placeholder: &'static str,
    },
    #[error("stage {stage}: missing extras variable `{name}`")]
    MissingExtra { stage: Stage, name: &'static str },
    #[error("cannot parse prompt config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("no prompt config {id:?} for language {language}")]
    UnknownConfig { id: String, language: Language },
}

fn parse_template(stage: Stage, template: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < template.len() {
        let rest = &template[i..];
        if rest.starts_with("{{") {
            literal.push('{');
            i += 2;
        } else if rest.starts_with("}}") {
            literal.push('}');
            i += 2;
        } else if bytes[i] == b'{' {
            let close = rest
                .find('}')
                .ok_or(PromptError::UnbalancedBrace { stage, offset: i })?;
            let name = &rest[1..close];
            let var = Placeholder::parse(name).ok_or_else(|| PromptError::UnknownPlaceholder {
                stage,
                name: name.to_string(),
            })?;
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Var(var));
            i += close + 1;
        } else if bytes[i] == b'}' {
            return Err(PromptError::UnbalancedBrace { stage, offset: i });
        } else {
            let ch = rest.chars().next().expect("non-empty");
            literal.push(ch);
            i += ch.len_utf8();
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

fn placeholders(segments: &[Segment]) -> Vec<Placeholder> {
    segments
        .iter()
        .filter_map(|s| match s {
            Segment::Var(v) => Some(*v),
            Segment::Literal(_) => None,
        })
        .collect()
}

/// Placeholders a stage must use and ones it must not.
fn stage_rules(stage: Stage) -> (&'static [Placeholder], &'static [Placeholder]) {
    use Placeholder::*;
    match stage {
        Stage::Answer | Stage::ParStep2 => (&[Question, OptionsBlock, LabelList], &[Rationale, Summary]),
        Stage::CotStep2 => (&[Question, OptionsBlock, Rationale, LabelList], &[Summary]),
        Stage::SummStep2 => (&[Summary, LabelList], &[Question, OptionsBlock, Rationale]),
        Stage::CotStep1 | Stage::SummStep1 | Stage::ParStep1 => {
            (&[Question, OptionsBlock], &[Rationale, Summary])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PromptConfigFile {
    id: String,
    language: Language,
    #[serde(default)]
    system_prompt: String,
    #[serde(default)]
    system_prompts: BTreeMap<Stage, String>,
    templates: BTreeMap<Stage, String>,
}

/// A named bundle of system prompt and the seven stage templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PromptConfigFile", into = "PromptConfigFile")]
pub struct PromptConfig {
    pub id: String,
    pub language: Language,
    pub system_prompt: String,
    /// Per-stage system prompt overrides.
    pub system_prompts: BTreeMap<Stage, String>,
    pub templates: BTreeMap<Stage, String>,
}

impl TryFrom<PromptConfigFile> for PromptConfig {
    type Error = PromptError;

    fn try_from(f: PromptConfigFile) -> Result<Self, Self::Error> {
        let cfg = PromptConfig {
            id: f.id,
            language: f.language,
            system_prompt: f.system_prompt,
            system_prompts: f.system_prompts,
            templates: f.templates,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<PromptConfig> for PromptConfigFile {
    fn from(c: PromptConfig) -> Self {
        PromptConfigFile {
            id: c.id,
            language: c.language,
            system_prompt: c.system_prompt,
            system_prompts: c.system_prompts,
            templates: c.templates,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        for stage in Stage::ALL {
            let template = self.templates.get(&stage).ok_or_else(|| PromptError::MissingTemplate {
                id: self.id.clone(),
                stage,
            })?;
            let used = placeholders(&parse_template(stage, template)?);
            let (required, forbidden) = stage_rules(stage);
            if let Some(p) = required.iter().find(|p| !used.contains(p)) {
                return Err(PromptError::RequiredPlaceholder {
                    id: self.id.clone(),
                    stage,
                    placeholder: p.name(),
                });
            }
            if let Some(p) = forbidden.iter().find(|p| used.contains(p)) {
                return Err(PromptError::ForbiddenPlaceholder {
                    id: self.id.clone(),
                    stage,
                    placeholder: p.name(),
                });
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, PromptError> {
        toml::from_str(text).map_err(|e| PromptError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Parse {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("prompt config serializes")
    }

    pub fn system_prompt_for(&self, stage: Stage) -> &str {
        self.system_prompts
            .get(&stage)
            .map(String::as_str)
            .unwrap_or(&self.system_prompt)
    }

    /// Step-1 prompts that render identically across configs can share
    /// their intermediate generation.
    pub fn step1_signature(&self, stage: Stage) -> (String, String) {
        (
            self.system_prompt_for(stage).to_string(),
            self.templates[&stage].clone(),
        )
    }
}

const BUILTIN_SOURCES: [(&str, &str); 6] = [
    ("en_minimal.toml", include_str!("../prompts/en_minimal.toml")),
    ("en_persona.toml", include_str!("../prompts/en_persona.toml")),
    ("en_exam.toml", include_str!("../prompts/en_exam.toml")),
    ("es_minimal.toml", include_str!("../prompts/es_minimal.toml")),
    ("es_persona.toml", include_str!("../prompts/es_persona.toml")),
    ("es_exam.toml", include_str!("../prompts/es_exam.toml")),
];

pub const DEFAULT_PROMPT_IDS: [&str; 3] = ["minimal", "persona", "exam"];

/// Prompt configs addressable by (id, language).
#[derive(Debug, Clone, Default)]
pub struct PromptLibrary {
    configs: BTreeMap<(String, Language), PromptConfig>,
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let mut lib = Self::default();
        for (name, text) in BUILTIN_SOURCES {
            lib.insert(PromptConfig::from_toml_str(text, name).expect("builtin prompt config is valid"));
        }
        lib
    }

    /// Later inserts replace earlier configs with the same id and language.
    pub fn insert(&mut self, cfg: PromptConfig) {
        self.configs.insert((cfg.id.clone(), cfg.language), cfg);
    }

    pub fn get(&self, id: &str, language: Language) -> Result<&PromptConfig, PromptError> {
        self.configs
            .get(&(id.to_string(), language))
            .ok_or_else(|| PromptError::UnknownConfig {
                id: id.to_string(),
                language,
            })
    }

    pub fn contains_id(&self, id: &str) -> bool {
        self.configs.keys().any(|(k, _)| k == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptConfig> {
        self.configs.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

pub type MessageList = Vec<Message>;

pub fn last_user_message(messages: &[Message]) -> Option<&str> {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
}

/// Question and options recovered from a paraphrase, or the raw reply when
/// parsing failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paraphrased {
    Parsed {
        question: String,
        options: Vec<OptionEntry>,
    },
    Raw(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Extras {
    pub rationale: Option<String>,
    pub summary: Option<String>,
    pub paraphrase: Option<Paraphrased>,
}

pub fn render_options_block(options: &[OptionEntry]) -> String {
    options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_label_list(labels: &[char]) -> String {
    labels
        .iter()
        .map(char::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn render(
    stage: Stage,
    t: &TransformedItem,
    cfg: &PromptConfig,
    extras: &Extras,
) -> Result<MessageList, PromptError> {
    let template = cfg.templates.get(&stage).ok_or_else(|| PromptError::MissingTemplate {
        id: cfg.id.clone(),
        stage,
    })?;
    let segments = parse_template(stage, template)?;

    let (question, options_block) = match (stage, &extras.paraphrase) {
        (Stage::ParStep2, Some(Paraphrased::Parsed { question, options })) => {
            (question.clone(), render_options_block(options))
        }
        (Stage::ParStep2, Some(Paraphrased::Raw(raw))) => (raw.clone(), String::new()),
        (Stage::ParStep2, None) => {
            return Err(PromptError::MissingExtra {
                stage,
                name: "paraphrase",
            })
        }
        _ => (t.question.clone(), render_options_block(&t.presented_options)),
    };

    let mut content = String::new();
    for segment in &segments {
        match segment {
            Segment::Literal(s) => content.push_str(s),
            Segment::Var(Placeholder::Question) => content.push_str(&question),
            Segment::Var(Placeholder::OptionsBlock) => content.push_str(&options_block),
            Segment::Var(Placeholder::LabelList) => content.push_str(&render_label_list(&t.labels())),
            Segment::Var(Placeholder::Rationale) => content.push_str(
                extras
                    .rationale
                    .as_deref()
                    .ok_or(PromptError::MissingExtra { stage, name: "rationale" })?,
            ),
            Segment::Var(Placeholder::Summary) => content.push_str(
                extras
                    .summary
                    .as_deref()
                    .ok_or(PromptError::MissingExtra { stage, name: "summary" })?,
            ),
        }
    }

    let mut messages = Vec::with_capacity(2);
    let system = cfg.system_prompt_for(stage);
    if !system.is_empty() {
        messages.push(Message::system(system));
    }
    messages.push(Message::user(content));
    Ok(messages)
}
