//! Adapters from the published source schemas into [`McqaItem`]s.
//!
//! Each source record is a JSON object. Malformed records are rejected with
//! their index and a reason; nothing is dropped silently.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mcqa::{positional_label, validate_item, Dataset, Language, McqaItem, OptionEntry, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    MmluClinical,
    Pubmedqa,
    Medqa,
    Medmcqa,
    CareqaEn,
    CareqaEs,
    Casimedicos,
}

impl SourceKind {
    pub const ALL: [SourceKind; 7] = [
        SourceKind::MmluClinical,
        SourceKind::Pubmedqa,
        SourceKind::Medqa,
        SourceKind::Medmcqa,
        SourceKind::CareqaEn,
        SourceKind::CareqaEs,
        SourceKind::Casimedicos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::MmluClinical => "mmlu_clinical",
            SourceKind::Pubmedqa => "pubmedqa",
            SourceKind::Medqa => "medqa",
            SourceKind::Medmcqa => "medmcqa",
            SourceKind::CareqaEn => "careqa_en",
            SourceKind::CareqaEs => "careqa_es",
            SourceKind::Casimedicos => "casimedicos",
        }
    }

    /// Dataset name written into canonical records.
    pub fn dataset_name(self) -> &'static str {
        match self {
            SourceKind::MmluClinical => "mmlu",
            other => other.as_str(),
        }
    }

    pub fn language(self) -> Language {
        match self {
            SourceKind::CareqaEs | SourceKind::Casimedicos => Language::Es,
            _ => Language::En,
        }
    }

    /// MedMCQA is only used for development assessment.
    pub fn dev_only(self) -> bool {
        matches!(self, SourceKind::Medmcqa)
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown source kind {0:?}")]
pub struct UnknownSourceKind(pub String);

impl FromStr for SourceKind {
    type Err = UnknownSourceKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownSourceKind(s.to_string()))
    }
}

pub const DEFAULT_MMLU_CATEGORIES: [&str; 6] = [
    "clinical_knowledge",
    "college_medicine",
    "professional_medicine",
    "medical_genetics",
    "anatomy",
    "college_biology",
];

/// PubMedQA decisions in label order A, B, C.
pub const PUBMEDQA_DECISIONS: [&str; 3] = ["yes", "no", "maybe"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    pub split: Split,
    pub mmlu_categories: Vec<String>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            mmlu_categories: DEFAULT_MMLU_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    Malformed(String),
    CategoryExcluded(String),
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub reason: RejectReason,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub dataset: Dataset,
    pub rejections: Vec<Rejection>,
}

/// Maps a stream of raw source records onto the canonical schema.
///
/// `dataset.items.len() + rejections.len()` always equals the number of
/// input records.
pub fn adapt_source<I>(kind: SourceKind, records: I, config: &AdapterConfig) -> AdaptOutput
where
    I: IntoIterator<Item = Value>,
{
    let split = if kind.dev_only() { Split::Dev } else { config.split };
    let mut items = Vec::new();
    let mut rejections = Vec::new();
    let mut ids = HashSet::new();

    for (index, record) in records.into_iter().enumerate() {
        let fallback_id = format!("{}:{}:{:06}", kind.dataset_name(), split.as_str(), index);
        let parsed = match kind {
            SourceKind::MmluClinical => adapt_mmlu(&record, config),
            SourceKind::Pubmedqa => adapt_pubmedqa(&record),
            SourceKind::Medqa => adapt_medqa(&record),
            SourceKind::Medmcqa => adapt_medmcqa(&record),
            SourceKind::CareqaEn | SourceKind::CareqaEs => adapt_careqa(&record),
            SourceKind::Casimedicos => adapt_casimedicos(&record),
        };
        let raw = match parsed {
            Ok(raw) => raw,
            Err(reason) => {
                tracing::warn!(source = %kind, index, ?reason, "rejected source record");
                rejections.push(Rejection { index, reason });
                continue;
            }
        };
        let item = McqaItem {
            id: raw.id.unwrap_or(fallback_id),
            dataset: kind.dataset_name().to_string(),
            split,
            language: kind.language(),
            category: raw.category,
            question: raw.question,
            options: raw
                .options
                .into_iter()
                .enumerate()
                .map(|(i, t)| OptionEntry::new(positional_label(i), t))
                .collect(),
            gold_index: raw.gold_index,
        };
        let violations = validate_item(&item);
        if !violations.is_empty() {
            let detail = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            tracing::warn!(source = %kind, index, %detail, "rejected invalid item");
            rejections.push(Rejection {
                index,
                reason: RejectReason::Malformed(detail),
            });
            continue;
        }
        if !ids.insert(item.id.clone()) {
            rejections.push(Rejection {
                index,
                reason: RejectReason::DuplicateId(item.id),
            });
            continue;
        }
        items.push(item);
    }

    AdaptOutput {
        dataset: Dataset {
            name: kind.dataset_name().to_string(),
            split,
            items,
        },
        rejections,
    }
}

struct RawItem {
    id: Option<String>,
    category: Option<String>,
    question: String,
    options: Vec<String>,
    gold_index: usize,
}

fn malformed(msg: impl Into<String>) -> RejectReason {
    RejectReason::Malformed(msg.into())
}

fn str_field<'a>(record: &'a Value, names: &[&str]) -> Result<&'a str, RejectReason> {
    names
        .iter()
        .find_map(|n| record.get(*n).and_then(Value::as_str))
        .ok_or_else(|| malformed(format!("missing string field `{}`", names[0])))
}

fn opt_id(record: &Value, names: &[&str]) -> Option<String> {
    names.iter().find_map(|n| match record.get(*n)? {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    })
}

fn letter_index(key: &str, n: usize) -> Result<usize, RejectReason> {
    let mut chars = key.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < n => {
            Ok((c as u8 - b'A') as usize)
        }
        _ => Err(malformed(format!("answer key {key:?} does not name one of {n} options"))),
    }
}

fn index_field(record: &Value, name: &str, base: usize, n: usize) -> Result<usize, RejectReason> {
    let raw = match record.get(name) {
        Some(Value::Number(num)) => num.as_u64().map(|v| v as usize),
        Some(Value::String(s)) => s.trim().parse::<usize>().ok(),
        _ => None,
    }
    .ok_or_else(|| malformed(format!("missing integer field `{name}`")))?;
    if raw < base || raw - base >= n {
        return Err(malformed(format!("`{name}` = {raw} out of range for {n} options")));
    }
    Ok(raw - base)
}

fn string_list(value: &Value, field: &str) -> Result<Vec<String>, RejectReason> {
    value
        .as_array()
        .ok_or_else(|| malformed(format!("`{field}` is not a list")))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| malformed(format!("`{field}` contains a non-string")))
        })
        .collect()
}

fn numbered_options(record: &Value, prefix: &str, count: usize) -> Result<Vec<String>, RejectReason> {
    (1..=count)
        .map(|i| str_field(record, &[&format!("{prefix}{i}")]).map(str::to_string))
        .collect()
}

// {"question", "subject", "choices": [..], "answer": 0-based int or letter}
fn adapt_mmlu(record: &Value, config: &AdapterConfig) -> Result<RawItem, RejectReason> {
    let subject = str_field(record, &["subject", "category"])?;
    if !config.mmlu_categories.iter().any(|c| c == subject) {
        return Err(RejectReason::CategoryExcluded(subject.to_string()));
    }
    let question = str_field(record, &["question"])?.to_string();
    let options = string_list(
        record.get("choices").ok_or_else(|| malformed("missing field `choices`"))?,
        "choices",
    )?;
    let gold_index = match record.get("answer") {
        Some(Value::String(s)) if s.parse::<usize>().is_err() => letter_index(s, options.len())?,
        _ => index_field(record, "answer", 0, options.len())?,
    };
    Ok(RawItem {
        id: opt_id(record, &["id"]),
        category: Some(subject.to_string()),
        question,
        options,
        gold_index,
    })
}

// {"pubid", "question", "context": {"contexts": [..]}, "final_decision"}
fn adapt_pubmedqa(record: &Value) -> Result<RawItem, RejectReason> {
    let question = str_field(record, &["question", "QUESTION"])?;
    let contexts = record
        .get("context")
        .and_then(|c| c.get("contexts"))
        .or_else(|| record.get("CONTEXTS"))
        .map(|v| string_list(v, "contexts"))
        .transpose()?
        .unwrap_or_default();
    let decision = str_field(record, &["final_decision"])?.trim().to_lowercase();
    let gold_index = PUBMEDQA_DECISIONS
        .iter()
        .position(|d| *d == decision)
        .ok_or_else(|| malformed(format!("final_decision {decision:?} not in yes/no/maybe")))?;
    let question = if contexts.is_empty() {
        question.to_string()
    } else {
        format!("Abstract: {}\nQuestion: {}", contexts.join(" "), question)
    };
    Ok(RawItem {
        id: opt_id(record, &["pubid", "id"]),
        category: None,
        question,
        options: PUBMEDQA_DECISIONS.iter().map(|s| s.to_string()).collect(),
        gold_index,
    })
}

// {"question", "options": {"A": .., ..} | [..], "answer_idx": "C", "answer"?: text}
fn adapt_medqa(record: &Value) -> Result<RawItem, RejectReason> {
    let question = str_field(record, &["question"])?.to_string();
    let options = match record.get("options") {
        Some(Value::Object(map)) => {
            let mut keyed: Vec<(&String, &Value)> = map.iter().collect();
            keyed.sort_by(|a, b| a.0.cmp(b.0));
            for (i, (k, _)) in keyed.iter().enumerate() {
                if k.as_str() != positional_label(i).to_string() {
                    return Err(malformed(format!("option keys are not A.. in sequence at {k:?}")));
                }
            }
            keyed
                .into_iter()
                .map(|(_, v)| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| malformed("option text is not a string"))
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        Some(v @ Value::Array(_)) => string_list(v, "options")?,
        _ => return Err(malformed("missing field `options`")),
    };
    let key = str_field(record, &["answer_idx"])?;
    let gold_index = letter_index(key, options.len())?;
    if let Some(answer) = record.get("answer").and_then(Value::as_str) {
        if answer.trim() != options[gold_index].trim() {
            return Err(malformed(format!(
                "answer text {answer:?} disagrees with option {key}"
            )));
        }
    }
    Ok(RawItem {
        id: opt_id(record, &["id"]),
        category: None,
        question,
        options,
        gold_index,
    })
}

// {"id", "question", "opa".."opd", "cop": 0-based, "subject_name"}
fn adapt_medmcqa(record: &Value) -> Result<RawItem, RejectReason> {
    let question = str_field(record, &["question"])?.to_string();
    let options = ["opa", "opb", "opc", "opd"]
        .iter()
        .map(|k| str_field(record, &[k]).map(str::to_string))
        .collect::<Result<Vec<_>, _>>()?;
    let gold_index = index_field(record, "cop", 0, options.len())?;
    Ok(RawItem {
        id: opt_id(record, &["id"]),
        category: record.get("subject_name").and_then(Value::as_str).map(str::to_string),
        question,
        options,
        gold_index,
    })
}

// {"unique_id", "question", "op1".."op4", "cop": 1-based, "category"}
fn adapt_careqa(record: &Value) -> Result<RawItem, RejectReason> {
    let question = str_field(record, &["question"])?.to_string();
    let options = numbered_options(record, "op", 4)?;
    let gold_index = index_field(record, "cop", 1, options.len())?;
    Ok(RawItem {
        id: opt_id(record, &["unique_id", "id"]),
        category: record.get("category").and_then(Value::as_str).map(str::to_string),
        question,
        options,
        gold_index,
    })
}

// {"id", "full_question", "options": {"1": .., "5": ..}, "correct_option": 1-based}
fn adapt_casimedicos(record: &Value) -> Result<RawItem, RejectReason> {
    let question = str_field(record, &["full_question", "question"])?.to_string();
    let map = record
        .get("options")
        .and_then(Value::as_object)
        .ok_or_else(|| malformed("missing object field `options`"))?;
    let mut numbered: Vec<(usize, Option<&str>)> = map
        .iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .map(|n| (n, v.as_str()))
                .map_err(|_| malformed(format!("option key {k:?} is not a number")))
        })
        .collect::<Result<_, _>>()?;
    numbered.sort_by_key(|(n, _)| *n);
    let correct = match record.get("correct_option") {
        Some(Value::Number(n)) => n.as_u64().map(|v| v as usize),
        Some(Value::String(s)) => s.trim().parse().ok(),
        _ => None,
    }
    .ok_or_else(|| malformed("missing integer field `correct_option`"))?;

    let mut options = Vec::new();
    let mut gold_index = None;
    for (expected, (n, text)) in (1..).zip(&numbered) {
        if *n != expected {
            return Err(malformed(format!("option keys skip from {} to {n}", expected - 1)));
        }
        // null or blank slots mark four-option questions
        match text.map(str::trim) {
            Some(t) if !t.is_empty() => {
                if *n == correct {
                    gold_index = Some(options.len());
                }
                options.push(t.to_string());
            }
            _ => {}
        }
    }
    let gold_index = gold_index
        .ok_or_else(|| malformed(format!("correct_option {correct} names no non-empty option")))?;
    Ok(RawItem {
        id: opt_id(record, &["id"]),
        category: record.get("type").and_then(Value::as_str).map(str::to_string),
        question,
        options,
        gold_index,
    })
}
