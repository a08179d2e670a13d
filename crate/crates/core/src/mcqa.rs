//! Canonical multiple-choice item model, validation and the line-delimited
//! canonical dataset format.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_OPTIONS: usize = 3;
pub const MAX_OPTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Es,
}

impl Language {
    pub fn as_str(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Es => "es",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// One labeled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptionEntry {
    pub label: char,
    pub text: String,
}

impl OptionEntry {
    pub fn new(label: char, text: impl Into<String>) -> Self {
        Self {
            label,
            text: text.into(),
        }
    }
}

/// Label for position `index` in the canonical A, B, C, ... sequence.
pub fn positional_label(index: usize) -> char {
    assert!(index < 26, "option index {index} has no single-letter label");
    (b'A' + index as u8) as char
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaItem {
    pub id: String,
    pub dataset: String,
    pub split: Split,
    pub language: Language,
    pub category: Option<String>,
    pub question: String,
    pub options: Vec<OptionEntry>,
    pub gold_index: usize,
}

impl McqaItem {
    /// Builds an item with canonical positional labels.
    pub fn with_texts(
        id: impl Into<String>,
        dataset: impl Into<String>,
        split: Split,
        language: Language,
        question: impl Into<String>,
        texts: &[&str],
        gold_index: usize,
    ) -> Self {
        Self {
            id: id.into(),
            dataset: dataset.into(),
            split,
            language,
            category: None,
            question: question.into(),
            options: texts
                .iter()
                .enumerate()
                .map(|(i, t)| OptionEntry::new(positional_label(i), *t))
                .collect(),
            gold_index,
        }
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.gold_index].text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EmptyId,
    EmptyQuestion,
    OptionCount(usize),
    InvalidLabel(char),
    DuplicateLabel(char),
    EmptyOptionText(usize),
    GoldIndexOutOfRange { gold_index: usize, options: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptyQuestion => write!(f, "empty question"),
            Violation::OptionCount(n) => write!(
                f,
                "option count {n} outside {MIN_OPTIONS}..={MAX_OPTIONS}"
            ),
            Violation::InvalidLabel(c) => write!(f, "invalid label {c:?}"),
            Violation::DuplicateLabel(c) => write!(f, "duplicate label {c}"),
            Violation::EmptyOptionText(i) => write!(f, "empty text for option {i}"),
            Violation::GoldIndexOutOfRange {
                gold_index,
                options,
            } => write!(f, "gold_index {gold_index} out of range for {options} options"),
        }
    }
}

/// Lists every violated item invariant; an empty list means the item is valid.
pub fn validate_item(item: &McqaItem) -> Vec<Violation> {
    let mut out = Vec::new();
    if item.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if item.question.trim().is_empty() {
        out.push(Violation::EmptyQuestion);
    }
    let n = item.options.len();
    if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
        out.push(Violation::OptionCount(n));
    }
    let mut seen = HashSet::new();
    for (i, opt) in item.options.iter().enumerate() {
        if !opt.label.is_ascii_uppercase() {
            out.push(Violation::InvalidLabel(opt.label));
        } else if !seen.insert(opt.label) {
            out.push(Violation::DuplicateLabel(opt.label));
        }
        if opt.text.trim().is_empty() {
            out.push(Violation::EmptyOptionText(i));
        }
    }
    if item.gold_index >= n {
        out.push(Violation::GoldIndexOutOfRange {
            gold_index: item.gold_index,
            options: n,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub items: Vec<McqaItem>,
}

impl Dataset {
    pub fn language(&self) -> Option<Language> {
        self.items.first().map(|i| i.language)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: schema violation in field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: language {found} differs from dataset language {expected}")]
    MixedLanguage {
        line: usize,
        expected: Language,
        found: Language,
    },
    #[error("line {line}: split {found} differs from dataset split {expected}")]
    MixedSplit {
        line: usize,
        expected: &'static str,
        found: &'static str,
    },
    #[error("empty dataset file {0}")]
    Empty(String),
}

/// On-disk form of an item. Labels are implicit by position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalRecord {
    pub id: String,
    pub dataset: String,
    pub split: Split,
    pub language: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub question: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

impl From<&McqaItem> for CanonicalRecord {
    fn from(item: &McqaItem) -> Self {
        Self {
            id: item.id.clone(),
            dataset: item.dataset.clone(),
            split: item.split,
            language: item.language,
            category: item.category.clone(),
            question: item.question.clone(),
            options: item.options.iter().map(|o| o.text.clone()).collect(),
            gold_index: item.gold_index,
        }
    }
}

impl From<CanonicalRecord> for McqaItem {
    fn from(r: CanonicalRecord) -> Self {
        Self {
            id: r.id,
            dataset: r.dataset,
            split: r.split,
            language: r.language,
            category: r.category,
            question: r.question,
            options: r
                .options
                .into_iter()
                .enumerate()
                .map(|(i, t)| OptionEntry::new(positional_label(i), t))
                .collect(),
            gold_index: r.gold_index,
        }
    }
}

fn violation_field(v: &Violation) -> &'static str {
    match v {
        Violation::EmptyId => "id",
        Violation::EmptyQuestion => "question",
        Violation::OptionCount(_)
        | Violation::InvalidLabel(_)
        | Violation::DuplicateLabel(_)
        | Violation::EmptyOptionText(_) => "options",
        Violation::GoldIndexOutOfRange { .. } => "gold_index",
    }
}

/// Parses canonical records from a reader, preserving line order.
pub fn read_canonical<R: BufRead>(reader: R, origin: &str) -> Result<Dataset, DatasetError> {
    let mut items: Vec<McqaItem> = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CanonicalRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Schema {
                line: line_no,
                field: schema_field_hint(&e.to_string()),
                message: e.to_string(),
            })?;
        if record.options.len() > 26 {
            return Err(DatasetError::Schema {
                line: line_no,
                field: "options".into(),
                message: format!("{} options cannot be labeled", record.options.len()),
            });
        }
        let item = McqaItem::from(record);
        if let Some(v) = validate_item(&item).first() {
            return Err(DatasetError::Schema {
                line: line_no,
                field: violation_field(v).into(),
                message: v.to_string(),
            });
        }
        if let Some(first) = items.first() {
            if first.language != item.language {
                return Err(DatasetError::MixedLanguage {
                    line: line_no,
                    expected: first.language,
                    found: item.language,
                });
            }
            if first.split != item.split {
                return Err(DatasetError::MixedSplit {
                    line: line_no,
                    expected: first.split.as_str(),
                    found: item.split.as_str(),
                });
            }
        }
        if !ids.insert(item.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: item.id,
            });
        }
        items.push(item);
    }
    let first = items
        .first()
        .ok_or_else(|| DatasetError::Empty(origin.to_string()))?;
    Ok(Dataset {
        name: first.dataset.clone(),
        split: first.split,
        items,
    })
}

fn schema_field_hint(message: &str) -> String {
    // serde_json reports "missing field `x`" / "unknown field `x`"
    message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

pub fn load_canonical(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_canonical(BufReader::new(file), &path.display().to_string())
}

/// Serializes items one record per line with a stable field order.
pub fn canonical_lines<'a>(items: impl IntoIterator<Item = &'a McqaItem>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(
            &serde_json::to_string(&CanonicalRecord::from(item))
                .expect("canonical record serializes"),
        );
        out.push('\n');
    }
    out
}

pub fn write_canonical(dataset: &Dataset, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(canonical_lines(&dataset.items).as_bytes())?;
    file.flush()
}
