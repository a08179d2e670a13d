//! Two-step pipelines: chain-of-thought, summarize-then-answer and
//! paraphrase-then-answer.
//!
//! Intermediate outputs are checked mechanically (answer leaks, missing or
//! reordered options). The checks produce flags that are stored with the
//! results; they never prevent an item from being scored.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{GenerationContext, GenerationError, GenerationRecord, Model};
use crate::mcqa::{Language, OptionEntry};
use crate::perturb::{TransformKind, TransformedItem};
use crate::prompting::{render, Extras, Paraphrased, PromptConfig, PromptError, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStepKind {
    Cot,
    Summ,
    Par,
}

impl TwoStepKind {
    pub const ALL: [TwoStepKind; 3] = [TwoStepKind::Cot, TwoStepKind::Summ, TwoStepKind::Par];

    pub fn as_str(self) -> &'static str {
        match self {
            TwoStepKind::Cot => "cot",
            TwoStepKind::Summ => "summ",
            TwoStepKind::Par => "par",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TwoStepKind::Cot => "CoT",
            TwoStepKind::Summ => "Summ",
            TwoStepKind::Par => "Par",
        }
    }

    pub fn stages(self) -> (Stage, Stage) {
        match self {
            TwoStepKind::Cot => (Stage::CotStep1, Stage::CotStep2),
            TwoStepKind::Summ => (Stage::SummStep1, Stage::SummStep2),
            TwoStepKind::Par => (Stage::ParStep1, Stage::ParStep2),
        }
    }
}

/// Any transformation in an evaluation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transform {
    OneStep(TransformKind),
    TwoStep(TwoStepKind),
}

impl Transform {
    pub fn all() -> Vec<Transform> {
        TransformKind::ALL
            .into_iter()
            .map(Transform::OneStep)
            .chain(TwoStepKind::ALL.into_iter().map(Transform::TwoStep))
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Transform::OneStep(k) => k.as_str(),
            Transform::TwoStep(k) => k.as_str(),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Transform::OneStep(k) => k.display_name(),
            Transform::TwoStep(k) => k.display_name(),
        }
    }

    pub fn is_two_step(self) -> bool {
        matches!(self, Transform::TwoStep(_))
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transform::all()
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown transform {s:?}"))
    }
}

impl Serialize for Transform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Transform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationFlag {
    AnswerLeak,
    OptionMissing,
    OptionOrderChanged,
    LabelSetChanged,
    ParseFailure,
    QuestionRemoved,
}

/// Answer-leak detectors for chain-of-thought rationales.
#[derive(Debug, Clone)]
pub struct LeakPatterns {
    patterns: Vec<Regex>,
}

const LABEL_CAPTURE: &str = "(?-i:(?P<label>[A-Z]))";

impl LeakPatterns {
    /// Parses a pattern file: one regex per line, `#` comments, `{label}`
    /// marking where an option label appears.
    pub fn parse(text: &str) -> Result<Self, regex::Error> {
        let patterns = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| Regex::new(&format!("(?i){}", l.replace("{label}", LABEL_CAPTURE))))
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    pub fn builtin(language: Language) -> Self {
        let text = match language {
            Language::En => include_str!("../data/leak_patterns_en.txt"),
            Language::Es => include_str!("../data/leak_patterns_es.txt"),
        };
        Self::parse(text).expect("builtin leak patterns compile")
    }

    pub fn leaks(&self, text: &str, labels: &[char]) -> bool {
        self.patterns.iter().any(|re| {
            re.captures_iter(text).any(|caps| {
                caps.name("label")
                    .and_then(|m| m.as_str().chars().next())
                    .is_some_and(|c| labels.contains(&c))
            })
        })
    }
}

/// Question and options recovered from a paraphrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedParaphrase {
    pub question: String,
    /// Options in the order they appeared.
    pub options: Vec<OptionEntry>,
    pub order_preserved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParaphraseOutcome {
    pub parsed: Option<ParsedParaphrase>,
    pub flags: BTreeSet<ValidationFlag>,
}

fn option_line_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([A-Z])[.)]\s+(\S.*?)\s*$").expect("valid regex"))
}

/// Extracts a question segment and one `<label>. <text>` line per expected
/// label. Succeeds iff every expected label is found exactly once and no
/// other label appears.
pub fn parse_paraphrase(text: &str, expected_labels: &[char]) -> ParaphraseOutcome {
    let mut question_lines = Vec::new();
    let mut found: Vec<OptionEntry> = Vec::new();
    for line in text.lines() {
        match option_line_regex().captures(line) {
            Some(caps) => {
                let label = caps[1].chars().next().expect("one char");
                found.push(OptionEntry::new(label, caps[2].to_string()));
            }
            None if found.is_empty() => question_lines.push(line),
            None => {
                // continuation of the previous option's text
                if let Some(last) = found.last_mut() {
                    let extra = line.trim();
                    if !extra.is_empty() {
                        last.text.push(' ');
                        last.text.push_str(extra);
                    }
                }
            }
        }
    }

    let mut flags = BTreeSet::new();
    if found.is_empty() {
        flags.insert(ValidationFlag::ParseFailure);
        return ParaphraseOutcome { parsed: None, flags };
    }
    let question = question_lines.join("\n").trim().to_string();
    if question.is_empty() {
        flags.insert(ValidationFlag::QuestionRemoved);
    }

    let found_labels: Vec<char> = found.iter().map(|o| o.label).collect();
    let unexpected = found_labels.iter().any(|l| !expected_labels.contains(l));
    let missing = expected_labels.iter().any(|l| !found_labels.contains(l));
    let duplicated = expected_labels
        .iter()
        .any(|l| found_labels.iter().filter(|f| *f == l).count() > 1);
    if unexpected {
        flags.insert(ValidationFlag::LabelSetChanged);
    } else if missing {
        flags.insert(ValidationFlag::OptionMissing);
    }
    if duplicated {
        flags.insert(ValidationFlag::ParseFailure);
    }
    if unexpected || missing || duplicated {
        return ParaphraseOutcome { parsed: None, flags };
    }

    let order_preserved = found_labels == expected_labels;
    if !order_preserved {
        flags.insert(ValidationFlag::OptionOrderChanged);
    }
    ParaphraseOutcome {
        parsed: Some(ParsedParaphrase {
            question,
            options: found,
            order_preserved,
        }),
        flags,
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn trailing_label_marker() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Z][.)]\s*$").expect("valid regex"))
}

fn summary_flags(text: &str, t: &TransformedItem) -> BTreeSet<ValidationFlag> {
    let mut flags = BTreeSet::new();
    let normalized = normalize_ws(text);
    let mut first_hit: Option<usize> = None;
    for opt in &t.presented_options {
        match normalized.find(&normalize_ws(&opt.text)) {
            Some(pos) => first_hit = Some(first_hit.map_or(pos, |p| p.min(pos))),
            None => {
                flags.insert(ValidationFlag::OptionMissing);
            }
        }
    }
    let prefix = match first_hit {
        Some(pos) => trailing_label_marker().replace(&normalized[..pos], "").into_owned(),
        None => normalized,
    };
    if !prefix.chars().any(char::is_alphanumeric) {
        flags.insert(ValidationFlag::QuestionRemoved);
    }
    flags
}

pub fn validate_intermediate(
    kind: TwoStepKind,
    text: &str,
    t: &TransformedItem,
    patterns: &LeakPatterns,
) -> BTreeSet<ValidationFlag> {
    match kind {
        TwoStepKind::Cot => {
            let mut flags = BTreeSet::new();
            if patterns.leaks(text, &t.labels()) {
                flags.insert(ValidationFlag::AnswerLeak);
            }
            flags
        }
        TwoStepKind::Summ => summary_flags(text, t),
        TwoStepKind::Par => parse_paraphrase(text, &t.labels()).flags,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntermediateRecord {
    pub kind: TwoStepKind,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_item: Option<TransformedItem>,
    pub flags: BTreeSet<ValidationFlag>,
    pub cache_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoStepRecord {
    pub base: TransformedItem,
    pub intermediate: IntermediateRecord,
    pub step1: GenerationRecord,
    pub final_answer: GenerationRecord,
}

#[derive(Debug, Error)]
pub enum TwoStepError {
    #[error("two-step pipelines start from a shuffled item, got {0}")]
    RequiresShuffle(TransformKind),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

fn paraphrased_item(t: &TransformedItem, parsed: &ParsedParaphrase) -> TransformedItem {
    let mut item = t.clone();
    item.question = parsed.question.clone();
    item.presented_options = parsed.options.clone();
    item
}

/// Runs step 1, validates its output, then asks for the final label.
pub async fn run_two_step(
    t: &TransformedItem,
    kind: TwoStepKind,
    model: &Model,
    cfg: &PromptConfig,
    patterns: &LeakPatterns,
    original_gold_text: &str,
) -> Result<TwoStepRecord, TwoStepError> {
    if t.kind != TransformKind::Shuffle {
        return Err(TwoStepError::RequiresShuffle(t.kind));
    }
    let (stage1, stage2) = kind.stages();

    let messages = render(stage1, t, cfg, &Extras::default())?;
    let req = model.request(stage1, messages);
    let ctx = GenerationContext {
        item: t,
        original_gold_text,
        stage: stage1,
    };
    let step1 = model.generate(&req, &ctx).await?;
    let step1_text = step1.result.text.clone();
    let step1 = GenerationRecord::new(stage1, &model.id, &req, step1);

    let flags = validate_intermediate(kind, &step1_text, t, patterns);
    let mut extras = Extras::default();
    let mut parsed_item = None;
    match kind {
        TwoStepKind::Cot => extras.rationale = Some(step1_text.clone()),
        TwoStepKind::Summ => extras.summary = Some(step1_text.clone()),
        TwoStepKind::Par => {
            let outcome = parse_paraphrase(&step1_text, &t.labels());
            extras.paraphrase = Some(match &outcome.parsed {
                Some(p) => {
                    parsed_item = Some(paraphrased_item(t, p));
                    Paraphrased::Parsed {
                        question: p.question.clone(),
                        options: p.options.clone(),
                    }
                }
                None => Paraphrased::Raw(step1_text.clone()),
            });
        }
    }

    let messages = render(stage2, t, cfg, &extras)?;
    let req = model.request(stage2, messages);
    let ctx = GenerationContext {
        item: t,
        original_gold_text,
        stage: stage2,
    };
    let answer = model.generate(&req, &ctx).await?;
    let final_answer = GenerationRecord::new(stage2, &model.id, &req, answer);

    Ok(TwoStepRecord {
        base: t.clone(),
        intermediate: IntermediateRecord {
            kind,
            raw_text: step1_text,
            parsed_item,
            flags,
            cache_key: step1.cache_key.clone(),
        },
        step1,
        final_answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcqa::{McqaItem, Split};
    use crate::perturb::{identity, relabel};

    fn shuffled() -> TransformedItem {
        let base = McqaItem::with_texts(
            "q1",
            "medqa",
            Split::Test,
            Language::En,
            "Which drug?",
            &["aspirin", "heparin", "warfarin", "insulin"],
            1,
        );
        let mut t = identity(&base);
        t.kind = TransformKind::Shuffle;
        t
    }

    const ABCD: [char; 4] = ['A', 'B', 'C', 'D'];

    #[test]
    fn paraphrase_in_order() {
        let out = parse_paraphrase("Q?\nA. p\nB. q\nC. r\nD. s", &ABCD);
        let parsed = out.parsed.unwrap();
        assert!(out.flags.is_empty());
        assert!(parsed.order_preserved);
        assert_eq!(parsed.question, "Q?");
        assert_eq!(parsed.options[2], OptionEntry::new('C', "r"));
    }

    #[test]
    fn paraphrase_reordered() {
        let out = parse_paraphrase("Q?\nB. q\nA. p\nC. r\nD. s", &ABCD);
        assert!(out.parsed.is_some());
        assert!(!out.parsed.unwrap().order_preserved);
        assert_eq!(out.flags, BTreeSet::from([ValidationFlag::OptionOrderChanged]));
    }

    #[test]
    fn paraphrase_missing_label() {
        let out = parse_paraphrase("Q?\nA. p\nB. q\nD. s", &ABCD);
        assert!(out.parsed.is_none());
        assert_eq!(out.flags, BTreeSet::from([ValidationFlag::OptionMissing]));
    }

    #[test]
    fn paraphrase_changed_label_set() {
        let t = shuffled();
        let flags = validate_intermediate(
            TwoStepKind::Par,
            "Q?\nA. p\nB. q\nC. r\nE. s",
            &t,
            &LeakPatterns::builtin(Language::En),
        );
        assert_eq!(flags, BTreeSet::from([ValidationFlag::LabelSetChanged]));
    }

    #[test]
    fn paraphrase_without_options_fails() {
        let out = parse_paraphrase("no options here", &ABCD);
        assert!(out.parsed.is_none());
        assert!(out.flags.contains(&ValidationFlag::ParseFailure));
    }

    #[test]
    fn paraphrase_duplicate_label_fails() {
        let out = parse_paraphrase("Q\nA. p\nB. q\nB. q2\nC. r\nD. s", &ABCD);
        assert!(out.parsed.is_none());
        assert!(out.flags.contains(&ValidationFlag::ParseFailure));
    }

    #[test]
    fn cot_leak_detection() {
        let t = shuffled();
        let en = LeakPatterns::builtin(Language::En);
        let check = |s: &str| validate_intermediate(TwoStepKind::Cot, s, &t, &en);
        assert_eq!(check("...so the answer is B."), BTreeSet::from([ValidationFlag::AnswerLeak]));
        assert!(check("Final answer: (C)").contains(&ValidationFlag::AnswerLeak));
        assert!(check("The correct option is D").contains(&ValidationFlag::AnswerLeak));
        // not a presented label, and lowercase words are not labels
        assert!(check("the answer is E").is_empty());
        assert!(check("the answer is a drug that inhibits thrombin").is_empty());
        assert!(check("Heparin potentiates antithrombin.").is_empty());
        let es = LeakPatterns::builtin(Language::Es);
        assert!(es.leaks("Por tanto, la respuesta correcta es la B.", &ABCD));
        assert!(!es.leaks("La heparina potencia la antitrombina.", &ABCD));
    }

    #[test]
    fn random_labels_leak_detection() {
        let t = relabel(&shuffled(), &['M', 'Q', 'F', 'Y']);
        let en = LeakPatterns::builtin(Language::En);
        assert!(!validate_intermediate(TwoStepKind::Cot, "the answer is Q", &t, &en).is_empty());
        assert!(validate_intermediate(TwoStepKind::Cot, "the answer is B", &t, &en).is_empty());
    }

    #[test]
    fn summary_checks() {
        let t = shuffled();
        let en = LeakPatterns::builtin(Language::En);
        let full = "A patient needs anticoagulation.\nA. aspirin\nB. heparin\nC.  warfarin\nD. insulin";
        assert!(validate_intermediate(TwoStepKind::Summ, full, &t, &en).is_empty());
        let missing = "A patient needs anticoagulation.\nA. aspirin\nB. heparin\nD. insulin";
        assert_eq!(
            validate_intermediate(TwoStepKind::Summ, missing, &t, &en),
            BTreeSet::from([ValidationFlag::OptionMissing])
        );
        let bare = "A. aspirin\nB. heparin\nC. warfarin\nD. insulin";
        assert_eq!(
            validate_intermediate(TwoStepKind::Summ, bare, &t, &en),
            BTreeSet::from([ValidationFlag::QuestionRemoved])
        );
    }

    #[test]
    fn transform_names_round_trip() {
        for t in Transform::all() {
            assert_eq!(t.as_str().parse::<Transform>().unwrap(), t);
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Transform>(&json).unwrap(), t);
        }
        assert_eq!(Transform::all().len(), 8);
    }
}
