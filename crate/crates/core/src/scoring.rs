//! Strict answer parsing and accuracy / format-adherence metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::twostep::{Transform, ValidationFlag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    ExtraText,
    Punctuation,
    WrongCase,
    NotInLabelSet,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    Valid(char),
    FormatViolation(ViolationReason),
}

impl ParsedAnswer {
    pub fn is_valid(&self) -> bool {
        matches!(self, ParsedAnswer::Valid(_))
    }

    pub fn label(&self) -> Option<char> {
        match self {
            ParsedAnswer::Valid(c) => Some(*c),
            ParsedAnswer::FormatViolation(_) => None,
        }
    }
}

/// Whether surrounding whitespace is tolerated before the single-label test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    #[default]
    TrimWhitespace,
    Strict,
}

/// Parses a reply under the single-label contract, trimming surrounding
/// whitespace first.
pub fn parse_strict(text: &str, labels: &[char]) -> ParsedAnswer {
    parse_answer(text, labels, ParseMode::TrimWhitespace)
}

pub fn parse_answer(text: &str, labels: &[char], mode: ParseMode) -> ParsedAnswer {
    use ViolationReason::*;
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return ParsedAnswer::FormatViolation(Empty);
    }
    if mode == ParseMode::Strict && trimmed.len() != text.len() {
        return ParsedAnswer::FormatViolation(ExtraText);
    }
    let mut chars = trimmed.chars();
    let first = chars.next().expect("non-empty");
    if chars.next().is_none() {
        return ParsedAnswer::FormatViolation(match first {
            c if labels.contains(&c) => return ParsedAnswer::Valid(c),
            c if c.is_lowercase() && labels.contains(&c.to_ascii_uppercase()) => WrongCase,
            c if c.is_ascii_punctuation() => Punctuation,
            _ => NotInLabelSet,
        });
    }
    // One letter wrapped in punctuation ("B.", "(B)", "**B**") is a
    // punctuation violation; anything else is extra text.
    let alnum = trimmed.chars().filter(|c| c.is_alphanumeric()).count();
    let only_punct_otherwise = trimmed
        .chars()
        .all(|c| c.is_alphanumeric() || c.is_ascii_punctuation());
    if alnum == 1 && only_punct_otherwise {
        Punctuation
    } else {
        ExtraText
    }
    .into()
}

impl From<ViolationReason> for ParsedAnswer {
    fn from(r: ViolationReason) -> Self {
        ParsedAnswer::FormatViolation(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub dataset: String,
    pub item_id: String,
    pub transform: Transform,
    pub model_id: String,
    pub prompt_id: String,
    pub run_index: u32,
    pub raw_text: String,
    pub gold_label: char,
    pub parsed: ParsedAnswer,
    pub correct: bool,
    #[serde(default)]
    pub flags: BTreeSet<ValidationFlag>,
    /// Cache keys of the generations behind this result, step 1 first.
    #[serde(default)]
    pub cache_keys: Vec<String>,
}

impl ItemResult {
    pub fn cell(&self) -> CellId {
        CellId {
            dataset: self.dataset.clone(),
            transform: self.transform,
            model_id: self.model_id.clone(),
            run_index: self.run_index,
            prompt_id: self.prompt_id.clone(),
        }
    }
}

pub fn is_correct(parsed: ParsedAnswer, gold_label: char) -> bool {
    parsed == ParsedAnswer::Valid(gold_label)
}

/// One (dataset, transform, model, run, prompt) slice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub dataset: String,
    pub transform: Transform,
    pub model_id: String,
    pub run_index: u32,
    pub prompt_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub accuracy: f64,
    pub format_rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridKey {
    pub dataset: String,
    pub transform: Transform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_format_rate: f64,
    pub cell_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridKey>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("cannot score an empty set of results")]
    EmptyResults,
    #[error("results span more than one cell: {0:?} and {1:?}")]
    MixedCell(Box<CellId>, Box<CellId>),
    #[error("cannot aggregate an empty set of cells")]
    EmptyCells,
    #[error("grid mismatch: baseline {baseline:?} vs other {other:?}")]
    GridMismatch {
        baseline: Option<GridKey>,
        other: Option<GridKey>,
    },
}

pub fn score_cell(results: &[ItemResult]) -> Result<CellScore, ScoreError> {
    let first = results.first().ok_or(ScoreError::EmptyResults)?;
    let cell = first.cell();
    if let Some(other) = results.iter().map(ItemResult::cell).find(|c| *c != cell) {
        return Err(ScoreError::MixedCell(Box::new(cell), Box::new(other)));
    }
    let n = results.len();
    let correct = results.iter().filter(|r| r.correct).count();
    let valid = results.iter().filter(|r| r.parsed.is_valid()).count();
    Ok(CellScore {
        accuracy: percentage(correct, n),
        format_rate: percentage(valid, n),
        n,
    })
}

pub fn percentage(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// Unweighted mean and population standard deviation over cells.
pub fn aggregate(cells: &[CellScore]) -> Result<AggregateScore, ScoreError> {
    if cells.is_empty() {
        return Err(ScoreError::EmptyCells);
    }
    let n = cells.len() as f64;
    let mean_accuracy = cells.iter().map(|c| c.accuracy).sum::<f64>() / n;
    let variance = cells
        .iter()
        .map(|c| (c.accuracy - mean_accuracy).powi(2))
        .sum::<f64>()
        / n;
    Ok(AggregateScore {
        mean_accuracy,
        std_accuracy: variance.sqrt(),
        mean_format_rate: cells.iter().map(|c| c.format_rate).sum::<f64>() / n,
        cell_count: cells.len(),
        grid: None,
    })
}

pub fn aggregate_grid(grid: GridKey, cells: &[CellScore]) -> Result<AggregateScore, ScoreError> {
    let mut agg = aggregate(cells)?;
    agg.grid = Some(grid);
    Ok(agg)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Signed difference in percentage points between the two-decimal means, so
/// that the printed baseline plus the printed delta gives the printed model
/// mean.
pub fn delta(baseline: &AggregateScore, other: &AggregateScore) -> Result<f64, ScoreError> {
    if let (Some(a), Some(b)) = (&baseline.grid, &other.grid) {
        if a != b {
            return Err(ScoreError::GridMismatch {
                baseline: baseline.grid.clone(),
                other: other.grid.clone(),
            });
        }
    }
    Ok(round2(round2(other.mean_accuracy) - round2(baseline.mean_accuracy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::TransformKind;
    use ViolationReason::*;

    const ABCD: [char; 4] = ['A', 'B', 'C', 'D'];

    #[test]
    fn single_letter_valid() {
        assert_eq!(parse_strict("B", &ABCD), ParsedAnswer::Valid('B'));
        assert_eq!(parse_strict(" B ", &ABCD), ParsedAnswer::Valid('B'));
        assert_eq!(parse_strict("B.", &ABCD), Punctuation.into());
        assert_eq!(parse_strict("D", &['A', 'B', 'C']), NotInLabelSet.into());
        assert_eq!(parse_strict("b", &ABCD), WrongCase.into());
        assert_eq!(parse_strict("", &ABCD), Empty.into());
        assert_eq!(parse_strict("The answer is B", &ABCD), ExtraText.into());
    }

    #[test]
    fn strict_mode_rejects_whitespace() {
        assert_eq!(
            parse_answer(" B", &ABCD, ParseMode::Strict),
            ExtraText.into()
        );
        assert_eq!(parse_answer("B", &ABCD, ParseMode::Strict), ParsedAnswer::Valid('B'));
    }

    fn result(correct: bool, valid: bool) -> ItemResult {
        ItemResult {
            dataset: "d".into(),
            item_id: "i".into(),
            transform: Transform::OneStep(TransformKind::Shuffle),
            model_id: "m".into(),
            prompt_id: "p".into(),
            run_index: 0,
            raw_text: String::new(),
            gold_label: 'A',
            parsed: if valid { ParsedAnswer::Valid('A') } else { Empty.into() },
            correct,
            flags: BTreeSet::new(),
            cache_keys: Vec::new(),
        }
    }

    #[test]
    fn cell_arithmetic() {
        let mut rs: Vec<_> = (0..7).map(|_| result(true, true)).collect();
        rs.push(result(false, true));
        rs.push(result(false, true));
        rs.push(result(false, false));
        let c = score_cell(&rs).unwrap();
        assert_eq!(c.n, 10);
        assert!((c.accuracy - 70.0).abs() < 1e-9);
        assert!((c.format_rate - 90.0).abs() < 1e-9);

        let none: Vec<_> = (0..5).map(|_| result(false, false)).collect();
        let c = score_cell(&none).unwrap();
        assert_eq!((c.accuracy, c.format_rate), (0.0, 0.0));
    }

    #[test]
    fn cell_errors() {
        assert_eq!(score_cell(&[]), Err(ScoreError::EmptyResults));
        let mut other = result(true, true);
        other.run_index = 1;
        assert!(matches!(
            score_cell(&[result(true, true), other]),
            Err(ScoreError::MixedCell(..))
        ));
    }

    fn cell(acc: f64) -> CellScore {
        CellScore {
            accuracy: acc,
            format_rate: 100.0,
            n: 10,
        }
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let a = aggregate(&[cell(60.0), cell(70.0), cell(80.0)]).unwrap();
        assert!((a.mean_accuracy - 70.0).abs() < 1e-9);
        assert!((a.std_accuracy - 8.16496580927726).abs() < 1e-9);
        assert_eq!(aggregate(&[cell(55.0)]).unwrap().std_accuracy, 0.0);
        let nine = aggregate(&[cell(42.5); 9]).unwrap();
        assert_eq!(nine.mean_accuracy, 42.5);
        assert_eq!(nine.std_accuracy, 0.0);
        assert_eq!(nine.cell_count, 9);
        assert_eq!(aggregate(&[]), Err(ScoreError::EmptyCells));
    }

    fn agg(mean: f64) -> AggregateScore {
        AggregateScore {
            mean_accuracy: mean,
            std_accuracy: 0.0,
            mean_format_rate: 100.0,
            cell_count: 9,
            grid: None,
        }
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta(&agg(72.90), &agg(73.52)).unwrap(), 0.62);
        assert_eq!(delta(&agg(27.47), &agg(10.45)).unwrap(), -17.02);
        assert_eq!(delta(&agg(50.0), &agg(50.0)).unwrap(), 0.0);
    }

    #[test]
    fn delta_grid_mismatch() {
        let mut a = agg(1.0);
        a.grid = Some(GridKey {
            dataset: "mmlu".into(),
            transform: Transform::OneStep(TransformKind::None),
        });
        let mut b = a.clone();
        b.grid = Some(GridKey {
            dataset: "medqa".into(),
            transform: Transform::OneStep(TransformKind::None),
        });
        assert!(matches!(delta(&a, &b), Err(ScoreError::GridMismatch { .. })));
    }
}
