//! Baseline-delta accuracy tables and format-adherence rate tables.
//!
//! Tables are split by language and by one-step versus two-step
//! transformations. The baseline model is shown as an absolute mean
//! accuracy; every other model as a signed difference in percentage points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcqa::Language;
use crate::runner::{AggregateRow, ScoreFile};
use crate::scoring::{delta, percentage, round2};
use crate::twostep::Transform;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no baseline score for {model} on {dataset}/{transform} ({language})")]
    MissingBaseline {
        model: String,
        language: Language,
        dataset: String,
        transform: Transform,
    },
    #[error("baseline model {0:?} does not appear in the scores")]
    UnknownBaseline(String),
    #[error("the selected slice contains no scored answers")]
    EmptySlice,
    #[error(transparent)]
    Score(#[from] crate::scoring::ScoreError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OneStep,
    TwoStep,
}

impl Family {
    pub fn of(t: Transform) -> Self {
        if t.is_two_step() {
            Family::TwoStep
        } else {
            Family::OneStep
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::OneStep => "onestep",
            Family::TwoStep => "twostep",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Family::OneStep => "one-step",
            Family::TwoStep => "two-step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
    pub planned: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub model_id: String,
    /// Absent when the model has no completed answers for the row.
    pub delta: Option<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub completed: usize,
    pub planned: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub transform: Transform,
    pub dataset: String,
    pub baseline: BaselineCell,
    pub others: Vec<DeltaCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub language: Language,
    pub family: Family,
    pub baseline_id: String,
    pub models: Vec<String>,
    pub rows: Vec<DeltaRow>,
}

/// Two decimals with an explicit sign; zero prints as `0.00`.
pub fn format_delta(d: f64) -> String {
    let r = round2(d);
    if r == 0.0 {
        "0.00".to_string()
    } else {
        format!("{r:+.2}")
    }
}

fn direction(d: f64) -> &'static str {
    let r = round2(d);
    if r > 0.0 {
        "up"
    } else if r < 0.0 {
        "down"
    } else {
        "same"
    }
}

/// Builds one table per (language, family) present in the scores.
pub fn delta_tables(scores: &ScoreFile, baseline_id: &str) -> Result<Vec<DeltaTable>, ReportError> {
    if !scores.models.iter().any(|m| m == baseline_id) {
        return Err(ReportError::UnknownBaseline(baseline_id.to_string()));
    }
    let others: Vec<String> = scores.models.iter().filter(|m| *m != baseline_id).cloned().collect();
    let dataset_pos = |d: &str| scores.datasets.iter().position(|x| x == d).unwrap_or(usize::MAX);

    let mut by_row: BTreeMap<(Language, Transform, usize, String), BTreeMap<&str, &AggregateRow>> = BTreeMap::new();
    for a in &scores.aggregates {
        by_row
            .entry((a.language, a.transform, dataset_pos(&a.dataset), a.dataset.clone()))
            .or_default()
            .insert(a.model_id.as_str(), a);
    }

    let mut tables: BTreeMap<(Language, Family), DeltaTable> = BTreeMap::new();
    for ((language, transform, _, dataset), models) in by_row {
        let base_row = models.get(baseline_id);
        let base = base_row
            .and_then(|r| r.aggregate.as_ref())
            .ok_or_else(|| ReportError::MissingBaseline {
                model: baseline_id.to_string(),
                language,
                dataset: dataset.clone(),
                transform,
            })?;
        let base_row = base_row.expect("checked above");
        let mut cells = Vec::new();
        for m in &others {
            let row = models.get(m.as_str());
            let agg = row.and_then(|r| r.aggregate.as_ref());
            cells.push(DeltaCell {
                model_id: m.clone(),
                delta: agg.map(|a| delta(base, a)).transpose()?,
                mean: agg.map(|a| a.mean_accuracy),
                std: agg.map(|a| a.std_accuracy),
                completed: row.map_or(0, |r| r.completed),
                planned: row.map_or(0, |r| r.planned),
                incomplete: row.is_none_or(|r| r.incomplete),
            });
        }
        let family = Family::of(transform);
        tables
            .entry((language, family))
            .or_insert_with(|| DeltaTable {
                language,
                family,
                baseline_id: baseline_id.to_string(),
                models: others.clone(),
                rows: Vec::new(),
            })
            .rows
            .push(DeltaRow {
                transform,
                dataset,
                baseline: BaselineCell {
                    mean: base.mean_accuracy,
                    std: base.std_accuracy,
                    completed: base_row.completed,
                    planned: base_row.planned,
                    incomplete: base_row.incomplete,
                },
                others: cells,
            });
    }
    Ok(tables.into_values().collect())
}

fn fixed(v: f64) -> String {
    format!("{:.2}", round2(v))
}

impl DeltaTable {
    pub fn file_stem(&self) -> String {
        format!("deltas_{}_{}", self.language, self.family.as_str())
    }

    pub fn to_csv(&self, include_std: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "language".to_string(),
            "transform".to_string(),
            "dataset".to_string(),
            self.baseline_id.clone(),
        ];
        if include_std {
            header.push(format!("{}_std", self.baseline_id));
        }
        for m in &self.models {
            header.push(format!("{m}_delta"));
            header.push(format!("{m}_magnitude"));
            if include_std {
                header.push(format!("{m}_std"));
            }
        }
        header.push("incomplete".to_string());
        w.write_record(&header).expect("in-memory csv");

        for row in &self.rows {
            let mut rec = vec![
                self.language.to_string(),
                row.transform.display_name().to_string(),
                row.dataset.clone(),
                fixed(row.baseline.mean),
            ];
            if include_std {
                rec.push(fixed(row.baseline.std));
            }
            let mut incomplete = Vec::new();
            if row.baseline.incomplete {
                incomplete.push(format!("{}(n={}/{})", self.baseline_id, row.baseline.completed, row.baseline.planned));
            }
            for c in &row.others {
                rec.push(c.delta.map(format_delta).unwrap_or_default());
                rec.push(c.delta.map(|d| fixed(d.abs())).unwrap_or_default());
                if include_std {
                    rec.push(c.std.map(fixed).unwrap_or_default());
                }
                if c.incomplete {
                    incomplete.push(format!("{}(n={}/{})", c.model_id, c.completed, c.planned));
                }
            }
            rec.push(incomplete.join(";"));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn to_markdown(&self, include_std: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# Accuracy, {} transformations ({})\n",
            self.family.title(),
            self.language
        );
        let _ = writeln!(
            out,
            "{} is shown as mean accuracy (%); other models as the signed difference from it in percentage points.\n",
            self.baseline_id
        );
        let mut header = format!("| Transform | Dataset | {} |", self.baseline_id);
        let mut rule = "|---|---|---:|".to_string();
        for m in &self.models {
            let _ = write!(header, " {m} |");
            rule.push_str("---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");

        let mut notes = Vec::new();
        for row in &self.rows {
            let mut mark = |model: &str, completed: usize, planned: usize| {
                notes.push(format!(
                    "{model} on {}/{}: {completed} of {planned} answers completed",
                    row.dataset,
                    row.transform.display_name()
                ));
                "*"
            };
            let mut line = format!("| {} | {} |", row.transform.display_name(), row.dataset);
            let star = if row.baseline.incomplete {
                mark(&self.baseline_id, row.baseline.completed, row.baseline.planned)
            } else {
                ""
            };
            let std = if include_std {
                format!(" ± {}", fixed(row.baseline.std))
            } else {
                String::new()
            };
            let _ = write!(line, " {}{std}{star} |", fixed(row.baseline.mean));
            for c in &row.others {
                let star = if c.incomplete { mark(&c.model_id, c.completed, c.planned) } else { "" };
                let cell = match c.delta {
                    Some(d) => {
                        let std = match (include_std, c.std) {
                            (true, Some(s)) => format!(" ± {}", fixed(s)),
                            _ => String::new(),
                        };
                        format!("{} ({}){std}", format_delta(d), direction(d))
                    }
                    None => "n/a".to_string(),
                };
                let _ = write!(line, " {cell}{star} |");
            }
            let _ = writeln!(out, "{line}");
        }
        if !notes.is_empty() {
            out.push('\n');
            for n in notes {
                let _ = writeln!(out, "\\* {n}");
            }
        }
        out
    }
}

fn write_file(path: PathBuf, body: &str) -> Result<PathBuf, ReportError> {
    std::fs::write(&path, body).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Writes `deltas_<lang>_<onestep|twostep>.csv` and `.md` for every table.
pub fn emit_delta_table(
    scores: &ScoreFile,
    baseline_id: &str,
    out_dir: &Path,
    include_std: bool,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for table in delta_tables(scores, baseline_id)? {
        let stem = table.file_stem();
        written.push(write_file(out_dir.join(format!("{stem}.csv")), &table.to_csv(include_std))?);
        written.push(write_file(out_dir.join(format!("{stem}.md")), &table.to_markdown(include_std))?);
    }
    Ok(written)
}

/// Selection of (dataset, transform) rows; `None` selects everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatSlice {
    pub datasets: Option<Vec<String>>,
    pub transforms: Option<Vec<Transform>>,
}

impl FormatSlice {
    fn contains(&self, row: &AggregateRow) -> bool {
        self.datasets.as_ref().is_none_or(|d| d.contains(&row.dataset))
            && self.transforms.as_ref().is_none_or(|t| t.contains(&row.transform))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatRateRow {
    pub model_id: String,
    pub format_rate: f64,
    pub valid: usize,
    pub n: usize,
}

/// Pooled share of well-formatted answers per model, highest first.
pub fn format_rates(scores: &ScoreFile, slice: &FormatSlice) -> Result<Vec<FormatRateRow>, ReportError> {
    let mut pooled: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for row in scores.aggregates.iter().filter(|r| slice.contains(r)) {
        let e = pooled.entry(row.model_id.as_str()).or_default();
        e.0 += row.valid;
        e.1 += row.completed;
    }
    let model_pos = |m: &str| scores.models.iter().position(|x| x == m).unwrap_or(usize::MAX);
    let mut rows: Vec<FormatRateRow> = pooled
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(m, (valid, n))| FormatRateRow {
            model_id: m.to_string(),
            format_rate: percentage(valid, n),
            valid,
            n,
        })
        .collect();
    if rows.is_empty() {
        return Err(ReportError::EmptySlice);
    }
    rows.sort_by(|a, b| {
        b.format_rate
            .total_cmp(&a.format_rate)
            .then_with(|| model_pos(&a.model_id).cmp(&model_pos(&b.model_id)))
    });
    Ok(rows)
}

pub fn format_rates_csv(rows: &[FormatRateRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "format_rate", "valid", "n"]).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.model_id.clone(),
            fixed(r.format_rate),
            r.valid.to_string(),
            r.n.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Writes `format_rates.csv` for the slice.
pub fn emit_format_rates(scores: &ScoreFile, slice: &FormatSlice, out_dir: &Path) -> Result<PathBuf, ReportError> {
    let rows = format_rates(scores, slice)?;
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    write_file(out_dir.join("format_rates.csv"), &format_rates_csv(&rows))
}

/// Every report file for a score table, as (file name, contents) in a
/// stable order. Format rates are omitted when the slice is empty.
pub fn report_files(
    scores: &ScoreFile,
    baseline_id: &str,
    include_std: bool,
    slice: &FormatSlice,
) -> Result<Vec<(String, String)>, ReportError> {
    let mut files = Vec::new();
    for table in delta_tables(scores, baseline_id)? {
        let stem = table.file_stem();
        files.push((format!("{stem}.csv"), table.to_csv(include_std)));
        files.push((format!("{stem}.md"), table.to_markdown(include_std)));
    }
    match format_rates(scores, slice) {
        Ok(rows) => files.push(("format_rates.csv".to_string(), format_rates_csv(&rows))),
        Err(ReportError::EmptySlice) => {}
        Err(e) => return Err(e),
    }
    Ok(files)
}

/// Writes [`report_files`] into `out_dir`.
pub fn write_report(
    scores: &ScoreFile,
    baseline_id: &str,
    include_std: bool,
    slice: &FormatSlice,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    report_files(scores, baseline_id, include_std, slice)?
        .into_iter()
        .map(|(name, body)| write_file(out_dir.join(name), &body))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::TransformKind;
    use crate::scoring::{AggregateScore, GridKey};
    use crate::twostep::TwoStepKind;

    fn row(language: Language, dataset: &str, transform: Transform, model: &str, mean: f64) -> AggregateRow {
        AggregateRow {
            language,
            dataset: dataset.into(),
            transform,
            model_id: model.into(),
            aggregate: Some(AggregateScore {
                mean_accuracy: mean,
                std_accuracy: 1.5,
                mean_format_rate: 100.0,
                cell_count: 9,
                grid: Some(GridKey {
                    dataset: dataset.into(),
                    transform,
                }),
            }),
            planned: 90,
            completed: 90,
            valid: 90,
            incomplete: false,
        }
    }

    fn scores(aggregates: Vec<AggregateRow>) -> ScoreFile {
        ScoreFile {
            manifest_digest: "x".into(),
            baseline: "base".into(),
            datasets: vec!["mmlu".into(), "medqa".into()],
            models: vec!["base".into(), "other".into()],
            cells: vec![],
            aggregates,
        }
    }

    const NONE: Transform = Transform::OneStep(TransformKind::None);
    const RNOTO: Transform = Transform::OneStep(TransformKind::ReplaceNoto);

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(0.97), "+0.97");
        assert_eq!(format_delta(-17.02), "-17.02");
        assert_eq!(format_delta(0.0), "0.00");
        assert_eq!(format_delta(-0.001), "0.00");
    }

    #[test]
    fn rows_ordered_and_split_by_family() {
        let s = scores(vec![
            row(Language::En, "medqa", NONE, "base", 50.0),
            row(Language::En, "medqa", NONE, "other", 50.0),
            row(Language::En, "mmlu", RNOTO, "base", 40.0),
            row(Language::En, "mmlu", RNOTO, "other", 30.0),
            row(Language::En, "mmlu", NONE, "base", 72.9),
            row(Language::En, "mmlu", NONE, "other", 73.87),
            row(Language::En, "mmlu", Transform::TwoStep(TwoStepKind::Cot), "base", 60.0),
            row(Language::En, "mmlu", Transform::TwoStep(TwoStepKind::Cot), "other", 61.0),
        ]);
        let tables = delta_tables(&s, "base").unwrap();
        assert_eq!(tables.len(), 2);
        let one = &tables[0];
        assert_eq!(one.file_stem(), "deltas_en_onestep");
        let order: Vec<(Transform, &str)> = one.rows.iter().map(|r| (r.transform, r.dataset.as_str())).collect();
        assert_eq!(order, vec![(NONE, "mmlu"), (NONE, "medqa"), (RNOTO, "mmlu")]);
        let csv = one.to_csv(false);
        assert!(csv.starts_with("language,transform,dataset,base,other_delta,other_magnitude,incomplete\n"));
        assert!(csv.contains("en,None,mmlu,72.90,+0.97,0.97,\n"));
        assert!(csv.contains("en,None,medqa,50.00,0.00,0.00,\n"));
        assert!(csv.contains("en,ReplaceNoto,mmlu,40.00,-10.00,10.00,\n"));
        let md = one.to_markdown(true);
        assert!(md.contains("| None | mmlu | 72.90 ± 1.50 | +0.97 (up) ± 1.50 |"));
        assert!(md.contains("-10.00 (down)"));
        assert!(md.contains("0.00 (same)"));
        assert_eq!(tables[1].file_stem(), "deltas_en_twostep");
    }

    #[test]
    fn incomplete_cells_are_starred() {
        let mut other = row(Language::En, "mmlu", NONE, "other", 70.0);
        other.incomplete = true;
        other.completed = 80;
        let s = scores(vec![row(Language::En, "mmlu", NONE, "base", 72.9), other]);
        let t = &delta_tables(&s, "base").unwrap()[0];
        assert!(t.to_csv(false).contains(",other(n=80/90)\n"));
        let md = t.to_markdown(false);
        assert!(md.contains("-2.90 (down)* |"));
        assert!(md.contains("\\* other on mmlu/None: 80 of 90 answers completed"));
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let s = scores(vec![row(Language::En, "mmlu", NONE, "other", 70.0)]);
        assert!(matches!(
            delta_tables(&s, "base"),
            Err(ReportError::MissingBaseline { .. })
        ));
        assert!(matches!(
            delta_tables(&s, "nobody"),
            Err(ReportError::UnknownBaseline(_))
        ));
    }

    #[test]
    fn format_rates_pool_and_sort() {
        let mut a = row(Language::En, "mmlu", NONE, "base", 50.0);
        a.valid = 859;
        a.completed = 1000;
        let mut b = row(Language::En, "mmlu", NONE, "other", 50.0);
        b.valid = 1000;
        b.completed = 1000;
        let s = scores(vec![a, b]);
        let rows = format_rates(&s, &FormatSlice::default()).unwrap();
        assert_eq!(rows[0].model_id, "other");
        assert_eq!(fixed(rows[1].format_rate), "85.90");
        assert_eq!(
            format_rates_csv(&rows),
            "model,format_rate,valid,n\nother,100.00,1000,1000\nbase,85.90,859,1000\n"
        );
        let empty = FormatSlice {
            datasets: Some(vec!["nothing".into()]),
            transforms: None,
        };
        assert!(matches!(format_rates(&s, &empty), Err(ReportError::EmptySlice)));
    }
}
