use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::store::ResultStore;
use super::JobSpec;
use crate::mcqa::{Dataset, Language};
use crate::scoring::{aggregate_grid, score_cell, AggregateScore, CellId, CellScore, GridKey, ItemResult};
use crate::twostep::Transform;

/// Score of one (dataset, transform, model, run, prompt) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    #[serde(flatten)]
    pub cell: CellId,
    pub language: Language,
    pub planned: usize,
    pub completed: usize,
    pub failed: usize,
    /// Absent when no job of the cell completed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<CellScore>,
}

/// Run × prompt aggregate for one (language, transform, dataset, model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub language: Language,
    pub dataset: String,
    pub transform: Transform,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateScore>,
    pub planned: usize,
    pub completed: usize,
    /// Well-formatted answers among completed jobs, for pooled format rates.
    pub valid: usize,
    pub incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub manifest_digest: String,
    pub baseline: String,
    /// Dataset and model ids in manifest order.
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ScoreFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn aggregate(&self, dataset: &str, transform: Transform, model_id: &str) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.dataset == dataset && a.transform == transform && a.model_id == model_id)
    }
}

#[derive(Default)]
struct CellAcc<'a> {
    planned: usize,
    failed: usize,
    results: Vec<&'a ItemResult>,
}

/// Scores every planned cell from the store's latest results.
pub fn score_store(store: &ResultStore, plan: &[JobSpec], datasets: &[Dataset]) -> ScoreFile {
    let manifest = store.manifest();
    let results = store.results();
    let failures = store.failures();
    let languages: HashMap<&str, Language> = datasets
        .iter()
        .filter_map(|d| d.language().map(|l| (d.name.as_str(), l)))
        .collect();

    let mut cells: BTreeMap<CellId, CellAcc> = BTreeMap::new();
    for job in plan {
        let key = job.key();
        let acc = cells
            .entry(CellId {
                dataset: job.dataset.clone(),
                transform: job.transform,
                model_id: job.model_id.clone(),
                run_index: job.run_index,
                prompt_id: job.prompt_id.clone(),
            })
            .or_default();
        acc.planned += 1;
        if let Some(r) = results.get(&key) {
            acc.results.push(r);
        } else if failures.contains_key(&key) {
            acc.failed += 1;
        }
    }

    let dataset_order: Vec<String> = manifest.datasets.iter().map(|d| d.name.clone()).collect();
    let model_order: Vec<String> = manifest.models.iter().map(|m| m.id.clone()).collect();
    let position = |list: &[String], v: &str| list.iter().position(|x| x == v).unwrap_or(usize::MAX);

    let mut cell_rows = Vec::new();
    let mut groups: BTreeMap<(Language, Transform, usize, usize), AggregateRow> = BTreeMap::new();
    let mut group_cells: BTreeMap<(Language, Transform, usize, usize), Vec<CellScore>> = BTreeMap::new();
    for (cell, acc) in &cells {
        let language = languages.get(cell.dataset.as_str()).copied().unwrap_or(Language::En);
        let owned: Vec<ItemResult> = acc.results.iter().map(|r| (*r).clone()).collect();
        let score = score_cell(&owned).ok();
        let gk = (
            language,
            cell.transform,
            position(&dataset_order, &cell.dataset),
            position(&model_order, &cell.model_id),
        );
        let row = groups.entry(gk).or_insert_with(|| AggregateRow {
            language,
            dataset: cell.dataset.clone(),
            transform: cell.transform,
            model_id: cell.model_id.clone(),
            aggregate: None,
            planned: 0,
            completed: 0,
            valid: 0,
            incomplete: false,
        });
        row.planned += acc.planned;
        row.completed += owned.len();
        row.valid += owned.iter().filter(|r| r.parsed.is_valid()).count();
        row.incomplete |= owned.len() < acc.planned;
        if let Some(s) = score {
            group_cells.entry(gk).or_default().push(s);
        }
        cell_rows.push(CellRow {
            cell: cell.clone(),
            language,
            planned: acc.planned,
            completed: owned.len(),
            failed: acc.failed,
            score,
        });
    }
    for (gk, row) in groups.iter_mut() {
        if let Some(scores) = group_cells.get(gk) {
            row.aggregate = aggregate_grid(
                GridKey {
                    dataset: row.dataset.clone(),
                    transform: row.transform,
                },
                scores,
            )
            .ok();
        }
    }

    ScoreFile {
        manifest_digest: store.digest().to_string(),
        baseline: manifest.baseline.clone(),
        datasets: dataset_order,
        models: model_order,
        cells: cell_rows,
        aggregates: groups.into_values().collect(),
    }
}
