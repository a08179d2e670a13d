//! Synthetic datasets and a mock-only manifest for end-to-end demos.

use std::path::{Path, PathBuf};

use crate::llm_client::{MockAnswer, MockModelConfig};
use crate::mcqa::{write_canonical, Dataset, Language, McqaItem, Split};
use crate::prompting::DEFAULT_PROMPT_IDS;
use crate::rng::{derive_seed, Xoshiro256StarStar};
use crate::runner::{DatasetRef, ModelBackendSpec, ModelSpec, RunManifest};
use crate::twostep::Transform;

const EN_POOL: [&str; 16] = [
    "aspirin", "heparin", "warfarin", "insulin", "metformin", "amoxicillin", "atenolol", "furosemide",
    "lisinopril", "omeprazole", "prednisone", "salbutamol", "levothyroxine", "ondansetron", "morphine", "digoxin",
];

const ES_POOL: [&str; 16] = [
    "aspirina", "heparina", "warfarina", "insulina", "metformina", "amoxicilina", "atenolol", "furosemida",
    "lisinopril", "omeprazol", "prednisona", "salbutamol", "levotiroxina", "ondansetrón", "morfina", "digoxina",
];

pub const DEMO_EN: &str = "demo_en";
pub const DEMO_ES: &str = "demo_es";

fn synthetic(name: &str, language: Language, n: usize, options: usize) -> Dataset {
    let pool = match language {
        Language::En => &EN_POOL,
        Language::Es => &ES_POOL,
    };
    let items = (0..n)
        .map(|i| {
            let id = format!("{name}:{i:04}");
            let mut rng = Xoshiro256StarStar::seed_from_u64(derive_seed(0, &id, 0, "demo"));
            let picks = rng.shuffled_indices(pool.len());
            let texts: Vec<&str> = picks[..options].iter().map(|&p| pool[p]).collect();
            let gold = rng.below(options as u64) as usize;
            let question = match language {
                Language::En => format!("Synthetic case {i}: which drug is first-line for presentation {i}?"),
                Language::Es => format!("Caso sintético {i}: ¿qué fármaco es de primera línea para el cuadro {i}?"),
            };
            McqaItem::with_texts(id, name, Split::Test, language, question, &texts, gold)
        })
        .collect();
    Dataset {
        name: name.to_string(),
        split: Split::Test,
        items,
    }
}

/// An English four-option dataset and a Spanish five-option dataset.
pub fn demo_datasets(items_per_dataset: usize) -> Vec<Dataset> {
    vec![
        synthetic(DEMO_EN, Language::En, items_per_dataset, 4),
        synthetic(DEMO_ES, Language::Es, items_per_dataset, 5),
    ]
}

fn mock(id: &str, answer: MockAnswer) -> ModelSpec {
    ModelSpec {
        id: id.to_string(),
        backend: ModelBackendSpec::Mock(MockModelConfig {
            answer,
            intermediate: Default::default(),
            delay_ms: 0,
        }),
        prompt_overrides: Default::default(),
    }
}

/// All eight transformations, three mocks, three prompt configs, three runs.
pub fn demo_manifest(global_seed: u64) -> RunManifest {
    RunManifest {
        global_seed,
        run_count: 3,
        baseline: "transform_oracle".into(),
        datasets: [DEMO_EN, DEMO_ES]
            .iter()
            .map(|n| DatasetRef {
                name: n.to_string(),
                path: PathBuf::from(format!("{n}.jsonl")),
            })
            .collect(),
        transforms: Transform::all(),
        models: vec![
            mock("transform_oracle", MockAnswer::TransformOracle),
            mock("text_oracle", MockAnswer::TextOracle),
            mock("fixed_label_a", MockAnswer::FixedLabel { label: 'A' }),
        ],
        prompts: DEFAULT_PROMPT_IDS.iter().map(|s| s.to_string()).collect(),
        prompt_files: vec![],
        perturb: Default::default(),
        parse_mode: Default::default(),
        created_at: None,
    }
}

/// Writes the demo datasets and `manifest.toml` into `dir`; returns the
/// manifest path.
pub fn write_demo(dir: &Path, items_per_dataset: usize, global_seed: u64) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    for ds in demo_datasets(items_per_dataset) {
        write_canonical(&ds, dir.join(format!("{}.jsonl", ds.name)))?;
    }
    let path = dir.join("manifest.toml");
    std::fs::write(&path, demo_manifest(global_seed).to_toml_string())?;
    Ok(path)
}
