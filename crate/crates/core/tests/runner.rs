use std::collections::BTreeMap;
use std::io::Write;

use mcqa_core::llm_client::{EndpointConfig, FailureClass, MockAnswer, MockModelConfig};
use mcqa_core::mcqa::{Dataset, Language, McqaItem, Split};
use mcqa_core::perturb::TransformKind;
use mcqa_core::prompting::PromptLibrary;
use mcqa_core::runner::{
    execute, plan, score_store, DatasetRef, ExecuteOptions, Harness, ModelBackendSpec, ModelSpec,
    PlanError, ResultStore, RunManifest, StoreError, StoreRecord,
};
use mcqa_core::twostep::{Transform, TwoStepKind};

fn dataset(name: &str, n: usize) -> Dataset {
    let items = (0..n)
        .map(|i| {
            McqaItem::with_texts(
                format!("{name}-{i}"),
                name,
                Split::Test,
                Language::En,
                format!("Question {i}?"),
                &[&format!("alpha {i}"), &format!("beta {i}"), &format!("gamma {i}"), &format!("delta {i}")],
                i % 4,
            )
        })
        .collect();
    Dataset {
        name: name.into(),
        split: Split::Test,
        items,
    }
}

fn mock(id: &str, answer: MockAnswer) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        backend: ModelBackendSpec::Mock(MockModelConfig {
            answer,
            intermediate: Default::default(),
            delay_ms: 0,
        }),
        prompt_overrides: BTreeMap::new(),
    }
}

fn manifest(transforms: Vec<Transform>, models: Vec<ModelSpec>, datasets: &[&str]) -> RunManifest {
    RunManifest {
        global_seed: 7,
        run_count: 3,
        baseline: models[0].id.clone(),
        datasets: datasets
            .iter()
            .map(|d| DatasetRef {
                name: d.to_string(),
                path: format!("{d}.jsonl").into(),
            })
            .collect(),
        transforms,
        models,
        prompts: vec!["minimal".into(), "persona".into(), "exam".into()],
        prompt_files: vec![],
        perturb: Default::default(),
        parse_mode: Default::default(),
        created_at: None,
    }
}

#[test]
fn plan_cardinality_and_order() {
    let m = manifest(
        vec![Transform::OneStep(TransformKind::Shuffle)],
        vec![mock("o", MockAnswer::TransformOracle)],
        &["d"],
    );
    let ds = vec![dataset("d", 2)];
    let jobs = plan(&m, &ds, &PromptLibrary::builtin()).unwrap();
    assert_eq!(jobs.len(), 18);
    let again = plan(&m, &ds, &PromptLibrary::builtin()).unwrap();
    assert_eq!(serde_json::to_string(&jobs).unwrap(), serde_json::to_string(&again).unwrap());
    // items vary fastest, then runs, then prompts
    assert_eq!(jobs[0].item_id, "d-0");
    assert_eq!(jobs[1].item_id, "d-1");
    assert_eq!(jobs[2].run_index, 1);
    assert_eq!(jobs[6].prompt_id, "persona");
    // the same item and run share seeds across prompts
    assert_eq!(jobs[0].shuffle_seed, jobs[6].shuffle_seed);
    assert_ne!(jobs[0].shuffle_seed, jobs[2].shuffle_seed);
}

#[test]
fn plan_errors() {
    let lib = PromptLibrary::builtin();
    let ds = vec![dataset("d", 2)];
    let m = manifest(vec![], vec![mock("o", MockAnswer::TransformOracle)], &["d"]);
    assert_eq!(plan(&m, &ds, &lib), Err(PlanError::NoTransforms));

    let m = manifest(Transform::all(), vec![mock("o", MockAnswer::TransformOracle)], &["missing"]);
    assert_eq!(plan(&m, &ds, &lib), Err(PlanError::UnloadedDataset("missing".into())));

    let mut m = manifest(Transform::all(), vec![mock("o", MockAnswer::TransformOracle)], &["d"]);
    m.prompts = vec!["nonexistent".into()];
    assert!(matches!(plan(&m, &ds, &lib), Err(PlanError::UnknownPrompt { .. })));

    let mut m = manifest(Transform::all(), vec![mock("o", MockAnswer::TransformOracle)], &["d"]);
    m.baseline = "other".into();
    assert_eq!(plan(&m, &ds, &lib), Err(PlanError::UnknownBaseline("other".into())));
}

fn harness(m: &RunManifest, ds: Vec<Dataset>) -> Harness {
    Harness::new(m.clone(), ds, PromptLibrary::builtin(), None).unwrap()
}

#[tokio::test]
async fn mock_execution_scores_and_skips_completed() {
    let m = manifest(
        Transform::all(),
        vec![
            mock("oracle", MockAnswer::TransformOracle),
            mock("text", MockAnswer::TextOracle),
            mock("violator", MockAnswer::FormatViolator { decoration: ".".into() }),
        ],
        &["d"],
    );
    let h = harness(&m, vec![dataset("d", 6)]);
    let jobs = h.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultStore::open(dir.path(), &m).unwrap();
    let opts = ExecuteOptions {
        workers: 8,
        max_jobs: None,
    };
    let s = execute(&h, &jobs, &store, &opts).await.unwrap();
    assert_eq!(s.planned, 6 * 8 * 3 * 3 * 3);
    assert_eq!((s.completed, s.failed(), s.skipped, s.network_calls), (s.planned, 0, 0, 0));

    let again = execute(&h, &jobs, &store, &opts).await.unwrap();
    assert_eq!((again.completed, again.skipped), (0, s.planned));

    let scores = score_store(&store, &jobs, h.datasets());
    assert_eq!(scores.aggregates.len(), 8 * 3);
    for row in &scores.aggregates {
        let agg = row.aggregate.as_ref().unwrap();
        assert_eq!(agg.cell_count, 9);
        assert!(!row.incomplete);
        match row.model_id.as_str() {
            "oracle" => assert_eq!(agg.mean_accuracy, 100.0),
            "violator" => assert_eq!((agg.mean_accuracy, agg.mean_format_rate), (0.0, 0.0)),
            _ => {}
        }
    }
    let replace = scores
        .aggregate("d", Transform::OneStep(TransformKind::ReplaceNoto), "text")
        .unwrap();
    assert_eq!(replace.aggregate.as_ref().unwrap().mean_accuracy, 0.0);
    let cot = scores.aggregate("d", Transform::TwoStep(TwoStepKind::Cot), "text").unwrap();
    assert_eq!(cot.aggregate.as_ref().unwrap().mean_accuracy, 100.0);
}

#[tokio::test]
async fn partial_execution_resumes_to_the_same_store() {
    let m = manifest(
        vec![
            Transform::OneStep(TransformKind::Random),
            Transform::TwoStep(TwoStepKind::Par),
        ],
        vec![mock("oracle", MockAnswer::TransformOracle)],
        &["d"],
    );
    let h = harness(&m, vec![dataset("d", 10)]);
    let jobs = h.plan().unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let full = ResultStore::open(full_dir.path(), &m).unwrap();
    execute(&h, &jobs, &full, &ExecuteOptions { workers: 4, max_jobs: None })
        .await
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    {
        let store = ResultStore::open(dir.path(), &m).unwrap();
        let s = execute(&h, &jobs, &store, &ExecuteOptions { workers: 4, max_jobs: Some(50) })
            .await
            .unwrap();
        assert_eq!((s.completed, s.remaining), (50, jobs.len() - 50));
    }
    let before = std::fs::read(dir.path().join(m.digest()).join("records.jsonl")).unwrap();
    let store = ResultStore::open(dir.path(), &m).unwrap();
    let s = execute(&h, &jobs, &store, &ExecuteOptions { workers: 4, max_jobs: None })
        .await
        .unwrap();
    assert_eq!((s.skipped, s.completed), (50, jobs.len() - 50));
    let after = std::fs::read(store.records_path()).unwrap();
    assert_eq!(&after[..before.len()], &before[..], "prior records were rewritten");
    assert_eq!(store.results(), full.results());
}

#[tokio::test]
async fn torn_tail_is_discarded_and_middle_corruption_aborts() {
    let m = manifest(
        vec![Transform::OneStep(TransformKind::Shuffle)],
        vec![mock("oracle", MockAnswer::TransformOracle)],
        &["d"],
    );
    let h = harness(&m, vec![dataset("d", 2)]);
    let jobs = h.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = {
        let store = ResultStore::open(dir.path(), &m).unwrap();
        execute(&h, &jobs, &store, &ExecuteOptions { workers: 1, max_jobs: Some(3) })
            .await
            .unwrap();
        store.records_path()
    };
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"{\"record\":\"result\",\"job\":")
        .unwrap();
    let store = ResultStore::open(dir.path(), &m).unwrap();
    assert_eq!(store.results().len(), 3);
    let s = execute(&h, &jobs, &store, &ExecuteOptions { workers: 2, max_jobs: None })
        .await
        .unwrap();
    assert_eq!(s.completed, jobs.len() - 3);
    drop(store);
    let reopened = ResultStore::open(dir.path(), &m).unwrap();
    assert_eq!(reopened.results().len(), jobs.len());
    drop(reopened);

    let mut text = std::fs::read_to_string(&path).unwrap();
    text.insert_str(0, "garbage\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(
        ResultStore::open(dir.path(), &m),
        Err(StoreError::Corrupt { line: 1, .. })
    ));
}

#[tokio::test]
async fn bad_endpoint_is_isolated_and_retried_on_rerun() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let mut cfg = EndpointConfig::new(format!("http://{addr}/v1"), "ghost");
    cfg.retry.backoff_base_ms = 1;
    cfg.retry.max_attempts = 2;
    let bad = ModelSpec {
        id: "ghost".into(),
        backend: ModelBackendSpec::Endpoint(cfg),
        prompt_overrides: BTreeMap::new(),
    };
    let mut m = manifest(
        vec![Transform::OneStep(TransformKind::Shuffle)],
        vec![mock("oracle", MockAnswer::TransformOracle), bad],
        &["d"],
    );
    m.run_count = 1;
    m.prompts = vec!["minimal".into()];
    let h = harness(&m, vec![dataset("d", 4)]);
    let jobs = h.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultStore::open(dir.path(), &m).unwrap();
    let s = execute(&h, &jobs, &store, &ExecuteOptions { workers: 4, max_jobs: None })
        .await
        .unwrap();
    assert_eq!((s.completed, s.failed_retryable), (4, 4));
    assert!(store.failures().values().all(|(c, _)| *c == FailureClass::Retryable));

    let again = execute(&h, &jobs, &store, &ExecuteOptions { workers: 4, max_jobs: None })
        .await
        .unwrap();
    assert_eq!((again.skipped, again.failed_retryable), (4, 4));
    let attempts: Vec<u32> = store
        .records()
        .unwrap()
        .iter()
        .filter(|r| matches!(r, StoreRecord::Failure { .. }))
        .map(StoreRecord::attempt)
        .collect();
    assert_eq!(attempts.iter().filter(|a| **a == 2).count(), 4);

    let scores = score_store(&store, &jobs, h.datasets());
    let ghost = scores
        .aggregate("d", Transform::OneStep(TransformKind::Shuffle), "ghost")
        .unwrap();
    assert!(ghost.incomplete && ghost.aggregate.is_none());
    assert!(!scores
        .aggregate("d", Transform::OneStep(TransformKind::Shuffle), "oracle")
        .unwrap()
        .incomplete);
}

#[tokio::test]
async fn noto_collision_skips_item_permanently() {
    let mut ds = dataset("d", 2);
    ds.items[0].options[1].text = "None of the others".into();
    let m = manifest(
        vec![Transform::OneStep(TransformKind::AddNoto)],
        vec![mock("oracle", MockAnswer::TransformOracle)],
        &["d"],
    );
    let h = harness(&m, vec![ds]);
    let jobs = h.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultStore::open(dir.path(), &m).unwrap();
    let s = execute(&h, &jobs, &store, &ExecuteOptions { workers: 2, max_jobs: None })
        .await
        .unwrap();
    assert_eq!((s.completed, s.failed_permanent), (9, 9));
    let again = execute(&h, &jobs, &store, &ExecuteOptions { workers: 2, max_jobs: None })
        .await
        .unwrap();
    assert_eq!(again.skipped, 18);
    assert!(store.failures().values().all(|(_, m)| m.starts_with("item skipped")));
}
