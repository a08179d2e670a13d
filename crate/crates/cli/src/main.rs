use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcqa_client::Client;
use mcqa_core::adapters::{adapt_source, AdapterConfig, SourceKind};
use mcqa_core::api::{IngestRequest, ReportRequest, RunRequest, RunState, TransformRequest};
use mcqa_core::demo::write_demo;
use mcqa_core::mcqa::{canonical_lines, load_canonical, CanonicalRecord, McqaItem, Split};
use mcqa_core::perturb::{apply_one_step, PerturbConfig, TransformKind, TransformedRecord};
use mcqa_core::report::{write_report, FormatSlice};
use mcqa_core::runner::{prepare, run_manifest, ExecuteOptions, Overrides, RunManifest, ScoreFile};
use mcqa_core::twostep::Transform;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mcqa", version, about = "Robustness harness for multiple-choice QA")]
struct Cli {
    /// Delegate work to a running service instead of running locally.
    #[arg(long, global = true, env = "MCQA_SERVER")]
    server: Option<String>,

    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw source records (JSONL) to canonical items.
    Ingest {
        #[arg(long)]
        source: SourceKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// MMLU categories to keep, comma separated.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
    },
    /// Apply one transformation to a canonical dataset.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        kind: TransformKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        run: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Execute a manifest, resuming whatever is already in the store.
    Run(RunArgs),
    /// Rescore an existing store without executing anything.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Where to write the score table when using --server.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render delta tables and format rates from a score table.
    Report(ReportArgs),
    /// Run the mock-only demo end to end. Makes no network calls.
    MockDemo {
        #[arg(long, default_value = "mock-demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        items: usize,
        #[arg(long, default_value_t = 20240917)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        workers: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    prompts: Option<Vec<String>>,
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value_t = 16)]
    workers: usize,
    /// Stop after this many pending jobs; rerun to continue.
    #[arg(long)]
    max_jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Defaults to the baseline recorded in the score table.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Add standard-deviation columns.
    #[arg(long)]
    std: bool,
    /// Restrict format rates to these datasets.
    #[arg(long, value_delimiter = ',')]
    format_datasets: Option<Vec<String>>,
    /// Restrict format rates to these transformations.
    #[arg(long, value_delimiter = ',')]
    format_transforms: Option<Vec<Transform>>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let client = cli.server.as_deref().map(Client::new).transpose()?;
    match cli.command {
        Command::Ingest {
            source,
            input,
            output,
            split,
            categories,
        } => ingest(client, source, &input, &output, split, categories).await,
        Command::Transform {
            input,
            kind,
            seed,
            run,
            output,
        } => transform(client, &input, kind, seed, run, &output).await,
        Command::Run(args) => run(client, args).await,
        Command::Score { manifest, out, output } => score(client, &manifest, &out, output).await,
        Command::Report(args) => report(client, args).await,
        Command::MockDemo {
            out,
            items,
            seed,
            workers,
        } => mock_demo(client, &out, items, seed, workers).await,
        Command::Serve { addr, out } => {
            let listener = tokio::net::TcpListener::bind(addr).await?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            mcqa_service::serve(listener, mcqa_service::AppState::new(out)).await?;
            Ok(())
        }
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

async fn ingest(
    client: Option<Client>,
    source: SourceKind,
    input: &Path,
    output: &Path,
    split: Option<Split>,
    categories: Option<Vec<String>>,
) -> Result<()> {
    let records = read_jsonl(input)?;
    let (items, rejections) = match client {
        Some(c) => {
            let r = c
                .ingest(&IngestRequest {
                    source,
                    split,
                    mmlu_categories: categories,
                    records,
                })
                .await?;
            let items = r.items.into_iter().map(McqaItem::from).collect::<Vec<_>>();
            (items, r.rejections)
        }
        None => {
            let mut config = AdapterConfig::default();
            if let Some(s) = split {
                config.split = s;
            }
            if let Some(c) = categories {
                config.mmlu_categories = c;
            }
            let out = adapt_source(source, records, &config);
            (out.dataset.items, out.rejections)
        }
    };
    std::fs::write(output, canonical_lines(&items))?;
    if !rejections.is_empty() {
        let path = output.with_extension("rejections.jsonl");
        write_jsonl(&path, &rejections)?;
        eprintln!("{} records rejected, see {}", rejections.len(), path.display());
    }
    println!("{}", json!({"dataset": source.dataset_name(), "items": items.len(), "rejected": rejections.len()}));
    Ok(())
}

async fn transform(
    client: Option<Client>,
    input: &Path,
    kind: TransformKind,
    seed: u64,
    run_index: u32,
    output: &Path,
) -> Result<()> {
    let dataset = load_canonical(input)?;
    let perturb = PerturbConfig::default();
    let (records, skipped) = match client {
        Some(c) => {
            let r = c
                .transform(&TransformRequest {
                    items: dataset.items.iter().map(CanonicalRecord::from).collect(),
                    kind,
                    global_seed: seed,
                    run_index,
                    perturb,
                })
                .await?;
            (r.records, r.skipped.into_iter().map(|s| (s.item_id, s.reason)).collect())
        }
        None => {
            let mut records = Vec::new();
            let mut skipped = Vec::new();
            for item in &dataset.items {
                match apply_one_step(kind, item, seed, run_index, &perturb) {
                    Ok(t) => records.push(TransformedRecord::new(item, &t)),
                    Err(e) => skipped.push((item.id.clone(), e.to_string())),
                }
            }
            (records, skipped)
        }
    };
    write_jsonl(output, &records)?;
    for (id, reason) in &skipped {
        eprintln!("skipped {id}: {reason}");
    }
    println!("{}", json!({"records": records.len(), "skipped": skipped.len()}));
    Ok(())
}

fn load_manifest(path: &Path, overrides: &Overrides) -> Result<(RunManifest, PathBuf)> {
    let mut manifest = RunManifest::load(path)?;
    manifest.apply(overrides)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok((manifest, base_dir))
}

async fn remote_run(c: &Client, manifest: RunManifest, base_dir: &Path, workers: usize, max_jobs: Option<usize>) -> Result<ScoreFile> {
    let base_dir = std::fs::canonicalize(if base_dir.as_os_str().is_empty() { Path::new(".") } else { base_dir })?;
    let started = c
        .start_run(&RunRequest {
            manifest,
            base_dir,
            workers: Some(workers),
            max_jobs,
        })
        .await?;
    let done = c.wait_for_run(&started.run_id, Duration::from_millis(200)).await?;
    if done.state == RunState::Failed {
        bail!("run {} failed: {}", done.run_id, done.error.unwrap_or_default());
    }
    println!(
        "{}",
        json!({"digest": done.run_id, "store_dir": done.store_dir, "summary": done.summary})
    );
    Ok(c.run_scores(&done.run_id).await?)
}

async fn run(client: Option<Client>, args: RunArgs) -> Result<()> {
    let overrides = Overrides {
        seed: args.seed,
        runs: args.runs,
        prompts: args.prompts,
        baseline: args.baseline,
    };
    let (manifest, base_dir) = load_manifest(&args.manifest, &overrides)?;
    match client {
        Some(c) => {
            remote_run(&c, manifest, &base_dir, args.workers, args.max_jobs).await?;
        }
        None => {
            let options = ExecuteOptions {
                workers: args.workers,
                max_jobs: args.max_jobs,
            };
            let outcome = run_manifest(manifest, &base_dir, &args.out, &options).await?;
            println!(
                "{}",
                json!({"digest": outcome.digest, "store_dir": outcome.store_dir, "summary": outcome.summary})
            );
        }
    }
    Ok(())
}

async fn score(client: Option<Client>, manifest_path: &Path, out: &Path, output: Option<PathBuf>) -> Result<()> {
    let (manifest, base_dir) = load_manifest(manifest_path, &Overrides::default())?;
    match client {
        Some(c) => {
            let scores = c.run_scores(&manifest.digest()).await?;
            match output {
                Some(path) => std::fs::write(&path, scores.to_json())?,
                None => std::io::stdout().lock().write_all(scores.to_json().as_bytes())?,
            }
        }
        None => {
            let prepared = tokio::task::spawn_blocking({
                let out = out.to_path_buf();
                move || prepare(manifest, &base_dir, &out)
            })
            .await??;
            let scores = prepared.write_scores()?;
            if let Some(path) = output {
                std::fs::write(&path, scores.to_json())?;
            }
            println!("{}", prepared.store.dir().join(mcqa_core::runner::SCORES_FILE).display());
        }
    }
    Ok(())
}

async fn report(client: Option<Client>, args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.scores).with_context(|| format!("reading {}", args.scores.display()))?;
    let scores = ScoreFile::from_json(&text)?;
    let slice = FormatSlice {
        datasets: args.format_datasets,
        transforms: args.format_transforms,
    };
    let baseline = args.baseline.unwrap_or_else(|| scores.baseline.clone());
    match client {
        Some(c) => {
            let files = c
                .report(&ReportRequest {
                    scores,
                    baseline: Some(baseline),
                    include_std: args.std,
                    format_slice: slice,
                })
                .await?
                .files;
            std::fs::create_dir_all(&args.out)?;
            for f in files {
                let path = args.out.join(&f.name);
                std::fs::write(&path, f.contents)?;
                println!("{}", path.display());
            }
        }
        None => {
            for path in write_report(&scores, &baseline, args.std, &slice, &args.out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

async fn mock_demo(client: Option<Client>, out: &Path, items: usize, seed: u64, workers: usize) -> Result<()> {
    let data = out.join("data");
    let manifest_path = write_demo(&data, items, seed)?;
    let manifest = RunManifest::load(&manifest_path)?;
    let baseline = manifest.baseline.clone();
    let scores = match client {
        Some(c) => remote_run(&c, manifest, &data, workers, None).await?,
        None => {
            let options = ExecuteOptions { workers, max_jobs: None };
            let outcome = run_manifest(manifest, &data, &out.join("runs"), &options).await?;
            println!(
                "{}",
                json!({"digest": outcome.digest, "store_dir": outcome.store_dir, "summary": outcome.summary})
            );
            outcome.scores
        }
    };
    std::fs::write(out.join("scores.json"), scores.to_json())?;
    write_report(&scores, &baseline, true, &FormatSlice::default(), &out.join("report"))?;
    Ok(())
}
