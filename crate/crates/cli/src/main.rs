//! `asymdistill`: extract, distill, index, search, evaluate and benchmark
//! asymmetric dual-encoder students from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use asymdistill::data;
use asymdistill::distill::{self, LossKind, TrainConfig};
use asymdistill::evaluation::{evaluate_run, Qrels};
use asymdistill::model_io::{self, LayerScheme};
use asymdistill::pipeline::{
    self, file_sha256, EvalSummary, ExperimentManifest, OutputGuard, PipelineOptions,
};
use asymdistill::retrieval::{read_trec, run_retrieval, write_trec, DenseIndex};
use asymdistill::throughput::{self, compare, measure_many, BenchResult};
use asymdistill::toy::{self, TeacherTrainConfig, ToyConfig, ToyDataset};
use asymdistill::{EncoderModel, Vocab};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "asymdistill", version, about = "Asymmetric dual-encoder distillation toolkit")]
struct Cli {
    /// Seed recorded in every output and used wherever randomness is
    /// involved [default: 0; `toy`, `train-teacher` and `pipeline` fall back
    /// to their own configured seeds].
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy dataset (corpus, queries, qrels, vocab, pairs).
    Toy {
        #[arg(long)]
        out: PathBuf,
        /// Number of unlabeled distillation queries.
        #[arg(long)]
        distill_queries: Option<usize>,
    },
    /// Train a small teacher on `query<TAB>document` pairs with in-batch negatives.
    TrainTeacher {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Build a student from a subset of a teacher's layers.
    Extract {
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated 0-based layer indices, or `all`.
        #[arg(long)]
        layers: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align a student's query embeddings to a teacher's.
    Distill(DistillArgs),
    /// Encode a corpus into a dense index.
    Index {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an index with a query encoder and write a TREC run.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Run tag; defaults to the encoder's model id.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Score a TREC run with nDCG@k.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Model name in the summary; defaults to the run file stem.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "dataset")]
        dataset: String,
    },
    /// Measure query-encoding throughput; the first model is the speedup reference.
    Bench {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = throughput::DEFAULT_BATCH_SIZES)]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = throughput::DEFAULT_REPEATS)]
        repeats: usize,
        /// Workload size; the query file is cycled to reach it.
        #[arg(long, default_value_t = throughput::DEFAULT_QUERY_COUNT)]
        count: usize,
    },
    /// Merge evaluation and benchmark outputs into retention and speedup tables.
    Report {
        #[arg(long = "teacher-eval", required = true)]
        teacher: Vec<PathBuf>,
        #[arg(long = "student-eval", required = true)]
        students: Vec<PathBuf>,
        /// Benchmark JSON files written by `bench`.
        #[arg(long)]
        bench: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a whole experiment from a TOML manifest.
    Pipeline {
        manifest: PathBuf,
        /// Overrides the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        skip_bench: bool,
    },
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    student: PathBuf,
    /// Unlabeled queries, plain text or JSON lines.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Directory for cached teacher embeddings.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "mse" => Ok(LossKind::Mse),
        "euclidean" => Ok(LossKind::Euclidean),
        other => Err(format!("unknown loss {other:?}; expected mse or euclidean")),
    }
}

/// Bad arguments discovered after parsing; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    out.with_file_name(name)
}

fn write_summary(guard: &mut OutputGuard, out: &Path, value: serde_json::Value) -> Result<()> {
    let path = guard.track(summary_path(out));
    let text = serde_json::to_string_pretty(&value)?;
    model_io::write_atomic(&path, text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    model_io::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn model_record(path: &Path, model: &EncoderModel) -> Result<serde_json::Value> {
    Ok(json!({
        "path": path.display().to_string(),
        "sha256": file_sha256(path)?,
        "model_id": model.meta.model_id,
        "layers": model.config.num_layers,
        "provenance": model.meta.provenance,
    }))
}

fn run(cli: Cli) -> Result<()> {
    let seed_flag = cli.seed;
    let seed = seed_flag.unwrap_or(0);
    let mut guard = OutputGuard::new();
    match cli.command {
        Command::Toy { out, distill_queries } => {
            let mut cfg = ToyConfig::default();
            cfg.seed = seed_flag.unwrap_or(cfg.seed);
            let seed = cfg.seed;
            if let Some(n) = distill_queries {
                cfg.distill_queries = n;
            }
            let ds = ToyDataset::generate(&cfg)?;
            for f in [
                toy::VOCAB_FILE,
                toy::CORPUS_FILE,
                toy::QUERIES_FILE,
                toy::QRELS_FILE,
                toy::DISTILL_QUERIES_FILE,
                toy::TRAIN_PAIRS_FILE,
            ] {
                guard.track(out.join(f));
            }
            ds.write(&out)?;
            write_summary(&mut guard, &out.join("toy"), json!({
                "command": "toy", "seed": seed, "config": cfg,
                "documents": ds.corpus.len(), "queries": ds.queries.len(),
                "distill_queries": ds.distill_queries.len(),
            }))?;
            println!(
                "wrote {} documents, {} queries, {} distillation queries to {}",
                ds.corpus.len(),
                ds.queries.len(),
                ds.distill_queries.len(),
                out.display()
            );
        }
        Command::TrainTeacher {
            pairs,
            vocab,
            out,
            layers,
            steps,
        } => {
            let vocab = Arc::new(Vocab::load(&vocab)?);
            let text = std::fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let pairs_list = text
                .lines()
                .filter(|l| !l.is_empty())
                .map(|l| {
                    l.split_once('\t')
                        .map(|(q, d)| (q.to_string(), d.to_string()))
                        .with_context(|| format!("{}: expected 'query<TAB>document'", pairs.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let defaults = TeacherTrainConfig::default();
            let cfg = TeacherTrainConfig {
                seed: seed_flag.unwrap_or(defaults.seed),
                num_layers: layers,
                steps,
                ..defaults
            };
            let seed = cfg.seed;
            let teacher = toy::train_teacher(&pairs_list, vocab, &cfg)?;
            ensure_parent(&out)?;
            model_io::save(&teacher, guard.track_checkpoint(&out))?;
            write_summary(&mut guard, &out, json!({
                "command": "train-teacher", "seed": seed, "config": cfg,
                "pairs_sha256": file_sha256(&pairs)?,
                "output": model_record(&out, &teacher)?,
            }))?;
            println!("trained {}-layer teacher -> {}", layers, out.display());
        }
        Command::Extract { teacher, layers, out } => {
            let header = model_io::read_header(&teacher)
                .with_context(|| format!("reading {}", teacher.display()))?;
            let scheme = LayerScheme::parse(&layers, header.config.num_layers)
                .map_err(|e| UsageError(format!("--layers {layers:?}: {e}")))?;
            let model = load_model(&teacher)?;
            let student = model_io::extract_layers(&model, &scheme)?;
            ensure_parent(&out)?;
            model_io::save(&student, guard.track_checkpoint(&out))?;
            let prov = student.meta.provenance.clone().expect("extraction records provenance");
            write_summary(&mut guard, &out, json!({
                "command": "extract", "seed": seed, "layers": scheme.to_string(),
                "teacher": model_record(&teacher, &model)?,
                "output": model_record(&out, &student)?,
            }))?;
            println!(
                "extracted {}-layer student from {} (teacher layers {:?} of {}) -> {}",
                student.config.num_layers,
                prov.teacher_id,
                prov.layers,
                prov.teacher_layers,
                out.display()
            );
        }
        Command::Distill(a) => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<TrainConfig>(&text)
                        .map_err(|e| UsageError(format!("--config {}: {e}", p.display())))?
                }
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = a.warmup_steps {
                cfg.warmup_steps = v;
            }
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.loss {
                cfg.loss = v;
            }
            if let Some(v) = a.val_fraction {
                cfg.val_fraction = v;
            }
            if a.max_steps.is_some() {
                cfg.max_steps = a.max_steps;
            }
            cfg.validate().map_err(|e| UsageError(e.to_string()))?;
            let teacher = load_model(&a.teacher)?;
            let student = load_model(&a.student)?;
            let queries = data::load_query_texts(&a.queries)?;
            let (trained, history) =
                distill::train(&teacher, student, &queries, &cfg, a.cache_dir.as_deref())?;
            ensure_parent(&a.out)?;
            model_io::save(&trained, guard.track_checkpoint(&a.out))?;
            let mut hist_name = a.out.file_name().unwrap_or_default().to_os_string();
            hist_name.push(".history.csv");
            let hist_path = guard.track(a.out.with_file_name(hist_name));
            history.write_csv(&hist_path)?;
            write_summary(&mut guard, &a.out, json!({
                "command": "distill", "seed": seed, "config": cfg,
                "teacher": model_record(&a.teacher, &teacher)?,
                "student_init_sha256": file_sha256(&a.student)?,
                "queries_sha256": file_sha256(&a.queries)?,
                "output": model_record(&a.out, &trained)?,
                "steps": history.steps.len(),
                "validations": history.validations,
                "epoch_seconds": history.epoch_seconds,
            }))?;
            match (history.initial_distance(), history.final_distance()) {
                (Some(i), Some(f)) => println!(
                    "{} updates; validation distance {i:.4} -> {f:.4}; saved {}",
                    history.steps.len(),
                    a.out.display()
                ),
                _ => println!("{} updates; saved {}", history.steps.len(), a.out.display()),
            }
        }
        Command::Index { encoder, corpus, out } => {
            let model = load_model(&encoder)?;
            let docs = data::load_corpus(&corpus)?;
            let index = DenseIndex::build(&docs, &model)?;
            ensure_parent(&out)?;
            index.save(guard.track(&out))?;
            write_summary(&mut guard, &out, json!({
                "command": "index", "seed": seed,
                "encoder": model_record(&encoder, &model)?,
                "corpus_sha256": file_sha256(&corpus)?,
                "documents": index.len(), "dim": index.dim(),
                "index_sha256": file_sha256(&out)?,
            }))?;
            println!("indexed {} documents ({}-d) -> {}", index.len(), index.dim(), out.display());
        }
        Command::Search {
            index,
            encoder,
            queries,
            out,
            k,
            tag,
        } => {
            if k == 0 {
                return Err(UsageError("--k must be >= 1".into()).into());
            }
            let idx = DenseIndex::load(&index)?;
            let model = load_model(&encoder)?;
            let qs = data::load_queries(&queries)?;
            let run = run_retrieval(&qs, &idx, &model, k)?;
            let tag = tag.unwrap_or_else(|| model.meta.model_id.replace(char::is_whitespace, "_"));
            ensure_parent(&out)?;
            write_trec(&run, &tag, guard.track(&out))?;
            write_summary(&mut guard, &out, json!({
                "command": "search", "seed": seed, "k": k, "tag": tag,
                "index_sha256": file_sha256(&index)?,
                "index_fingerprint": idx.fingerprint(),
                "encoder": model_record(&encoder, &model)?,
                "queries_sha256": file_sha256(&queries)?,
                "run_sha256": file_sha256(&out)?,
            }))?;
            println!("searched {} queries -> {}", run.len(), out.display());
        }
        Command::Eval {
            run: run_path,
            qrels,
            out,
            k,
            model,
            dataset,
        } => {
            if k == 0 {
                return Err(UsageError("--k must be >= 1".into()).into());
            }
            let run = read_trec(&run_path)?;
            let q = Qrels::load(&qrels)?;
            let ndcg = evaluate_run(&run, &q, k)?;
            let summary = EvalSummary {
                model: model.unwrap_or_else(|| {
                    run_path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                }),
                dataset,
                k,
                ndcg,
                queries: run.len(),
                run_sha256: file_sha256(&run_path)?,
                qrels_sha256: file_sha256(&qrels)?,
                seed,
            };
            ensure_parent(&out)?;
            model_io::write_atomic(guard.track(&out).as_path(), serde_json::to_string_pretty(&summary)?.as_bytes())?;
            println!("nDCG@{k} = {ndcg:.4} over {} queries", run.len());
        }
        Command::Bench {
            models,
            queries,
            out,
            batch_sizes,
            repeats,
            count,
        } => {
            if repeats == 0 || count == 0 || batch_sizes.is_empty() || batch_sizes.contains(&0) {
                return Err(UsageError("--repeats, --count and every batch size must be >= 1".into()).into());
            }
            let texts = data::load_query_texts(&queries)?;
            if texts.is_empty() {
                bail!("{} contains no queries", queries.display());
            }
            let workload = pipeline::bench_queries(&texts, count);
            let loaded = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EncoderModel> = loaded.iter().collect();
            let mut results = measure_many(&refs, &workload, &batch_sizes, repeats)?;
            for (r, path) in results.iter_mut().zip(&models) {
                if let Some(stem) = path.file_stem() {
                    r.model = stem.to_string_lossy().into_owned();
                }
            }
            let mut csv = BenchResult::csv_header().to_string();
            for r in &results {
                csv.push_str(&r.csv_rows());
            }
            ensure_parent(&out)?;
            model_io::write_atomic(guard.track(&out).as_path(), csv.as_bytes())?;
            let table = compare(&results)?;
            let json_path = guard.track(out.with_extension("json"));
            model_io::write_atomic(&json_path, serde_json::to_string_pretty(&results)?.as_bytes())?;
            let speed_path = guard.track(out.with_extension("speedup.csv"));
            table.write_csv(&speed_path)?;
            write_summary(&mut guard, &out, json!({
                "command": "bench", "seed": seed, "batch_sizes": batch_sizes,
                "repeats": repeats, "queries": workload.len(),
                "hardware": results[0].hardware,
                "models": models.iter().zip(&loaded).map(|(p, m)| model_record(p, m)).collect::<Result<Vec<_>>>()?,
            }))?;
            print!("{}", table.to_chart());
        }
        Command::Report {
            teacher,
            students,
            bench,
            out,
        } => {
            let read_eval = |p: &PathBuf| -> Result<EvalSummary> {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            };
            let t = teacher.iter().map(read_eval).collect::<Result<Vec<_>>>()?;
            let s = students.iter().map(read_eval).collect::<Result<Vec<_>>>()?;
            let mut b: Vec<BenchResult> = Vec::new();
            for p in &bench {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut rs: Vec<BenchResult> =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                b.append(&mut rs);
            }
            let (metrics, speedups) = pipeline::merge_reports(&t, &s, &b)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut csv = asymdistill::MetricsReport::csv_header().to_string();
            for m in &metrics {
                csv.push_str(&m.csv_rows());
            }
            model_io::write_atomic(&guard.track(out.join(pipeline::METRICS_FILE)), csv.as_bytes())?;
            if let Some(table) = &speedups {
                table.write_csv(guard.track(out.join(pipeline::SPEEDUP_FILE)))?;
            }
            let text = pipeline::render_report(&metrics, speedups.as_ref(), b.first().map(|r| r.hardware.as_str()));
            model_io::write_atomic(&guard.track(out.join(pipeline::REPORT_FILE)), text.as_bytes())?;
            print!("{text}");
        }
        Command::Pipeline {
            manifest,
            out,
            skip_bench,
        } => {
            let mut m = ExperimentManifest::load(&manifest)?;
            if let Some(o) = out {
                m.output_dir = o;
            }
            m.seed = seed_flag.unwrap_or(m.seed);
            m.validate().map_err(|e| UsageError(e.to_string()))?;
            let report = pipeline::run_pipeline(&m, &PipelineOptions { skip_bench })?;
            let text = std::fs::read_to_string(m.output_dir.join(pipeline::REPORT_FILE))?;
            print!("{text}");
            println!(
                "teacher nDCG@{} = {:.4}; outputs in {}",
                report.summary.k,
                report.summary.teacher.ndcg,
                m.output_dir.display()
            );
        }
    }
    guard.commit();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
