//! Declarative experiments: teacher, students, data and training recipe in
//! one TOML manifest, run as extract → distill → index → search → evaluate
//! → benchmark → report.
//!
//! Relative paths in a manifest resolve against the manifest's directory.
//! Everything except benchmark timings is a deterministic function of the
//! manifest and its seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Document, Query};
use crate::distill::{self, TrainConfig, TrainHistory};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, relative_change, MetricsReport, Qrels, ReportRow};
use crate::model_io::{self, extract_layers, write_atomic, LayerScheme};
use crate::retrieval::{run_retrieval, write_trec, DenseIndex, Run};
use crate::throughput::{compare, measure_many, BenchResult, SpeedupTable};
use crate::tokenizer::Vocab;
use crate::toy::{self, TeacherTrainConfig};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Tracks files written by a command and deletes them unless the command
/// commits.
#[derive(Debug, Default)]
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `path` (and, for checkpoints, its vocabulary file).
    pub fn track(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let path = path.into();
        self.paths.push(path.clone());
        path
    }

    pub fn track_checkpoint(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let path = self.track(path);
        let vocab = path
            .parent()
            .unwrap_or(Path::new(""))
            .join(model_io::vocab_file_name(&path));
        self.track(vocab);
        path
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub name: String,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub distill_queries: PathBuf,
}

/// A teacher checkpoint, or pairs plus vocabulary to train a toy teacher.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub checkpoint: Option<PathBuf>,
    pub train_pairs: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub train: Option<TeacherTrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub name: String,
    /// Teacher layers to keep, e.g. `"0,5"` or `"all"`.
    pub layers: Option<String>,
    /// Depth of a randomly initialized student.
    pub random_layers: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub k: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { k: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub batch_sizes: Vec<usize>,
    pub repeats: usize,
    pub queries: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            batch_sizes: crate::throughput::DEFAULT_BATCH_SIZES.to_vec(),
            repeats: crate::throughput::DEFAULT_REPEATS,
            queries: crate::throughput::DEFAULT_QUERY_COUNT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub teacher: TeacherSpec,
    pub students: Vec<StudentSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    pub bench: Option<BenchSpec>,
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("manifest: {e}")))
    }

    /// Parses the manifest and resolves its relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        m.resolve(path.parent().unwrap_or(Path::new("")));
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.corpus);
        fix(&mut self.data.queries);
        fix(&mut self.data.qrels);
        fix(&mut self.data.distill_queries);
        for p in [
            &mut self.teacher.checkpoint,
            &mut self.teacher.train_pairs,
            &mut self.teacher.vocab,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for s in &mut self.students {
            if let Some(p) = &mut s.checkpoint {
                fix(p);
            }
        }
    }

    /// Structural checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        let need = |field: &str, p: &Path| -> Result<()> {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Input(format!(
                    "manifest field {field}: {} does not exist",
                    p.display()
                )))
            }
        };
        need("data.corpus", &self.data.corpus)?;
        need("data.queries", &self.data.queries)?;
        need("data.qrels", &self.data.qrels)?;
        need("data.distill_queries", &self.data.distill_queries)?;
        match (&self.teacher.checkpoint, &self.teacher.train_pairs, &self.teacher.vocab) {
            (Some(c), None, _) => need("teacher.checkpoint", c)?,
            (None, Some(p), Some(v)) => {
                need("teacher.train_pairs", p)?;
                need("teacher.vocab", v)?;
            }
            _ => {
                return Err(Error::Input(
                    "manifest field teacher: give either checkpoint, or train_pairs and vocab".into(),
                ))
            }
        }
        if self.students.is_empty() {
            return Err(Error::Input("manifest field students: at least one student is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, s) in self.students.iter().enumerate() {
            if s.name.is_empty() || s.name.contains(['/', '\\', ',']) || !names.insert(&s.name) {
                return Err(Error::Input(format!(
                    "manifest field students[{i}].name: {:?} is empty, reused or not a plain file name",
                    s.name
                )));
            }
            let given = [s.layers.is_some(), s.random_layers.is_some(), s.checkpoint.is_some()];
            if given.iter().filter(|g| **g).count() != 1 {
                return Err(Error::Input(format!(
                    "manifest field students[{i}]: give exactly one of layers, random_layers, checkpoint"
                )));
            }
            if let Some(c) = &s.checkpoint {
                need(&format!("students[{i}].checkpoint"), c)?;
            }
        }
        if self.eval.k == 0 {
            return Err(Error::Input("manifest field eval.k must be >= 1".into()));
        }
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub distill_queries: Vec<String>,
}

impl Dataset {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        Ok(Dataset {
            name: paths.name.clone(),
            corpus: data::load_corpus(&paths.corpus)?,
            queries: data::load_queries(&paths.queries)?,
            qrels: Qrels::load(&paths.qrels)?,
            distill_queries: data::load_query_texts(&paths.distill_queries)?,
        })
    }

    pub fn from_toy(ds: &toy::ToyDataset, name: impl Into<String>) -> Self {
        Dataset {
            name: name.into(),
            corpus: ds.corpus.clone(),
            queries: ds.queries.clone(),
            qrels: ds.qrels.clone(),
            distill_queries: ds.distill_queries.clone(),
        }
    }
}

pub enum StudentInit {
    Layers(LayerScheme),
    Random { layers: usize, seed: u64 },
    Model(EncoderModel),
}

/// Seed for a randomly initialized student, derived from the run seed and
/// the student's position in the manifest.
pub fn student_seed(run_seed: u64, position: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(position as u64 + 1)
}

pub fn init_student(teacher: &EncoderModel, init: StudentInit, name: &str) -> Result<EncoderModel> {
    match init {
        StudentInit::Layers(scheme) => extract_layers(teacher, &scheme),
        StudentInit::Random { layers, seed } => {
            let mut cfg = teacher.config.clone();
            cfg.num_layers = layers;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            EncoderModel::random(cfg, Arc::clone(&teacher.vocab), format!("{name}-random"), &mut rng)
        }
        StudentInit::Model(m) => Ok(m),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentOutcome {
    pub name: String,
    pub model_id: String,
    pub layers: usize,
    pub fingerprint: String,
    pub ndcg: f64,
    pub relative_change: f64,
    pub initial_distance: Option<f64>,
    pub final_distance: Option<f64>,
    pub steps: usize,
}

/// Distills, searches with the trained student against `index`, and scores
/// the run.
#[allow(clippy::too_many_arguments)]
pub fn distill_and_evaluate(
    teacher: &EncoderModel,
    teacher_ndcg: f64,
    index: &DenseIndex,
    data: &Dataset,
    name: &str,
    student: EncoderModel,
    train: &TrainConfig,
    k: usize,
) -> Result<(EncoderModel, StudentOutcome, TrainHistory, Run)> {
    let (trained, history) = distill::train(teacher, student, &data.distill_queries, train, None)?;
    let run = run_retrieval(&data.queries, index, &trained, k)?;
    let ndcg = evaluate_run(&run, &data.qrels, k)?;
    let outcome = StudentOutcome {
        name: name.to_string(),
        model_id: trained.meta.model_id.clone(),
        layers: trained.config.num_layers,
        fingerprint: trained.fingerprint(),
        ndcg,
        relative_change: relative_change(ndcg, teacher_ndcg)?,
        initial_distance: history.initial_distance(),
        final_distance: history.final_distance(),
        steps: history.steps.len(),
    };
    Ok((trained, outcome, history, run))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutcome {
    pub model_id: String,
    pub layers: usize,
    pub fingerprint: String,
    pub ndcg: f64,
}

/// Machine-readable record of a run. Contains no timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub seed: u64,
    pub dataset: String,
    pub k: usize,
    pub input_sha256: BTreeMap<String, String>,
    pub train: TrainConfig,
    pub teacher: TeacherOutcome,
    pub index_fingerprint: String,
    pub students: Vec<StudentOutcome>,
    pub mean_relative_change: f64,
    pub retention: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub summary: PipelineSummary,
    pub metrics: Vec<MetricsReport>,
    pub bench: Vec<BenchResult>,
    pub speedups: Option<SpeedupTable>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.txt";
pub const BENCH_FILE: &str = "bench.csv";
pub const SPEEDUP_FILE: &str = "speedup.csv";

fn load_teacher(spec: &TeacherSpec, out: &Path, guard: &mut OutputGuard) -> Result<EncoderModel> {
    if let Some(c) = &spec.checkpoint {
        return model_io::load(c);
    }
    let pairs_path = spec.train_pairs.as_ref().expect("validated");
    let vocab = Arc::new(Vocab::load(spec.vocab.as_ref().expect("validated"))?);
    let text = std::fs::read_to_string(pairs_path).map_err(|e| Error::io(pairs_path, e))?;
    let pairs = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('\t')
                .map(|(q, d)| (q.to_string(), d.to_string()))
                .ok_or_else(|| Error::parse(pairs_path, "expected 'query<TAB>document'"))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = spec.train.clone().unwrap_or_default();
    let teacher = toy::train_teacher(&pairs, vocab, &cfg)?;
    model_io::save(&teacher, guard.track_checkpoint(out.join("teacher.ckpt")))?;
    Ok(teacher)
}

/// Cycles `texts` up to `n` entries.
pub fn bench_queries(texts: &[String], n: usize) -> Vec<String> {
    texts.iter().cycle().take(n).cloned().collect()
}

pub struct PipelineOptions {
    pub skip_bench: bool,
}

/// Runs a validated manifest, writing every artifact under its output
/// directory. On error, files written by this call are removed.
pub fn run_pipeline(manifest: &ExperimentManifest, options: &PipelineOptions) -> Result<PipelineReport> {
    manifest.validate()?;
    let out = &manifest.output_dir;
    for sub in ["students", "runs", "history"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut guard = OutputGuard::new();
    let data = Dataset::load(&manifest.data)?;
    let mut input_sha256 = BTreeMap::new();
    for (field, p) in [
        ("data.corpus", &manifest.data.corpus),
        ("data.queries", &manifest.data.queries),
        ("data.qrels", &manifest.data.qrels),
        ("data.distill_queries", &manifest.data.distill_queries),
    ] {
        input_sha256.insert(field.to_string(), file_sha256(p)?);
    }
    if let Some(c) = &manifest.teacher.checkpoint {
        input_sha256.insert("teacher.checkpoint".into(), file_sha256(c)?);
    }

    let teacher = load_teacher(&manifest.teacher, out, &mut guard)?;
    let k = manifest.eval.k;
    let index = DenseIndex::build(&data.corpus, &teacher)?;
    index.save(guard.track(out.join("index.bin")))?;
    let teacher_run = run_retrieval(&data.queries, &index, &teacher, k)?;
    write_trec(&teacher_run, "teacher", guard.track(out.join("runs").join("teacher.trec")))?;
    let teacher_ndcg = evaluate_run(&teacher_run, &data.qrels, k)?;

    let mut train = manifest.train.clone();
    train.seed = manifest.seed;
    let mut outcomes = Vec::new();
    let mut trained_models = Vec::new();
    for (i, spec) in manifest.students.iter().enumerate() {
        let init = if let Some(l) = &spec.layers {
            StudentInit::Layers(LayerScheme::parse(l, teacher.config.num_layers)?)
        } else if let Some(n) = spec.random_layers {
            StudentInit::Random {
                layers: n,
                seed: student_seed(manifest.seed, i),
            }
        } else {
            StudentInit::Model(model_io::load(spec.checkpoint.as_ref().expect("validated"))?)
        };
        let student = init_student(&teacher, init, &spec.name)?;
        let (trained, outcome, history, run) =
            distill_and_evaluate(&teacher, teacher_ndcg, &index, &data, &spec.name, student, &train, k)?;
        model_io::save(
            &trained,
            guard.track_checkpoint(out.join("students").join(format!("{}.ckpt", spec.name))),
        )?;
        history.write_csv(guard.track(out.join("history").join(format!("{}.csv", spec.name))))?;
        write_trec(&run, &spec.name, guard.track(out.join("runs").join(format!("{}.trec", spec.name))))?;
        outcomes.push(outcome);
        trained_models.push(trained);
    }

    let metrics = outcomes
        .iter()
        .map(|o| MetricsReport::new(&o.name, vec![ReportRow::new(&data.name, teacher_ndcg, o.ndcg)?]))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = MetricsReport::csv_header().to_string();
    for m in &metrics {
        csv.push_str(&m.csv_rows());
    }
    write_atomic(&guard.track(out.join(METRICS_FILE)), csv.as_bytes())?;

    let changes: Vec<f64> = outcomes.iter().map(|o| o.relative_change).collect();
    let agg = crate::evaluation::aggregate(&changes)?;
    let summary = PipelineSummary {
        seed: manifest.seed,
        dataset: data.name.clone(),
        k,
        input_sha256,
        train,
        teacher: TeacherOutcome {
            model_id: teacher.meta.model_id.clone(),
            layers: teacher.config.num_layers,
            fingerprint: teacher.fingerprint(),
            ndcg: teacher_ndcg,
        },
        index_fingerprint: index.fingerprint().to_string(),
        students: outcomes,
        mean_relative_change: agg.mean_relative_change,
        retention: agg.retention,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&guard.track(out.join(SUMMARY_FILE)), json.as_bytes())?;

    let mut bench = Vec::new();
    let mut speedups = None;
    if let (Some(spec), false) = (&manifest.bench, options.skip_bench) {
        let mut pool: Vec<String> = data.queries.iter().map(|q| q.text.clone()).collect();
        pool.extend(data.distill_queries.iter().cloned());
        let queries = bench_queries(&pool, spec.queries);
        let mut models: Vec<&EncoderModel> = vec![&teacher];
        models.extend(trained_models.iter());
        bench = measure_many(&models, &queries, &spec.batch_sizes, spec.repeats)?;
        bench[0].model = "teacher".into();
        for (r, s) in bench[1..].iter_mut().zip(&manifest.students) {
            r.model = s.name.clone();
        }
        let mut csv = BenchResult::csv_header().to_string();
        for r in &bench {
            csv.push_str(&r.csv_rows());
        }
        write_atomic(&guard.track(out.join(BENCH_FILE)), csv.as_bytes())?;
        let table = compare(&bench)?;
        table.write_csv(guard.track(out.join(SPEEDUP_FILE)))?;
        speedups = Some(table);
    }

    let report = render_report(&metrics, speedups.as_ref(), bench.first().map(|b| b.hardware.as_str()));
    write_atomic(&guard.track(out.join(REPORT_FILE)), report.as_bytes())?;
    guard.commit();
    Ok(PipelineReport {
        summary,
        metrics,
        bench,
        speedups,
    })
}

/// Retention table per student, then the speedup chart if any.
pub fn render_report(metrics: &[MetricsReport], speedups: Option<&SpeedupTable>, hardware: Option<&str>) -> String {
    let mut out = String::from("Retention of teacher nDCG@10\n\n");
    let w = metrics.iter().map(|m| m.student.len()).max().unwrap_or(0).max(7);
    out.push_str(&format!(
        "{:<w$}  {:>8}  {:>8}  {:>9}  {:>9}\n",
        "student", "teacher", "student", "change", "retention"
    ));
    for m in metrics {
        let teacher = m.rows.iter().map(|r| r.teacher).sum::<f64>() / m.rows.len() as f64;
        let student = m.rows.iter().map(|r| r.student).sum::<f64>() / m.rows.len() as f64;
        out.push_str(&format!(
            "{:<w$}  {:>8.4}  {:>8.4}  {:>8.2}%  {:>8.2}%\n",
            m.student,
            teacher,
            student,
            100.0 * m.aggregate.mean_relative_change,
            100.0 * m.aggregate.retention
        ));
    }
    if let Some(t) = speedups {
        out.push('\n');
        if let Some(hw) = hardware {
            out.push_str(&format!("hardware: {hw}\n"));
        }
        out.push_str(&t.to_chart());
    }
    out
}

/// Result of scoring one run file, as written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub dataset: String,
    pub k: usize,
    pub ndcg: f64,
    pub queries: usize,
    pub run_sha256: String,
    pub qrels_sha256: String,
    pub seed: u64,
}

/// Merges evaluation summaries (first is the teacher) and benchmark results
/// into retention and speedup tables.
pub fn merge_reports(
    teacher: &[EvalSummary],
    students: &[EvalSummary],
    bench: &[BenchResult],
) -> Result<(Vec<MetricsReport>, Option<SpeedupTable>)> {
    let teacher_by_dataset: BTreeMap<&str, f64> =
        teacher.iter().map(|t| (t.dataset.as_str(), t.ndcg)).collect();
    let mut by_model: BTreeMap<&str, Vec<ReportRow>> = BTreeMap::new();
    for s in students {
        let t = teacher_by_dataset.get(s.dataset.as_str()).ok_or_else(|| {
            Error::Input(format!("no teacher evaluation for dataset {:?}", s.dataset))
        })?;
        by_model
            .entry(s.model.as_str())
            .or_default()
            .push(ReportRow::new(&s.dataset, *t, s.ndcg)?);
    }
    let metrics = by_model
        .into_iter()
        .map(|(m, rows)| MetricsReport::new(m, rows))
        .collect::<Result<Vec<_>>>()?;
    let speedups = if bench.is_empty() { None } else { Some(compare(bench)?) };
    Ok((metrics, speedups))
}
