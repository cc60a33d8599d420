//! nDCG@k scoring, teacher-relative change and retention aggregation.
//!
//! Gain is linear in the relevance grade and the discount at rank `i`
//! (1-based) is `log2(i + 1)`. A query with no relevant documents scores 0
//! and still counts toward the mean.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::write_atomic;
use crate::retrieval::Run;

/// Relevance grades per query; absent documents have grade 0.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) {
        self.grades.entry(query.into()).or_default().insert(doc.into(), grade);
    }

    pub fn for_query(&self, query: &str) -> Option<&HashMap<String, u32>> {
        self.grades.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    /// `query-id<TAB>corpus-id<TAB>score` lines; a first line whose score
    /// column is not an integer is taken as a header.
    pub fn parse(text: &str) -> Result<Self> {
        let mut q = Qrels::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Input(format!(
                    "qrels line {}: expected 3 tab-separated fields",
                    n + 1
                )));
            }
            let grade = match f[2].trim().parse::<i64>() {
                Ok(g) => g,
                Err(_) if n == 0 => continue,
                Err(_) => {
                    return Err(Error::Input(format!("qrels line {}: score {:?} is not an integer", n + 1, f[2])))
                }
            };
            if grade < 0 {
                return Err(Error::Input(format!("qrels line {}: negative grade {grade}", n + 1)));
            }
            q.insert(f[0], f[1], grade as u32);
        }
        Ok(q)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("query-id\tcorpus-id\tscore\n");
        for (q, docs) in &self.grades {
            let mut docs: Vec<_> = docs.iter().collect();
            docs.sort();
            for (d, g) in docs {
                out.push_str(&format!("{q}\t{d}\t{g}\n"));
            }
        }
        out
    }
}

fn discount(rank0: usize) -> f64 {
    ((rank0 + 2) as f64).log2()
}

/// nDCG@k of one ranked list; `0` when the query has no relevant documents.
pub fn ndcg_at_k<D: AsRef<str>>(ranked: &[D], grades: Option<&HashMap<String, u32>>, k: usize) -> f64 {
    let Some(grades) = grades else {
        return 0.0;
    };
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| grades.get(d.as_ref()).copied().unwrap_or(0) as f64 / discount(i))
        .sum();
    let mut ideal: Vec<u32> = grades.values().copied().filter(|g| *g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| *g as f64 / discount(i))
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Per-query nDCG@k for every query of `run`.
pub fn per_query_ndcg(run: &Run, qrels: &Qrels, k: usize) -> BTreeMap<String, f64> {
    run.iter()
        .map(|(q, list)| {
            let ids: Vec<&str> = list.iter().map(|(d, _)| d.as_str()).collect();
            (q.clone(), ndcg_at_k(&ids, qrels.for_query(q), k))
        })
        .collect()
}

/// Mean nDCG@k over the queries of `run`.
pub fn evaluate_run(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    if run.is_empty() {
        return Err(Error::Input("cannot evaluate an empty run".into()));
    }
    let per = per_query_ndcg(run, qrels, k);
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// `(student − teacher) / teacher`.
pub fn relative_change(student: f64, teacher: f64) -> Result<f64> {
    if !(teacher > 0.0) {
        return Err(Error::Input(format!("teacher metric {teacher} must be > 0")));
    }
    Ok((student - teacher) / teacher)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub teacher: f64,
    pub student: f64,
    pub relative_change: f64,
}

impl ReportRow {
    pub fn new(dataset: impl Into<String>, teacher: f64, student: f64) -> Result<Self> {
        Ok(ReportRow {
            dataset: dataset.into(),
            teacher,
            student,
            relative_change: relative_change(student, teacher)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_relative_change: f64,
    pub retention: f64,
}

/// Unweighted mean of relative changes; retention is `1 + mean`.
pub fn aggregate(changes: &[f64]) -> Result<Aggregate> {
    if changes.is_empty() {
        return Err(Error::Input("aggregate needs at least one row".into()));
    }
    let mut sorted = changes.to_vec();
    // summing in a fixed order keeps the result independent of row order
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(Aggregate {
        mean_relative_change: mean,
        retention: 1.0 + mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub student: String,
    pub rows: Vec<ReportRow>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(student: impl Into<String>, rows: Vec<ReportRow>) -> Result<Self> {
        let changes: Vec<f64> = rows.iter().map(|r| r.relative_change).collect();
        Ok(MetricsReport {
            student: student.into(),
            aggregate: aggregate(&changes)?,
            rows,
        })
    }

    pub fn csv_header() -> &'static str {
        "student,dataset,teacher_ndcg10,student_ndcg10,relative_change\n"
    }

    /// Body rows plus an `AVERAGE` row carrying mean change and retention.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                self.student, r.dataset, r.teacher, r.student, r.relative_change
            ));
        }
        out.push_str(&format!(
            "{},AVERAGE,,{:.6},{:.6}\n",
            self.student, self.aggregate.retention, self.aggregate.mean_relative_change
        ));
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_table(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.dataset.len())
            .max()
            .unwrap_or(0)
            .max("Avg. change".len());
        let mut out = format!(
            "{:<w$}  {:>8}  {:>8}  {:>8}\n",
            "dataset", "teacher", self.student.chars().take(8).collect::<String>(), "change"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<w$}  {:>8.4}  {:>8.4}  {:>7.2}%\n",
                r.dataset,
                r.teacher,
                r.student,
                100.0 * r.relative_change
            ));
        }
        out.push_str(&format!(
            "{:<w$}  {:>8}  {:>8}  {:>7.2}%\n",
            "Avg. change",
            "",
            "",
            100.0 * self.aggregate.mean_relative_change
        ));
        out.push_str(&format!(
            "{:<w$}  {:>8}  {:>8}  {:>7.2}%\n",
            "Retention",
            "",
            "",
            100.0 * self.aggregate.retention
        ));
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grades(pairs: &[(&str, u32)]) -> HashMap<String, u32> {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let g = grades(&[("a", 2), ("b", 1)]);
        assert!((ndcg_at_k(&["a", "b", "c"], Some(&g), 10) - 1.0).abs() < 1e-12);
        let one = grades(&[("x", 1)]);
        let v = ndcg_at_k(&["y", "x"], Some(&one), 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["y", "z"], Some(&one), 10), 0.0);
        assert_eq!(ndcg_at_k(&["y"], None, 10), 0.0);
        assert_eq!(ndcg_at_k(&["y"], Some(&grades(&[("y", 0)])), 10), 0.0);
        assert_eq!(ndcg_at_k::<&str>(&[], Some(&one), 10), 0.0);
    }

    #[test]
    fn evaluate_run_means_over_run_queries() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1);
        let mut run = Run::new();
        run.insert("q1".into(), vec![("a".into(), 1.0)]);
        assert_eq!(evaluate_run(&run, &qrels, 10).unwrap(), 1.0);
        run.insert("q2".into(), vec![("a".into(), 1.0)]);
        assert_eq!(evaluate_run(&run, &qrels, 10).unwrap(), 0.5);
        assert!(evaluate_run(&Run::new(), &qrels, 10).is_err());
    }

    #[test]
    fn relative_change_examples() {
        assert!((relative_change(0.9, 1.0).unwrap() + 0.1).abs() < 1e-12);
        assert_eq!(relative_change(0.3, 0.3).unwrap(), 0.0);
        let teacher = 0.415 / (1.0 - 0.0658);
        assert!((relative_change(0.415, teacher).unwrap() + 0.0658).abs() < 1e-12);
        assert!(relative_change(0.1, 0.0).is_err());
        assert!(relative_change(0.1, -1.0).is_err());
        assert!(relative_change(0.1, f64::NAN).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert!(aggregate(&[]).is_err());
        assert_eq!(aggregate(&[-0.25]).unwrap().mean_relative_change, -0.25);
        assert_eq!(aggregate(&[0.0, 0.0]).unwrap().retention, 1.0);
    }

    #[test]
    fn qrels_parsing() {
        let q = Qrels::parse("query-id\tcorpus-id\tscore\nq1\td1\t2\nq1\td2\t0\r\nq2\td1\t1\n").unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q.for_query("q1").unwrap()["d1"], 2);
        assert_eq!(Qrels::parse(&q.to_tsv()).unwrap(), q);
        assert!(Qrels::parse("q1\td1\t-1\n").is_err());
        assert!(Qrels::parse("q1\td1\t1\nq1\td2\tx\n").is_err());
        assert!(Qrels::parse("q1 d1 1\n").is_err());
    }

    #[test]
    fn report_rendering() {
        let rows = vec![
            ReportRow::new("toy", 0.5, 0.45).unwrap(),
            ReportRow::new("other", 0.4, 0.4).unwrap(),
        ];
        let r = MetricsReport::new("s2", rows).unwrap();
        assert!((r.aggregate.retention - 0.95).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.contains("s2,toy,0.500000,0.450000,-0.100000\n"));
        assert!(csv.ends_with("s2,AVERAGE,,0.950000,-0.050000\n"));
        assert!(r.to_table().contains("Retention"));
    }

    proptest! {
        #[test]
        fn aggregate_ignores_row_order(mut v in prop::collection::vec(-1.0f64..1.0, 1..20), seed in any::<u64>()) {
            let a = aggregate(&v).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            prop_assert_eq!(aggregate(&v).unwrap(), a);
        }
    }
}
