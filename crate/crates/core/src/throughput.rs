//! Query-encoding throughput over a sweep of batch sizes.
//!
//! Each batch size gets one untimed warmup pass over two batches, then
//! `repeats` timed passes over the full query set. The timed region
//! covers tokenization and encoding but not model loading or file I/O.
//! Queries per second come from the median pass.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::model_io::write_atomic;

pub const DEFAULT_BATCH_SIZES: [usize; 5] = [4, 8, 16, 32, 64];
pub const DEFAULT_REPEATS: usize = 3;
pub const DEFAULT_QUERY_COUNT: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMeasurement {
    pub batch_size: usize,
    pub elapsed_s: Vec<f64>,
    pub median_s: f64,
    pub qps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub query_count: usize,
    pub repeats: usize,
    pub hardware: String,
    pub measurements: Vec<BatchMeasurement>,
}

pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

/// CPU model and logical core count, best effort.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} ({cores} logical cores, {})", std::env::consts::OS)
}

impl BenchResult {
    /// Builds a result from raw per-batch-size timings.
    pub fn from_samples(
        model: impl Into<String>,
        query_count: usize,
        hardware: impl Into<String>,
        samples: Vec<(usize, Vec<f64>)>,
    ) -> Result<Self> {
        if query_count == 0 {
            return Err(Error::Input("query count must be >= 1".into()));
        }
        let repeats = samples.first().map_or(0, |s| s.1.len());
        let measurements = samples
            .into_iter()
            .map(|(batch_size, elapsed_s)| {
                let median_s = median(&elapsed_s)
                    .ok_or_else(|| Error::Input(format!("no timings for batch size {batch_size}")))?;
                Ok(BatchMeasurement {
                    batch_size,
                    qps: query_count as f64 / median_s,
                    median_s,
                    elapsed_s,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BenchResult {
            model: model.into(),
            query_count,
            repeats,
            hardware: hardware.into(),
            measurements,
        })
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.measurements.iter().map(|m| m.batch_size).collect()
    }

    pub fn qps(&self, batch_size: usize) -> Option<f64> {
        self.measurements
            .iter()
            .find(|m| m.batch_size == batch_size)
            .map(|m| m.qps)
    }

    pub fn csv_header() -> &'static str {
        "model,batch_size,repeat,elapsed_s,qps\n"
    }

    /// One row per repeat, then a `median` summary row per batch size.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for m in &self.measurements {
            for (i, e) in m.elapsed_s.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.3}",
                    self.model,
                    m.batch_size,
                    i + 1,
                    e,
                    self.query_count as f64 / e
                );
            }
            let _ = writeln!(
                out,
                "{},{},median,{:.6},{:.3}",
                self.model, m.batch_size, m.median_s, m.qps
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}{}", Self::csv_header(), self.csv_rows())
    }
}

fn encode_pass(encoder: &EncoderModel, queries: &[String], batch_size: usize) -> Result<()> {
    for chunk in queries.chunks(batch_size) {
        let batch = encoder.tokenize_batch(chunk)?;
        std::hint::black_box(encoder.embed_encoded(&batch)?);
    }
    Ok(())
}

/// Times `encoder` over `queries` at each batch size.
pub fn measure_throughput(
    encoder: &EncoderModel,
    queries: &[String],
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<BenchResult> {
    Ok(measure_many(&[encoder], queries, batch_sizes, repeats)?.remove(0))
}

/// Times several encoders on the same workload.
///
/// Within each batch size the models take turns, one timed pass each per
/// round, so slow drift in machine load lands on every model alike rather
/// than on whichever happened to run during it.
pub fn measure_many(
    encoders: &[&EncoderModel],
    queries: &[String],
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<Vec<BenchResult>> {
    if queries.is_empty() {
        return Err(Error::Input("throughput needs at least one query".into()));
    }
    if encoders.is_empty() || repeats == 0 || batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::Input(
            "models, repeats and batch sizes must be non-empty and >= 1".into(),
        ));
    }
    let mut samples: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); encoders.len()];
    for &bs in batch_sizes {
        let warm = queries.len().min(2 * bs);
        for e in encoders {
            encode_pass(e, &queries[..warm], bs)?;
        }
        let mut times = vec![Vec::with_capacity(repeats); encoders.len()];
        for _ in 0..repeats {
            for (e, t) in encoders.iter().zip(&mut times) {
                let start = Instant::now();
                encode_pass(e, queries, bs)?;
                t.push(start.elapsed().as_secs_f64());
            }
        }
        for (s, t) in samples.iter_mut().zip(times) {
            s.push((bs, t));
        }
    }
    let hardware = hardware_description();
    encoders
        .iter()
        .zip(samples)
        .map(|(e, s)| BenchResult::from_samples(e.meta.model_id.clone(), queries.len(), hardware.clone(), s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupTable {
    pub reference: String,
    pub batch_sizes: Vec<usize>,
    /// `(model, speedup per batch size)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Speedup of every result over the first one, per batch size.
pub fn compare(results: &[BenchResult]) -> Result<SpeedupTable> {
    let reference = results
        .first()
        .ok_or_else(|| Error::Input("compare needs at least one result".into()))?;
    let sizes = reference.batch_sizes();
    for r in results {
        if r.batch_sizes() != sizes {
            return Err(Error::Input(format!(
                "batch sizes {:?} of {} differ from {:?} of {}",
                r.batch_sizes(),
                r.model,
                sizes,
                reference.model
            )));
        }
    }
    let rows = results
        .iter()
        .map(|r| {
            let s = r
                .measurements
                .iter()
                .zip(&reference.measurements)
                .map(|(m, base)| m.qps / base.qps)
                .collect();
            (r.model.clone(), s)
        })
        .collect();
    Ok(SpeedupTable {
        reference: reference.model.clone(),
        batch_sizes: sizes,
        rows,
    })
}

impl SpeedupTable {
    pub fn speedup(&self, model: &str, batch_size: usize) -> Option<f64> {
        let col = self.batch_sizes.iter().position(|b| *b == batch_size)?;
        self.rows.iter().find(|r| r.0 == model).map(|r| r.1[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,batch_size,speedup\n");
        for (model, s) in &self.rows {
            for (b, v) in self.batch_sizes.iter().zip(s) {
                let _ = writeln!(out, "{model},{b},{v:.4}");
            }
        }
        out
    }

    /// Horizontal bars, one block per batch size.
    pub fn to_chart(&self) -> String {
        let width = 40.0;
        let max = self
            .rows
            .iter()
            .flat_map(|r| r.1.iter().copied())
            .fold(1.0f64, f64::max);
        let name_w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = format!("speedup over {}\n", self.reference);
        for (col, b) in self.batch_sizes.iter().enumerate() {
            let _ = writeln!(out, "batch {b}");
            for (model, s) in &self.rows {
                let n = ((s[col] / max) * width).round() as usize;
                let _ = writeln!(out, "  {model:<name_w$} {:<40} {:.2}x", "#".repeat(n), s[col]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qps_uses_median() {
        let r = BenchResult::from_samples("m", 4000, "hw", vec![(32, vec![8.0])]).unwrap();
        assert_eq!(r.qps(32), Some(500.0));
        let times: Vec<f64> = [480.0, 500.0, 520.0].iter().map(|q| 4000.0 / q).collect();
        let r = BenchResult::from_samples("m", 4000, "hw", vec![(4, times)]).unwrap();
        assert!((r.qps(4).unwrap() - 500.0).abs() < 1e-9);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn self_comparison_is_unity() {
        let r = BenchResult::from_samples("m", 10, "hw", vec![(4, vec![1.0, 2.0]), (8, vec![0.5])]).unwrap();
        let t = compare(&[r.clone(), r]).unwrap();
        assert!(t.rows.iter().all(|row| row.1.iter().all(|s| *s == 1.0)));
        assert_eq!(t.speedup("m", 8), Some(1.0));
        assert!(t.to_chart().contains("1.00x"));
    }

    #[test]
    fn mismatched_batch_sets_are_rejected() {
        let a = BenchResult::from_samples("a", 10, "hw", vec![(4, vec![1.0])]).unwrap();
        let b = BenchResult::from_samples("b", 10, "hw", vec![(8, vec![1.0])]).unwrap();
        assert!(compare(&[a, b]).is_err());
        assert!(compare(&[]).is_err());
    }

    #[test]
    fn csv_lists_raw_samples_and_median() {
        let r = BenchResult::from_samples("m", 10, "hw", vec![(4, vec![1.0, 3.0, 2.0])]).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv.contains("m,4,2,3.000000,3.333\n"));
        assert!(csv.ends_with("m,4,median,2.000000,5.000\n"));
    }
}
