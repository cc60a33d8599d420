//! Exhaustive dot-product search over a teacher-built document index.
//!
//! Scores are 32-bit and accumulated left to right over the embedding
//! dimension. Equal scores are ordered by ascending doc id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Document, Query};
use crate::encoder::{EncoderModel, DEFAULT_ENCODE_BATCH};
use crate::error::{Error, Result};
use crate::model_io::write_atomic;
use crate::numerics::Tensor;

const INDEX_MAGIC: &[u8; 4] = b"ADIX";

/// Per query id, documents in rank order with their scores.
pub type Run = BTreeMap<String, Vec<(String, f32)>>;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    doc_ids: Vec<String>,
    embeddings: Tensor<f32>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    fingerprint: String,
    dim: usize,
    doc_ids: Vec<String>,
}

impl DenseIndex {
    pub fn new(doc_ids: Vec<String>, embeddings: Tensor<f32>, fingerprint: impl Into<String>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != doc_ids.len() {
            return Err(Error::dim(
                "index",
                format!("{} ids for embeddings {:?}", doc_ids.len(), embeddings.shape()),
            ));
        }
        let mut seen = HashSet::with_capacity(doc_ids.len());
        for id in &doc_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Input(format!("duplicate doc id {id:?}")));
            }
        }
        Ok(DenseIndex {
            doc_ids,
            embeddings,
            fingerprint: fingerprint.into(),
        })
    }

    /// Encodes every document with `encoder`.
    pub fn build(corpus: &[Document], encoder: &EncoderModel) -> Result<Self> {
        let ids: Vec<String> = corpus.iter().map(|d| d.id.clone()).collect();
        let d = encoder.hidden_dim();
        let embeddings = if corpus.is_empty() {
            Tensor::zeros(vec![0, d])
        } else {
            let texts: Vec<&str> = corpus.iter().map(|d| d.text.as_str()).collect();
            encoder.encode_batched(&texts, DEFAULT_ENCODE_BATCH)?
        };
        Self::new(ids, embeddings, encoder.fingerprint())
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn embeddings(&self) -> &Tensor<f32> {
        &self.embeddings
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Top `k` documents for one query embedding.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(String, f32)>> {
        if query.len() != self.dim() {
            return Err(Error::dim(
                "search",
                format!("query is {}-d, index is {}-d", query.len(), self.dim()),
            ));
        }
        if k == 0 {
            return Err(Error::Contract("k must be >= 1".into()));
        }
        let mut scored: Vec<(usize, f32)> = (0..self.len())
            .map(|i| (i, dot(query, self.embeddings.row(i))))
            .collect();
        let by_rank = |a: &(usize, f32), b: &(usize, f32)| -> Ordering {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_by(by_rank);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.doc_ids[i].clone(), s))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = IndexHeader {
            fingerprint: self.fingerprint.clone(),
            dim: self.dim(),
            doc_ids: self.doc_ids.clone(),
        };
        let json = serde_json::to_vec(&header).expect("index header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + self.embeddings.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.embeddings.data() {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
        write_atomic(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::parse(path, detail.to_string());
        if bytes.len() < 12 || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("not an index file"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: IndexHeader =
            serde_json::from_slice(body).map_err(|e| Error::parse(path, e.to_string()))?;
        let payload = &bytes[12 + hlen..];
        if payload.len() != header.doc_ids.len() * header.dim * 4 {
            return Err(bad("payload length does not match header"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let emb = Tensor::new(vec![header.doc_ids.len(), header.dim], data)?;
        Self::new(header.doc_ids, emb, header.fingerprint)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Encodes `queries` with `encoder` and searches each against `index`.
pub fn run_retrieval(
    queries: &[Query],
    index: &DenseIndex,
    encoder: &EncoderModel,
    k: usize,
) -> Result<Run> {
    if encoder.hidden_dim() != index.dim() {
        return Err(Error::dim(
            "run_retrieval",
            format!(
                "query encoder is {}-d, index is {}-d",
                encoder.hidden_dim(),
                index.dim()
            ),
        ));
    }
    let mut seen = HashSet::with_capacity(queries.len());
    for q in queries {
        if !seen.insert(q.id.as_str()) {
            return Err(Error::Input(format!("duplicate query id {:?}", q.id)));
        }
    }
    let mut run = Run::new();
    if queries.is_empty() {
        return Ok(run);
    }
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let emb = encoder.encode_batched(&texts, DEFAULT_ENCODE_BATCH)?;
    for (i, q) in queries.iter().enumerate() {
        run.insert(q.id.clone(), index.search(emb.row(i), k)?);
    }
    Ok(run)
}

/// `qid Q0 docid rank score tag` lines, ranks starting at 1.
pub fn run_to_trec(run: &Run, tag: &str) -> String {
    let mut out = String::new();
    for (qid, list) in run {
        for (rank, (doc, score)) in list.iter().enumerate() {
            out.push_str(&format!("{qid} Q0 {doc} {} {score:?} {tag}\n", rank + 1));
        }
    }
    out
}

pub fn write_trec(run: &Run, tag: &str, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), run_to_trec(run, tag).as_bytes())
}

pub fn parse_trec(text: &str) -> Result<Run> {
    let mut rows: BTreeMap<String, Vec<(usize, String, f32)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let err = || Error::Input(format!("run line {}: expected 'qid Q0 docid rank score tag'", n + 1));
        if f.len() != 6 {
            return Err(err());
        }
        let rank: usize = f[3].parse().map_err(|_| err())?;
        let score: f32 = f[4].parse().map_err(|_| err())?;
        rows.entry(f[0].to_string())
            .or_default()
            .push((rank, f[2].to_string(), score));
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut list)| {
            list.sort_by_key(|r| r.0);
            (q, list.into_iter().map(|(_, d, s)| (d, s)).collect())
        })
        .collect())
}

pub fn read_trec(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trec(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[(&str, &[f32])]) -> DenseIndex {
        let d = rows.first().map_or(2, |r| r.1.len());
        let ids = rows.iter().map(|r| r.0.to_string()).collect();
        let data = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        DenseIndex::new(ids, Tensor::new(vec![rows.len(), d], data).unwrap(), "x").unwrap()
    }

    #[test]
    fn search_example() {
        let idx = index(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let hits = idx.search(&[1.0, 0.5], 2).unwrap();
        assert_eq!(hits, vec![("a".to_string(), 1.0), ("b".to_string(), 0.5)]);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = index(&[("c", &[1.0, 0.0]), ("a", &[1.0, 0.0]), ("b", &[1.0, 0.0])]);
        let ids: Vec<String> = idx.search(&[2.0, 0.0], 2).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(ids, ["a", "b"]);
        let zero: Vec<String> = idx.search(&[0.0, 0.0], 10).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(zero, ["a", "b", "c"]);
    }

    #[test]
    fn k_beyond_corpus_and_errors() {
        let idx = index(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[1.0, 1.0])]);
        assert_eq!(idx.search(&[1.0, 1.0], 10).unwrap().len(), 3);
        assert!(matches!(idx.search(&[1.0], 1), Err(Error::Dimension { .. })));
        assert!(idx.search(&[1.0, 1.0], 0).is_err());
        let dup = DenseIndex::new(
            vec!["a".into(), "a".into()],
            Tensor::zeros(vec![2, 2]),
            "x",
        );
        assert!(dup.is_err());
    }

    #[test]
    fn empty_index_is_searchable() {
        let idx = DenseIndex::new(vec![], Tensor::zeros(vec![0, 4]), "x").unwrap();
        assert!(idx.search(&[0.0; 4], 10).unwrap().is_empty());
    }

    #[test]
    fn index_file_round_trip() {
        let idx = index(&[("a", &[1.0, -0.0]), ("b", &[0.25, 1e-30])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("docs.index");
        idx.save(&p).unwrap();
        let back = DenseIndex::load(&p).unwrap();
        assert!(back.embeddings().bitwise_eq(idx.embeddings()));
        assert_eq!(back.doc_ids(), idx.doc_ids());
        assert_eq!(back.fingerprint(), "x");
        std::fs::write(&p, b"nope").unwrap();
        assert!(DenseIndex::load(&p).is_err());
    }

    #[test]
    fn trec_round_trip() {
        let mut run = Run::new();
        run.insert("q1".into(), vec![("d2".into(), 1.5), ("d1".into(), -0.1)]);
        run.insert("q0".into(), vec![("d9".into(), 3.0e-7)]);
        let text = run_to_trec(&run, "student");
        assert!(text.starts_with("q0 Q0 d9 1 3e-7 student\n"));
        assert_eq!(parse_trec(&text).unwrap(), run);
        assert!(parse_trec("q1 Q0 d1 x 1.0 t").is_err());
    }
}
