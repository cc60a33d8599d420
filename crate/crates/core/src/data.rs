//! Corpus, query and unlabeled-query files.
//!
//! Corpora and labeled queries are JSON lines with `_id` and `text` (and an
//! optional `title`, joined in front of the text with a space). Labeled
//! queries may also be `qid<TAB>text` lines. Unlabeled distillation queries
//! are plain text or JSON lines, one per line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::write_atomic;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    text: String,
}

impl Record {
    fn joined(self) -> (String, String) {
        let text = match self.title {
            Some(t) if !t.is_empty() => format!("{t} {}", self.text),
            _ => self.text,
        };
        (self.id, text)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_records(text: &str, allow_tsv: bool) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = if line.trim_start().starts_with('{') {
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
            r.joined()
        } else if allow_tsv {
            let (id, body) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("line {}: expected JSON or 'id<TAB>text'", n + 1)))?;
            (id.to_string(), body.to_string())
        } else {
            return Err(Error::Input(format!("line {}: expected a JSON object", n + 1)));
        };
        if !seen.insert(id.clone()) {
            return Err(Error::Input(format!("line {}: duplicate id {id:?}", n + 1)));
        }
        out.push((id, body));
    }
    Ok(out)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    Ok(parse_records(text, false)?
        .into_iter()
        .map(|(id, text)| Document { id, text })
        .collect())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    parse_corpus(&read(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn parse_queries(text: &str) -> Result<Vec<Query>> {
    Ok(parse_records(text, true)?
        .into_iter()
        .map(|(id, text)| Query { id, text })
        .collect())
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    parse_queries(&read(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

/// Query texts, one per non-empty line, as plain text or JSON lines.
pub fn parse_query_texts(text: &str) -> Result<Vec<String>> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            if l.trim_start().starts_with('{') {
                serde_json::from_str::<Record>(l)
                    .map(|r| r.joined().1)
                    .map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))
            } else {
                Ok(l.to_string())
            }
        })
        .collect()
}

pub fn load_query_texts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    parse_query_texts(&read(path)?).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn corpus_to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let r = Record {
            id: d.id.clone(),
            title: None,
            text: d.text.clone(),
        };
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn queries_to_jsonl(queries: &[Query]) -> String {
    let docs: Vec<Document> = queries
        .iter()
        .map(|q| Document {
            id: q.id.clone(),
            text: q.text.clone(),
        })
        .collect();
    corpus_to_jsonl(&docs)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}
