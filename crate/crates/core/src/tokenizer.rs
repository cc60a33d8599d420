//! Lowercasing, whitespace-splitting WordPiece tokenizer.
//!
//! Words are segmented by greedy longest match against the vocabulary, with
//! non-initial pieces carrying the `##` prefix. A word that cannot be fully
//! segmented becomes a single `[UNK]`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION: &str = "##";

/// Words longer than this (in chars) map straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pad: usize,
    unk: usize,
    cls: usize,
    sep: usize,
}

impl Vocab {
    /// Builds a vocabulary where token `i` has id `i`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!(
                    "vocab line {i}: token {tok:?} is empty or contains whitespace"
                )));
            }
            if ids.insert(tok.clone(), i).is_some() {
                return Err(Error::Input(format!("vocab token {tok:?} appears twice")));
            }
        }
        let reserved = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Input(format!("vocab lacks reserved token {name}")))
        };
        Ok(Vocab {
            pad: reserved(PAD)?,
            unk: reserved(UNK)?,
            cls: reserved(CLS)?,
            sep: reserved(SEP)?,
            tokens,
            ids,
        })
    }

    /// One token per line; the line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect::<Vec<_>>();
        Self::new(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::model_io::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    fn push_word(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&chars[start..end]);
                if let Some(&id) = self.ids.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.unk);
                    return;
                }
            }
        }
    }

    /// `[CLS] pieces… [SEP]`, truncated to `max_len` while keeping `[SEP]`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Contract(format!("max_len {max_len} < 2")));
        }
        let lowered = text.to_lowercase();
        let mut ids = vec![self.cls];
        for word in lowered.split_whitespace() {
            self.push_word(word, &mut ids);
            if ids.len() >= max_len - 1 {
                break;
            }
        }
        ids.truncate(max_len - 1);
        ids.push(self.sep);
        Ok(ids)
    }

    /// Tokenizes and pads to the longest row of this batch.
    pub fn batch_encode<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> Result<EncodedBatch> {
        if texts.is_empty() {
            return Err(Error::Contract("batch_encode needs at least one text".into()));
        }
        let rows = texts
            .iter()
            .map(|t| self.tokenize(t.as_ref(), max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedBatch::from_rows(&rows, self.pad))
    }
}

/// Padded token ids with their attention mask, both `[batch × len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub batch: usize,
    pub len: usize,
}

impl EncodedBatch {
    /// Pads pre-tokenized rows (each already wrapped in `[CLS]`/`[SEP]`).
    pub fn from_rows(rows: &[Vec<usize>], pad_id: usize) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(rows.len() * len);
        let mut attention_mask = Vec::with_capacity(rows.len() * len);
        for row in rows {
            token_ids.extend_from_slice(row);
            token_ids.extend(std::iter::repeat_n(pad_id, len - row.len()));
            attention_mask.extend(std::iter::repeat_n(1u8, row.len()));
            attention_mask.extend(std::iter::repeat_n(0u8, len - row.len()));
        }
        EncodedBatch {
            token_ids,
            attention_mask,
            batch: rows.len(),
            len,
        }
    }

    pub fn row_ids(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.len..(i + 1) * self.len]
    }

    pub fn row_mask(&self, i: usize) -> &[u8] {
        &self.attention_mask[i * self.len..(i + 1) * self.len]
    }

    /// Row `i` without its padding.
    pub fn unpadded(&self, i: usize) -> &[usize] {
        let real = self.row_mask(i).iter().filter(|m| **m == 1).count();
        &self.row_ids(i)[..real]
    }
}
