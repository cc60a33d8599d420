//! Synthetic topic-matching retrieval data and a small contrastively trained
//! teacher, for end-to-end runs on a laptop.
//!
//! Every topic owns a set of invented words. A document mixes words from one
//! topic with shared filler words and emphasizes a subset of its topic's
//! words ("keys"). A query names a few keys of one target document: that
//! document is graded 2 and the other documents of the topic are graded 1.

use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Document, Query};
use crate::distill::{apply_update, lr_at, AdamW, TrainConfig};
use crate::encoder::{embed_batch, EncoderConfig, EncoderModel, Pooling};
use crate::error::{Error, Result};
use crate::evaluation::Qrels;
use crate::numerics::Tape;
use crate::tokenizer::{Vocab, CLS, PAD, SEP, UNK};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.tsv";
pub const DISTILL_QUERIES_FILE: &str = "distill_queries.txt";
pub const TRAIN_PAIRS_FILE: &str = "train_pairs.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub topics: usize,
    pub words_per_topic: usize,
    pub keys_per_doc: usize,
    pub docs_per_topic: usize,
    pub filler_words: usize,
    pub eval_queries: usize,
    pub distill_queries: usize,
    pub train_pairs: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 42,
            topics: 50,
            words_per_topic: 8,
            keys_per_doc: 4,
            docs_per_topic: 4,
            filler_words: 60,
            eval_queries: 100,
            distill_queries: 2000,
            train_pairs: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub vocab: Vocab,
    pub corpus: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub distill_queries: Vec<String>,
    /// `(query, relevant document text)` pairs for teacher training.
    pub train_pairs: Vec<(String, String)>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn invent_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(rng).expect("non-empty"),
                    VOWELS.choose(rng).expect("non-empty")
                )
            })
            .collect();
        // a trailing "s" would collide with the plural suffix piece
        if !w.ends_with('s') && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct DocPlan {
    topic: usize,
    keys: Vec<usize>,
}

fn sample_query(plan: &DocPlan, topic_words: &[Vec<String>], fillers: &[String], rng: &mut ChaCha8Rng) -> String {
    let take = rng.random_range(2..=3.min(plan.keys.len()));
    let mut words: Vec<String> = plan
        .keys
        .choose_multiple(rng, take)
        .map(|k| topic_words[plan.topic][*k].clone())
        .collect();
    if rng.random_bool(0.5) {
        words.push(fillers.choose(rng).expect("fillers").clone());
    }
    words.shuffle(rng);
    words.join(" ")
}

impl ToyDataset {
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        if cfg.topics == 0 || cfg.docs_per_topic == 0 || cfg.filler_words == 0 {
            return Err(Error::Input("toy topics, docs and fillers must be >= 1".into()));
        }
        if cfg.keys_per_doc < 2 || cfg.keys_per_doc > cfg.words_per_topic {
            return Err(Error::Input("keys_per_doc must lie in [2, words_per_topic]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let words = invent_words(cfg.topics * cfg.words_per_topic + cfg.filler_words, &mut rng);
        let topic_words: Vec<Vec<String>> = words[..cfg.topics * cfg.words_per_topic]
            .chunks(cfg.words_per_topic)
            .map(<[String]>::to_vec)
            .collect();
        let fillers = words[cfg.topics * cfg.words_per_topic..].to_vec();

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].map(String::from).to_vec();
        tokens.push("##s".into());
        tokens.extend(words.iter().cloned());
        let vocab = Vocab::new(tokens)?;

        let mut plans = Vec::new();
        let mut corpus = Vec::new();
        for topic in 0..cfg.topics {
            for j in 0..cfg.docs_per_topic {
                let mut all: Vec<usize> = (0..cfg.words_per_topic).collect();
                all.shuffle(&mut rng);
                let keys = all[..cfg.keys_per_doc].to_vec();
                let len = rng.random_range(16..=24);
                let text: Vec<String> = (0..len)
                    .map(|_| {
                        let mut w = if rng.random_bool(0.5) {
                            let k = if rng.random_bool(0.8) {
                                *keys.choose(&mut rng).expect("keys")
                            } else {
                                rng.random_range(0..cfg.words_per_topic)
                            };
                            topic_words[topic][k].clone()
                        } else {
                            fillers.choose(&mut rng).expect("fillers").clone()
                        };
                        if rng.random_bool(0.1) {
                            w.push('s');
                        }
                        w
                    })
                    .collect();
                corpus.push(Document {
                    id: format!("d{:03}-{j}", topic),
                    text: text.join(" "),
                });
                plans.push(DocPlan { topic, keys });
            }
        }

        let mut queries = Vec::new();
        let mut qrels = Qrels::new();
        for i in 0..cfg.eval_queries {
            let target = rng.random_range(0..plans.len());
            let id = format!("q{i:03}");
            let text = sample_query(&plans[target], &topic_words, &fillers, &mut rng);
            let topic = plans[target].topic;
            for j in 0..cfg.docs_per_topic {
                let doc = topic * cfg.docs_per_topic + j;
                qrels.insert(id.clone(), corpus[doc].id.clone(), if doc == target { 2 } else { 1 });
            }
            queries.push(Query { id, text });
        }
        let distill_queries = (0..cfg.distill_queries)
            .map(|_| {
                let p = plans.choose(&mut rng).expect("plans");
                sample_query(p, &topic_words, &fillers, &mut rng)
            })
            .collect();
        let train_pairs = (0..cfg.train_pairs)
            .map(|_| {
                let d = rng.random_range(0..plans.len());
                (sample_query(&plans[d], &topic_words, &fillers, &mut rng), corpus[d].text.clone())
            })
            .collect();
        Ok(ToyDataset {
            vocab,
            corpus,
            queries,
            qrels,
            distill_queries,
            train_pairs,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(dir.join(VOCAB_FILE))?;
        data::write_text(dir.join(CORPUS_FILE), &data::corpus_to_jsonl(&self.corpus))?;
        data::write_text(dir.join(QUERIES_FILE), &data::queries_to_jsonl(&self.queries))?;
        data::write_text(dir.join(QRELS_FILE), &self.qrels.to_tsv())?;
        let mut dq = self.distill_queries.join("\n");
        dq.push('\n');
        data::write_text(dir.join(DISTILL_QUERIES_FILE), &dq)?;
        let pairs: String = self
            .train_pairs
            .iter()
            .map(|(q, d)| format!("{q}\t{d}\n"))
            .collect();
        data::write_text(dir.join(TRAIN_PAIRS_FILE), &pairs)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let pairs_path = dir.join(TRAIN_PAIRS_FILE);
        let pairs_text = std::fs::read_to_string(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
        let train_pairs = pairs_text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('\t')
                    .map(|(q, d)| (q.to_string(), d.to_string()))
                    .ok_or_else(|| Error::parse(&pairs_path, "expected 'query<TAB>document'"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyDataset {
            vocab: Vocab::load(dir.join(VOCAB_FILE))?,
            corpus: data::load_corpus(dir.join(CORPUS_FILE))?,
            queries: data::load_queries(dir.join(QUERIES_FILE))?,
            qrels: Qrels::load(dir.join(QRELS_FILE))?,
            distill_queries: data::load_query_texts(dir.join(DISTILL_QUERIES_FILE))?,
            train_pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Multiplies dot scores before the in-batch softmax.
    pub score_scale: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            seed: 7,
            num_layers: 6,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            max_len: 64,
            pooling: Pooling::Mean,
            batch_size: 32,
            steps: 300,
            learning_rate: 5e-4,
            warmup_steps: 30,
            score_scale: 0.25,
        }
    }
}

/// Trains a siamese encoder on `(query, document)` pairs with in-batch
/// negatives. Each batch draws pairs whose documents are all distinct.
pub fn train_teacher(
    pairs: &[(String, String)],
    vocab: Arc<Vocab>,
    cfg: &TeacherTrainConfig,
) -> Result<EncoderModel> {
    if pairs.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::Input("teacher training needs >= 2 pairs and batch_size >= 2".into()));
    }
    let config = EncoderConfig {
        num_layers: cfg.num_layers,
        hidden_dim: cfg.hidden_dim,
        num_heads: cfg.num_heads,
        ff_dim: cfg.ff_dim,
        max_len: cfg.max_len,
        vocab_size: vocab.len(),
        pooling: cfg.pooling,
        ..EncoderConfig::desk(vocab.len(), cfg.num_layers)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EncoderModel::random(config, vocab, format!("toy-teacher-{}l", cfg.num_layers), &mut rng)?;
    let schedule = TrainConfig {
        learning_rate: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::from_config(&schedule);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.steps {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        let mut docs_in_batch = std::collections::HashSet::new();
        let mut scanned = 0;
        while batch_idx.len() < cfg.batch_size && scanned < pairs.len() {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            scanned += 1;
            if docs_in_batch.insert(pairs[i].1.as_str()) {
                batch_idx.push(i);
            }
        }
        let b = batch_idx.len();
        if b < 2 {
            return Err(Error::Input("fewer than two distinct documents in the pairs".into()));
        }
        let qs: Vec<&str> = batch_idx.iter().map(|i| pairs[*i].0.as_str()).collect();
        let ds: Vec<&str> = batch_idx.iter().map(|i| pairs[*i].1.as_str()).collect();
        let tape = Tape::new();
        let params = model.weights.bind(&tape, true);
        let d = model.hidden_dim();
        let q = embed_batch(&tape, &params, &model.config, &model.tokenize_batch(&qs)?)?;
        let p = embed_batch(&tape, &params, &model.config, &model.tokenize_batch(&ds)?)?;
        let q3 = tape.reshape(&q, vec![1, b, d])?;
        let p3 = tape.reshape(&p, vec![1, b, d])?;
        let scores = tape.bmm(&q3, &p3, true)?;
        let scores = tape.reshape(&scores, vec![b, b])?;
        let logits = tape.scale(&scores, cfg.score_scale as f32)?;
        let targets: Vec<usize> = (0..b).collect();
        let loss = tape.cross_entropy(&logits, &targets)?;
        let grads = tape.backward(&loss)?;
        apply_update(&mut model.weights, &params, &grads, &mut opt, lr_at(step, &schedule))?;
    }
    model
        .meta
        .notes
        .push(format!("contrastive toy teacher, {} steps, seed {}", cfg.steps, cfg.seed));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            topics: 6,
            docs_per_topic: 3,
            eval_queries: 10,
            distill_queries: 30,
            train_pairs: 40,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let a = ToyDataset::generate(&small()).unwrap();
        let b = ToyDataset::generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.corpus.len(), 18);
        assert_eq!(a.queries.len(), 10);
        for q in &a.queries {
            let g = a.qrels.for_query(&q.id).unwrap();
            assert_eq!(g.values().filter(|v| **v == 2).count(), 1);
            assert_eq!(g.len(), 3);
        }
        let unk = a.vocab.unk_id();
        for d in &a.corpus {
            assert!(!a.vocab.tokenize(&d.text, 64).unwrap().contains(&unk));
        }
        let other = ToyDataset::generate(&ToyConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.corpus, other.corpus);
    }

    #[test]
    fn files_round_trip() {
        let a = ToyDataset::generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(ToyDataset::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn teacher_training_is_deterministic() {
        let ds = ToyDataset::generate(&small()).unwrap();
        let cfg = TeacherTrainConfig {
            num_layers: 1,
            hidden_dim: 16,
            num_heads: 2,
            ff_dim: 32,
            batch_size: 6,
            steps: 3,
            ..TeacherTrainConfig::default()
        };
        let vocab = Arc::new(ds.vocab.clone());
        let a = train_teacher(&ds.train_pairs, vocab.clone(), &cfg).unwrap();
        let b = train_teacher(&ds.train_pairs, vocab, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.config.num_layers, 1);
    }
}
