//! Building efficient asymmetric dual-encoder retrievers.
//!
//! A shallow student query encoder is initialized from a subset of a
//! teacher's transformer layers, aligned to the teacher's query embeddings,
//! and then scored against the teacher-built document index.

pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model_io;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod throughput;
pub mod tokenizer;
pub mod toy;

pub use data::{Document, Query};
pub use distill::{train, LossKind, TrainConfig, TrainHistory};
pub use encoder::{EncoderConfig, EncoderModel, EncoderWeights, Pooling};
pub use error::{Error, Result};
pub use evaluation::{aggregate, evaluate_run, ndcg_at_k, relative_change, MetricsReport, Qrels};
pub use model_io::{builtin_schemes, extract_layers, LayerScheme, ModelMeta, Provenance};
pub use retrieval::{run_retrieval, DenseIndex, Run};
pub use numerics::{Gradients, Real, Tape, Tensor, Var};
pub use throughput::{compare, measure_many, measure_throughput, BenchResult, SpeedupTable};
pub use tokenizer::{EncodedBatch, Vocab};
