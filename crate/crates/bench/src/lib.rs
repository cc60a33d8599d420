//! Shared fixtures for the criterion benchmarks under `benches/`.

use std::sync::Arc;

use asymdistill::toy::{ToyConfig, ToyDataset};
use asymdistill::{DenseIndex, EncoderConfig, EncoderModel, LayerScheme, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy queries and vocabulary, generated in memory.
pub fn toy() -> ToyDataset {
    ToyDataset::generate(&ToyConfig {
        distill_queries: 512,
        ..ToyConfig::default()
    })
    .expect("toy dataset generates")
}

/// A random 12-layer desk-scale encoder and students extracted from it,
/// as `(label, model)` with the full model first.
pub fn depth_ladder(ds: &ToyDataset) -> Vec<(String, EncoderModel)> {
    let vocab = Arc::new(ds.vocab.clone());
    let cfg = EncoderConfig::desk(vocab.len(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = EncoderModel::random(cfg, vocab, "full", &mut rng).expect("valid config");
    let mut out = Vec::new();
    for layers in [vec![0], vec![0, 11], vec![0, 1, 10, 11]] {
        let scheme = LayerScheme::new(layers, 12).expect("valid scheme");
        let student = asymdistill::extract_layers(&full, &scheme).expect("extraction");
        out.push((format!("{}L", scheme.len()), student));
    }
    out.insert(0, ("12L".to_string(), full));
    out
}

/// Random unit-scale index of `n` documents in `d` dimensions.
pub fn random_index(n: usize, d: usize, seed: u64) -> DenseIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n).map(|i| format!("doc{i:06}")).collect();
    let data = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    DenseIndex::new(ids, Tensor::new(vec![n, d], data).expect("shape"), "random").expect("unique ids")
}

pub fn random_query(d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}
