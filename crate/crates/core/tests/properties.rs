mod common;

use std::collections::HashMap;

use asymdistill::data::Query;
use asymdistill::distill::{alignment_loss, validate};
use asymdistill::{
    extract_layers, ndcg_at_k, run_retrieval, train, DenseIndex, EncoderConfig, EncoderModel, LayerScheme, LossKind,
    Tape, Tensor, TrainConfig, Var,
};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian-ish draw.
fn orthogonal(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    q.concat()
}

fn rotate(x: &Tensor<f64>, q: &[f64]) -> Tensor<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    Tensor::from_fn(vec![n, d], |i| {
        let (r, c) = (i / d, i % d);
        (0..d).map(|k| x.row(r)[k] * q[k * d + c]).sum()
    })
}

fn loss_of(s: &Tensor<f64>, t: &Tensor<f64>, kind: LossKind) -> f64 {
    let tape = Tape::new();
    let v = alignment_loss(&tape, &Var::constant(s.clone()), &Var::constant(t.clone()), kind).unwrap();
    v.value().item().unwrap()
}

fn tiny_encoder(layers: usize, seed: u64) -> EncoderModel {
    let vocab = small_vocab();
    let mut cfg = EncoderConfig::desk(vocab.len(), layers);
    cfg.hidden_dim = 16;
    cfg.num_heads = 2;
    cfg.ff_dim = 32;
    cfg.max_len = 12;
    random_encoder(cfg, vocab, seed, 20.0)
}

const WORDS: [&str; 10] = ["red", "blue", "green", "fish", "bird", "tree", "stone", "river", "rivers", "zebra"];

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 0..8).prop_map(|ix| {
        ix.into_iter().map(|i| WORDS[i]).collect::<Vec<_>>().join(" ")
    })
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn loss_is_invariant_under_rotation(n in 1usize..6, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_tensor(&[n, d], &mut rng);
        let t = random_tensor(&[n, d], &mut rng);
        let q = orthogonal(d, seed ^ 0x5eed);
        for kind in [LossKind::Mse, LossKind::Euclidean] {
            let a = loss_of(&s, &t, kind);
            let b = loss_of(&rotate(&s, &q), &rotate(&t, &q), kind);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn ndcg_matches_oracle_and_is_monotone_past_the_relevant_count(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ranked, grades, _) = ndcg_instance(&mut rng);
        let relevant = grades.values().filter(|g| **g > 0).count().max(1);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=ranked.len().max(relevant) + 2 {
            let v = ndcg_at_k(&ranked, Some(&grades), k);
            prop_assert!((v - brute_ndcg(&ranked, &grades, k)).abs() < 1e-9);
            if k >= relevant {
                prop_assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn ndcg_ignores_order_among_equal_grades(seed in any::<u64>(), i in 0usize..40, j in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ranked, grades, k) = ndcg_instance(&mut rng);
        prop_assume!(!ranked.is_empty());
        let (i, j) = (i % ranked.len(), j % ranked.len());
        let g = |d: &String| grades.get(d).copied().unwrap_or(0);
        if g(&ranked[i]) != g(&ranked[j]) {
            return Ok(());
        }
        let before = ndcg_at_k(&ranked, Some(&grades), k);
        ranked.swap(i, j);
        prop_assert!((ndcg_at_k(&ranked, Some(&grades), k) - before).abs() < 1e-12);
    }

    #[test]
    fn search_ranking_is_invariant_to_positive_power_of_two_scaling(seed in any::<u64>(), e in -20i32..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ids, emb, q, k) = search_instance(&mut rng);
        let index = index_of(&ids, &emb);
        let c = 2f32.powi(e);
        let scaled: Vec<f32> = q.iter().map(|x| x * c).collect();
        let a: Vec<String> = index.search(&q, k).unwrap().into_iter().map(|r| r.0).collect();
        let b: Vec<String> = index.search(&scaled, k).unwrap().into_iter().map(|r| r.0).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn search_results_are_sorted_unique_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ids, emb, q, k) = search_instance(&mut rng);
        let hits = index_of(&ids, &emb).search(&q, k).unwrap();
        prop_assert!(hits.len() <= k);
        prop_assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
        let unique: std::collections::HashSet<_> = hits.iter().map(|h| &h.0).collect();
        prop_assert_eq!(unique.len(), hits.len());
    }
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn encoding_is_independent_of_batch_company(texts in prop::collection::vec(text_strategy(), 1..6)) {
        let m = tiny_encoder(2, 3);
        let together = m.encode(&texts).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let alone = m.encode(&[t]).unwrap();
            for (a, b) in alone.row(0).iter().zip(together.row(i)) {
                prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn encoding_commutes_with_permutation(texts in prop::collection::vec(text_strategy(), 1..8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let m = tiny_encoder(1, 4);
        let mut order: Vec<usize> = (0..texts.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<&String> = order.iter().map(|i| &texts[*i]).collect();
        let a = m.encode(&texts).unwrap();
        let b = m.encode(&shuffled).unwrap();
        for (row, i) in order.iter().enumerate() {
            for (x, y) in b.row(row).iter().zip(a.row(*i)) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn validation_distance_ignores_query_order(texts in prop::collection::vec(text_strategy(), 1..10)) {
        let teacher = tiny_encoder(3, 5);
        let student = extract_layers(&teacher, &LayerScheme::new(vec![0], 3).unwrap()).unwrap();
        let mut rev = texts.clone();
        rev.reverse();
        let a = validate(&teacher, &student, &texts).unwrap();
        let b = validate(&teacher, &student, &rev).unwrap();
        prop_assert!((a - b).abs() <= 1e-6 * a.max(1.0));
    }

    #[test]
    fn run_retrieval_is_invariant_to_query_order(texts in prop::collection::vec(text_strategy(), 1..10)) {
        let m = tiny_encoder(1, 6);
        let docs: Vec<asymdistill::Document> = WORDS
            .iter()
            .enumerate()
            .map(|(i, w)| asymdistill::Document { id: format!("d{i}"), text: format!("{w} {w} river") })
            .collect();
        let index = DenseIndex::build(&docs, &m).unwrap();
        let queries: Vec<Query> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Query { id: format!("q{i}"), text: t.clone() })
            .collect();
        let mut rev = queries.clone();
        rev.reverse();
        let a = run_retrieval(&queries, &index, &m, 5).unwrap();
        let b = run_retrieval(&rev, &index, &m, 5).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn ndcg_is_not_monotone_in_k_below_the_relevant_count() {
    let grades: HashMap<String, u32> = [("a".to_string(), 1), ("b".to_string(), 1)].into();
    let ranked: Vec<String> = ["a", "c", "b"].iter().map(|s| s.to_string()).collect();
    assert_eq!(ndcg_at_k(&ranked, Some(&grades), 1), 1.0);
    assert!(ndcg_at_k(&ranked, Some(&grades), 2) < 1.0);
}

#[test]
fn extraction_composes_and_identity_is_idempotent() {
    let teacher = tiny_encoder(4, 7);
    let ab = extract_layers(&teacher, &LayerScheme::new(vec![1, 3], 4).unwrap()).unwrap();
    let a_via_ab = extract_layers(&ab, &LayerScheme::new(vec![0], 2).unwrap()).unwrap();
    let a = extract_layers(&teacher, &LayerScheme::new(vec![1], 4).unwrap()).unwrap();
    assert_eq!(a_via_ab.weights, a.weights);
    assert_eq!(a_via_ab.meta.provenance, a.meta.provenance);

    let id = extract_layers(&teacher, &LayerScheme::all(4).unwrap()).unwrap();
    let id2 = extract_layers(&id, &LayerScheme::all(4).unwrap()).unwrap();
    assert_eq!(id.weights, teacher.weights);
    assert_eq!(id2.weights, id.weights);
    assert_eq!(id2.meta.provenance, id.meta.provenance);
    let p = id2.meta.provenance.unwrap();
    assert_eq!(p.teacher_id, teacher.meta.model_id);
    assert_eq!(p.layers, vec![0, 1, 2, 3]);
}

#[test]
fn training_leaves_the_teacher_bitwise_unchanged() {
    let teacher = tiny_encoder(3, 8);
    let before = teacher.clone();
    let student = tiny_encoder(1, 9);
    let queries: Vec<String> = (0..40).map(|i| format!("{} {}", WORDS[i % 10], WORDS[(i * 3) % 10])).collect();
    let cfg = TrainConfig { batch_size: 8, warmup_steps: 2, learning_rate: 1e-3, ..TrainConfig::default() };
    let (trained, _) = train(&teacher, student.clone(), &queries, &cfg, None).unwrap();
    assert_ne!(trained.weights, student.weights);
    assert_eq!(teacher.fingerprint(), before.fingerprint());
    for ((_, a), (_, b)) in teacher.weights.named().into_iter().zip(before.weights.named()) {
        assert!(a.bitwise_eq(b));
    }
}

#[test]
fn zero_query_scores_zero_and_ranks_by_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ids: Vec<String> = ["c", "a", "d", "b"].iter().map(|s| s.to_string()).collect();
    let emb: Vec<Vec<f32>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let hits = index_of(&ids, &emb).search(&[0.0; 3], 10).unwrap();
    assert_eq!(hits.iter().map(|h| h.0.as_str()).collect::<Vec<_>>(), ["a", "b", "c", "d"]);
    assert!(hits.iter().all(|h| h.1 == 0.0));
}
