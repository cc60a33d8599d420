#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use asymdistill::distill::alignment_loss;
use asymdistill::encoder::{embed_batch, EncoderParams};
use asymdistill::toy::{ToyConfig, ToyDataset};
use asymdistill::{Pooling, Qrels, Run};
use asymdistill::{
    DenseIndex, EncodedBatch, EncoderConfig, EncoderModel, EncoderWeights, LossKind, Result, Tape, Tensor, Var, Vocab,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this compare absolutely; the attention key bias,
/// for one, has an exactly zero gradient and only round-off to compare.
pub const FD_FLOOR: f64 = 1e-5;

/// Norm-wise relative error `|a - b| / max(|a|, |b|, FD_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(FD_FLOOR)
}

/// Central-difference check of `f` at `inputs`, one error per input.
///
/// `probe` limits each input to that many coordinates: every coordinate
/// with a nonzero analytic gradient is eligible, sampled with `seed`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], probe: Option<usize>, seed: u64, f: F) -> Vec<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    let grads = tape.backward(&loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").value().item().expect("scalar")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let g = analytic[i].data();
        let coords: Vec<usize> = match probe {
            None => (0..input.len()).collect(),
            Some(n) => {
                let mut live: Vec<usize> = (0..input.len()).filter(|j| g[*j] != 0.0).collect();
                if live.is_empty() {
                    live = (0..input.len()).collect();
                }
                (0..n.min(live.len()))
                    .map(|_| live[rng.random_range(0..live.len())])
                    .collect()
            }
        };
        let mut numeric = Vec::with_capacity(coords.len());
        let mut work = inputs.to_vec();
        for &j in &coords {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let picked: Vec<f64> = coords.iter().map(|j| g[*j]).collect();
        errors.push(relative_error(&picked, &numeric));
    }
    errors
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output coordinate reaches the loss with a distinct coefficient.
pub fn project(tape: &Tape<f64>, x: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(random_tensor(x.shape(), &mut rng));
    let prod = tape.mul(x, &w)?;
    tape.sum(&prod)
}

pub fn small_vocab() -> Arc<Vocab> {
    let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"].iter().map(|s| s.to_string()).collect();
    toks.extend(
        ["red", "blue", "green", "fish", "bird", "tree", "stone", "river", "##s", "##ing"]
            .iter()
            .map(|s| s.to_string()),
    );
    Arc::new(Vocab::new(toks).unwrap())
}

/// Random encoder with weights scaled up from the near-zero init so every
/// layer visibly changes its input.
pub fn random_encoder(cfg: EncoderConfig, vocab: Arc<Vocab>, seed: u64, gain: f32) -> EncoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = EncoderModel::random(cfg, vocab, format!("random-{seed}"), &mut rng).unwrap();
    for (name, t) in m.weights.named_mut() {
        if name.ends_with(".gamma") {
            continue;
        }
        let noise = if name.ends_with(".bias") || name.ends_with(".beta") { 0.05 } else { 0.0 };
        for x in t.data_mut() {
            *x = *x * gain + noise * rng.random_range(-1.0f32..1.0);
        }
    }
    m
}

/// Alignment loss of a student bound from `weights` against fixed targets.
pub fn encoder_loss(
    tape: &Tape<f64>,
    params: &EncoderParams<Var<f64>>,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
    target: &Tensor<f64>,
    kind: LossKind,
) -> Result<Var<f64>> {
    let emb = embed_batch(tape, params, cfg, batch)?;
    alignment_loss(tape, &emb, &Var::constant(target.clone()), kind)
}

/// Flattens encoder weights to the input list used by [`grad_check`].
pub fn weight_list(w: &EncoderWeights<f64>) -> Vec<Tensor<f64>> {
    w.named().into_iter().map(|(_, t)| t.clone()).collect()
}

pub fn rebuild(vars: &[Var<f64>], num_layers: usize) -> EncoderParams<Var<f64>> {
    let mut it = vars.iter().cloned();
    EncoderParams::try_build(num_layers, |_| Ok(it.next().expect("same layout"))).unwrap()
}

/// nDCG@k straight from the definition, with no shared code.
pub fn brute_ndcg(ranked: &[String], grades: &HashMap<String, u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if i >= k {
            break;
        }
        let g = *grades.get(d).unwrap_or(&0) as f64;
        dcg += g / ((i + 2) as f64).log2();
    }
    let mut all: Vec<u32> = grades.values().copied().collect();
    all.sort();
    all.reverse();
    let mut idcg = 0.0;
    for (i, g) in all.iter().enumerate() {
        if i >= k {
            break;
        }
        idcg += *g as f64 / ((i + 2) as f64).log2();
    }
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Exhaustive search: score every document, order by score then id.
pub fn brute_search(ids: &[String], emb: &[Vec<f32>], q: &[f32], k: usize) -> Vec<(String, f32)> {
    let mut all: Vec<(String, f32)> = ids
        .iter()
        .zip(emb)
        .map(|(id, e)| {
            let mut s = 0.0f32;
            for (a, b) in q.iter().zip(e) {
                s += a * b;
            }
            (id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn toy_dataset() -> ToyDataset {
    ToyDataset::generate(&ToyConfig::default()).unwrap()
}

/// A random ranked list over a random pool with random graded judgments,
/// some of them for documents outside the list.
pub fn ndcg_instance(rng: &mut ChaCha8Rng) -> (Vec<String>, HashMap<String, u32>, usize) {
    let pool = rng.random_range(1..40);
    let mut docs: Vec<String> = (0..pool).map(|i| format!("d{i}")).collect();
    docs.shuffle(rng);
    let ranked: Vec<String> = docs[..rng.random_range(0..=pool)].to_vec();
    let mut grades = HashMap::new();
    for d in &docs {
        if rng.random_bool(0.4) {
            grades.insert(d.clone(), rng.random_range(0..4));
        }
    }
    let k = rng.random_range(1..25);
    (ranked, grades, k)
}

pub fn search_instance(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Vec<f32>>, Vec<f32>, usize) {
    let n = rng.random_range(1..=500);
    let d = rng.random_range(1..=64);
    let mut ids: Vec<String> = (0..n).map(|i| format!("doc{i:04}")).collect();
    ids.shuffle(rng);
    // coarse values make exact score ties common
    let coarse = rng.random_bool(0.5);
    let value = |rng: &mut ChaCha8Rng| -> f32 {
        if coarse {
            rng.random_range(-2i32..=2) as f32
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    let emb: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| value(rng)).collect()).collect();
    let q: Vec<f32> = (0..d).map(|_| value(rng)).collect();
    let k = rng.random_range(1..=n + 5);
    (ids, emb, q, k)
}

pub fn index_of(ids: &[String], emb: &[Vec<f32>]) -> DenseIndex {
    let d = emb[0].len();
    let flat: Vec<f32> = emb.iter().flatten().copied().collect();
    DenseIndex::new(ids.to_vec(), Tensor::new(vec![ids.len(), d], flat).unwrap(), "oracle").unwrap()
}


/// A run over several queries with tied scores and graded qrels; some run
/// queries have no judgments and some judged queries are not in the run.
pub fn ndcg_run_instance(rng: &mut ChaCha8Rng) -> (Run, Qrels, usize) {
    let mut run = Run::new();
    let mut qrels = Qrels::new();
    for q in 0..rng.random_range(1..8) {
        let qid = format!("q{q}");
        let (ranked, grades, _) = ndcg_instance(rng);
        let mut score = 10.0f32;
        let list = ranked
            .into_iter()
            .map(|d| {
                if rng.random_bool(0.5) {
                    score -= 1.0;
                }
                (d, score)
            })
            .collect();
        run.insert(qid.clone(), list);
        if rng.random_bool(0.85) {
            for (d, g) in grades {
                qrels.insert(qid.clone(), d, g);
            }
        }
    }
    qrels.insert("unjudged-elsewhere", "d0", 2);
    (run, qrels, rng.random_range(1..25))
}

/// Mean of [`brute_ndcg`] over the run's queries.
pub fn brute_evaluate(run: &Run, qrels: &Qrels, k: usize) -> f64 {
    let empty = HashMap::new();
    let total: f64 = run
        .iter()
        .map(|(q, list)| {
            let ranked: Vec<String> = list.iter().map(|(d, _)| d.clone()).collect();
            brute_ndcg(&ranked, qrels.for_query(q).unwrap_or(&empty), k)
        })
        .sum();
    total / run.len() as f64
}

/// `(primitive, relative error per input)` for every differentiable op.
pub fn primitive_checks() -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = |shapes: &[&[usize]]| -> Vec<Tensor<f64>> {
        shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
    };
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>| {
        out.push((name.to_string(), grad_check(&inputs, None, 0, f)));
    };

    check("matmul", x(&[&[3, 4], &[4, 5]]), &|t, v| project(t, &t.matmul(&v[0], &v[1])?, 9));
    check("bmm", x(&[&[2, 3, 4], &[2, 4, 5]]), &|t, v| project(t, &t.bmm(&v[0], &v[1], false)?, 9));
    check("bmm_trans_b", x(&[&[2, 3, 4], &[2, 5, 4]]), &|t, v| project(t, &t.bmm(&v[0], &v[1], true)?, 9));
    check("add", x(&[&[3, 4], &[3, 4]]), &|t, v| project(t, &t.add(&v[0], &v[1])?, 9));
    check("sub", x(&[&[3, 4], &[3, 4]]), &|t, v| project(t, &t.sub(&v[0], &v[1])?, 9));
    check("mul", x(&[&[3, 4], &[3, 4]]), &|t, v| project(t, &t.mul(&v[0], &v[1])?, 9));
    check("add_row", x(&[&[2, 3, 4], &[4]]), &|t, v| project(t, &t.add_row(&v[0], &v[1])?, 9));
    check("scale", x(&[&[2, 3]]), &|t, v| project(t, &t.scale(&v[0], -1.7)?, 9));
    check("gather_rows", x(&[&[6, 3]]), &|t, v| project(t, &t.gather_rows(&v[0], &[4, 0, 4, 2, 5])?, 9));
    check("reshape", x(&[&[2, 3, 4]]), &|t, v| project(t, &t.reshape(&v[0], vec![6, 4])?, 9));
    check("permute0213", x(&[&[2, 3, 4, 2]]), &|t, v| project(t, &t.permute0213(&v[0])?, 9));
    for axis in 0..3 {
        check(&format!("softmax_axis{axis}"), x(&[&[2, 3, 4]]), &move |t, v| {
            project(t, &t.softmax(&v[0], axis)?, 9)
        });
    }
    let mut masked = x(&[&[2, 5]]);
    masked[0].data_mut()[3] += asymdistill::encoder::MASK_BIAS;
    check("softmax_masked", masked, &|t, v| project(t, &t.softmax(&v[0], 1)?, 9));
    for eps in [1e-12, 1e-5] {
        check(&format!("layer_norm_eps{eps:e}"), x(&[&[2, 3, 6], &[6], &[6]]), &move |t, v| {
            project(t, &t.layer_norm(&v[0], &v[1], &v[2], eps)?, 9)
        });
    }
    check("gelu", x(&[&[4, 5]]), &|t, v| project(t, &t.gelu(&v[0])?, 9));
    check("masked_mean", x(&[&[2, 4, 3]]), &|t, v| project(t, &t.masked_mean(&v[0], &[1, 1, 0, 0, 1, 1, 1, 1])?, 9));
    check("take_position", x(&[&[2, 4, 3]]), &|t, v| project(t, &t.take_position(&v[0], 0)?, 9));
    check("row_norm", x(&[&[3, 5]]), &|t, v| project(t, &t.row_norm(&v[0])?, 9));
    check("sum", x(&[&[3, 5]]), &|t, v| t.sum(&v[0]));
    check("mean", x(&[&[3, 5]]), &|t, v| t.mean(&v[0]));
    check("square", x(&[&[3, 5]]), &|t, v| project(t, &t.square(&v[0])?, 9));
    check("cross_entropy", x(&[&[4, 5]]), &|t, v| t.cross_entropy(&v[0], &[0, 4, 2, 2]));
    for kind in [LossKind::Mse, LossKind::Euclidean] {
        check(&format!("alignment_loss_{kind:?}"), x(&[&[4, 6], &[4, 6]]), &move |t, v| {
            alignment_loss(t, &v[0], &v[1], kind)
        });
    }
    out
}

/// `(tensor name, relative error)` of the end-to-end alignment loss of a
/// 2-layer, hidden-64 encoder, sampling a few coordinates per tensor.
pub fn encoder_checks(pooling: Pooling, kind: LossKind, seed: u64) -> Vec<(String, f64)> {
    let vocab = small_vocab();
    let mut cfg = EncoderConfig::desk(vocab.len(), 2);
    cfg.max_len = 10;
    cfg.pooling = pooling;
    let student = random_encoder(cfg.clone(), vocab, seed, 20.0);
    let texts = ["red fish", "blue birds swimming", "green tree by the river stone", "fish"];
    let batch = student.tokenize_batch(&texts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let target = random_tensor(&[texts.len(), cfg.hidden_dim], &mut rng);
    let weights = student.weights.cast::<f64>();
    let layers = cfg.num_layers;
    let errors = grad_check(&weight_list(&weights), Some(6), seed, |t, v| {
        encoder_loss(t, &rebuild(v, layers), &cfg, &batch, &target, kind)
    });
    weights.named().into_iter().map(|(n, _)| n).zip(errors).collect()
}
