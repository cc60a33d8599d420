//! Unsupervised embedding alignment of a student query encoder to a frozen
//! teacher.
//!
//! Two objectives are available. [`LossKind::Euclidean`] is the mean
//! per-query Euclidean distance between student and teacher embeddings;
//! [`LossKind::Mse`] is the mean squared error over all coordinates and is
//! the default training loss. Validation always reports the mean Euclidean
//! distance, whichever loss trains.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{embed_batch, EncoderModel, EncoderParams, EncoderWeights, DEFAULT_ENCODE_BATCH};
use crate::error::{Error, Result};
use crate::model_io::write_atomic;
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Validate every this many updates; `0` validates only at epoch ends.
    pub eval_every: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            warmup_steps: 1000,
            epochs: 1,
            loss: LossKind::Mse,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_fraction: 0.2,
            eval_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Input(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Input("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Updates completed when this was measured; `0` is before training.
    pub step: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn initial_distance(&self) -> Option<f64> {
        self.validations.first().map(|v| v.distance)
    }

    pub fn final_distance(&self) -> Option<f64> {
        self.validations.last().map(|v| v.distance)
    }

    /// Same trajectory, ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        self.steps.len() == other.steps.len()
            && self.validations.len() == other.validations.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step && a.loss.to_bits() == b.loss.to_bits() && a.lr.to_bits() == b.lr.to_bits()
            })
            && self
                .validations
                .iter()
                .zip(&other.validations)
                .all(|(a, b)| a.step == b.step && a.distance.to_bits() == b.distance.to_bits())
    }

    /// `step,loss,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:.9e},{:.9e}\n", s.step, s.loss, s.lr));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }
}

/// First `⌈(1 − val_fraction)·n⌉` queries train, the rest validate. No
/// shuffling happens before the split.
pub fn split_queries<S: Clone>(queries: &[S], val_fraction: f64) -> Result<(Vec<S>, Vec<S>)> {
    if queries.is_empty() {
        return Err(Error::Input("cannot split an empty query list".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Input(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let n = queries.len();
    // tolerance keeps e.g. 0.8 * 10 from rounding up to 9
    let train = (((1.0 - val_fraction) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let train = train.min(n);
    Ok((queries[..train].to_vec(), queries[train..].to_vec()))
}

/// Alignment objective between `[batch × d]` student and teacher embeddings.
pub fn alignment_loss<T: Real>(
    tape: &Tape<T>,
    student: &Var<T>,
    teacher: &Var<T>,
    kind: LossKind,
) -> Result<Var<T>> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::dim(
            "alignment_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    let diff = tape.sub(student, teacher)?;
    match kind {
        LossKind::Euclidean => {
            let norms = tape.row_norm(&diff)?;
            tape.mean(&norms)
        }
        LossKind::Mse => {
            let sq = tape.square(&diff)?;
            tape.mean(&sq)
        }
    }
}

/// Linear warmup from 0 to the peak rate over `warmup_steps`, then constant.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 || step >= config.warmup_steps {
        config.learning_rate
    } else {
        config.learning_rate * step as f64 / config.warmup_steps as f64
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One update. `params` and `grads` pair up by position and keep the same
    /// order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract("parameter count changed between steps".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.first[i].len() != p.len() {
                return Err(Error::dim(
                    "adamw",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(self.beta1), f(self.beta2));
        let c1 = f(1.0 - self.beta1.powi(t));
        let c2 = f(1.0 - self.beta2.powi(t));
        let decay = f(1.0 - lr * self.weight_decay);
        let (lr_t, eps) = (f(lr), f(self.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * *gj;
                v[j] = b2 * v[j] + (T::one() - b2) * *gj * *gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One optimizer step on `weights` from gradients of the `params` bound to
/// them. Parameters the loss did not reach get a zero gradient.
pub(crate) fn apply_update(
    weights: &mut EncoderWeights<f32>,
    params: &EncoderParams<Var<f32>>,
    grads: &Gradients<f32>,
    opt: &mut AdamW<f32>,
    lr: f64,
) -> Result<()> {
    let bound = params.named();
    let zeros: Vec<Option<Tensor<f32>>> = bound
        .iter()
        .map(|(_, v)| grads.get(v).is_none().then(|| Tensor::zeros(v.shape().to_vec())))
        .collect();
    let grad_refs: Vec<&Tensor<f32>> = bound
        .iter()
        .zip(&zeros)
        .map(|((_, v), z)| grads.get(v).or(z.as_ref()).expect("zero fallback"))
        .collect();
    let mut named = weights.named_mut();
    let mut param_refs: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
    opt.step(&mut param_refs, &grad_refs, lr)?;
    if weights.named().iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite { op: "adamw" });
    }
    Ok(())
}

fn check_compatible(teacher: &EncoderModel, student: &EncoderModel) -> Result<()> {
    if teacher.hidden_dim() != student.hidden_dim() {
        return Err(Error::dim(
            "distill",
            format!(
                "teacher embeddings are {}-d, student {}-d",
                teacher.hidden_dim(),
                student.hidden_dim()
            ),
        ));
    }
    if teacher.config.pooling != student.config.pooling {
        return Err(Error::Input("teacher and student pool differently".into()));
    }
    if teacher.vocab != student.vocab {
        return Err(Error::Input("teacher and student vocabularies differ".into()));
    }
    Ok(())
}

fn mean_row_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.rows();
    let total: f64 = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| {
                    let d = *x as f64 - *y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / n as f64
}

/// Mean Euclidean distance between student and teacher embeddings of
/// `queries`.
pub fn validate<S: AsRef<str>>(
    teacher: &EncoderModel,
    student: &EncoderModel,
    queries: &[S],
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    check_compatible(teacher, student)?;
    let t = teacher.encode(queries)?;
    let s = student.encode(queries)?;
    Ok(mean_row_distance(&s, &t))
}

fn validate_against(student: &EncoderModel, queries: &[String], targets: &Tensor<f32>) -> Result<f64> {
    let s = student.encode(queries)?;
    Ok(mean_row_distance(&s, targets))
}

/// Teacher embeddings of `queries`, optionally cached under `cache_dir` by
/// teacher fingerprint and query content.
pub fn teacher_embeddings(
    teacher: &EncoderModel,
    queries: &[String],
    cache_dir: Option<&Path>,
) -> Result<Tensor<f32>> {
    let Some(dir) = cache_dir else {
        return teacher.encode_batched(queries, DEFAULT_ENCODE_BATCH);
    };
    let mut h = Sha256::new();
    h.update(teacher.fingerprint().as_bytes());
    h.update((DEFAULT_ENCODE_BATCH as u64).to_le_bytes());
    for q in queries {
        h.update((q.len() as u64).to_le_bytes());
        h.update(q.as_bytes());
    }
    let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let path: PathBuf = dir.join(format!("{key}.emb"));
    let d = teacher.hidden_dim();
    if let Ok(bytes) = std::fs::read(&path) {
        if bytes.len() == queries.len() * d * 4 {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            return Tensor::new(vec![queries.len(), d], data);
        }
    }
    let emb = teacher.encode_batched(queries, DEFAULT_ENCODE_BATCH)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(emb.len() * 4);
    for v in emb.data() {
        bytes.write_all(&v.to_le_bytes()).expect("vec write");
    }
    write_atomic(&path, &bytes)?;
    Ok(emb)
}

/// Aligns `student` to the frozen `teacher` on the training part of
/// `queries`.
///
/// Training order is a seeded shuffle per epoch. The history records every
/// update, the validation distance before training, every `eval_every`
/// updates, and at the end of each epoch.
pub fn train(
    teacher: &EncoderModel,
    student: EncoderModel,
    queries: &[String],
    config: &TrainConfig,
    cache_dir: Option<&Path>,
) -> Result<(EncoderModel, TrainHistory)> {
    config.validate()?;
    check_compatible(teacher, &student)?;
    let (train_q, val_q) = split_queries(queries, config.val_fraction)?;
    if train_q.is_empty() {
        return Err(Error::Input("no training queries after the split".into()));
    }
    let targets = teacher_embeddings(teacher, &train_q, cache_dir)?;
    let val_targets = if val_q.is_empty() {
        None
    } else {
        Some(teacher.encode(&val_q)?)
    };

    let mut student = student;
    let mut history = TrainHistory::default();
    let record_validation = |student: &EncoderModel, step: usize, history: &mut TrainHistory| -> Result<()> {
        if let Some(t) = &val_targets {
            let distance = validate_against(student, &val_q, t)?;
            history.validations.push(ValidationRecord { step, distance });
        }
        Ok(())
    };
    record_validation(&student, 0, &mut history)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::<f32>::from_config(config);
    let d = student.hidden_dim();
    let mut order: Vec<usize> = (0..train_q.len()).collect();
    let mut updates = 0usize;
    let budget = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if updates >= budget {
                history.epoch_seconds.push(started.elapsed().as_secs_f64());
                break 'epochs;
            }
            let texts: Vec<&str> = chunk.iter().map(|i| train_q[*i].as_str()).collect();
            let rows: Vec<&[f32]> = chunk.iter().map(|i| targets.row(*i)).collect();
            let target = Var::constant(Tensor::stack_rows(&rows, d)?);

            let batch = student.tokenize_batch(&texts)?;
            let tape = Tape::new();
            let params = student.weights.bind(&tape, true);
            let emb = embed_batch(&tape, &params, &student.config, &batch)?;
            let loss = alignment_loss(&tape, &emb, &target, config.loss)?;
            let loss_value = loss.value().item()? as f64;
            let grads = tape.backward(&loss)?;
            updates += 1;
            let lr = lr_at(updates, config);
            apply_update(&mut student.weights, &params, &grads, &mut opt, lr)?;
            history.steps.push(StepRecord {
                step: updates,
                loss: loss_value,
                lr,
            });
            if config.eval_every > 0 && updates % config.eval_every == 0 {
                record_validation(&student, updates, &mut history)?;
            }
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
        if history.validations.last().map(|v| v.step) != Some(updates) {
            record_validation(&student, updates, &mut history)?;
        }
    }
    if history.validations.last().map(|v| v.step) != Some(updates) {
        record_validation(&student, updates, &mut history)?;
    }
    student.meta.notes.push(format!(
        "aligned to teacher {} for {updates} updates (seed {})",
        teacher.meta.model_id, config.seed
    ));
    Ok((student, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn t64(shape: &[usize], data: &[f64]) -> Var<f64> {
        Var::constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn split_follows_leading_fraction() {
        let q: Vec<usize> = (0..10).collect();
        let (train, val) = split_queries(&q, 0.2).unwrap();
        assert_eq!(train, (0..8).collect::<Vec<_>>());
        assert_eq!(val, vec![8, 9]);
        let (train, val) = split_queries(&q, 0.0).unwrap();
        assert_eq!((train.len(), val.len()), (10, 0));
        let (train, val) = split_queries(&q, 0.25).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(split_queries::<usize>(&[], 0.2).is_err());
        assert!(split_queries(&q, 1.0).is_err());
    }

    #[test]
    fn split_of_large_lists_is_exact() {
        for n in [5usize, 100, 1000, 12345, 8_000_000] {
            let q: Vec<u8> = vec![0; n];
            let (train, _) = split_queries(&q, 0.2).unwrap();
            let exact = (4 * n).div_ceil(5);
            assert_eq!(train.len(), exact, "n = {n}");
        }
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::new();
        let s = t64(&[1, 2], &[0.0, 3.0]);
        let t = t64(&[1, 2], &[4.0, 0.0]);
        let e = alignment_loss(&tape, &s, &t, LossKind::Euclidean).unwrap();
        assert!((e.value().item().unwrap() - 5.0).abs() < 1e-12);
        let m = alignment_loss(&tape, &s, &t, LossKind::Mse).unwrap();
        assert!((m.value().item().unwrap() - 12.5).abs() < 1e-12);
        for kind in [LossKind::Mse, LossKind::Euclidean] {
            let z = alignment_loss(&tape, &s, &s, kind).unwrap();
            assert_eq!(z.value().item().unwrap(), 0.0);
        }
        let wrong = t64(&[1, 3], &[0.0; 3]);
        assert!(alignment_loss(&tape, &s, &wrong, LossKind::Mse).is_err());
    }

    #[test]
    fn euclidean_loss_gradient_at_coincidence_is_zero() {
        let tape = Tape::new();
        let s = tape.param(Tensor::new(vec![1, 2], vec![1.0f64, 1.0]).unwrap());
        let t = t64(&[1, 2], &[1.0, 1.0]);
        let l = alignment_loss(&tape, &s, &t, LossKind::Euclidean).unwrap();
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.get(&s).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig::default();
        assert!((lr_at(500, &cfg) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(1000, &cfg), 1e-4);
        assert_eq!(lr_at(5000, &cfg), 1e-4);
        assert_eq!(lr_at(0, &cfg), 0.0);
        let flat = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(lr_at(0, &flat), 1e-4);
    }

    #[test]
    fn adamw_with_zero_gradient_only_decays() {
        let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8, 0.01);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        opt.step(&mut [&mut p], &[&g], 1e-4).unwrap();
        let f = 1.0 - 1e-6;
        assert_eq!(p.data(), &[f, -2.0 * f, 0.5 * f]);
        assert!(opt.first_moments()[0].iter().all(|m| *m == 0.0));
        assert!(opt.second_moments()[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adamw_first_step_is_signed_learning_rate() {
        let mut opt = AdamW::<f64>::new(0.9, 0.999, 0.0, 0.0);
        let mut p = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap();
        opt.step(&mut [&mut p], &[&g], 1e-2).unwrap();
        let expected = [1.0 - 1e-2, 1.0 + 1e-2, 1.0 - 1e-2];
        for (x, y) in p.data().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut opt = AdamW::<f32>::new(0.9, 0.999, 1e-8, 0.01);
            let mut p = Tensor::new(vec![2], vec![0.25f32, -1.0]).unwrap();
            let g = Tensor::new(vec![2], vec![0.1f32, 0.2]).unwrap();
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[&g], 1e-3).unwrap();
            }
            p
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn adamw_rejects_mismatched_inputs() {
        let mut opt = AdamW::<f32>::new(0.9, 0.999, 1e-8, 0.0);
        let mut p = Tensor::<f32>::zeros(vec![2]);
        let g = Tensor::<f32>::zeros(vec![3]);
        assert!(opt.step(&mut [&mut p], &[&g], 1e-3).is_err());
        assert!(opt.step(&mut [&mut p], &[], 1e-3).is_err());
    }

    #[test]
    fn config_defaults_follow_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.warmup_steps, c.epochs), (128, 1000, 1));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.loss, LossKind::Mse);
        assert_eq!(c.val_fraction, 0.2);
        let mut bad = c.clone();
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
        bad = c;
        bad.val_fraction = 1.0;
        assert!(bad.validate().is_err());
    }

    fn tiny_models() -> (EncoderModel, Vec<String>) {
        use crate::tokenizer::Vocab;
        use std::sync::Arc;
        let words = ["alpha", "beta", "gamma", "delta", "omega", "kappa", "sigma", "tau"];
        let mut toks: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"].map(String::from).to_vec();
        toks.extend(words.iter().map(|w| w.to_string()));
        let vocab = Arc::new(Vocab::new(toks).unwrap());
        let mut cfg = EncoderConfig::desk(vocab.len(), 2);
        cfg.hidden_dim = 16;
        cfg.num_heads = 2;
        cfg.ff_dim = 32;
        cfg.max_len = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let teacher = EncoderModel::random(cfg, vocab, "t", &mut rng).unwrap();
        let queries = (0..40)
            .map(|i| format!("{} {} {}", words[i % 8], words[(i * 3 + 1) % 8], words[(i * 5 + 2) % 8]))
            .collect();
        (teacher, queries)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 2,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identity_student_starts_aligned() {
        let (teacher, queries) = tiny_models();
        let cfg = TrainConfig {
            max_steps: Some(1),
            ..quick_config()
        };
        let (_, history) = train(&teacher, teacher.clone(), &queries, &cfg, None).unwrap();
        assert!(history.initial_distance().unwrap() < 1e-6);
        assert!(history.steps[0].loss < 1e-8);
    }

    #[test]
    fn training_reduces_distance_and_is_deterministic() {
        let (teacher, queries) = tiny_models();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let student = EncoderModel::random(
            EncoderConfig { num_layers: 1, ..teacher.config.clone() },
            teacher.vocab.clone(),
            "s",
            &mut rng,
        )
        .unwrap();
        let cfg = quick_config();
        let (a, ha) = train(&teacher, student.clone(), &queries, &cfg, None).unwrap();
        let (b, hb) = train(&teacher, student, &queries, &cfg, None).unwrap();
        assert!(ha.same_trajectory(&hb));
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ha.steps.len(), 3 * 4);
        assert!(ha.final_distance().unwrap() < ha.initial_distance().unwrap());
        assert_eq!(ha.validations.first().unwrap().step, 0);
        assert_eq!(ha.validations.last().unwrap().step, 12);
    }

    #[test]
    fn teacher_cache_round_trips() {
        let (teacher, queries) = tiny_models();
        let dir = tempfile::tempdir().unwrap();
        let a = teacher_embeddings(&teacher, &queries, Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = teacher_embeddings(&teacher, &queries, Some(dir.path())).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = teacher_embeddings(&teacher, &queries, None).unwrap();
        assert!(a.bitwise_eq(&c));
    }

    #[test]
    fn incompatible_models_are_rejected() {
        let (teacher, queries) = tiny_models();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = teacher.config.clone();
        cfg.hidden_dim = 8;
        let narrow = EncoderModel::random(cfg, teacher.vocab.clone(), "n", &mut rng).unwrap();
        assert!(train(&teacher, narrow.clone(), &queries, &quick_config(), None).is_err());
        assert!(validate(&teacher, &narrow, &queries).is_err());
        assert!(validate::<String>(&teacher, &teacher, &[]).is_err());
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            steps: vec![StepRecord {
                step: 1,
                loss: 0.5,
                lr: 1e-4,
            }],
            ..Default::default()
        };
        assert_eq!(h.to_csv(), "step,loss,lr\n1,5.000000000e-1,1.000000000e-4\n");
    }
}
