//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive applications whose inputs depend on a
//! trainable leaf. Values flowing through the graph are [`Var`]s; a `Var`
//! without a node is a constant and costs nothing beyond its value, so the
//! same model code serves inference (no leaves, nothing recorded) and
//! training.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::real::{gemm, MatLayout};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// A value in a computation, optionally tracked by a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Real = f32> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Real> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }
}

type Saved<T> = (Option<usize>, Tensor<T>);

enum Op<T: Real> {
    Leaf {
        shape: Vec<usize>,
    },
    MatMul {
        a: Saved<T>,
        b: Saved<T>,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Saved<T>,
        b: Saved<T>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Option<usize>,
        b: Option<usize>,
    },
    Sub {
        a: Option<usize>,
        b: Option<usize>,
    },
    Mul {
        a: Saved<T>,
        b: Saved<T>,
    },
    AddRow {
        a: Option<usize>,
        bias: Option<usize>,
        width: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    Reshape {
        a: usize,
    },
    Permute0213 {
        a: usize,
        out_dims: [usize; 4],
    },
    Softmax {
        a: usize,
        out: Tensor<T>,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Option<usize>,
        gamma: Saved<T>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        width: usize,
    },
    Gelu {
        a: usize,
        input: Tensor<T>,
    },
    MaskedMean {
        a: usize,
        weights: Vec<T>,
        len: usize,
        width: usize,
    },
    TakePosition {
        a: usize,
        len: usize,
        width: usize,
        pos: usize,
    },
    RowNorm {
        a: usize,
        input: Tensor<T>,
        out: Tensor<T>,
        width: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
        n: usize,
    },
    Square {
        a: usize,
        input: Tensor<T>,
    },
    CrossEntropy {
        a: usize,
        probs: Vec<T>,
        targets: Vec<usize>,
        cols: usize,
    },
}

struct Node<T: Real> {
    op: Op<T>,
    len: usize,
}

/// Record of primitive applications, replayed backward by [`Tape::backward`].
///
/// Building a tape is single-threaded; the values it produces are ordinary
/// tensors and may be shared freely once extracted.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf registered on a tape.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape: u64,
    by_leaf: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for constants and for leaves the loss does not depend on.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        let node = var.node?;
        if node.tape != self.tape {
            return None;
        }
        self.by_leaf.get(&node.index)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    x * half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x / T::from_f64_lossy(std::f64::consts::SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() / T::from_f64_lossy((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// `[a, b, c, d] -> [a, c, b, d]`
fn permute0213<T: Real>(src: &[T], dims: [usize; 4]) -> Vec<T> {
    let [a, b, c, d] = dims;
    let mut out = vec![T::zero(); src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<T> {
        let len = value.len();
        let node = self.push(
            Op::Leaf {
                shape: value.shape().to_vec(),
            },
            len,
        );
        Var {
            value,
            node: Some(node),
        }
    }

    fn push(&self, op: Op<T>, len: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        NodeId {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var<T>) -> Result<Option<usize>> {
        match v.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(Error::Contract(
                "variable belongs to a different or consumed tape".into(),
            )),
        }
    }

    fn finish(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        tracked: bool,
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var<T>> {
        check_finite(op_name, &data)?;
        let value = Tensor::from_parts(shape, data);
        let node = tracked.then(|| self.push(op(), value.len()));
        Ok(Var { value, node })
    }

    /// `[m × k] · [k × n]`
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            a.value.data(),
            MatLayout::row_major(0, k),
            b.value.data(),
            MatLayout::row_major(0, n),
            T::zero(),
            &mut out,
            MatLayout::row_major(0, n),
        );
        self.finish("matmul", vec![m, n], out, ia.is_some() || ib.is_some(), || {
            Op::MatMul {
                a: (ia, a.value.clone()),
                b: (ib, b.value.clone()),
                m,
                k,
                n,
            }
        })
    }

    /// Batched product `[B × m × k] · [B × k × n]`, or `· [B × n × k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_b: bool) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        let bad = || Error::dim("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let lb = if trans_b {
                MatLayout::transposed(i * n * k, k)
            } else {
                MatLayout::row_major(i * k * n, n)
            };
            gemm(
                m,
                k,
                n,
                a.value.data(),
                MatLayout::row_major(i * m * k, k),
                b.value.data(),
                lb,
                T::zero(),
                &mut out,
                MatLayout::row_major(i * m * n, n),
            );
        }
        self.finish("bmm", vec![batch, m, n], out, ia.is_some() || ib.is_some(), || {
            Op::Bmm {
                a: (ia, a.value.clone()),
                b: (ib, b.value.clone()),
                batch,
                m,
                k,
                n,
                trans_b,
            }
        })
    }

    fn same_shape(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("add", a, b)?;
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        self.finish("add", a.shape().to_vec(), out, ia.is_some() || ib.is_some(), || {
            Op::Add { a: ia, b: ib }
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("sub", a, b)?;
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| *x - *y)
            .collect();
        self.finish("sub", a.shape().to_vec(), out, ia.is_some() || ib.is_some(), || {
            Op::Sub { a: ia, b: ib }
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("mul", a, b)?;
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .map(|(x, y)| *x * *y)
            .collect();
        self.finish("mul", a.shape().to_vec(), out, ia.is_some() || ib.is_some(), || {
            Op::Mul {
                a: (ia, a.value.clone()),
                b: (ib, b.value.clone()),
            }
        })
    }

    /// Adds a `[n]` vector to every length-`n` row of `a`.
    pub fn add_row(&self, a: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let width = *a.shape().last().unwrap_or(&0);
        if bias.shape() != [width] {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", a.shape(), bias.shape()),
            ));
        }
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let bv = bias.value.data();
        let out = a
            .value
            .data()
            .chunks(width.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| *x + *y))
            .collect();
        self.finish("add_row", a.shape().to_vec(), out, ia.is_some() || ib.is_some(), || {
            Op::AddRow {
                a: ia,
                bias: ib,
                width,
            }
        })
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        let ia = self.idx(a)?;
        let out = a.value.data().iter().map(|x| *x * c).collect();
        self.finish("scale", a.shape().to_vec(), out, ia.is_some(), || Op::Scale {
            a: ia.unwrap(),
            c,
        })
    }

    /// Selects rows of a `[V × d]` table: the embedding lookup.
    pub fn gather_rows(&self, table: &Var<T>, ids: &[usize]) -> Result<Var<T>> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", format!("table shape {s:?}")));
        }
        let (vocab, width) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Range {
                    what: "embedding table",
                    index: id,
                    len: vocab,
                });
            }
            out.extend_from_slice(table.value.row(id));
        }
        let it = self.idx(table)?;
        self.finish("gather_rows", vec![ids.len(), width], out, it.is_some(), || {
            Op::Gather {
                table: it.unwrap(),
                ids: ids.to_vec(),
                width,
            }
        })
    }

    pub fn reshape(&self, a: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let value = a.value.reshape(shape)?;
        let ia = self.idx(a)?;
        let node = ia.map(|i| self.push(Op::Reshape { a: i }, value.len()));
        Ok(Var { value, node })
    }

    /// Swaps the middle two axes of a rank-4 tensor.
    pub fn permute0213(&self, a: &Var<T>) -> Result<Var<T>> {
        let s = a.shape();
        if s.len() != 4 {
            return Err(Error::dim("permute0213", format!("rank {} input", s.len())));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute0213(a.value.data(), dims);
        let out_dims = [s[0], s[2], s[1], s[3]];
        let ia = self.idx(a)?;
        self.finish("permute0213", out_dims.to_vec(), out, ia.is_some(), || {
            Op::Permute0213 {
                a: ia.unwrap(),
                out_dims,
            }
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        let s = a.shape();
        if axis >= s.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = a.value.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * axis_len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..axis_len {
                    max = max.max(x[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..axis_len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..axis_len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let ia = self.idx(a)?;
        check_finite("softmax", &out)?;
        let value = Tensor::from_parts(s.to_vec(), out);
        let node = ia.map(|i| {
            self.push(
                Op::Softmax {
                    a: i,
                    out: value.clone(),
                    outer,
                    axis_len,
                    inner,
                },
                value.len(),
            )
        });
        Ok(Var { value, node })
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gamma · x̂ + beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let width = *x.shape().last().unwrap_or(&0);
        if gamma.shape() != [width] || beta.shape() != [width] || width == 0 {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    x.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(width).unwrap();
        let (g, b) = (gamma.value.data(), beta.value.data());
        let rows = x.value.len() / width;
        let mut out = vec![T::zero(); x.value.len()];
        let mut xhat = vec![T::zero(); x.value.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, row) in x.value.data().chunks(width).enumerate() {
            let mean = row.iter().fold(T::zero(), |s, v| s + *v) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |s, v| s + (*v - mean) * (*v - mean))
                / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..width {
                let h = (row[j] - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let tracked = ix.is_some() || ig.is_some() || ib.is_some();
        self.finish("layer_norm", x.shape().to_vec(), out, tracked, || Op::LayerNorm {
            x: ix,
            gamma: (ig, gamma.value.clone()),
            beta: ib,
            xhat,
            inv_std,
            width,
        })
    }

    /// Exact-erf GELU, `x · Φ(x)`.
    pub fn gelu(&self, a: &Var<T>) -> Result<Var<T>> {
        let ia = self.idx(a)?;
        let out = a.value.data().iter().map(|x| gelu_scalar(*x)).collect();
        self.finish("gelu", a.shape().to_vec(), out, ia.is_some(), || Op::Gelu {
            a: ia.unwrap(),
            input: a.value.clone(),
        })
    }

    /// Mask-weighted average over axis 1 of `[B × L × d]`.
    ///
    /// `mask` is `[B × L]` of zeros and ones; every row needs at least one.
    pub fn masked_mean(&self, a: &Var<T>, mask: &[u8]) -> Result<Var<T>> {
        let s = a.shape();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::dim(
                "masked_mean",
                format!("{s:?} with mask of {}", mask.len()),
            ));
        }
        let (batch, len, width) = (s[0], s[1], s[2]);
        let mut weights = vec![T::zero(); batch * len];
        for b in 0..batch {
            let row = &mask[b * len..(b + 1) * len];
            let count = row.iter().filter(|m| **m != 0).count();
            if count == 0 {
                return Err(Error::Contract(format!("mask row {b} has no tokens")));
            }
            let w = T::one() / T::from_usize(count).unwrap();
            for (l, m) in row.iter().enumerate() {
                if *m != 0 {
                    weights[b * len + l] = w;
                }
            }
        }
        let x = a.value.data();
        let mut out = vec![T::zero(); batch * width];
        for b in 0..batch {
            let dst = &mut out[b * width..(b + 1) * width];
            for l in 0..len {
                let w = weights[b * len + l];
                if w == T::zero() {
                    continue;
                }
                let src = &x[(b * len + l) * width..(b * len + l + 1) * width];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *d + w * *v;
                }
            }
        }
        let ia = self.idx(a)?;
        self.finish("masked_mean", vec![batch, width], out, ia.is_some(), || {
            Op::MaskedMean {
                a: ia.unwrap(),
                weights,
                len,
                width,
            }
        })
    }

    /// Picks position `pos` along axis 1 of `[B × L × d]`.
    pub fn take_position(&self, a: &Var<T>, pos: usize) -> Result<Var<T>> {
        let s = a.shape();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::dim("take_position", format!("{s:?} at {pos}")));
        }
        let (batch, len, width) = (s[0], s[1], s[2]);
        let x = a.value.data();
        let mut out = Vec::with_capacity(batch * width);
        for b in 0..batch {
            let o = (b * len + pos) * width;
            out.extend_from_slice(&x[o..o + width]);
        }
        let ia = self.idx(a)?;
        self.finish("take_position", vec![batch, width], out, ia.is_some(), || {
            Op::TakePosition {
                a: ia.unwrap(),
                len,
                width,
                pos,
            }
        })
    }

    /// Euclidean norm of every row of `[n × d]`, giving `[n]`.
    pub fn row_norm(&self, a: &Var<T>) -> Result<Var<T>> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::dim("row_norm", format!("{s:?}")));
        }
        let width = s[1];
        let out: Vec<T> = a
            .value
            .data()
            .chunks(width.max(1))
            .take(s[0])
            .map(|r| r.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt())
            .collect();
        let ia = self.idx(a)?;
        check_finite("row_norm", &out)?;
        let value = Tensor::from_parts(vec![s[0]], out);
        let node = ia.map(|i| {
            self.push(
                Op::RowNorm {
                    a: i,
                    input: a.value.clone(),
                    out: value.clone(),
                    width,
                },
                value.len(),
            )
        });
        Ok(Var { value, node })
    }

    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let total = a.value.data().iter().fold(T::zero(), |s, v| s + *v);
        let ia = self.idx(a)?;
        self.finish("sum", Vec::new(), vec![total], ia.is_some(), || Op::Sum {
            a: ia.unwrap(),
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let n = a.value.len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let total = a.value.data().iter().fold(T::zero(), |s, v| s + *v);
        let ia = self.idx(a)?;
        self.finish(
            "mean",
            Vec::new(),
            vec![total / T::from_usize(n).unwrap()],
            ia.is_some(),
            || Op::Mean { a: ia.unwrap(), n },
        )
    }

    pub fn square(&self, a: &Var<T>) -> Result<Var<T>> {
        let ia = self.idx(a)?;
        let out = a.value.data().iter().map(|x| *x * *x).collect();
        self.finish("square", a.shape().to_vec(), out, ia.is_some(), || Op::Square {
            a: ia.unwrap(),
            input: a.value.clone(),
        })
    }

    /// Mean softmax cross-entropy of `[n × c]` logits against class indices.
    pub fn cross_entropy(&self, logits: &Var<T>, targets: &[usize]) -> Result<Var<T>> {
        let s = logits.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{s:?} with {} targets", targets.len()),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for (r, row) in logits.value.data().chunks(cols).enumerate() {
            let t = targets[r];
            if t >= cols {
                return Err(Error::Range {
                    what: "cross_entropy classes",
                    index: t,
                    len: cols,
                });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let sum = row.iter().fold(T::zero(), |acc, v| acc + (*v - max).exp());
            let log_z = max + sum.ln();
            for j in 0..cols {
                probs[r * cols + j] = (row[j] - log_z).exp();
            }
            loss = loss + (log_z - row[t]);
        }
        let loss = loss / T::from_usize(rows).unwrap();
        let ia = self.idx(logits)?;
        self.finish("cross_entropy", Vec::new(), vec![loss], ia.is_some(), || {
            Op::CrossEntropy {
                a: ia.unwrap(),
                probs,
                targets: targets.to_vec(),
                cols,
            }
        })
    }

    /// Back-propagates from a scalar and returns gradients for every leaf the
    /// loss depends on. Consumes the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self.idx(loss)?;
        let tape = self.id;
        let nodes = self.nodes.into_inner();
        let mut by_leaf = HashMap::new();
        let Some(root) = root else {
            return Ok(Gradients { tape, by_leaf });
        };
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, &mut grads, i, g, &mut by_leaf);
        }
        Ok(Gradients { tape, by_leaf })
    }
}

fn buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    i: usize,
) -> &'a mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].len])
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: Vec<T>,
    leaves: &mut HashMap<usize, Tensor<T>>,
) {
    let two = T::from_f64_lossy(2.0);
    match &nodes[i].op {
        Op::Leaf { shape } => {
            leaves.insert(i, Tensor::from_parts(shape.clone(), g));
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ia) = a.0 {
                // dA = dC · Bᵀ
                gemm(
                    m,
                    n,
                    k,
                    &g,
                    MatLayout::row_major(0, n),
                    b.1.data(),
                    MatLayout::transposed(0, n),
                    T::one(),
                    buf(nodes, grads, ia),
                    MatLayout::row_major(0, k),
                );
            }
            if let Some(ib) = b.0 {
                // dB = Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    a.1.data(),
                    MatLayout::transposed(0, k),
                    &g,
                    MatLayout::row_major(0, n),
                    T::one(),
                    buf(nodes, grads, ib),
                    MatLayout::row_major(0, n),
                );
            }
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            for bi in 0..*batch {
                let go = bi * m * n;
                if let Some(ia) = a.0 {
                    // dA = dC · op(B)ᵀ
                    let lb = if *trans_b {
                        MatLayout::row_major(bi * n * k, k)
                    } else {
                        MatLayout::transposed(bi * k * n, n)
                    };
                    gemm(
                        m,
                        n,
                        k,
                        &g,
                        MatLayout::row_major(go, n),
                        b.1.data(),
                        lb,
                        T::one(),
                        buf(nodes, grads, ia),
                        MatLayout::row_major(bi * m * k, k),
                    );
                }
                if let Some(ib) = b.0 {
                    if *trans_b {
                        // stored B is [n × k]: dB = dCᵀ · A
                        gemm(
                            n,
                            m,
                            k,
                            &g,
                            MatLayout::transposed(go, n),
                            a.1.data(),
                            MatLayout::row_major(bi * m * k, k),
                            T::one(),
                            buf(nodes, grads, ib),
                            MatLayout::row_major(bi * n * k, k),
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            a.1.data(),
                            MatLayout::transposed(bi * m * k, k),
                            &g,
                            MatLayout::row_major(go, n),
                            T::one(),
                            buf(nodes, grads, ib),
                            MatLayout::row_major(bi * k * n, n),
                        );
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for (idx, sign) in [(a, T::one()), (b, T::one())] {
                if let Some(j) = idx {
                    axpy(buf(nodes, grads, *j), &g, sign);
                }
            }
        }
        Op::Sub { a, b } => {
            for (idx, sign) in [(a, T::one()), (b, -T::one())] {
                if let Some(j) = idx {
                    axpy(buf(nodes, grads, *j), &g, sign);
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(j) = a.0 {
                let dst = buf(nodes, grads, j);
                for ((d, gv), bv) in dst.iter_mut().zip(&g).zip(b.1.data()) {
                    *d = *d + *gv * *bv;
                }
            }
            if let Some(j) = b.0 {
                let dst = buf(nodes, grads, j);
                for ((d, gv), av) in dst.iter_mut().zip(&g).zip(a.1.data()) {
                    *d = *d + *gv * *av;
                }
            }
        }
        Op::AddRow { a, bias, width } => {
            if let Some(j) = a {
                axpy(buf(nodes, grads, *j), &g, T::one());
            }
            if let Some(j) = bias {
                let dst = buf(nodes, grads, *j);
                for row in g.chunks(*width) {
                    axpy(dst, row, T::one());
                }
            }
        }
        Op::Scale { a, c } => axpy(buf(nodes, grads, *a), &g, *c),
        Op::Gather { table, ids, width } => {
            let dst = buf(nodes, grads, *table);
            for (r, id) in ids.iter().enumerate() {
                axpy(
                    &mut dst[id * width..(id + 1) * width],
                    &g[r * width..(r + 1) * width],
                    T::one(),
                );
            }
        }
        Op::Reshape { a } => axpy(buf(nodes, grads, *a), &g, T::one()),
        Op::Permute0213 { a, out_dims } => {
            let back = permute0213(&g, *out_dims);
            axpy(buf(nodes, grads, *a), &back, T::one());
        }
        Op::Softmax {
            a,
            out,
            outer,
            axis_len,
            inner,
        } => {
            let y = out.data();
            let dst = buf(nodes, grads, *a);
            for o in 0..*outer {
                for ii in 0..*inner {
                    let at = |j: usize| (o * axis_len + j) * inner + ii;
                    let dot = (0..*axis_len).fold(T::zero(), |s, j| s + g[at(j)] * y[at(j)]);
                    for j in 0..*axis_len {
                        let p = at(j);
                        dst[p] = dst[p] + y[p] * (g[p] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            width,
        } => {
            let w = *width;
            if let Some(j) = gamma.0 {
                let dst = buf(nodes, grads, j);
                for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                    for c in 0..w {
                        dst[c] = dst[c] + gr[c] * hr[c];
                    }
                }
            }
            if let Some(j) = beta {
                let dst = buf(nodes, grads, *j);
                for gr in g.chunks(w) {
                    axpy(dst, gr, T::one());
                }
            }
            if let Some(j) = x {
                let gam = gamma.1.data();
                let nf = T::from_usize(w).unwrap();
                let dst = buf(nodes, grads, *j);
                for (r, (gr, hr)) in g.chunks(w).zip(xhat.chunks(w)).enumerate() {
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for c in 0..w {
                        let d = gr[c] * gam[c];
                        sum_d = sum_d + d;
                        sum_dh = sum_dh + d * hr[c];
                    }
                    let scale = inv_std[r] / nf;
                    for c in 0..w {
                        let d = gr[c] * gam[c];
                        let o = r * w + c;
                        dst[o] = dst[o] + scale * (nf * d - sum_d - hr[c] * sum_dh);
                    }
                }
            }
        }
        Op::Gelu { a, input } => {
            let dst = buf(nodes, grads, *a);
            for ((d, gv), xv) in dst.iter_mut().zip(&g).zip(input.data()) {
                *d = *d + *gv * gelu_grad(*xv);
            }
        }
        Op::MaskedMean {
            a,
            weights,
            len,
            width,
        } => {
            let dst = buf(nodes, grads, *a);
            for (bl, w) in weights.iter().enumerate() {
                if *w == T::zero() {
                    continue;
                }
                let b = bl / len;
                axpy(
                    &mut dst[bl * width..(bl + 1) * width],
                    &g[b * width..(b + 1) * width],
                    *w,
                );
            }
        }
        Op::TakePosition {
            a,
            len,
            width,
            pos,
        } => {
            let dst = buf(nodes, grads, *a);
            for (b, gr) in g.chunks(*width).enumerate() {
                let o = (b * len + pos) * width;
                axpy(&mut dst[o..o + width], gr, T::one());
            }
        }
        Op::RowNorm {
            a,
            input,
            out,
            width,
        } => {
            let dst = buf(nodes, grads, *a);
            for (r, norm) in out.data().iter().enumerate() {
                // subgradient 0 at the origin
                if *norm == T::zero() {
                    continue;
                }
                let s = g[r] / *norm;
                let o = r * width;
                axpy(&mut dst[o..o + width], &input.data()[o..o + width], s);
            }
        }
        Op::Sum { a } => {
            let dst = buf(nodes, grads, *a);
            for d in dst.iter_mut() {
                *d = *d + g[0];
            }
        }
        Op::Mean { a, n } => {
            let s = g[0] / T::from_usize(*n).unwrap();
            let dst = buf(nodes, grads, *a);
            for d in dst.iter_mut() {
                *d = *d + s;
            }
        }
        Op::Square { a, input } => {
            let dst = buf(nodes, grads, *a);
            for ((d, gv), xv) in dst.iter_mut().zip(&g).zip(input.data()) {
                *d = *d + two * *xv * *gv;
            }
        }
        Op::CrossEntropy {
            a,
            probs,
            targets,
            cols,
        } => {
            let rows = targets.len();
            let s = g[0] / T::from_usize(rows).unwrap();
            let dst = buf(nodes, grads, *a);
            for (r, t) in targets.iter().enumerate() {
                for c in 0..*cols {
                    let o = r * cols + c;
                    let onehot = if c == *t { T::one() } else { T::zero() };
                    dst[o] = dst[o] + s * (probs[o] - onehot);
                }
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + alpha * *s;
    }
}
