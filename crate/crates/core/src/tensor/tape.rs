use std::collections::HashMap;

use rand::Rng;

use super::{gemm_into, MatView, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    AddTiled { x: Var, table: Var },
    Mul(Var, Var),
    ScaleBy { x: Var, s: Var },
    Scale { x: Var, c: T },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GatherRows { x: Var, rows: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, end: usize },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<T> },
    Rotary { x: Var, geom: AttnGeom },
    Dropout { x: Var, mask: Vec<T> },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    dim: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    leaves: HashMap<Var, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }
}

/// Record of executed differentiable operations.
///
/// Values are computed eagerly while recording. [`Tape::backward`] replays the
/// record once in reverse and then drops every intermediate; a second call is
/// a contract error.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape[..shape.len().saturating_sub(1)].iter().product();
    (rows, cols)
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    T::of(0.398_942_280_401_432_7) * (-(x * x) * T::of(0.5)).exp()
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn rotary_tables(seq: usize, head_dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = vec![0.0; seq * half];
    let mut sin = vec![0.0; seq * half];
    for pos in 0..seq {
        for i in 0..half {
            let freq = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos[pos * half + i] = angle.cos();
            sin[pos * half + i] = angle.sin();
        }
    }
    (cos, sin)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new(), consumed: false }
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded value and makes the tape reusable.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// First element of a value; intended for scalar losses.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are consistent")
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Contract("tape already consumed by backward; record a new forward pass".into()))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node { value: t.into_data(), shape, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(t))
    }

    /// Registers a stored parameter. Repeated calls return the same handle, so
    /// shared (tied) tensors accumulate every use into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        self.nodes.push(Node {
            value: t.data().to_vec(),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product against a transposed right operand, `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.live()?;
        let (m, k) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::Shape(format!("matmul inner dimensions differ: {m}x{k} and {bk}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        let av = MatView::row_major(self.value(a), m, k);
        let bv = MatView::row_major(self.value(b), br, bc);
        let bv = if trans_b { bv.t() } else { bv };
        gemm_into(av, bv, T::zero(), &mut out, n);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector `row[d]` to every row of `x[...×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.live()?;
        let (_, d) = rows_cols(self.shape(x));
        if self.value(row).len() != d {
            return Err(Error::Shape(format!("add_row: row of {} for width {d}", self.value(row).len())));
        }
        let r = self.value(row);
        let out = self.value(x).chunks(d).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddRow { x, row }, &[x, row]))
    }

    /// Adds `table[S×d]` to each consecutive block of `S` rows of `x[(B·S)×d]`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        self.live()?;
        let (rows, d) = rows_cols(self.shape(x));
        let (trows, td) = rows_cols(self.shape(table));
        if td != d || trows == 0 || rows % trows != 0 {
            return Err(Error::Shape(format!("add_tiled: {:?} vs table {:?}", self.shape(x), self.shape(table))));
        }
        let t = self.value(table);
        let out = self
            .value(x)
            .chunks(trows * d)
            .flat_map(|block| block.iter().zip(t).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::AddTiled { x, table }, &[x, table]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies `x` by a one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.live()?;
        if self.value(s).len() != 1 {
            return Err(Error::Shape("scale_by expects a one-element scale".into()));
        }
        let c = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::ScaleBy { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.live()?;
        let c = T::of(c);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Scale { x, c }, &[x]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = self.value(x).iter().map(|&v| v * gelu_cdf(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Gelu(x), &[x]))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let (rows, d) = rows_cols(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape(format!("layer_norm: affine parameters must have {d} entries")));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.live()?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).fold(T::neg_infinity(), |m, j| m.max(xv[at(j)]));
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(out, shape, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits[P×V]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.live()?;
        let (p, v) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != p {
            return Err(Error::Shape(format!("cross_entropy: {} labels for {p} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(Error::Index(format!("label {bad} outside vocabulary of {v}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); p * v];
        let mut total = 0.0f64;
        for r in 0..p {
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let z = row.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
            let lse = m + z.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total += (lse - row[labels[r]]).as_f64();
        }
        let loss = T::of(total / p as f64);
        Ok(self.push(vec![loss], vec![1], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Selects rows of `x[R×d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.live()?;
        let (r, d) = rows_cols(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        if rows.is_empty() {
            return Err(Error::Shape("gather_rows needs at least one row".into()));
        }
        let xv = self.value(x);
        let out = rows.iter().flat_map(|&i| xv[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push(out, vec![rows.len(), d], Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Looks up rows of an embedding table `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        let (v, d) = self.matrix(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::Shape("embedding needs at least one id".into()));
        }
        let tv = self.value(table);
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push(out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Columns `start..end` of `x[R×C]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.live()?;
        let (r, c) = rows_cols(self.shape(x));
        if start >= end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of width {c}")));
        }
        let xv = self.value(x);
        let out = (0..r).flat_map(|i| xv[i * c + start..i * c + end].iter().copied()).collect();
        Ok(self.push(out, vec![r, end - start], Op::SliceCols { x, start, end }, &[x]))
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[(batch·seq)×dim]` with heads laid out as contiguous
    /// column blocks. `lens`, when given, limits the keys visible in each batch
    /// row to its first `lens[b]` positions.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        self.live()?;
        let (n, dim) = self.matrix(q, "attention")?;
        if self.shape(k) != [n, dim] || self.shape(v) != [n, dim] {
            return Err(Error::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || dim % heads != 0 || n != batch * seq {
            return Err(Error::Shape(format!("attention: {n}x{dim} with batch {batch}, seq {seq}, heads {heads}")));
        }
        if let Some(l) = lens {
            if l.len() != batch || l.iter().any(|&x| x == 0 || x > seq) {
                return Err(Error::Shape("attention: key lengths must be in 1..=seq per batch row".into()));
            }
        }
        let geom = AttnGeom { batch, seq, heads, dim };
        let hd = geom.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * dim];
        for b in 0..batch {
            let valid = lens.map_or(seq, |l| l[b]);
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let qm = MatView { data: &qv[off..], rows: seq, cols: hd, rs: dim, cs: 1 };
                let km = MatView { data: &kv[off..], rows: seq, cols: hd, rs: dim, cs: 1 };
                let vm = MatView { data: &vv[off..], rows: seq, cols: hd, rs: dim, cs: 1 };
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gemm_into(qm, km.t(), T::zero(), p, seq);
                for row in p.chunks_mut(seq) {
                    let m = row[..valid].iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                    let mut z = T::zero();
                    for x in row[..valid].iter_mut() {
                        *x = ((*x - m) * scale).exp();
                        z += *x;
                    }
                    for x in row[..valid].iter_mut() {
                        *x /= z;
                    }
                    row[valid..].iter_mut().for_each(|x| *x = T::zero());
                }
                gemm_into(MatView::row_major(&*p, seq, seq), vm, T::zero(), &mut out[off..], dim);
            }
        }
        Ok(self.push(out, vec![n, dim], Op::Attention { q, k, v, geom, probs }, &[q, k, v]))
    }

    /// Rotary position rotation of each head of `x[(batch·seq)×dim]`.
    pub fn rotary(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.live()?;
        let (n, dim) = self.matrix(x, "rotary")?;
        if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 || n != batch * seq {
            return Err(Error::Shape(format!("rotary: {n}x{dim} with {heads} heads needs an even head size")));
        }
        let geom = AttnGeom { batch, seq, heads, dim };
        let out = rotate(self.value(x), geom, false);
        Ok(self.push(out, vec![n, dim], Op::Rotary { x, geom }, &[x]))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        self.live()?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(out, shape, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        Ok(self.push(vec![s], vec![1], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let n = self.value(x).len();
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b) / T::of(n as f64);
        Ok(self.push(vec![s], vec![1], Op::Mean(x), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns the gradients of every parameter and gradient-requiring leaf
    /// reachable from `loss`, then releases all recorded intermediates.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.backprop(op, idx, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        self.param_vars.clear();
        self.consumed = true;
        Ok(out)
    }

    /// Runs backward and adds parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let g = self.backward(loss)?;
        store.accumulate(&g);
        Ok(g)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, op: &Op<T>, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (br, bc) = (self.shape(*b)[0], self.shape(*b)[1]);
                let n = node.shape[1];
                let gm = MatView::row_major(g, m, n);
                if self.wants(*a) {
                    let bv = MatView::row_major(self.value(*b), br, bc);
                    // dA = dC · op(B)ᵀ
                    let bt = if *trans_b { bv } else { bv.t() };
                    let mut da = vec![T::zero(); m * k];
                    gemm_into(gm, bt, T::zero(), &mut da, k);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let av = MatView::row_major(self.value(*a), m, k);
                    let mut db = vec![T::zero(); br * bc];
                    if *trans_b {
                        gemm_into(gm.t(), av, T::zero(), &mut db, bc);
                    } else {
                        gemm_into(av.t(), gm, T::zero(), &mut db, bc);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*row) {
                    let d = self.value(*row).len();
                    let mut dr = vec![T::zero(); d];
                    for c in g.chunks(d) {
                        dr.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
                    }
                    add_into(&mut grads[row.0], &dr);
                }
            }
            Op::AddTiled { x, table } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*table) {
                    let tl = self.value(*table).len();
                    let mut dt = vec![T::zero(); tl];
                    for c in g.chunks(tl) {
                        dt.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
                    }
                    add_into(&mut grads[table.0], &dt);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<T> = g.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<T> = g.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s)[0];
                if self.wants(*x) {
                    let d: Vec<T> = g.iter().map(|&g| g * c).collect();
                    add_into(&mut grads[x.0], &d);
                }
                if self.wants(*s) {
                    let ds = g.iter().zip(self.value(*x)).fold(T::zero(), |acc, (&g, &x)| acc + g * x);
                    add_into(&mut grads[s.0], &[ds]);
                }
            }
            Op::Scale { x, c } => {
                let d: Vec<T> = g.iter().map(|&g| g * *c).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let d: Vec<T> =
                    g.iter().zip(self.value(*x)).map(|(&g, &x)| g * (gelu_cdf(x) + x * gelu_pdf(x))).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.wants(*gain) {
                        add_into(&mut grads[gain.0], &dg);
                    }
                    if self.wants(*bias) {
                        add_into(&mut grads[bias.0], &db);
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot = (0..*n).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..*n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let p = labels.len();
                let v = probs.len() / p;
                let scale = g[0] / T::of(p as f64);
                let mut d: Vec<T> = probs.iter().map(|&q| q * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * v + l] -= scale;
                }
                add_into(&mut grads[logits.0], &d);
            }
            Op::GatherRows { x, rows } => {
                let d = node.shape[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, &b)| *a += b);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (k, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, &b)| *a += b);
                }
                add_into(&mut grads[table.0], &dt);
            }
            Op::SliceCols { x, start, end } => {
                let c = *self.shape(*x).last().unwrap();
                let w = end - start;
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, gr) in g.chunks(w).enumerate() {
                    dx[r * c + start..r * c + end].copy_from_slice(gr);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *geom, probs, g);
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if self.wants(*var) {
                        add_into(&mut grads[var.0], &d);
                    }
                }
            }
            Op::Rotary { x, geom } => {
                let d = rotate(g, *geom, true);
                add_into(&mut grads[x.0], &d);
            }
            Op::Dropout { x, mask } => {
                let d: Vec<T> = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                add_into(&mut grads[x.0], &d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let d = vec![g[0] / T::of(n as f64); n];
                add_into(&mut grads[x.0], &d);
            }
        }
    }

    #[allow(clippy::type_complexity)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let AttnGeom { batch, seq, heads, dim } = geom;
        let hd = geom.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = batch * seq;
        let (mut dq, mut dk, mut dv) = (vec![T::zero(); n * dim], vec![T::zero(); n * dim], vec![T::zero(); n * dim]);
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * hd;
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let pm = MatView::row_major(p, seq, seq);
                let go = head_view(g, off, seq, hd, dim);
                gemm_into(pm.t(), go, T::zero(), &mut dv[off..], dim);
                gemm_into(go, head_view(vv, off, seq, hd, dim).t(), T::zero(), &mut dp, seq);
                for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot = drow.iter().zip(prow).fold(T::zero(), |acc, (&d, &p)| acc + d * p);
                    for (d, &p) in drow.iter_mut().zip(prow) {
                        *d = p * (*d - dot) * scale;
                    }
                }
                let ds = MatView::row_major(&dp[..], seq, seq);
                gemm_into(ds, head_view(kv, off, seq, hd, dim), T::zero(), &mut dq[off..], dim);
                gemm_into(ds.t(), head_view(qv, off, seq, hd, dim), T::zero(), &mut dk[off..], dim);
            }
        }
        (dq, dk, dv)
    }
}

fn head_view<T>(data: &[T], off: usize, seq: usize, hd: usize, dim: usize) -> MatView<'_, T> {
    MatView { data: &data[off..], rows: seq, cols: hd, rs: dim, cs: 1 }
}

fn rotate<T: Scalar>(x: &[T], geom: AttnGeom, inverse: bool) -> Vec<T> {
    let AttnGeom { seq, heads, dim, .. } = geom;
    let hd = geom.head_dim();
    let half = hd / 2;
    let (cos, sin) = rotary_tables(seq, hd);
    let mut out = vec![T::zero(); x.len()];
    for (row, (xr, or)) in x.chunks(dim).zip(out.chunks_mut(dim)).enumerate() {
        let pos = row % seq;
        for h in 0..heads {
            for i in 0..half {
                let c = T::of(cos[pos * half + i]);
                let s = if inverse { -T::of(sin[pos * half + i]) } else { T::of(sin[pos * half + i]) };
                let j = h * hd + 2 * i;
                let (a, b) = (xr[j], xr[j + 1]);
                or[j] = a * c - b * s;
                or[j + 1] = a * s + b * c;
            }
        }
    }
    out
}
