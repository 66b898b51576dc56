//! Reverse-mode differentiation on a linear tape.
//!
//! Every op appends one node whose inputs already live on the tape, so the
//! node order is a topological order and `backward` is a single reverse sweep.
//! Nodes whose ancestry contains no `requires_grad` leaf are skipped entirely.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a packed batch: `q_len` query rows starting at
/// `q_start` attend over `k_len` key rows starting at `k_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<T>,
        count: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Relu(x) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records values and the ops that produced them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a
    /// gradient.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.zero_grad();
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} expects a 2-d tensor, got {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, used for the tied output projection.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_bt of {:?} by transpose of {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Adds a `[h]` vector to every row of `x[...×h]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let h = self.value(x).last_dim();
        if self.value(bias).len() != h {
            return Err(Error::Shape(format!(
                "add_row of {:?} and {:?}",
                self.value(x).shape(),
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(h)
            .flat_map(|row| row.iter().zip(b).map(|(&u, &w)| u + w))
            .collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect()).expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        self.push(out, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let t = self.value(x);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
                .collect(),
        )
        .expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance, then applies `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let h = self.value(x).last_dim();
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(Error::Shape(format!(
                "layer_norm over {:?} with gain {:?} and bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let hn = T::from_usize(h).expect("width");
        let eps = T::of(eps);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / h;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(h) {
            let mean = row.iter().copied().sum::<T>() / hn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                xhat.push(n);
                out.push(g[j] * n + b[j]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * axis_len + a) * inner + i;
                let max = (0..axis_len).map(|a| xs[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..axis_len {
                    let e = (xs[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] /= z;
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Gathers rows of `table[V×h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Shape("embedding lookup of zero ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Tokens(format!("token id {bad} outside vocabulary of {v}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), h], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over packed segments.
    ///
    /// `q` is `[Σq_len × h]`, `k` and `v` are `[Σk_len × h]`. With `causal`,
    /// query `i` of a segment sees keys `0..=i` of that segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let (nq, h) = self.dims2(q, "attention")?;
        let (nk, hk) = self.dims2(k, "attention")?;
        if self.value(v).shape() != [nk, hk] || hk != h {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!("width {h} not divisible into {heads} heads")));
        }
        for s in segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.k_len == 0 {
                return Err(Error::Shape(format!("attention segment {s:?} out of range")));
            }
            if causal && s.q_len != s.k_len {
                return Err(Error::Shape(format!("causal segment {s:?} must be square")));
            }
        }
        let dh = h / heads;
        let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); nq * h];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut off = 0;
        for s in segments {
            for hd in 0..heads {
                let p = &mut probs[off..off + s.q_len * s.k_len];
                T::gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    &qd[s.q_start * h + hd * dh..],
                    h as isize,
                    1,
                    &kd[s.k_start * h + hd * dh..],
                    1,
                    h as isize,
                    T::zero(),
                    p,
                    s.k_len as isize,
                    1,
                );
                for (i, row) in p.chunks_mut(s.k_len).enumerate() {
                    let visible = if causal { i + 1 } else { s.k_len };
                    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for x in &mut row[..visible] {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in &mut row[..visible] {
                        *x /= z;
                    }
                    row[visible..].iter_mut().for_each(|x| *x = T::zero());
                }
                T::gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    T::one(),
                    p,
                    s.k_len as isize,
                    1,
                    &vd[s.k_start * h + hd * dh..],
                    h as isize,
                    1,
                    T::zero(),
                    &mut out[s.q_start * h + hd * dh..],
                    h as isize,
                    1,
                );
                off += s.q_len * s.k_len;
            }
        }
        Ok(self.push(
            Tensor::new(vec![nq, h], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[T×V]`, skipping positions equal to `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy over {n} rows with {} targets",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v && t != ignore_id) {
            return Err(Error::Tokens(format!("target {bad} outside vocabulary of {v}")));
        }
        let count = targets.iter().filter(|&&t| t != ignore_id).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut nll = T::zero();
        for (r, (row, &t)) in xs.chunks(v).zip(targets).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            if t != ignore_id {
                nll += z.ln() + max - row[t];
            }
        }
        let loss = nll / T::from_usize(count).expect("count");
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
        ))
    }

    /// Accumulates d`loss`/d`w` into the grad of every `requires_grad` leaf
    /// reachable from `loss`. Call [`Tape::zero_grads`] between passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            for (input, gi) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // g[m×n] · bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    // aᵀ · g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    out.push((*b, db));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // g[m×n] · b[n×k]
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); n * k];
                    // gᵀ · a
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        1,
                        n as isize,
                        self.value(*a).data(),
                        k as isize,
                        1,
                        T::zero(),
                        &mut db,
                        k as isize,
                        1,
                    );
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::AddRow(x, bias) => {
                out.push((*x, g.to_vec()));
                if self.needs(*bias) {
                    let h = self.value(*bias).len();
                    let mut db = vec![T::zero(); h];
                    for row in g.chunks(h) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&gi| gi * *c).collect())),
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                let three = T::of(3.0);
                let xs = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(&gi, &v)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let d = half * (T::one() + t)
                                + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v);
                            gi * d
                        })
                        .collect(),
                ));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let h = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); h];
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); h];
                    for grow in g.chunks(h) {
                        db.iter_mut().zip(grow).for_each(|(d, &r)| *d += r);
                    }
                    out.push((*bias, db));
                }
                if self.needs(*x) {
                    let hn = T::from_usize(h).expect("width");
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, xrow), &r) in g.chunks(h).zip(xhat.chunks(h)).zip(rstd) {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..h {
                            let d = grow[j] * gv[j];
                            s1 += d;
                            s2 += d * xrow[j];
                        }
                        for j in 0..h {
                            let d = grow[j] * gv[j];
                            dx.push(r * (d - s1 / hn - xrow[j] * s2 / hn));
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * axis_len + a) * inner + i;
                        let dot: T = (0..*axis_len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*axis_len {
                            dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let h = t.last_dim();
                let mut dt = vec![T::zero(); t.len()];
                for (row, &id) in g.chunks(h).zip(ids) {
                    dt[id * h..(id + 1) * h].iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                }
                out.push((*table, dt));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (nq, h) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let nk = self.value(*k).shape()[0];
                let dh = h / heads;
                let scale = T::one() / T::from_usize(dh).expect("head width").sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); nq * h];
                let mut dk = vec![T::zero(); nk * h];
                let mut dv = vec![T::zero(); nk * h];
                let mut off = 0;
                let mut dp = Vec::new();
                for s in segments {
                    for hd in 0..*heads {
                        let p = &probs[off..off + s.q_len * s.k_len];
                        let qo = s.q_start * h + hd * dh;
                        let ko = s.k_start * h + hd * dh;
                        dp.clear();
                        dp.resize(s.q_len * s.k_len, T::zero());
                        // dP = dO · Vᵀ
                        T::gemm(
                            s.q_len,
                            dh,
                            s.k_len,
                            T::one(),
                            &g[qo..],
                            h as isize,
                            1,
                            &vd[ko..],
                            1,
                            h as isize,
                            T::zero(),
                            &mut dp,
                            s.k_len as isize,
                            1,
                        );
                        // dV += Pᵀ · dO
                        T::gemm(
                            s.k_len,
                            s.q_len,
                            dh,
                            T::one(),
                            p,
                            1,
                            s.k_len as isize,
                            &g[qo..],
                            h as isize,
                            1,
                            T::one(),
                            &mut dv[ko..],
                            h as isize,
                            1,
                        );
                        for (drow, prow) in dp.chunks_mut(s.k_len).zip(p.chunks(s.k_len)) {
                            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (d, &pp) in drow.iter_mut().zip(prow) {
                                *d = pp * (*d - dot);
                            }
                        }
                        // dQ += dS · K · scale, dK += dSᵀ · Q · scale
                        T::gemm(
                            s.q_len,
                            s.k_len,
                            dh,
                            scale,
                            &dp,
                            s.k_len as isize,
                            1,
                            &kd[ko..],
                            h as isize,
                            1,
                            T::one(),
                            &mut dq[qo..],
                            h as isize,
                            1,
                        );
                        T::gemm(
                            s.k_len,
                            s.q_len,
                            dh,
                            scale,
                            &dp,
                            1,
                            s.k_len as isize,
                            &qd[qo..],
                            h as isize,
                            1,
                            T::one(),
                            &mut dk[ko..],
                            h as isize,
                            1,
                        );
                        off += s.q_len * s.k_len;
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                let v = probs.len() / targets.len();
                let w = g[0] / T::from_usize(*count).expect("count");
                let mut dl = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    let row = &mut dl[r * v..(r + 1) * v];
                    row.iter_mut()
                        .zip(&probs[r * v..(r + 1) * v])
                        .for_each(|(d, &p)| *d = p * w);
                    row[t] -= w;
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

/// Compares backpropagated gradients of `f` at `w` to central finite
/// differences and returns the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-8)` over all elements of `w`.
pub fn grad_check<T, F>(f: F, w: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let eval = |w: Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(w);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).data()[0].to_f64_lossy())
    };
    let mut tape = Tape::new();
    let x = tape.leaf(w.clone().with_requires_grad(true));
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.iter().map(|v| v.to_f64_lossy()).collect(),
        None => vec![0.0; w.len()],
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus.data_mut()[i] += T::of(eps);
        minus.data_mut()[i] -= T::of(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let p = tape.matmul(m, col).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[4, 2]));
        let b = tape.constant(Tensor::<f64>::zeros(&[3, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[4, 2]") && err.contains("[3, 5]"), "{err}");
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let ones = tape.constant(t(&[2], &[1.0, 1.0]));
        let zeros = tape.constant(t(&[2], &[0.0, 0.0]));
        let c = tape.constant(t(&[2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let z = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(z, ones, zeros, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let g0 = tape.constant(t(&[2], &[0.0, 0.0]));
        let b7 = tape.constant(t(&[2], &[7.0, 7.0]));
        let y = tape.layer_norm(z, g0, b7, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 7.0]);

        let bad = tape.constant(Tensor::<f64>::zeros(&[3]));
        assert!(matches!(tape.layer_norm(z, bad, zeros, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let b = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let s = tape.softmax(b, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[1] - 1.0 / 3.0).abs() < 1e-12);
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::<f64>::zeros(&[3, 7]));
        let l = tape.cross_entropy(u, &[0, 4, 6], 99).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[1, 2], &[3f64.ln(), 0.0]));
        let l = tape.cross_entropy(x, &[0], 99).unwrap();
        assert!((tape.value(l).data()[0] - (4.0f64 / 3.0).ln()).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(u, &[99, 99, 99], 99),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn backward_cases() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::<f64>::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0f64).with_requires_grad(true));
        let sq = tape.mul(w, w).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let frozen = tape.leaf(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(w, frozen).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(frozen).is_none());

        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grad_check_trivial_cases() {
        let w = Tensor::scalar(3.0f64);
        let e = grad_check(|tape, x| tape.mul(x, x), &w, 1e-4).unwrap();
        assert!(e < 1e-6, "{e}");
        let e = grad_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(2.0))),
            &Tensor::<f64>::zeros(&[3]),
            1e-4,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }
}
