//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every operation appends a node holding its value and enough saved state to
//! run its backward rule. Nodes that do not (transitively) depend on a
//! gradient-requiring leaf are marked inert and skipped by [`Tape::backward`],
//! so frozen sub-networks cost only their forward pass.

use crate::scalar::Scalar;
use crate::tensor::{
    add_row_broadcast, attend_row, gelu, gelu_grad, gemm_into, layer_norm_row, log_sum_exp,
    HeadRows, Matrix,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows that forms one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
    },
    ShiftRows {
        x: Var,
        start: Var,
        segments: Vec<Segment>,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    AffineNormalize {
        x: Var,
        mu: Var,
        log_sigma: Var,
    },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    live: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, live: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, live, op });
        Var(self.nodes.len() - 1)
    }

    fn live(&self, v: Var) -> bool {
        self.nodes[v.0].live
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Matrix<T>, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let live = self.live(a) || self.live(b);
        self.push(value, live, Op::MatMul(a, b))
    }

    /// `x + bias` with a `1×n` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut value = self.value(x).clone();
        add_row_broadcast(&mut value, self.value(bias));
        let live = self.live(x) || self.live(bias);
        self.push(value, live, Op::AddRow(x, bias))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Matrix<T>, bool) {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect();
        (
            Matrix {
                rows: ma.rows,
                cols: ma.cols,
                data,
            },
            self.live(a) || self.live(b),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (v, live) = self.zip(a, b, |x, y| x + y);
        self.push(v, live, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (v, live) = self.zip(a, b, |x, y| x - y);
        self.push(v, live, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (v, live) = self.zip(a, b, |x, y| x * y);
        self.push(v, live, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let live = self.live(a);
        self.push(v, live, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let live = self.live(a);
        self.push(v, live, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let live = self.live(a);
        self.push(v, live, Op::Gelu(a))
    }

    /// Row-wise layer normalization, optionally followed by `γ⊙x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let ones = Matrix::filled(1, cols, T::one());
        let zeros = Matrix::zeros(1, cols);
        let (g, b) = match affine {
            Some((g, b)) => (self.value(g), self.value(b)),
            None => (&ones, &zeros),
        };
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, rs) = layer_norm_row(xm.row(r), &g.data, &b.data, out.row_mut(r));
            rstd.push(rs);
        }
        let live = self.live(x) || affine.is_some_and(|(g, b)| self.live(g) || self.live(b));
        self.push(out, live, Op::LayerNorm { x, affine, rstd })
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    /// Each segment attends only within itself.
    pub fn causal_attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Var {
        let m = self.value(qkv);
        assert_eq!(m.cols % 3, 0, "qkv width must be 3×width");
        let width = m.cols / 3;
        assert_eq!(width % heads, 0, "width must divide into heads");
        let hd = width / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let stride = 3 * width;
        let total: usize = segments
            .iter()
            .map(|s| heads * s.len * (s.len + 1) / 2)
            .sum();
        let mut probs = vec![T::zero(); total];
        let mut out = Matrix::zeros(m.rows, width);
        let mut off = 0;
        for seg in segments {
            let base = &m.data[seg.start * stride..(seg.start + seg.len) * stride];
            for h in 0..heads {
                let keys = HeadRows {
                    data: base,
                    stride,
                    offset: width + h * hd,
                };
                let values = HeadRows {
                    data: base,
                    stride,
                    offset: 2 * width + h * hd,
                };
                for i in 0..seg.len {
                    let q = &base[i * stride + h * hd..i * stride + (h + 1) * hd];
                    let o = &mut out.row_mut(seg.start + i)[h * hd..(h + 1) * hd];
                    attend_row(q, keys, values, i + 1, scale, &mut probs[off..off + i + 1], o);
                    off += i + 1;
                }
            }
        }
        let live = self.live(qkv);
        self.push(
            out,
            live,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// `out[i] = src[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = self.value(src).select_rows(idx);
        let live = self.live(src);
        self.push(
            v,
            live,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    /// `out[idx[i]] = src[i]`, zero elsewhere; indices must be distinct.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Var {
        let s = self.value(src);
        assert_eq!(s.rows, idx.len(), "scatter index count");
        let mut v = Matrix::zeros(rows, s.cols);
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(s.row(i));
        }
        let live = self.live(src);
        self.push(
            v,
            live,
            Op::ScatterRows {
                src,
                idx: idx.to_vec(),
            },
        )
    }

    /// Within each segment: `out[0] = start`, `out[i] = x[i-1]`.
    pub fn shift_rows(&mut self, x: Var, start: Var, segments: &[Segment]) -> Var {
        let xm = self.value(x);
        let sv = self.value(start);
        assert_eq!(sv.shape(), (1, xm.cols), "start vector shape");
        let mut v = Matrix::zeros(xm.rows, xm.cols);
        for seg in segments {
            if seg.len == 0 {
                continue;
            }
            v.row_mut(seg.start).copy_from_slice(&sv.data);
            for i in 1..seg.len {
                let src = xm.row(seg.start + i - 1).to_vec();
                v.row_mut(seg.start + i).copy_from_slice(&src);
            }
        }
        let live = self.live(x) || self.live(start);
        self.push(
            v,
            live,
            Op::ShiftRows {
                x,
                start,
                segments: segments.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols, "column slice out of range");
        let mut v = Matrix::zeros(s.rows, len);
        for r in 0..s.rows {
            v.row_mut(r).copy_from_slice(&s.row(r)[start..start + len]);
        }
        let live = self.live(src);
        self.push(v, live, Op::SliceCols { src, start })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let live = self.live(x);
        self.push(v, live, Op::Clamp { x, lo, hi })
    }

    /// `z = (x − μ) ⊙ exp(−log σ)`.
    pub fn affine_normalize(&mut self, x: Var, mu: Var, log_sigma: Var) -> Var {
        let (xm, mm, lm) = (self.value(x), self.value(mu), self.value(log_sigma));
        assert_eq!(xm.shape(), mm.shape());
        assert_eq!(xm.shape(), lm.shape());
        let data = (0..xm.len())
            .map(|i| (xm.data[i] - mm.data[i]) * (-lm.data[i]).exp())
            .collect();
        let v = Matrix {
            rows: xm.rows,
            cols: xm.cols,
            data,
        };
        let live = self.live(x) || self.live(mu) || self.live(log_sigma);
        self.push(v, live, Op::AffineNormalize { x, mu, log_sigma })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        let live = self.live(x);
        self.push(Matrix::scalar(s), live, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|&v| v * v).sum::<T>();
        let live = self.live(x);
        self.push(Matrix::scalar(s), live, Op::SumSquares(x))
    }

    /// Mean over rows of `−log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "one target per logit row");
        assert!(lm.rows > 0, "cross entropy over zero rows");
        let mut probs = Matrix::zeros(lm.rows, lm.cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lm.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for (p, &l) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
        }
        let loss = total / T::lit(lm.rows as f64);
        let live = self.live(logits);
        self.push(
            Matrix::scalar(loss),
            live,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a `1×1` output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        self.backward_with(output, Matrix::scalar(T::one()))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Matrix<T>) -> Grads<T> {
        assert_eq!(self.value(output).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.live {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.live(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Matrix<T>>], v: Var) -> &'g mut Matrix<T> {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.live(*a) {
                    let slot = self.grad_slot(grads, *a);
                    gemm_into(g, false, bv, true, T::one(), slot);
                }
                if self.live(*b) {
                    let slot = self.grad_slot(grads, *b);
                    gemm_into(av, true, g, false, T::one(), slot);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.live(*b) {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, &v) in gb.data.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.live(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Matrix { rows: g.rows, cols: g.cols, data: d });
                }
                if self.live(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Matrix { rows: g.rows, cols: g.cols, data: d });
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * *c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(&gv, &x)| gv * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Matrix { rows: g.rows, cols: g.cols, data: d });
            }
            Op::LayerNorm { x, affine, rstd } => {
                self.layer_norm_backward(node, *x, *affine, rstd, g, grads)
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                if self.live(*qkv) {
                    let dqkv = self.attention_backward(*qkv, segments, *heads, probs, g);
                    self.accumulate(grads, *qkv, dqkv);
                }
            }
            Op::GatherRows { src, idx } => {
                if self.live(*src) {
                    let slot = self.grad_slot(grads, *src);
                    for (i, &r) in idx.iter().enumerate() {
                        for (acc, &v) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::ScatterRows { src, idx } => {
                if self.live(*src) {
                    self.accumulate(grads, *src, g.select_rows(idx));
                }
            }
            Op::ShiftRows { x, start, segments } => {
                if self.live(*x) {
                    let slot = self.grad_slot(grads, *x);
                    for seg in segments {
                        for i in 1..seg.len {
                            let src = g.row(seg.start + i);
                            for (acc, &v) in slot.row_mut(seg.start + i - 1).iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                }
                if self.live(*start) {
                    let mut gs = Matrix::zeros(1, g.cols);
                    for seg in segments.iter().filter(|s| s.len > 0) {
                        for (acc, &v) in gs.data.iter_mut().zip(g.row(seg.start)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *start, gs);
                }
            }
            Op::SliceCols { src, start } => {
                if self.live(*src) {
                    let slot = self.grad_slot(grads, *src);
                    for r in 0..g.rows {
                        let dst = &mut slot.row_mut(r)[*start..*start + g.cols];
                        for (acc, &v) in dst.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(&gv, &a)| if a >= *lo && a <= *hi { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Matrix { rows: g.rows, cols: g.cols, data: d });
            }
            Op::AffineNormalize { x, mu, log_sigma } => {
                let z = &node.value;
                let ls = self.value(*log_sigma);
                let inv: Vec<T> = ls.data.iter().map(|&l| (-l).exp()).collect();
                let (rows, cols) = g.shape();
                if self.live(*x) {
                    let d = (0..g.len()).map(|i| g.data[i] * inv[i]).collect();
                    self.accumulate(grads, *x, Matrix { rows, cols, data: d });
                }
                if self.live(*mu) {
                    let d = (0..g.len()).map(|i| -g.data[i] * inv[i]).collect();
                    self.accumulate(grads, *mu, Matrix { rows, cols, data: d });
                }
                if self.live(*log_sigma) {
                    let d = (0..g.len()).map(|i| -g.data[i] * z.data[i]).collect();
                    self.accumulate(grads, *log_sigma, Matrix { rows, cols, data: d });
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.data[0]));
            }
            Op::SumSquares(x) => {
                let two = T::lit(2.0) * g.data[0];
                let d = self.value(*x).map(|v| v * two);
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data[0] / T::lit(targets.len() as f64);
                let mut d = probs.map(|p| p * scale);
                for (r, &t) in targets.iter().enumerate() {
                    let v = d.get(r, t) - scale;
                    d.set(r, t, v);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        node: &Node<T>,
        x: Var,
        affine: Option<(Var, Var)>,
        rstd: &[T],
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let (rows, cols) = g.shape();
        let xv = self.value(x);
        let n = T::lit(cols as f64);
        // Recover x̂ from the input rather than inverting the affine output.
        let mut xhat = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * rstd[r];
            }
        }
        let gamma = affine.map(|(gm, _)| self.value(gm).data.clone());
        if let Some((gv, bv)) = affine {
            if self.live(gv) {
                let mut dg = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dg.data[c] += g.get(r, c) * xhat.get(r, c);
                    }
                }
                self.accumulate(grads, gv, dg);
            }
            if self.live(bv) {
                let mut db = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for (acc, &v) in db.data.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, bv, db);
            }
        }
        if self.live(x) {
            let mut dx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let gr = g.row(r);
                let xh = xhat.row(r);
                let dxhat: Vec<T> = match &gamma {
                    Some(gm) => gr.iter().zip(gm).map(|(&a, &b)| a * b).collect(),
                    None => gr.to_vec(),
                };
                let m1 = dxhat.iter().copied().sum::<T>() / n;
                let m2 = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                    *out = rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                }
            }
            self.accumulate(grads, x, dx);
        }
        let _ = node;
    }

    fn attention_backward(
        &self,
        qkv: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[T],
        g: &Matrix<T>,
    ) -> Matrix<T> {
        let m = self.value(qkv);
        let width = m.cols / 3;
        let hd = width / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let stride = 3 * width;
        let mut d = Matrix::zeros(m.rows, m.cols);
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let qo = h * hd;
                let ko = width + h * hd;
                let vo = 2 * width + h * hd;
                for i in 0..seg.len {
                    let ri = seg.start + i;
                    let p = &probs[off..off + i + 1];
                    off += i + 1;
                    let go = &g.row(ri)[h * hd..(h + 1) * hd];
                    dp.clear();
                    for j in 0..=i {
                        let rj = seg.start + j;
                        let v = &m.data[rj * stride + vo..rj * stride + vo + hd];
                        let mut s = T::zero();
                        for t in 0..hd {
                            s += go[t] * v[t];
                        }
                        dp.push(s);
                        // dV_j += p_ij · dO_i
                        let dv = &mut d.data[rj * stride + vo..rj * stride + vo + hd];
                        for t in 0..hd {
                            dv[t] += p[j] * go[t];
                        }
                    }
                    let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..=i {
                        let rj = seg.start + j;
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for t in 0..hd {
                            let kv = m.data[rj * stride + ko + t];
                            let qv = m.data[ri * stride + qo + t];
                            d.data[ri * stride + qo + t] += ds * kv;
                            d.data[rj * stride + ko + t] += ds * qv;
                        }
                    }
                }
            }
        }
        d
    }
}
