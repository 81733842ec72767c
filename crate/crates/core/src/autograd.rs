//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Activations of a batch of sequences are stored as `(batch * seq) × width`
//! matrices. Dense layers act on all rows at once; sequence-aware ops
//! (attention, pooling, concatenation) take the batch layout explicitly.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking of one multi-head attention call.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows. A key
/// `j` is visible to query `i` of example `b` iff `allow[i * k_len + j]`
/// (when present) and `key_valid[b * k_len + j]` (when present).
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub allow: Option<Rc<Vec<bool>>>,
    pub key_valid: Option<Rc<Vec<bool>>>,
}

impl AttnSpec {
    #[inline]
    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.allow.as_ref().map_or(true, |a| a[i * self.k_len + j])
            && self.key_valid.as_ref().map_or(true, |kv| kv[b * self.k_len + j])
    }
}

/// One piece of a per-example sequence concatenation.
#[derive(Debug, Clone, Copy)]
pub struct SeqPart {
    pub var: Var,
    pub len: usize,
    /// `true` when the part is a single `len × width` block shared by every example.
    pub shared: bool,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddSeqPos { x: Var, pos: Var, seq: usize },
    Scale(Var, T),
    MulScalar { x: Var, s: Var },
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, inv_std: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatSeq { parts: Vec<SeqPart>, batch: usize },
    SliceSeq { x: Var, seq: usize, start: usize, len: usize },
    MeanPool { x: Var, seq: usize, valid: Vec<usize> },
    L2Normalize { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, scale: T, probs: Matrix<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A recording of matrix operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// A trainable input.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xb = self.value(x);
        let bb = self.value(bias);
        assert_eq!(bb.shape(), (1, xb.cols()), "bias shape mismatch");
        let mut v = xb.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(v, Op::AddBias(x, bias), ng)
    }

    /// Adds row `t` of `pos` to row `t` of every length-`seq` sequence in `x`.
    pub fn add_seq_pos(&mut self, x: Var, pos: Var, seq: usize) -> Var {
        let xv = self.value(x);
        let pv = self.value(pos);
        assert!(pv.rows() >= seq && pv.cols() == xv.cols(), "positional table too small");
        assert_eq!(xv.rows() % seq.max(1), 0, "rows not a multiple of seq");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let prow = pv.row(r % seq);
            for (o, &p) in v.row_mut(r).iter_mut().zip(prow) {
                *o += p;
            }
        }
        let ng = self.ng(x) || self.ng(pos);
        self.push(v, Op::AddSeqPos { x, pos, seq }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Multiplies `x` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        let ng = self.ng(x) || self.ng(s);
        self.push(v, Op::MulScalar { x, s }, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(T::exp);
        let ng = self.ng(x);
        self.push(v, Op::Exp(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let a = T::from_f64_lossy(GELU_A);
        let half = T::from_f64_lossy(0.5);
        let v = self.value(x).map(|x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()));
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalisation with affine `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols);
        let n = T::from_usize_lossy(cols);
        let eps = T::from_f64_lossy(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &a) in xh.iter_mut().zip(row) {
                *h = (a - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Scaled dot-product attention over `spec.heads` column groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        assert_eq!(qv.rows(), spec.batch * spec.q_len, "query rows");
        assert_eq!(kv.rows(), spec.batch * spec.k_len, "key rows");
        assert_eq!(vv.shape(), kv.shape(), "value shape");
        assert_eq!(kv.cols(), d);
        assert_eq!(d % spec.heads, 0, "width not divisible by heads");
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (lq, lk) = (spec.q_len, spec.k_len);
        let mut probs = vec![T::zero(); spec.batch * spec.heads * lq * lk];
        let mut out = Matrix::zeros(qv.rows(), d);
        let ds = d as isize;
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &mut probs[(b * spec.heads + h) * lq * lk..][..lq * lk];
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                T::gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qv.data()[qoff..],
                    ds,
                    1,
                    &kv.data()[koff..],
                    1,
                    ds,
                    T::zero(),
                    p,
                    lk as isize,
                    1,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let mut max = T::neg_infinity();
                    for (j, s) in row.iter().enumerate() {
                        if spec.visible(b, i, j) && *s > max {
                            max = *s;
                        }
                    }
                    if max == T::neg_infinity() {
                        row.iter_mut().for_each(|s| *s = T::zero());
                        continue;
                    }
                    let mut total = T::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if spec.visible(b, i, j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = T::zero();
                        }
                    }
                    let inv = T::one() / total;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                T::gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    p,
                    lk as isize,
                    1,
                    &vv.data()[koff..],
                    ds,
                    1,
                    T::zero(),
                    &mut out.data_mut()[qoff..],
                    ds,
                    1,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Per-example concatenation of sequences along the time axis.
    pub fn concat_seq(&mut self, parts: &[SeqPart], batch: usize) -> Var {
        let cols = self.value(parts[0].var).cols();
        let total: usize = parts.iter().map(|p| p.len).sum();
        let mut out = Matrix::zeros(batch * total, cols);
        let mut ng = false;
        for b in 0..batch {
            let mut row = b * total;
            for p in parts {
                let pv = self.value(p.var);
                assert_eq!(pv.cols(), cols, "concat width mismatch");
                let base = if p.shared { 0 } else { b * p.len };
                assert!(pv.rows() >= base + p.len, "concat part too short");
                for t in 0..p.len {
                    out.row_mut(row + t).copy_from_slice(pv.row(base + t));
                }
                row += p.len;
            }
        }
        for p in parts {
            ng |= self.ng(p.var);
        }
        self.push(out, Op::ConcatSeq { parts: parts.to_vec(), batch }, ng)
    }

    /// Rows `start..start+len` of every length-`seq` sequence.
    pub fn slice_seq(&mut self, x: Var, seq: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= seq);
        let batch = xv.rows() / seq;
        let mut out = Matrix::zeros(batch * len, xv.cols());
        for b in 0..batch {
            for t in 0..len {
                out.row_mut(b * len + t).copy_from_slice(xv.row(b * seq + start + t));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceSeq { x, seq, start, len }, ng)
    }

    /// Mean of the first `valid[b]` rows of each length-`seq` sequence.
    pub fn mean_pool(&mut self, x: Var, seq: usize, valid: &[usize]) -> Var {
        let xv = self.value(x);
        let batch = valid.len();
        assert_eq!(xv.rows(), batch * seq);
        let mut out = Matrix::zeros(batch, xv.cols());
        for (b, &n) in valid.iter().enumerate() {
            assert!(n >= 1 && n <= seq, "mean_pool needs 1..=seq valid rows");
            let inv = T::one() / T::from_usize_lossy(n);
            let orow = out.row_mut(b);
            for t in 0..n {
                for (o, &a) in orow.iter_mut().zip(xv.row(b * seq + t)) {
                    *o += a;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanPool { x, seq, valid: valid.to_vec() }, ng)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = self.value(x).l2_normalize_rows();
        let ng = self.ng(x);
        self.push(v, Op::L2Normalize { x }, ng)
    }

    /// `scale * Σ_r −log softmax(logits_r)[target_r]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: T) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(t) = *tgt else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&a| (a - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, &a) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (a - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total * scale),
            Op::CrossEntropy { logits, targets: targets.to_vec(), scale, probs },
            ng,
        )
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Matrix<T>>], v: Var) -> Option<&'a mut Matrix<T>> {
        if !self.ng(v) {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn backprop_node(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).transpose().matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.transpose().matmul(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows() {
                        for (o, &a) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                }
            }
            Op::AddSeqPos { x, pos, seq } => {
                self.accumulate(grads, *x, g.clone());
                if let Some(gp) = self.grad_slot(grads, *pos) {
                    for r in 0..g.rows() {
                        for (o, &a) in gp.row_mut(r % seq).iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|a| a * *s)),
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.ng(*x) {
                    self.accumulate(grads, *x, g.map(|a| a * sv));
                }
                if self.ng(*s) {
                    let xv = self.value(*x);
                    let d: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(grads, *s, Matrix::scalar(d));
                }
            }
            Op::Exp(x) => {
                let mut d = g.clone();
                for (a, &y) in d.data_mut().iter_mut().zip(out.data()) {
                    *a *= y;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let a3 = T::from_f64_lossy(GELU_A);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let xv = self.value(*x);
                let mut d = g.clone();
                for (dg, &xi) in d.data_mut().iter_mut().zip(xv.data()) {
                    let u = c * (xi + a3 * xi * xi * xi);
                    let t = u.tanh();
                    let du = c * (T::one() + three * a3 * xi * xi);
                    let deriv = half * (T::one() + t) + half * xi * (T::one() - t * t) * du;
                    *dg *= deriv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).data();
                if self.ng(*x) {
                    let n = T::from_usize_lossy(cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        let k = inv_std[r] / n;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            let dxh = gr[c] * gam[c];
                            *o = k * (n * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        for ((o, &a), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += a * h;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for r in 0..rows {
                        for (o, &a) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs } => self.backprop_attention(*q, *k, *v, spec, probs, g, grads),
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &a) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                }
            }
            Op::ConcatSeq { parts, batch } => {
                let total: usize = parts.iter().map(|p| p.len).sum();
                for b in 0..*batch {
                    let mut row = b * total;
                    for p in parts {
                        if let Some(gp) = self.grad_slot(grads, p.var) {
                            let base = if p.shared { 0 } else { b * p.len };
                            for t in 0..p.len {
                                for (o, &a) in gp.row_mut(base + t).iter_mut().zip(g.row(row + t)) {
                                    *o += a;
                                }
                            }
                        }
                        row += p.len;
                    }
                }
            }
            Op::SliceSeq { x, seq, start, len } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let batch = g.rows() / len.max(&1);
                    for b in 0..batch {
                        for t in 0..*len {
                            for (o, &a) in gx.row_mut(b * seq + start + t).iter_mut().zip(g.row(b * len + t)) {
                                *o += a;
                            }
                        }
                    }
                }
            }
            Op::MeanPool { x, seq, valid } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (b, &n) in valid.iter().enumerate() {
                        let inv = T::one() / T::from_usize_lossy(n);
                        for t in 0..n {
                            for (o, &a) in gx.row_mut(b * seq + t).iter_mut().zip(g.row(b)) {
                                *o += a * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = xv.row(r).iter().map(|&a| a * a).sum::<T>().sqrt().max(T::from_f64_lossy(1e-12));
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - y[c] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, scale, probs } => {
                let gs = g.item() * *scale;
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(t) = *tgt else { continue };
                    for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = p * gs;
                    }
                    let cur = d.get(r, t);
                    d.set(r, t, cur - gs);
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
        g: &Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
    ) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (lq, lk) = (spec.q_len, spec.k_len);
        let ds = d as isize;
        let mut dq = Matrix::zeros(qv.rows(), d);
        let mut dk = Matrix::zeros(kv.rows(), d);
        let mut dv = Matrix::zeros(vv.rows(), d);
        let mut dp = vec![T::zero(); lq * lk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &probs[(b * spec.heads + h) * lq * lk..][..lq * lk];
                let qoff = b * lq * d + h * dh;
                let koff = b * lk * d + h * dh;
                // dV = Pᵀ dO
                T::gemm(
                    lk,
                    lq,
                    dh,
                    T::one(),
                    p,
                    1,
                    lk as isize,
                    &g.data()[qoff..],
                    ds,
                    1,
                    T::zero(),
                    &mut dv.data_mut()[koff..],
                    ds,
                    1,
                );
                // dP = dO Vᵀ
                T::gemm(
                    lq,
                    dh,
                    lk,
                    T::one(),
                    &g.data()[qoff..],
                    ds,
                    1,
                    &vv.data()[koff..],
                    1,
                    ds,
                    T::zero(),
                    &mut dp,
                    lk as isize,
                    1,
                );
                for i in 0..lq {
                    let prow = &p[i * lk..(i + 1) * lk];
                    let drow = &mut dp[i * lk..(i + 1) * lk];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dd, &pp) in drow.iter_mut().zip(prow) {
                        *dd = pp * (*dd - dot);
                    }
                }
                // dQ = dS K · scale, dK = dSᵀ Q · scale
                T::gemm(
                    lq,
                    lk,
                    dh,
                    scale,
                    &dp,
                    lk as isize,
                    1,
                    &kv.data()[koff..],
                    ds,
                    1,
                    T::zero(),
                    &mut dq.data_mut()[qoff..],
                    ds,
                    1,
                );
                T::gemm(
                    lk,
                    lq,
                    dh,
                    scale,
                    &dp,
                    1,
                    lk as isize,
                    &qv.data()[qoff..],
                    ds,
                    1,
                    T::zero(),
                    &mut dk.data_mut()[koff..],
                    ds,
                    1,
                );
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}
