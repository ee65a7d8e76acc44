//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and record themselves; `backward` replays the
//! tape once in reverse, visiting every recorded operation exactly once.
//! A tape constructed with `recording = false` computes values only — no
//! operation metadata is kept and gradients cannot be requested from it,
//! which is what the no-grad teacher/auxiliary forwards use.

use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::num::{Scalar, KL_LOG_FLOOR};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_row_masked, Tensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// out = a · b
    Matmul { a: Var, b: Var },
    /// out = a · bᵀ
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    /// out[r, c] = a[r, c] + bias[c]
    AddRow { a: Var, bias: Var },
    /// out row r = table row ids[r]
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { a: Var, rows: Vec<usize> },
    SliceCols { a: Var, start: usize, end: usize },
    ConcatCols { parts: Vec<Var> },
    /// Row softmax. The saved value is the probability matrix itself, which
    /// already encodes the mask (blocked entries are exactly zero), so the
    /// backward rule needs no mask record.
    Softmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, normed: Vec<T>, inv_std: Vec<T> },
    SquaredRelu { a: Var },
    /// out[r] = Σ_c p·(ln(p+ε) − ln(q+ε))
    ReverseKlRows { p: Var, q: Var },
    /// out[r] = logsumexp(logits row) − logits[r, target[r]]
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    Mean { a: Var },
    Sum { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Gradients produced by one backward pass, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients<T> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.g.get(v.0).and_then(|o| o.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(recording: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            recording,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad && self.recording)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let (op, requires_grad) = if self.recording {
            (op, requires_grad)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims_err(&self, context: &str, a: Var, b: Var) -> CoreError {
        CoreError::Dimension {
            context: context.to_string(),
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    // ── Operations ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(self.dims_err("matmul", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// a[m,k] · b[n,k]ᵀ -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(self.dims_err("matmul_nt", a, b));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatmulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dims_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.dims_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if !ta.is_matrix() || tb.shape() != [ta.cols()] {
            return Err(self.dims_err("add_row", a, bias));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = ta.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += tb.data()[c];
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow { a, bias }, rg))
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if !tt.is_matrix() {
            return Err(CoreError::Rank("gather expects a matrix table".into()));
        }
        let cols = tt.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(CoreError::Range(format!(
                "gather id {bad} out of {} rows",
                tt.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= ta.rows()) {
            return Err(CoreError::Range(format!(
                "select_rows index {bad} out of {} rows",
                ta.rows()
            )));
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if end > ta.cols() || start >= end {
            return Err(CoreError::Range(format!(
                "slice_cols {start}..{end} of {} cols",
                ta.cols()
            )));
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start, end }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Precondition("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let tp = self.value(p);
                if tp.rows() != rows {
                    return Err(self.dims_err("concat_cols", parts[0], p));
                }
                data.extend_from_slice(tp.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax; `blocked`, when present, marks entries forced to
    /// exactly zero probability (additive -inf mask semantics). A fully
    /// blocked row yields all zeros.
    pub fn softmax_rows(&mut self, a: Var, blocked: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if let Some(b) = &blocked {
            if b.len() != rows * cols {
                return Err(CoreError::Dimension {
                    context: "softmax mask".to_string(),
                    left: ta.shape().to_vec(),
                    right: vec![b.len()],
                });
            }
        }
        let mut out = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            let lrow = ta.row(r);
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            match &blocked {
                Some(b) => softmax_row_masked(lrow, |c| b[r * cols + c], orow),
                None => softmax_row_masked(lrow, |_| false, orow),
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if self.value(gain).shape() != [cols] || self.value(bias).shape() != [cols] {
            return Err(self.dims_err("layer_norm", a, gain));
        }
        let mut normed = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(vec![rows, cols]);
        let d = T::of(cols as f64);
        for r in 0..rows {
            let row = ta.row(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<T>()
                / d;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let nh = (row[c] - mean) * inv;
                normed[r * cols + c] = nh;
                out.data_mut()[r * cols + c] =
                    nh * self.value(gain).data()[c] + self.value(bias).data()[c];
            }
        }
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// max(x, 0)² — smooth enough for finite-difference checks, cheap on CPU.
    pub fn squared_relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x > T::zero() {
                    x * x
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::SquaredRelu { a }, rg)
    }

    /// Per-row Σ p·(ln(p+ε) − ln(q+ε)) with the 0·log(0/q) = 0 convention and
    /// the 1e-12 log floor. Gradients flow into whichever side requires them.
    pub fn reverse_kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.value(p).shape() != self.value(q).shape() {
            return Err(self.dims_err("reverse_kl_rows", p, q));
        }
        let rows = self.value(p).rows();
        let mut out = Tensor::zeros(vec![rows]);
        for r in 0..rows {
            out.data_mut()[r] =
                crate::tensor::reverse_kl_row(self.value(p).row(r), self.value(q).row(r));
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(out, Op::ReverseKlRows { p, q }, rg))
    }

    /// Per-row −log softmax(logits)[target].
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.rows() {
            return Err(CoreError::Dimension {
                context: "cross_entropy_rows targets".to_string(),
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= tl.cols()) {
            return Err(CoreError::Range(format!(
                "target {bad} out of vocab {}",
                tl.cols()
            )));
        }
        let rows = tl.rows();
        let mut out = Tensor::zeros(vec![rows]);
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            out.data_mut()[r] = lse - row[targets[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = T::of(ta.numel() as f64);
        let v = ta.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Mean { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(v), Op::Sum { a }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-variable gradients;
    /// every recorded operation is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(CoreError::Precondition(
                "backward on a non-recording tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(CoreError::Rank(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut g: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backprop_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Gradients { g })
    }

    fn acc<'a>(&self, g: &'a mut Vec<Option<Vec<T>>>, v: Var) -> &'a mut Vec<T> {
        let numel = self.value(v).numel();
        g[v.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, gout: &[T], g: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    let bd: &Tensor<T> = self.value(*b);
                    let ga = self.acc(g, *a);
                    matmul_nt_acc(gout, bd.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let ad: &Tensor<T> = self.value(*a);
                    let gb = self.acc(g, *b);
                    matmul_tn_acc(ad.data(), gout, gb, m, k, n);
                }
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if self.needs(*a) {
                    let bd = self.value(*b);
                    let ga = self.acc(g, *a);
                    matmul_acc(gout, bd.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let ad = self.value(*a);
                    let gb = self.acc(g, *b);
                    matmul_tn_acc(gout, ad.data(), gb, m, n, k);
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = self.acc(g, *v);
                        for (x, &y) in gv.iter_mut().zip(gout) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let ga = self.acc(g, *a);
                    for ((x, &y), &bv) in ga.iter_mut().zip(gout).zip(&bd) {
                        *x += y * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = self.acc(g, *b);
                    for ((x, &y), &av) in gb.iter_mut().zip(gout).zip(&ad) {
                        *x += y * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let c = *c;
                    let ga = self.acc(g, *a);
                    for (x, &y) in ga.iter_mut().zip(gout) {
                        *x += y * c;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                let cols = self.value(*a).cols();
                if self.needs(*a) {
                    let ga = self.acc(g, *a);
                    for (x, &y) in ga.iter_mut().zip(gout) {
                        *x += y;
                    }
                }
                if self.needs(*bias) {
                    let gb = self.acc(g, *bias);
                    for (idx, &y) in gout.iter().enumerate() {
                        gb[idx % cols] += y;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let cols = self.value(*table).cols();
                    let gt = self.acc(g, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &gout[r * cols..(r + 1) * cols];
                        let dst = &mut gt[id * cols..(id + 1) * cols];
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                if self.needs(*a) {
                    let cols = self.value(*a).cols();
                    let ga = self.acc(g, *a);
                    for (r, &id) in rows.iter().enumerate() {
                        let src = &gout[r * cols..(r + 1) * cols];
                        let dst = &mut ga[id * cols..(id + 1) * cols];
                        for (x, &y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceCols { a, start, end } => {
                if self.needs(*a) {
                    let cols = self.value(*a).cols();
                    let rows = self.value(*a).rows();
                    let width = end - start;
                    let ga = self.acc(g, *a);
                    for r in 0..rows {
                        for c in 0..width {
                            ga[r * cols + start + c] += gout[r * width + c];
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = self.acc(g, p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += gout[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Softmax { a } => {
                if self.needs(*a) {
                    let probs = &self.nodes[i].value;
                    let (rows, cols) = (probs.rows(), probs.cols());
                    let ga = self.acc(g, *a);
                    for r in 0..rows {
                        let srow = probs.row(r);
                        let grow = &gout[r * cols..(r + 1) * cols];
                        let dot: T = srow.iter().zip(grow).map(|(&s, &y)| s * y).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += srow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let cols = self.value(*a).cols();
                let rows = self.value(*a).rows();
                let gain_data = self.value(*gain).data().to_vec();
                if self.needs(*bias) {
                    let gb = self.acc(g, *bias);
                    for (idx, &y) in gout.iter().enumerate() {
                        gb[idx % cols] += y;
                    }
                }
                if self.needs(*gain) {
                    let gg = self.acc(g, *gain);
                    for (idx, &y) in gout.iter().enumerate() {
                        gg[idx % cols] += y * normed[idx];
                    }
                }
                if self.needs(*a) {
                    let d = T::of(cols as f64);
                    let ga = self.acc(g, *a);
                    for r in 0..rows {
                        let base = r * cols;
                        let mut sum_gy = T::zero();
                        let mut sum_gy_nh = T::zero();
                        for c in 0..cols {
                            let gy = gout[base + c] * gain_data[c];
                            sum_gy += gy;
                            sum_gy_nh += gy * normed[base + c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let gy = gout[base + c] * gain_data[c];
                            ga[base + c] +=
                                inv * (gy - sum_gy / d - normed[base + c] * sum_gy_nh / d);
                        }
                    }
                }
            }
            Op::SquaredRelu { a } => {
                if self.needs(*a) {
                    let vals = self.value(*a).data().to_vec();
                    let ga = self.acc(g, *a);
                    let two = T::of(2.0);
                    for ((x, &y), &v) in ga.iter_mut().zip(gout).zip(&vals) {
                        if v > T::zero() {
                            *x += y * two * v;
                        }
                    }
                }
            }
            Op::ReverseKlRows { p, q } => {
                let eps = T::of(KL_LOG_FLOOR);
                let rows = self.value(*p).rows();
                let cols = self.value(*p).cols();
                for r in 0..rows {
                    // rows clamped to zero in the forward contribute nothing
                    let raw: T = self
                        .value(*p)
                        .row(r)
                        .iter()
                        .zip(self.value(*q).row(r))
                        .filter(|(&pv, _)| pv > T::zero())
                        .map(|(&pv, &qv)| pv * ((pv + eps).ln() - (qv + eps).ln()))
                        .sum();
                    if raw < T::zero() {
                        continue;
                    }
                    // Derivatives treat the floor as acting inside the
                    // logarithms only: d/dp = log-ratio + 1, d/dq = -(p+ε)/(q+ε).
                    // Identical rows then produce exactly zero gradients
                    // through a downstream softmax; the O(ε) deviation from
                    // the floored forward is far below check tolerances.
                    let gr = gout[r];
                    if self.needs(*p) {
                        let qd = self.value(*q).row(r).to_vec();
                        let pd = self.value(*p).row(r).to_vec();
                        let gp = self.acc(g, *p);
                        for c in 0..cols {
                            if pd[c] > T::zero() {
                                let term =
                                    (pd[c] + eps).ln() - (qd[c] + eps).ln() + T::one();
                                gp[r * cols + c] += gr * term;
                            }
                        }
                    }
                    if self.needs(*q) {
                        let pd = self.value(*p).row(r).to_vec();
                        let qd = self.value(*q).row(r).to_vec();
                        let gq = self.acc(g, *q);
                        for c in 0..cols {
                            if pd[c] > T::zero() {
                                gq[r * cols + c] -= gr * (pd[c] + eps) / (qd[c] + eps);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                if self.needs(*logits) {
                    let tl = self.value(*logits);
                    let (rows, cols) = (tl.rows(), tl.cols());
                    let mut probs = vec![T::zero(); cols];
                    let gl = self.acc(g, *logits);
                    for r in 0..rows {
                        softmax_row_masked(tl.row(r), |_| false, &mut probs);
                        let gr = gout[r];
                        for c in 0..cols {
                            let delta = if c == targets[r] { T::one() } else { T::zero() };
                            gl[r * cols + c] += gr * (probs[c] - delta);
                        }
                    }
                }
            }
            Op::Mean { a } => {
                if self.needs(*a) {
                    let n = T::of(self.value(*a).numel() as f64);
                    let gy = gout[0] / n;
                    let ga = self.acc(g, *a);
                    for x in ga.iter_mut() {
                        *x += gy;
                    }
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let gy = gout[0];
                    let ga = self.acc(g, *a);
                    for x in ga.iter_mut() {
                        *x += gy;
                    }
                }
            }
        }
    }
}
