//! Tape-style computation graph. Forward ops append nodes in topological
//! order; `backward` walks the tape in exact reverse, accumulating each
//! node's gradient exactly once.

use super::{Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Relu(Var),
    MeanRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    GatherPerRow { x: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;
/// Fill value standing in for -inf in masked attention logits. Keeps every
/// tensor finite while zeroing the masked weights after softmax.
const MASK_FILL: f64 = -1e9;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, with zeros for nodes the loss never touched.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn finish(
        &mut self,
        op_name: &'static str,
        op: Op<T>,
        value: Tensor<T>,
        parents: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = self.needs(parents);
        Ok(self.push(op, value, needs))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("add", Op::Add(a, b), value, &[a, b])
    }

    /// `(n, d) + (1, d)` broadcast over rows; used for bias terms.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = ta.rows_cols();
        let (bn, bd) = tb.rows_cols();
        if bn != 1 || bd != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(ta.data()[i * d + j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("add_row", Op::AddRow(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("sub", Op::Sub(a, b), value, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("mul", Op::Mul(a, b), value, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.rows_cols();
        let (k2, m) = tb.rows_cols();
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = Tensor::new(vec![n, m], matmul_raw(ta.data(), tb.data(), n, k, m))?;
        self.finish("matmul", Op::MatMul(a, b), value, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, d) = ta.rows_cols();
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                data[j * n + i] = ta.data()[i * d + j];
            }
        }
        let value = Tensor::new(vec![d, n], data)?;
        self.finish("transpose", Op::Transpose(a), value, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("scale", Op::Scale(a, c), value, &[a])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, d) = ta.rows_cols();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
            data.extend(exps.iter().map(|&e| e / sum));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("softmax", Op::Softmax(a), value, &[a])
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, d) = ta.rows_cols();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &ta.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&x| (x - max).exp())
                .fold(T::zero(), |acc, e| acc + e)
                .ln()
                + max;
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("log_softmax", Op::LogSoftmax(a), value, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("log", Op::Log(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish("relu", Op::Relu(a), value, &[a])
    }

    /// Mean over axis 0: `(n, d) -> (1, d)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (n, d) = ta.rows_cols();
        let inv = T::from_f64(1.0 / n as f64);
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] = data[j] + ta.data()[i * d + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        let value = Tensor::new(vec![1, d], data)?;
        self.finish("mean_rows", Op::MeanRows(a), value, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let sum = ta.data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.finish("sum_all", Op::SumAll(a), Tensor::scalar(sum), &[a])
    }

    /// Stack along axis 0. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                reason: "no parts",
            });
        }
        let d = self.value(parts[0]).rows_cols().1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pn, pd) = tp.rows_cols();
            if pd != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            n += pn;
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.finish("concat_rows", Op::ConcatRows(parts.to_vec()), value, parts)
    }

    /// Stack along axis 1. All parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no parts",
            });
        }
        let n = self.value(parts[0]).rows_cols().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let tp = self.value(p);
                tp.rows_cols().1
            })
            .collect();
        for &p in parts {
            if self.value(p).rows_cols().0 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for (idx, &p) in parts.iter().enumerate() {
                let w = widths[idx];
                let tp = self.value(p);
                data.extend_from_slice(&tp.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.finish("concat_cols", Op::ConcatCols(parts.to_vec()), value, parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = tx.rows_cols();
        if start + len > d {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                extent: d,
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * d + start..i * d + start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        self.finish(
            "slice_cols",
            Op::SliceCols { x, start, len },
            value,
            &[x],
        )
    }

    /// Row lookup: `table` is `(vocab, d)`, output `(ids.len(), d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (v, d) = tt.rows_cols();
        if ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vec![0],
                reason: "empty id list",
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        self.finish(
            "embedding",
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        )
    }

    /// Replace masked entries with a large negative constant (attention mask).
    pub fn masked_fill_neg(&mut self, x: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::from_f64(MASK_FILL);
        let data = tx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.finish(
            "masked_fill",
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            value,
            &[x],
        )
    }

    /// Pick one entry per row: `(n, d)` with `ids.len() == n` -> rank-1 `(n,)`.
    pub fn gather_per_row(&mut self, x: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (n, d) = tx.rows_cols();
        if ids.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "gather_per_row",
                lhs: tx.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let mut data = Vec::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if id >= d {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_per_row",
                    index: id,
                    extent: d,
                });
            }
            data.push(tx.data()[i * d + id]);
        }
        let value = Tensor::new(vec![n], data)?;
        self.finish(
            "gather_per_row",
            Op::GatherPerRow {
                x,
                ids: ids.to_vec(),
            },
            value,
            &[x],
        )
    }

    /// Per-row layer normalization with affine parameters of shape `(1, d)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (n, d) = self.value(x).rows_cols();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let tv = self.value(v);
            if tv.rows_cols() != (1, d) {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: tv.shape().to_vec(),
                });
            }
        }
        let tx = self.value(x);
        let tg = self.value(gamma).data().to_vec();
        let tb = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let (mean, inv_std) = norm_stats(row);
            for j in 0..d {
                data.push((row[j] - mean) * inv_std * tg[j] + tb[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.finish(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta },
            value,
            &[x, gamma, beta],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Errors on a non-scalar loss or when
    /// called a second time on the same graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_shape });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &out_grad);
            self.nodes[i].grad = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, delta_fn: impl FnOnce(&Tensor<T>) -> Tensor<T>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let delta = {
            let value = &self.nodes[target.0].value;
            delta_fn(value)
        };
        match &mut self.nodes[target.0].grad {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            None => self.nodes[target.0].grad = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, out_grad: &Tensor<T>) {
        // Ops are matched by value tuple to avoid holding a borrow on self.
        enum Work<T> {
            Unary(Var, Tensor<T>),
            Binary(Var, Tensor<T>, Var, Tensor<T>),
            Many(Vec<(Var, Tensor<T>)>),
            None,
        }
        let work: Work<T> = match &self.nodes[idx].op {
            Op::Leaf => Work::None,
            Op::Add(a, b) => Work::Binary(*a, out_grad.clone(), *b, out_grad.clone()),
            Op::AddRow(a, b) => {
                let (n, d) = out_grad.rows_cols();
                let mut bg = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        bg[j] = bg[j] + out_grad.data()[i * d + j];
                    }
                }
                Work::Binary(
                    *a,
                    out_grad.clone(),
                    *b,
                    Tensor::new(vec![1, d], bg).expect("add_row grad shape"),
                )
            }
            Op::Sub(a, b) => {
                let neg = out_grad.map(|v| -v);
                Work::Binary(*a, out_grad.clone(), *b, neg)
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = {
                    let tb = &self.nodes[b.0].value;
                    elementwise(out_grad, tb, |g, y| g * y)
                };
                let gb = {
                    let ta = &self.nodes[a.0].value;
                    elementwise(out_grad, ta, |g, x| g * x)
                };
                Work::Binary(a, ga, b, gb)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (n, k) = ta.rows_cols();
                let (_, m) = tb.rows_cols();
                // dA = dC * B^T ; dB = A^T * dC
                let bt = transpose_raw(tb.data(), k, m);
                let ga = Tensor::new(vec![n, k], matmul_raw(out_grad.data(), &bt, n, m, k))
                    .expect("matmul grad shape");
                let at = transpose_raw(ta.data(), n, k);
                let gb = Tensor::new(vec![k, m], matmul_raw(&at, out_grad.data(), k, n, m))
                    .expect("matmul grad shape");
                Work::Binary(a, ga, b, gb)
            }
            Op::Transpose(a) => {
                let (d, n) = out_grad.rows_cols();
                let gt = transpose_raw(out_grad.data(), d, n);
                Work::Unary(*a, Tensor::new(vec![n, d], gt).expect("transpose grad shape"))
            }
            Op::Scale(a, c) => {
                let c = *c;
                Work::Unary(*a, out_grad.map(|g| g * c))
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let (n, d) = y.rows_cols();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &out_grad.data()[i * d..(i + 1) * d];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..d {
                        gx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Work::Unary(
                    *a,
                    Tensor::new(y.shape().to_vec(), gx).expect("softmax grad shape"),
                )
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[idx].value;
                let (n, d) = y.rows_cols();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y.data()[i * d..(i + 1) * d];
                    let gr = &out_grad.data()[i * d..(i + 1) * d];
                    let gsum = gr.iter().fold(T::zero(), |acc, &g| acc + g);
                    for j in 0..d {
                        gx[i * d + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                Work::Unary(
                    *a,
                    Tensor::new(y.shape().to_vec(), gx).expect("log_softmax grad shape"),
                )
            }
            Op::Log(a) => {
                let a = *a;
                let gx = {
                    let tx = &self.nodes[a.0].value;
                    elementwise(out_grad, tx, |g, x| g / x)
                };
                Work::Unary(a, gx)
            }
            Op::Relu(a) => {
                let a = *a;
                let gx = {
                    let tx = &self.nodes[a.0].value;
                    elementwise(out_grad, tx, |g, x| if x > T::zero() { g } else { T::zero() })
                };
                Work::Unary(a, gx)
            }
            Op::MeanRows(a) => {
                let a = *a;
                let tx = &self.nodes[a.0].value;
                let (n, d) = tx.rows_cols();
                let inv = T::from_f64(1.0 / n as f64);
                let mut gx = Vec::with_capacity(n * d);
                for _ in 0..n {
                    gx.extend(out_grad.data().iter().map(|&g| g * inv));
                }
                Work::Unary(a, Tensor::new(tx.shape().to_vec(), gx).expect("mean grad shape"))
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = out_grad.data()[0];
                let tx = &self.nodes[a.0].value;
                Work::Unary(a, tx.map(|_| g))
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let (_, d) = out_grad.rows_cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let tp = &self.nodes[p.0].value;
                    let (pn, _) = tp.rows_cols();
                    let slice = &out_grad.data()[offset * d..(offset + pn) * d];
                    out.push((
                        p,
                        Tensor::new(tp.shape().to_vec(), slice.to_vec())
                            .expect("concat_rows grad shape"),
                    ));
                    offset += pn;
                }
                Work::Many(out)
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let (n, d) = out_grad.rows_cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let tp = &self.nodes[p.0].value;
                    let (_, pw) = tp.rows_cols();
                    let mut gx = Vec::with_capacity(n * pw);
                    for i in 0..n {
                        gx.extend_from_slice(
                            &out_grad.data()[i * d + offset..i * d + offset + pw],
                        );
                    }
                    out.push((
                        p,
                        Tensor::new(tp.shape().to_vec(), gx).expect("concat_cols grad shape"),
                    ));
                    offset += pw;
                }
                Work::Many(out)
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let tx = &self.nodes[x.0].value;
                let (n, d) = tx.rows_cols();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..len {
                        gx[i * d + start + j] = out_grad.data()[i * len + j];
                    }
                }
                Work::Unary(x, Tensor::new(tx.shape().to_vec(), gx).expect("slice grad shape"))
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let tt = &self.nodes[table.0].value;
                let (v, d) = tt.rows_cols();
                let mut gt = vec![T::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + out_grad.data()[i * d + j];
                    }
                }
                Work::Unary(
                    table,
                    Tensor::new(tt.shape().to_vec(), gt).expect("embedding grad shape"),
                )
            }
            Op::MaskedFill { x, mask } => {
                let (x, mask) = (*x, mask.clone());
                let gx: Vec<T> = out_grad
                    .data()
                    .iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { T::zero() } else { g })
                    .collect();
                Work::Unary(
                    x,
                    Tensor::new(out_grad.shape().to_vec(), gx).expect("mask grad shape"),
                )
            }
            Op::GatherPerRow { x, ids } => {
                let (x, ids) = (*x, ids.clone());
                let tx = &self.nodes[x.0].value;
                let (n, d) = tx.rows_cols();
                let mut gx = vec![T::zero(); n * d];
                for (i, &id) in ids.iter().enumerate() {
                    gx[i * d + id] = out_grad.data()[i];
                }
                Work::Unary(x, Tensor::new(tx.shape().to_vec(), gx).expect("gather grad shape"))
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let (n, d) = tx.rows_cols();
                let inv_d = T::from_f64(1.0 / d as f64);
                let mut gx = vec![T::zero(); n * d];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for i in 0..n {
                    let row = &tx.data()[i * d..(i + 1) * d];
                    let gr = &out_grad.data()[i * d..(i + 1) * d];
                    let (mean, inv_std) = norm_stats(row);
                    // dy_hat = dy * gamma; dx = inv_std * (dy_hat - mean(dy_hat) - x_hat * mean(dy_hat * x_hat))
                    let mut sum_dyh = T::zero();
                    let mut sum_dyh_xh = T::zero();
                    let mut xh = vec![T::zero(); d];
                    let mut dyh = vec![T::zero(); d];
                    for j in 0..d {
                        xh[j] = (row[j] - mean) * inv_std;
                        dyh[j] = gr[j] * tg.data()[j];
                        sum_dyh = sum_dyh + dyh[j];
                        sum_dyh_xh = sum_dyh_xh + dyh[j] * xh[j];
                        gg[j] = gg[j] + gr[j] * xh[j];
                        gb[j] = gb[j] + gr[j];
                    }
                    let mean_dyh = sum_dyh * inv_d;
                    let mean_dyh_xh = sum_dyh_xh * inv_d;
                    for j in 0..d {
                        gx[i * d + j] = inv_std * (dyh[j] - mean_dyh - xh[j] * mean_dyh_xh);
                    }
                }
                Work::Many(vec![
                    (x, Tensor::new(tx.shape().to_vec(), gx).expect("ln grad shape")),
                    (gamma, Tensor::new(vec![1, d], gg).expect("ln gamma grad shape")),
                    (beta, Tensor::new(vec![1, d], gb).expect("ln beta grad shape")),
                ])
            }
        };
        match work {
            Work::None => {}
            Work::Unary(a, ga) => self.accumulate(a, |_| ga),
            Work::Binary(a, ga, b, gb) => {
                self.accumulate(a, |_| ga);
                self.accumulate(b, |_| gb);
            }
            Work::Many(items) => {
                for (v, g) in items {
                    self.accumulate(v, |_| g);
                }
            }
        }
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("elementwise shape")
}

fn norm_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let d = row.len();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mean = row.iter().fold(T::zero(), |acc, &x| acc + x) * inv_d;
    let var = row
        .iter()
        .fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean))
        * inv_d;
    let inv_std = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
    (mean, inv_std)
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = a[i * d + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![4], vec![0.0; 4]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // Independent scalar evaluation of softmax([1,2,3]).
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / z).collect();

        let mut g = Graph::new();
        let x = g.constant(t(vec![3], vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6, "got {got}, want {want}");
        }
    }

    #[test]
    fn matmul_identity() {
        let a = t(vec![3, 3], vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]);
        let eye = t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vi = g.constant(eye);
        let prod = g.matmul(vi, va).unwrap();
        assert_eq!(g.value(prod).data(), a.data());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(vec![2, 3], vec![0.0; 6]));
        let b = g.constant(t(vec![2, 2], vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2], vec![0.0, 1.0]));
        let err = g.log(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "log" });
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let w = g.leaf(t(vec![2], vec![5.0, 6.0]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad_or_zeros(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1], vec![2.0]), true);
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let err = g.backward(x).unwrap_err();
        assert_eq!(
            err,
            TensorError::NonScalarLoss {
                shape: vec![3usize]
            }
        );
    }

    #[test]
    fn shared_leaf_accumulates_once_per_use() {
        // loss = sum(w) + sum(w) -> grad 2 everywhere.
        let mut g = Graph::new();
        let w = g.leaf(t(vec![2], vec![1.0, 1.0]), true);
        let s1 = g.sum_all(w).unwrap();
        let s2 = g.sum_all(w).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn embedding_and_gather_roundtrip_grads() {
        let mut g = Graph::new();
        let table = g.leaf(t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        let picked = g.gather_per_row(e, &[1, 0, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[6.0, 1.0, 5.0]);
        let loss = g.sum_all(picked).unwrap();
        g.backward(loss).unwrap();
        // row 2 used twice (cols 1 and 0), row 0 once (col 0)
        assert_eq!(
            g.grad(table).unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]
        );
    }
}
