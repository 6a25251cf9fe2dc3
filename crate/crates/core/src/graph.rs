//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes in evaluation order, so walking the tape backwards visits
//! each node after all of its consumers. Handles ([`Var`]) are plain indices
//! and only meaningful for the graph that issued them.
//!
//! Gradients accumulate: a value used twice receives both contributions, and
//! calling [`Graph::backward`] twice adds the second pass on top of the
//! first. Call [`Graph::zero_grad`] between passes that should not mix.
//!
//! Values are `f32` by default; a `Graph<f64>` runs the same operations in
//! double precision, which finite-difference checks rely on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{
    matmul_at_kernel, matmul_bt_kernel, matmul_kernel, sigmoid_f64, transpose_kernel, Real,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    GatherSlots {
        x: Var,
        slots: Vec<Option<usize>>,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterMeanRows {
        x: Var,
        index: Vec<usize>,
        counts: Vec<u32>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
    },
    FocalRows {
        logits: Var,
        targets: Vec<f32>,
        alpha: f32,
        gamma: f32,
    },
    DiceRows {
        logits: Var,
        targets: Vec<f32>,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Clone, Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present once a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "transpose needs a matrix, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_kernel(self.value(a).data(), r, c);
        let value = Tensor::new(&[c, r], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, x: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x);
        if self.value(row).len() != c {
            return Err(Error::shape(name, self.shape(x), self.shape(row)));
        }
        Ok((r, c))
    }

    /// `x + b` with `b` (length `cols`) broadcast over every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast(x, b, "add_row")?;
        let bias = self.value(b).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, b), &[x, b]))
    }

    /// `x * g` with `g` (length `cols`) broadcast over every row.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast(x, g, "mul_row")?;
        let gain = self.value(g).data();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gain[i % c])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        Ok(self.push(value, Op::MulRow(x, g), &[x, g]))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.map(a, |v| v * T::from_f32(s));
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |v| if v > T::ZERO { v } else { T::ZERO });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, |v| T::from_f64(sigmoid_f64(v.to_f64())));
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let max = row.iter().copied().fold(T::NEG_INFINITY, T::max).to_f64();
            let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v.to_f64() - max)).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| T::from_f64(e / sum)));
        }
        debug_assert_eq!(data.len(), t.rows() * c);
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = t.row(i);
            let max = row.iter().copied().fold(T::NEG_INFINITY, T::max).to_f64();
            let sum: f64 = row.iter().map(|&v| libm::exp(v.to_f64() - max)).sum();
            let lse = max + libm::log(sum);
            data.extend(row.iter().map(|&v| T::from_f64(v.to_f64() - lse)));
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row(i);
            let mean = row.iter().map(|&v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / libm::sqrt(var + eps as f64);
            inv_std.push(T::from_f64(inv));
            data.extend(row.iter().map(|&v| T::from_f64((v.to_f64() - mean) * inv)));
        }
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Builds rows from `per_row` consecutive slots, each slot either a copy
    /// of an input row or zeros. Output shape: `slots.len() / per_row` by
    /// `per_row * cols`. This is the im2col step of a sparse convolution.
    pub fn gather_slots(&mut self, x: Var, slots: &[Option<usize>], per_row: usize) -> Result<Var> {
        let (rows, c) = self.dims2(x);
        if per_row == 0 || slots.len() % per_row != 0 {
            return Err(Error::contract("slot count must be a multiple of per_row"));
        }
        if slots.iter().flatten().any(|&i| i >= rows) {
            return Err(Error::contract("slot index out of range"));
        }
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; slots.len() * c];
        for (s, slot) in slots.iter().enumerate() {
            if let Some(i) = *slot {
                data[s * c..(s + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::matrix(slots.len() / per_row, per_row * c, data)?;
        Ok(self.push(
            value,
            Op::GatherSlots {
                x,
                slots: slots.to_vec(),
            },
            &[x],
        ))
    }

    /// Output row `index[r]` receives the sum of input rows `r`.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let data = self.scatter(x, index, out_rows, None)?;
        let c = self.dims2(x).1;
        let value = Tensor::matrix(out_rows, c, data)?;
        Ok(self.push(
            value,
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Output row `o` is the mean of the input rows with `index[r] == o`;
    /// rows that receive nothing stay zero.
    pub fn scatter_mean_rows(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var> {
        let mut counts = vec![0u32; out_rows];
        for &i in index {
            if i < out_rows {
                counts[i] += 1;
            }
        }
        let data = self.scatter(x, index, out_rows, Some(&counts))?;
        let c = self.dims2(x).1;
        let value = Tensor::matrix(out_rows, c, data)?;
        Ok(self.push(
            value,
            Op::ScatterMeanRows {
                x,
                index: index.to_vec(),
                counts,
            },
            &[x],
        ))
    }

    fn scatter(
        &self,
        x: Var,
        index: &[usize],
        out_rows: usize,
        counts: Option<&[u32]>,
    ) -> Result<Vec<T>> {
        let (rows, c) = self.dims2(x);
        if index.len() != rows {
            return Err(Error::contract(format!(
                "scatter index has {} entries for {rows} rows",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(Error::contract(format!(
                "scatter target {bad} out of range for {out_rows} rows"
            )));
        }
        let src = self.value(x).data();
        let mut acc = vec![0.0f64; out_rows * c];
        for (r, &o) in index.iter().enumerate() {
            for (a, &v) in acc[o * c..(o + 1) * c]
                .iter_mut()
                .zip(&src[r * c..(r + 1) * c])
            {
                *a += v.to_f64();
            }
        }
        if let Some(counts) = counts {
            for (o, &n) in counts.iter().enumerate() {
                if n > 0 {
                    acc[o * c..(o + 1) * c]
                        .iter_mut()
                        .for_each(|a| *a /= n as f64);
                }
            }
        }
        Ok(acc.into_iter().map(T::from_f64).collect())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims2(p).0,
            None => return Err(Error::contract("concat_cols of nothing")),
        };
        for &p in parts {
            if self.dims2(p).0 != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, c) = self.dims2(x);
        if start + width > c {
            return Err(Error::contract(format!(
                "columns {start}..{} out of range for {c}",
                start + width
            )));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let value = Tensor::matrix(rows, width, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let s: f64 = t.data().iter().map(|&v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean(a), &[a])
    }

    /// `-Σ_r weights[r] · logp[r, targets[r]]` as a scalar.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        let (rows, c) = self.dims2(logp);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::contract(format!(
                "nll: {rows} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "nll target {bad} out of range for {c} classes"
            )));
        }
        let t = self.value(logp);
        let s: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&c, &w))| -(w as f64) * t.at(r, c).to_f64())
            .sum();
        let op = Op::Nll {
            logp,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(T::from_f64(s)), op, &[logp]))
    }

    /// Sigmoid focal loss on logits, averaged over the columns of each row.
    /// `targets` holds one 0/1 value per logit. Output has one entry per row.
    pub fn focal_rows(
        &mut self,
        logits: Var,
        targets: &[f32],
        alpha: f32,
        gamma: f32,
    ) -> Result<Var> {
        let (rows, c) = self.dims2(logits);
        if targets.len() != rows * c {
            return Err(Error::contract(format!(
                "focal: {} targets for {} logits",
                targets.len(),
                rows * c
            )));
        }
        let x = self.value(logits).data();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = 0.0f64;
            for j in 0..c {
                s += focal_term(
                    x[r * c + j].to_f64(),
                    targets[r * c + j] as f64,
                    alpha as f64,
                    gamma as f64,
                )
                .0;
            }
            out.push(T::from_f64(s / c.max(1) as f64));
        }
        let op = Op::FocalRows {
            logits,
            targets: targets.to_vec(),
            alpha,
            gamma,
        };
        Ok(self.push(Tensor::vector(out), op, &[logits]))
    }

    /// Smoothed dice loss `1 - (2Σ s·t + 1) / (Σ s + Σ t + 1)` per row, where
    /// `s = sigmoid(logits)`.
    pub fn dice_rows(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let (rows, c) = self.dims2(logits);
        if targets.len() != rows * c {
            return Err(Error::contract(format!(
                "dice: {} targets for {} logits",
                targets.len(),
                rows * c
            )));
        }
        let x = self.value(logits).data();
        let out = (0..rows)
            .map(|r| {
                let (inter, sp, st) =
                    dice_sums(&x[r * c..(r + 1) * c], &targets[r * c..(r + 1) * c]);
                T::from_f64(1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0))
            })
            .collect();
        let op = Op::DiceRows {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::vector(out), op, &[logits]))
    }

    // ------------------------------------------------------------ backward

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut pass: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = pass[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &dy, &mut pass);
            match &mut self.nodes[i].grad {
                Some(g) => g.iter_mut().zip(&dy).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(dy),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[T], pass: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        // Allocates the parent's pass buffer lazily; returns None for
        // parents that do not need a gradient.
        macro_rules! target {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(pass[v.0].get_or_insert_with(|| vec![T::ZERO; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = target!(*a) {
                    let g = matmul_bt_kernel(dy, tb.data(), m, n, k);
                    add_into(da, &g);
                }
                if let Some(db) = target!(*b) {
                    let g = matmul_at_kernel(ta.data(), dy, m, k, n);
                    add_into(db, &g);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                if let Some(da) = target!(*a) {
                    add_into(da, &transpose_kernel(dy, r, c));
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = target!(*a) {
                    add_into(da, dy);
                }
                if let Some(db) = target!(*b) {
                    add_into(db, dy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = target!(*a) {
                    add_into(da, dy);
                }
                if let Some(db) = target!(*b) {
                    db.iter_mut().zip(dy).for_each(|(d, g)| *d -= *g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = target!(*a) {
                    for ((d, g), v) in da.iter_mut().zip(dy).zip(tb) {
                        *d += *g * *v;
                    }
                }
                if let Some(db) = target!(*b) {
                    for ((d, g), v) in db.iter_mut().zip(dy).zip(ta) {
                        *d += *g * *v;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = y.cols();
                if let Some(dx) = target!(*x) {
                    add_into(dx, dy);
                }
                if let Some(db) = target!(*b) {
                    let sums = column_sums(dy, c, |_, g| g.to_f64());
                    for (d, s) in db.iter_mut().zip(sums) {
                        *d += T::from_f64(s);
                    }
                }
            }
            Op::MulRow(x, gvar) => {
                let c = y.cols();
                let gain = self.value(*gvar).data();
                let xs = self.value(*x).data();
                if let Some(dx) = target!(*x) {
                    for (j, (d, g)) in dx.iter_mut().zip(dy).enumerate() {
                        *d += *g * gain[j % c];
                    }
                }
                if let Some(dg) = target!(*gvar) {
                    let sums = column_sums(dy, c, |idx, g| g.to_f64() * xs[idx].to_f64());
                    for (d, s) in dg.iter_mut().zip(sums) {
                        *d += T::from_f64(s);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = target!(*a) {
                    let s = T::from_f32(*s);
                    da.iter_mut().zip(dy).for_each(|(d, &g)| *d += g * s);
                }
            }
            Op::Relu(a) => {
                let xs = self.value(*a).data();
                if let Some(da) = target!(*a) {
                    for ((d, g), &v) in da.iter_mut().zip(dy).zip(xs) {
                        if v > T::ZERO {
                            *d += *g;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = target!(*a) {
                    for ((d, g), &s) in da.iter_mut().zip(dy).zip(y.data()) {
                        *d += *g * s * (T::ONE - s);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = y.cols();
                if let Some(da) = target!(*a) {
                    for r in 0..y.rows() {
                        let ys = y.row(r);
                        let gs = &dy[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(&p, &g)| p.to_f64() * g.to_f64()).sum();
                        for j in 0..c {
                            da[r * c + j] += T::from_f64(ys[j].to_f64() * (gs[j].to_f64() - dot));
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                if let Some(da) = target!(*a) {
                    for r in 0..y.rows() {
                        let ys = y.row(r);
                        let gs = &dy[r * c..(r + 1) * c];
                        let total: f64 = gs.iter().map(|&g| g.to_f64()).sum();
                        for j in 0..c {
                            da[r * c + j] +=
                                T::from_f64(gs[j].to_f64() - libm::exp(ys[j].to_f64()) * total);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                if let Some(dx) = target!(*x) {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let ys = y.row(r);
                        let gs = &dy[r * c..(r + 1) * c];
                        let mg = gs.iter().map(|&g| g.to_f64()).sum::<f64>() / c as f64;
                        let mgy = gs
                            .iter()
                            .zip(ys)
                            .map(|(&g, &v)| g.to_f64() * v.to_f64())
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            let v = inv.to_f64() * (gs[j].to_f64() - mg - ys[j].to_f64() * mgy);
                            dx[r * c + j] += T::from_f64(v);
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let c = y.cols();
                if let Some(dx) = target!(*x) {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * c..(src + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::GatherSlots { x, slots, .. } => {
                let c = self.value(*x).cols();
                if let Some(dx) = target!(*x) {
                    for (s, slot) in slots.iter().enumerate() {
                        if let Some(src) = *slot {
                            add_into(&mut dx[src * c..(src + 1) * c], &dy[s * c..(s + 1) * c]);
                        }
                    }
                }
            }
            Op::ScatterAddRows { x, index } => {
                let c = y.cols();
                if let Some(dx) = target!(*x) {
                    for (r, &o) in index.iter().enumerate() {
                        add_into(&mut dx[r * c..(r + 1) * c], &dy[o * c..(o + 1) * c]);
                    }
                }
            }
            Op::ScatterMeanRows { x, index, counts } => {
                let c = y.cols();
                if let Some(dx) = target!(*x) {
                    for (r, &o) in index.iter().enumerate() {
                        let inv = T::ONE / T::from_f64(counts[o] as f64);
                        for (d, g) in dx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&dy[o * c..(o + 1) * c])
                        {
                            *d += *g * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = target!(p) {
                        for r in 0..y.rows() {
                            add_into(
                                &mut dp[r * w..(r + 1) * w],
                                &dy[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = y.cols();
                let c = self.value(*x).cols();
                if let Some(dx) = target!(*x) {
                    for r in 0..y.rows() {
                        add_into(
                            &mut dx[r * c + start..r * c + start + w],
                            &dy[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = target!(*a) {
                    da.iter_mut().for_each(|d| *d += dy[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len().max(1) as f64);
                if let Some(da) = target!(*a) {
                    da.iter_mut().for_each(|d| *d += dy[0] / n);
                }
            }
            Op::Nll {
                logp,
                targets,
                weights,
            } => {
                let c = self.value(*logp).cols();
                if let Some(dl) = target!(*logp) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        dl[r * c + t] -= T::from_f32(w) * dy[0];
                    }
                }
            }
            Op::FocalRows {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let c = self.value(*logits).cols();
                let xs = self.value(*logits).data();
                if let Some(dl) = target!(*logits) {
                    for r in 0..y.len() {
                        let scale = dy[r].to_f64() / c.max(1) as f64;
                        for j in r * c..(r + 1) * c {
                            let (_, d) = focal_term(
                                xs[j].to_f64(),
                                targets[j] as f64,
                                *alpha as f64,
                                *gamma as f64,
                            );
                            dl[j] += T::from_f64(scale * d);
                        }
                    }
                }
            }
            Op::DiceRows { logits, targets } => {
                let c = self.value(*logits).cols();
                let xs = self.value(*logits).data();
                if let Some(dl) = target!(*logits) {
                    for r in 0..y.len() {
                        let xr = &xs[r * c..(r + 1) * c];
                        let tr = &targets[r * c..(r + 1) * c];
                        let (inter, sp, st) = dice_sums(xr, tr);
                        let num = 2.0 * inter + 1.0;
                        let den = sp + st + 1.0;
                        for j in 0..c {
                            let s = sigmoid_f64(xr[j].to_f64());
                            let ds = -(2.0 * tr[j] as f64 * den - num) / (den * den);
                            dl[r * c + j] += T::from_f64(dy[r].to_f64() * ds * s * (1.0 - s));
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn column_sums<T: Real>(dy: &[T], c: usize, f: impl Fn(usize, T) -> f64) -> Vec<f64> {
    let mut sums = vec![0.0f64; c];
    for (idx, &g) in dy.iter().enumerate() {
        sums[idx % c] += f(idx, g);
    }
    sums
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    // One exponential serves both the sigmoid and the stable softplus.
    let e = libm::exp(-x.abs());
    let p = if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    };
    let ce = x.max(0.0) + libm::log1p(e) - t * x;
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    let one_minus = (1.0 - pt).max(0.0);
    let (modulator, dmod_base) = if gamma == 2.0 {
        (one_minus * one_minus, 2.0 * one_minus)
    } else if one_minus > 0.0 {
        (
            libm::pow(one_minus, gamma),
            gamma * libm::pow(one_minus, gamma - 1.0),
        )
    } else {
        (libm::pow(one_minus, gamma), 0.0)
    };
    let dmod = dmod_base * (1.0 - 2.0 * t) * p * (1.0 - p);
    let loss = alpha_t * ce * modulator;
    let grad = alpha_t * ((p - t) * modulator + ce * dmod);
    (loss, grad)
}

fn dice_sums<T: Real>(logits: &[T], targets: &[f32]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let s = sigmoid_f64(x.to_f64());
        inter += s * t as f64;
        sp += s;
        st += t as f64;
    }
    (inter, sp, st)
}
