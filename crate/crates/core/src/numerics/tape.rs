//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once pushed; [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates adjoints into per-node buffers.
//!
//! Only the operations the forecasting model needs are provided. Each one
//! checks its output for non-finite entries and reports the offending op.

use std::sync::Arc;

use super::sparse::CsrMatrix;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    SpMM(Arc<CsrMatrix>, Var),
    GatherRows(Var, Arc<[usize]>),
    /// Max over groups of `window` consecutive time steps, time-major rows.
    /// `argmax[k]` is the flat input index that won output entry `k`.
    TimeMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Mean over all time steps, time-major rows with `n_nodes` per step.
    TimeMeanPool {
        input: Var,
        n_nodes: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    AddRowBias(Var, Var),
    Softmax(Var),
    WeightedSum {
        weights: Var,
        inputs: Vec<Var>,
    },
    Sum(Var),
    Mae {
        pred: Var,
        target: Arc<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard",
            Op::Relu(..) => "relu",
            Op::SpMM(..) => "spmm",
            Op::GatherRows(..) => "gather_rows",
            Op::TimeMaxPool { .. } => "time_max_pool",
            Op::TimeMeanPool { .. } => "time_mean_pool",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::Mae { .. } => "mae",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    /// Smallest |pre-activation| seen by any relu or mae residual.
    min_kink_distance: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
            min_kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`. Nodes the
    /// loss does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Distance of the closest relu pre-activation or absolute-error
    /// residual to its kink at zero. Relu inputs that are exactly zero are
    /// skipped: they come from units that are inactive upstream and stay
    /// zero under small parameter changes.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink_distance
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::dim(op, shape, &[]));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let t = self.value(a).transpose();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(self.shape(a).to_vec(), out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let input = self.value(a).data();
        let kink = input
            .iter()
            .filter(|x| **x != 0.0)
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min);
        let out = input
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.min_kink_distance = self.min_kink_distance.min(kink);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Sparse constant times dense variable.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let (rows, width) = self.matrix_dims(x, "spmm")?;
        if s.n_cols() != rows {
            return Err(Error::dim("spmm", &[s.n_rows(), s.n_cols()], self.shape(x)));
        }
        let mut out = vec![0.0; s.n_rows() * width];
        s.spmm(self.value(x).data(), width, &mut out);
        self.push(
            vec![s.n_rows(), width],
            out,
            Op::SpMM(Arc::clone(s), x),
            &[x],
        )
    }

    /// Output row `r` is row `indices[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: Arc<[usize]>) -> Result<Var> {
        let (rows, width) = self.matrix_dims(table, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", self.shape(table), &[bad]));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices.iter() {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        self.push(
            vec![indices.len(), width],
            out,
            Op::GatherRows(table, indices),
            &[table],
        )
    }

    /// Elementwise max over non-overlapping windows of `window` time steps.
    /// Rows are time-major with `n_nodes` rows per step. Ties go to the
    /// earliest step.
    pub fn time_max_pool(&mut self, input: Var, n_nodes: usize, window: usize) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input, "time_max_pool")?;
        if n_nodes == 0 || window == 0 || rows % n_nodes != 0 {
            return Err(Error::dim(
                "time_max_pool",
                self.shape(input),
                &[n_nodes, window],
            ));
        }
        let steps = rows / n_nodes;
        if !steps.is_multiple_of(window) {
            return Err(Error::Config(format!(
                "pooling window {window} does not divide {steps} time steps"
            )));
        }
        let out_steps = steps / window;
        let src = self.value(input).data();
        let mut out = vec![0.0; out_steps * n_nodes * width];
        let mut argmax = vec![0usize; out.len()];
        for k in 0..out_steps {
            for i in 0..n_nodes {
                let dst_row = (k * n_nodes + i) * width;
                for c in 0..width {
                    let mut best_idx = (k * window * n_nodes + i) * width + c;
                    let mut best = src[best_idx];
                    for t in (k * window + 1)..((k + 1) * window) {
                        let idx = (t * n_nodes + i) * width + c;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    out[dst_row + c] = best;
                    argmax[dst_row + c] = best_idx;
                }
            }
        }
        self.push(
            vec![out_steps * n_nodes, width],
            out,
            Op::TimeMaxPool { input, argmax },
            &[input],
        )
    }

    /// Mean over all time steps; output has one row per node.
    pub fn time_mean_pool(&mut self, input: Var, n_nodes: usize) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input, "time_mean_pool")?;
        if n_nodes == 0 || rows % n_nodes != 0 {
            return Err(Error::dim("time_mean_pool", self.shape(input), &[n_nodes]));
        }
        let steps = rows / n_nodes;
        let src = self.value(input).data();
        let mut out = vec![0.0; n_nodes * width];
        for t in 0..steps {
            let block = &src[t * n_nodes * width..(t + 1) * n_nodes * width];
            for (o, s) in out.iter_mut().zip(block) {
                *o += s;
            }
        }
        let inv = 1.0 / steps as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(
            vec![n_nodes, width],
            out,
            Op::TimeMeanPool { input, n_nodes },
            &[input],
        )
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, width) = self.matrix_dims(input, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::dim("slice_rows", self.shape(input), &[start, len]));
        }
        let out = self.value(input).data()[start * width..(start + len) * width].to_vec();
        self.push(
            vec![len, width],
            out,
            Op::SliceRows { input, start },
            &[input],
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "add_row_bias")?;
        if self.value(bias).len() != cols {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(vec![rows, cols], out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Softmax over all entries of `logits`.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let out = softmax(self.value(logits).data());
        self.push(
            self.shape(logits).to_vec(),
            out,
            Op::Softmax(logits),
            &[logits],
        )
    }

    /// `sum_j weights[j] * inputs[j]`; all inputs share one shape.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("weighted_sum needs at least one input".into()))?;
        if self.value(weights).len() != inputs.len() {
            return Err(Error::dim(
                "weighted_sum",
                self.shape(weights),
                &[inputs.len()],
            ));
        }
        for &v in inputs {
            self.same_shape(first, v, "weighted_sum")?;
        }
        let w = self.value(weights).data();
        let mut out = vec![0.0; self.value(first).len()];
        for (&v, &wj) in inputs.iter().zip(w) {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wj * x;
            }
        }
        let mut parents = inputs.to_vec();
        parents.push(weights);
        self.push(
            self.shape(first).to_vec(),
            out,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            &parents,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean absolute error against a constant target.
    pub fn mae(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim("mae", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let mut kink = f64::INFINITY;
        let mut total = 0.0;
        for (a, b) in p.iter().zip(target.data()) {
            let r = (a - b).abs();
            kink = kink.min(r);
            total += r;
        }
        let loss = total / p.len() as f64;
        self.min_kink_distance = self.min_kink_distance.min(kink);
        self.push(vec![1], vec![loss], Op::Mae { pred, target }, &[pred])
    }

    /// Reverse accumulation from a scalar `loss`. Errors if gradients are
    /// already present; call [`Tape::reset_grads`] first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Contract(
                "backward called twice without reset_grads".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &upstream, &mut grads)?;
            }
            grads[idx] = Some(upstream);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let name = node.op.name();
        let mut emit = |v: Var, contribution: Vec<f64>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            if contribution.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric { op: name });
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
            Ok(())
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        dy,
                        false,
                        self.value(*b).data(),
                        true,
                        &mut da,
                        false,
                    );
                    emit(*a, da)?;
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        dy,
                        false,
                        &mut db,
                        false,
                    );
                    emit(*b, db)?;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let g = Tensor::from_parts(vec![r, c], dy.to_vec()).transpose();
                emit(*a, g.into_data())?;
            }
            Op::Add(a, b) => {
                emit(*a, dy.to_vec())?;
                emit(*b, dy.to_vec())?;
            }
            Op::Scale(a, f) => emit(*a, dy.iter().map(|g| g * f).collect())?,
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    emit(*a, dy.iter().zip(vb).map(|(g, y)| g * y).collect())?;
                }
                if needs(*b) {
                    emit(*b, dy.iter().zip(va).map(|(g, x)| g * x).collect())?;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                emit(*a, g)?;
            }
            Op::SpMM(s, x) => {
                let width = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                s.spmm_transpose_acc(dy, width, &mut dx);
                emit(*x, dx)?;
            }
            Op::GatherRows(table, indices) => {
                let width = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &dy[r * width..(r + 1) * width];
                    for (d, s) in dt[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                emit(*table, dt)?;
            }
            Op::TimeMaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (g, &src) in dy.iter().zip(argmax) {
                    dx[src] += g;
                }
                emit(*input, dx)?;
            }
            Op::TimeMeanPool { input, n_nodes } => {
                let len = self.value(*input).len();
                let block = dy.len();
                let steps = len / block;
                let inv = 1.0 / steps as f64;
                let mut dx = vec![0.0; len];
                for t in 0..steps {
                    for (d, g) in dx[t * block..(t + 1) * block].iter_mut().zip(dy) {
                        *d = g * inv;
                    }
                }
                debug_assert_eq!(block % n_nodes, 0);
                emit(*input, dx)?;
            }
            Op::SliceRows { input, start } => {
                let width = self.shape(*input)[1];
                let mut dx = vec![0.0; self.value(*input).len()];
                dx[start * width..start * width + dy.len()].copy_from_slice(dy);
                emit(*input, dx)?;
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = (self.shape(*a)[0], self.shape(*a)[1]);
                let cb = self.shape(*b)[1];
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &dy[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                emit(*a, da)?;
                emit(*b, db)?;
            }
            Op::AddRowBias(x, bias) => {
                let cols = self.value(*bias).len();
                let mut db = vec![0.0; cols];
                for row in dy.chunks(cols) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                emit(*x, dy.to_vec())?;
                emit(*bias, db)?;
            }
            Op::Softmax(logits) => {
                let s = node.value.data();
                let dot: f64 = dy.iter().zip(s).map(|(g, p)| g * p).sum();
                let g = dy.iter().zip(s).map(|(g, p)| p * (g - dot)).collect();
                emit(*logits, g)?;
            }
            Op::WeightedSum { weights, inputs } => {
                let w = self.value(*weights).data();
                let mut dw = vec![0.0; inputs.len()];
                for (j, &v) in inputs.iter().enumerate() {
                    dw[j] = dy
                        .iter()
                        .zip(self.value(v).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    if needs(v) {
                        emit(v, dy.iter().map(|g| g * w[j]).collect())?;
                    }
                }
                emit(*weights, dw)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                emit(*a, vec![dy[0]; n])?;
            }
            Op::Mae { pred, target } => {
                let p = self.value(*pred).data();
                let scale = dy[0] / p.len() as f64;
                let g = p
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| {
                        let r = a - b;
                        if r > 0.0 {
                            scale
                        } else if r < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                emit(*pred, g)?;
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
