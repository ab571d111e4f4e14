//! Reverse-mode autodiff over f64 matrices.
//!
//! A [`Graph`] is a per-forward tape: ops append nodes that hold their value
//! and enough payload to run the hand-derived backward rule. Parameters live
//! outside the tape in a [`ParamSet`]; `backward` accumulates into its
//! gradient buffers, so a batch is just several tapes backpropagated into the
//! same set. [`Graph::detach`] cuts gradient flow while passing values
//! through, which is how the accent branch is isolated from the CTC/attention
//! branches.
//!
//! All shapes are `rows x cols` matrices; scalars are `1 x 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::Mat;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Named trainable tensors plus their gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    grads: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Array2::zeros(value.dim()));
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    fn accumulate(&mut self, id: ParamId, delta: &Mat) {
        self.grads[id.0] += delta;
    }

    /// True if every value and gradient entry is finite.
    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .chain(self.grads.iter())
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

enum Op {
    Param(ParamId),
    Input,
    Add(NodeId, NodeId),
    /// `(rows x d) + (1 x d)` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a · b^T`.
    MatMulNT(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Relu(NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Rowwise dot product of two equal-shape matrices, giving `rows x 1`.
    DotRows(NodeId, NodeId),
    MeanRows(NodeId),
    BroadcastRow(NodeId),
    Detach,
    EmbedRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Depthwise 1-D convolution over rows (time), zero-padded SAME; kernel
    /// is `k x d` with odd `k`.
    DepthwiseConv {
        x: NodeId,
        kernel: NodeId,
    },
    /// CTC negative log-likelihood; the input gradient is precomputed during
    /// the forward pass and cached.
    CtcLoss {
        logp: NodeId,
        grad_cache: Mat,
    },
    /// Weighted, optionally label-smoothed cross entropy from log-probability
    /// rows; mean over rows.
    CeLoss {
        logp: NodeId,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        smoothing: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;

/// One forward pass's tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[(0, 0)]
    }

    pub fn dim(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.value(id).clone(), Op::Param(id), true)
    }

    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(Error::Shape(format!("add: {da:?} vs {db:?}")));
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (da, dr) = (self.dim(a), self.dim(row));
        if dr.0 != 1 || da.1 != dr.1 {
            return Err(Error::Shape(format!("add_row: {da:?} vs {dr:?}")));
        }
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(Error::Shape(format!("mul: {da:?} vs {db:?}")));
        }
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.0 {
            return Err(Error::Shape(format!("matmul: {da:?} vs {db:?}")));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da.1 != db.1 {
            return Err(Error::Shape(format!("matmul_nt: {da:?} vs {db:?}")));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNT(a, b), needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".to_string()));
        }
        let rows = self.dim(parts[0]).0;
        let mut width = 0;
        for &p in parts {
            let d = self.dim(p);
            if d.0 != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {rows} vs {}",
                    d.0
                )));
            }
            width += d.1;
        }
        let mut value = Array2::zeros((rows, width));
        let mut at = 0;
        for &p in parts {
            let w = self.dim(p).1;
            value
                .slice_mut(s![.., at..at + w])
                .assign(&self.nodes[p.0].value);
            at += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let d = self.dim(a);
        if start >= end || end > d.1 {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {end}) of width {}",
                d.1
            )));
        }
        let value = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let needs = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), needs))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * sigmoid(v));
        let needs = self.needs(a);
        self.push(value, Op::Silu(a), needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = log_softmax_rows(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (dx, dg, db) = (self.dim(x), self.dim(gamma), self.dim(beta));
        if dg != (1, dx.1) || db != (1, dx.1) {
            return Err(Error::Shape(format!(
                "layer_norm: x {dx:?}, gamma {dg:?}, beta {db:?}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut value = Array2::zeros(dx);
        for (t, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..dx.1 {
                let xhat = (row[j] - mean) * inv;
                value[(t, j)] =
                    self.nodes[gamma.0].value[(0, j)] * xhat + self.nodes[beta.0].value[(0, j)];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }, needs))
    }

    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da != db {
            return Err(Error::Shape(format!("dot_rows: {da:?} vs {db:?}")));
        }
        let prod = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let value = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::DotRows(a, b), needs))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let rows = self.dim(a).0 as f64;
        let value = (self.nodes[a.0].value.sum_axis(Axis(0)) / rows).insert_axis(Axis(0));
        let needs = self.needs(a);
        self.push(value, Op::MeanRows(a), needs)
    }

    pub fn broadcast_row(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let d = self.dim(a);
        if d.0 != 1 {
            return Err(Error::Shape(format!("broadcast_row: input is {d:?}")));
        }
        let row = self.nodes[a.0].value.row(0).to_owned();
        let value = Array2::from_shape_fn((rows, d.1), |(_, j)| row[j]);
        let needs = self.needs(a);
        Ok(self.push(value, Op::BroadcastRow(a), needs))
    }

    /// Pass the value through, cut the gradient.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Detach, false)
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let d = self.dim(table);
        let mut value = Array2::zeros((ids.len(), d.1));
        for (p, &id) in ids.iter().enumerate() {
            if id >= d.0 {
                return Err(Error::Shape(format!(
                    "embed_rows: id {id} out of table with {} rows",
                    d.0
                )));
            }
            value.row_mut(p).assign(&self.nodes[table.0].value.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn depthwise_conv(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (dx, dk) = (self.dim(x), self.dim(kernel));
        if dk.1 != dx.1 || dk.0 % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise_conv: x {dx:?}, kernel {dk:?} (kernel rows must be odd)"
            )));
        }
        let (t_len, d) = dx;
        let k = dk.0;
        let pad = k / 2;
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let mut value = Array2::zeros((t_len, d));
        for t in 0..t_len {
            for i in 0..k {
                let src = t as isize + i as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                for c in 0..d {
                    value[(t, c)] += xv[(src as usize, c)] * kv[(i, c)];
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(value, Op::DepthwiseConv { x, kernel }, needs))
    }

    /// CTC negative log-likelihood of `labels` given log-probability rows.
    /// Infeasible labels give `+inf` with a zero gradient.
    pub fn ctc_loss(&mut self, logp: NodeId, labels: &[usize], blank: usize) -> Result<NodeId> {
        let (loss, grad) = crate::ctc::ctc_forward_backward(self.value(logp), labels, blank)?;
        let needs = self.needs(logp);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::CtcLoss {
                logp,
                grad_cache: grad,
            },
            needs,
        ))
    }

    /// Cross entropy from log-probability rows: mean over rows of
    /// `w_p * [-(1-eps)*logp[p, y_p] - eps/V * sum_v logp[p, v]]`.
    pub fn ce_loss(
        &mut self,
        logp: NodeId,
        targets: &[usize],
        row_weights: &[f64],
        smoothing: f64,
    ) -> Result<NodeId> {
        let d = self.dim(logp);
        if targets.len() != d.0 || row_weights.len() != d.0 {
            return Err(Error::Shape(format!(
                "ce_loss: {} rows, {} targets, {} weights",
                d.0,
                targets.len(),
                row_weights.len()
            )));
        }
        if targets.iter().any(|&t| t >= d.1) {
            return Err(Error::Shape(format!(
                "ce_loss: target out of range for {} classes",
                d.1
            )));
        }
        let v = d.1 as f64;
        let lp = &self.nodes[logp.0].value;
        let mut total = 0.0;
        for (p, (&y, &w)) in targets.iter().zip(row_weights).enumerate() {
            // The smoothing term touches every class, so only compute it when
            // it is on; otherwise a -inf log-prob off the target would poison
            // the sum with 0 * inf.
            let smooth_term = if smoothing > 0.0 {
                smoothing / v * lp.row(p).sum()
            } else {
                0.0
            };
            total += w * (-(1.0 - smoothing) * lp[(p, y)] - smooth_term);
        }
        let loss = total / d.0 as f64;
        let needs = self.needs(logp);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::CeLoss {
                logp,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
                smoothing,
            },
            needs,
        ))
    }

    /// Backpropagate from a scalar node, accumulating `scale * dLoss/dParam`
    /// into the parameter gradients.
    pub fn backward(&self, output: NodeId, scale: f64, params: &mut ParamSet) {
        assert_eq!(self.dim(output), (1, 1), "backward from non-scalar node");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::from_elem((1, 1), scale));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(pid) => params.accumulate(*pid, &g),
                Op::Input | Op::Detach => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *a, g);
                    self.accum(&mut grads, *row, row_grad);
                }
                Op::Scale(a, c) => self.accum(&mut grads, *a, g.mapv(|v| v * c)),
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.dim(p).1;
                        let gp = g.slice(s![.., at..at + w]).to_owned();
                        self.accum(&mut grads, p, gp);
                        at += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.dim(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    self.accum(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, &g * &mask);
                }
                Op::Silu(a) => {
                    let deriv = self.nodes[a.0].value.mapv(|v| {
                        let sg = sigmoid(v);
                        sg * (1.0 + v * (1.0 - sg))
                    });
                    self.accum(&mut grads, *a, &g * &deriv);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let gy_y = &g * y;
                    let row_sums = gy_y.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &row_sums);
                    self.accum(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = self.nodes[i].value.mapv(f64::exp);
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&p * &row_sums);
                    self.accum(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (t_len, d) = self.dim(*x);
                    let xv = &self.nodes[x.0].value;
                    let gv = self.nodes[gamma.0].value.row(0);
                    let mut gx = Array2::zeros((t_len, d));
                    let mut ggamma = Array2::zeros((1, d));
                    let mut gbeta = Array2::zeros((1, d));
                    for t in 0..t_len {
                        let row = xv.row(t);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let ghat: Vec<f64> =
                            (0..d).map(|j| g[(t, j)] * gv[j]).collect();
                        let mean_ghat: f64 = ghat.iter().sum::<f64>() / d as f64;
                        let mean_ghat_xhat: f64 = ghat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[(t, j)] =
                                inv * (ghat[j] - mean_ghat - xhat[j] * mean_ghat_xhat);
                            ggamma[(0, j)] += g[(t, j)] * xhat[j];
                            gbeta[(0, j)] += g[(t, j)];
                        }
                    }
                    self.accum(&mut grads, *x, gx);
                    self.accum(&mut grads, *gamma, ggamma);
                    self.accum(&mut grads, *beta, gbeta);
                }
                Op::DotRows(a, b) => {
                    // g is rows x 1; broadcast over columns.
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = bv * &g.broadcast(av.dim()).unwrap().to_owned();
                    let gb = av * &g.broadcast(av.dim()).unwrap().to_owned();
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::MeanRows(a) => {
                    let (rows, d) = self.dim(*a);
                    let ga = Array2::from_shape_fn((rows, d), |(_, j)| g[(0, j)] / rows as f64);
                    self.accum(&mut grads, *a, ga);
                }
                Op::BroadcastRow(a) => {
                    let ga = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *a, ga);
                }
                Op::EmbedRows { table, ids } => {
                    let mut gt = Array2::zeros(self.dim(*table));
                    for (p, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(p);
                    }
                    self.accum(&mut grads, *table, gt);
                }
                Op::DepthwiseConv { x, kernel } => {
                    let (t_len, d) = self.dim(*x);
                    let k = self.dim(*kernel).0;
                    let pad = k / 2;
                    let xv = &self.nodes[x.0].value;
                    let kv = &self.nodes[kernel.0].value;
                    let mut gx = Array2::zeros((t_len, d));
                    let mut gk = Array2::zeros((k, d));
                    for t in 0..t_len {
                        for i in 0..k {
                            let src = t as isize + i as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..d {
                                gx[(src, c)] += g[(t, c)] * kv[(i, c)];
                                gk[(i, c)] += g[(t, c)] * xv[(src, c)];
                            }
                        }
                    }
                    self.accum(&mut grads, *x, gx);
                    self.accum(&mut grads, *kernel, gk);
                }
                Op::CtcLoss { logp, grad_cache } => {
                    self.accum(&mut grads, *logp, grad_cache.mapv(|v| v * g[(0, 0)]));
                }
                Op::CeLoss {
                    logp,
                    targets,
                    row_weights,
                    smoothing,
                } => {
                    let d = self.dim(*logp);
                    let v = d.1 as f64;
                    let rows = d.0 as f64;
                    let mut ga = Array2::zeros(d);
                    for (p, (&y, &w)) in targets.iter().zip(row_weights).enumerate() {
                        for j in 0..d.1 {
                            let mut val = -smoothing / v;
                            if j == y {
                                val -= 1.0 - smoothing;
                            }
                            ga[(p, j)] = g[(0, 0)] * w * val / rows;
                        }
                    }
                    self.accum(&mut grads, *logp, ga);
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - log_sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// A composition that routes through every differentiable op once.
    fn all_ops_loss(g: &mut Graph, p: &ParamSet, ids: &[ParamId; 7]) -> NodeId {
        let [a, b, w, gamma, beta, kernel, table] = *ids;
        let na = g.param(p, a);
        let nb = g.param(p, b);
        let nw = g.param(p, w);
        let ngamma = g.param(p, gamma);
        let nbeta = g.param(p, beta);
        let nkernel = g.param(p, kernel);
        let ntable = g.param(p, table);

        let emb = g.embed_rows(ntable, &[1, 0, 5, 2]).unwrap();
        let sum = g.add(na, emb).unwrap();
        let prod = g.mul(sum, nb).unwrap();
        let scaled = g.scale(prod, 0.7);
        let hidden = g.matmul(scaled, nw).unwrap();
        let normed = g.layer_norm(hidden, ngamma, nbeta).unwrap();
        let conved = g.depthwise_conv(normed, nkernel).unwrap();
        let biased = g.add_row(conved, ngamma).unwrap();
        let act = g.silu(biased);
        let act2 = g.relu(act);
        let scores = g.matmul_nt(act2, act2).unwrap();
        let att = g.softmax_rows(scores);
        let mixed = g.matmul(att, act2).unwrap();
        let left = g.slice_cols(mixed, 0, 3).unwrap();
        let right = g.slice_cols(mixed, 2, 5).unwrap();
        let cat = g.concat_cols(&[left, right]).unwrap();
        let dots = g.dot_rows(left, right).unwrap();
        let mean = g.mean_rows(dots);
        let dots_b = g.broadcast_row(mean, 4).unwrap();
        let cat7 = g.concat_cols(&[cat, dots_b]).unwrap();
        let logp = g.log_softmax_rows(cat7);
        g.ce_loss(logp, &[0, 3, 2, 6], &[1.0, 0.5, 2.0, 1.0], 0.1)
            .unwrap()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = crate::rng::stream(42, "graph-fd");
        let mut params = ParamSet::new();
        let ids = [
            params.add("a", rand_mat(&mut rng, 4, 3)),
            params.add("b", rand_mat(&mut rng, 4, 3)),
            params.add("w", rand_mat(&mut rng, 3, 5)),
            params.add("gamma", rand_mat(&mut rng, 1, 5)),
            params.add("beta", rand_mat(&mut rng, 1, 5)),
            params.add("kernel", rand_mat(&mut rng, 3, 5)),
            params.add("table", rand_mat(&mut rng, 6, 3)),
        ];

        let mut g = Graph::new();
        let loss = all_ops_loss(&mut g, &params, &ids);
        g.backward(loss, 1.0, &mut params);
        let analytic: Vec<Mat> = params.ids().map(|id| params.grad(id).clone()).collect();

        let forward_only = |p: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let loss = all_ops_loss(&mut g, p, &ids);
            g.scalar(loss)
        };
        let mut worst: f64 = 0.0;
        let eps = 1e-6;
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let dim = params.value(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = params.value(id)[(r, c)];
                    params.value_mut(id)[(r, c)] = orig + eps;
                    let up = forward_only(&params);
                    params.value_mut(id)[(r, c)] = orig - eps;
                    let down = forward_only(&params);
                    params.value_mut(id)[(r, c)] = orig;
                    let numeric = (up - down) / (2.0 * eps);
                    let an = analytic[k][(r, c)];
                    let rel = (an - numeric).abs() / (an.abs() + numeric.abs() + 1e-12);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst <= 1e-6, "max rel err {worst}");
    }

    #[test]
    fn detach_blocks_gradients_exactly() {
        let mut rng = crate::rng::stream(1, "graph-detach");
        let mut params = ParamSet::new();
        let a = params.add("a", rand_mat(&mut rng, 2, 2));
        let b = params.add("b", rand_mat(&mut rng, 2, 2));
        let mut g = Graph::new();
        let na = g.param(&params, a);
        let nb = g.param(&params, b);
        let cut = g.detach(na);
        let prod = g.mul(cut, nb).unwrap();
        let dots = g.dot_rows(prod, prod).unwrap();
        let pooled = g.mean_rows(dots);
        g.backward(pooled, 1.0, &mut params);
        assert!(params.grad(a).iter().all(|&v| v == 0.0));
        assert!(params.grad(b).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_values_are_deterministic() {
        let mut rng = crate::rng::stream(9, "graph-det");
        let x = rand_mat(&mut rng, 5, 4);
        let run = |x: &Mat| {
            let mut g = Graph::new();
            let nx = g.input(x.clone());
            let sm = g.softmax_rows(nx);
            let y = g.matmul_nt(sm, sm).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(&x), run(&x));
    }

    #[test]
    fn scalar_helpers_and_shape_errors() {
        let mut g = Graph::new();
        let a = g.input(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.input(array![[1.0, 2.0, 3.0]]);
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_cols(a, 1, 1).is_err());
        let loss_in = g.input(array![[0.2_f64.ln(), 0.8_f64.ln()]]);
        let loss = g.ce_loss(loss_in, &[1], &[1.0], 0.0).unwrap();
        assert!((g.scalar(loss) - (-(0.8_f64.ln()))).abs() < 1e-12);
    }
}
