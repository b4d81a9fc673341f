//! Eager reverse-mode gradient tape.
//!
//! Ops compute their value as the node is created, so host code can make
//! data-dependent decisions (top-k selection, greedy argmax) while the
//! graph is still being built. `backward` replays the tape in reverse.
//!
//! Gradients propagate only into subgraphs that reach a trainable leaf;
//! everything else (frozen parameters, detached teacher values) enters as
//! constants and is skipped during the reverse sweep.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{KvdError, Result};

use super::tensor::{
    broadcast_shape, check_finite, matmul, matmul_nt, matmul_tn, reduce_to_shape, rms_norm_rows,
    sigmoid_scalar, softmax_rows, zip_broadcast, Tensor,
};

pub(crate) const RMS_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    Constant,
    MatMul,
    Add,
    Mul,
    Sigmoid,
    /// Row softmax. The causal variant masks at construction time; the
    /// backward rule is the same because masked probabilities are zero.
    Softmax,
    /// Row RMS normalization; caches 1/rms per row for the backward pass.
    RmsNorm { inv: Vec<f64> },
    /// Row gather from a table; backward scatter-adds.
    Gather { ids: Vec<usize> },
    Concat { axis: usize },
    Slice { rows: Range<usize>, cols: Range<usize> },
    Transpose,
    Log,
    Exp,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one reverse sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// An append-only op tape with named trainable leaves.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Values are final as soon as the node exists.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        check_finite(op.name(), &value)?;
        let needs_grad = match op {
            Op::Leaf { trainable } => trainable,
            Op::Constant => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Registers a named trainable leaf. Gradients flow into it.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(KvdError::InvalidArg(format!("duplicate leaf `{name}`")));
        }
        let id = self.push(Op::Leaf { trainable: true }, vec![], value)?;
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Unnamed frozen value; the reverse sweep never enters it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], value)
            .expect("constant finiteness checked by caller")
    }

    /// Like [`Graph::constant`] but validated and usable with NaN checks.
    pub fn constant_checked(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Constant, vec![], value)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(KvdError::shape(
                "matmul",
                format!("{m}x{ka} * {kb}x{n}: inner dimensions differ"),
            ));
        }
        let value = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    fn elementwise(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_shape(sa, sb).is_none() {
            return Err(KvdError::shape(
                op.name(),
                format!("{}x{} vs {}x{} not broadcastable", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        let value = zip_broadcast(self.value(a), self.value(b), f);
        self.push(op, vec![a, b], value)
    }

    /// Multiplies by a host scalar.
    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        let s = self.constant(Tensor::scalar(factor));
        self.mul(a, s)
    }

    /// Adds a host scalar (used for epsilon floors ahead of `log`).
    pub fn shift(&mut self, a: NodeId, offset: f32) -> Result<NodeId> {
        let s = self.constant(Tensor::scalar(offset));
        self.add(a, s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = {
            let x = self.value(a);
            let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
            Tensor::new(x.rows(), x.cols(), data)
        };
        self.push(Op::Sigmoid, vec![a], value)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax_rows(self.value(a), None);
        self.push(Op::Softmax, vec![a], value)
    }

    /// Softmax where row i may attend columns 0..=prefix+i only; used for
    /// causal attention over `prefix` cached positions plus the current
    /// block.
    pub fn causal_softmax(&mut self, a: NodeId, prefix: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if prefix + rows != cols {
            return Err(KvdError::shape(
                "softmax",
                format!("causal prefix {prefix} + {rows} rows != {cols} columns"),
            ));
        }
        let value = softmax_rows(self.value(a), Some(prefix));
        self.push(Op::Softmax, vec![a], value)
    }

    pub fn rms_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (value, inv) = rms_norm_rows(self.value(a), RMS_EPS);
        self.push(Op::RmsNorm { inv }, vec![a], value)
    }

    /// Gathers rows of `table` in the order given by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(KvdError::shape(
                "gather",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let mut value = Tensor::zeros(ids.len(), cols);
        for (r, &i) in ids.iter().enumerate() {
            value.data_mut()[r * cols..(r + 1) * cols]
                .copy_from_slice(self.nodes[table.0].value.row_slice(i));
        }
        self.push(Op::Gather { ids: ids.to_vec() }, vec![table], value)
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = match axis {
            0 if sa.1 == sb.1 => {
                let mut v = self.value(a).clone();
                v.push_rows(self.value(b));
                v
            }
            1 if sa.0 == sb.0 => {
                let (rows, cols) = (sa.0, sa.1 + sb.1);
                let mut v = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    v.data_mut()[r * cols..r * cols + sa.1]
                        .copy_from_slice(self.value(a).row_slice(r));
                    v.data_mut()[r * cols + sa.1..(r + 1) * cols]
                        .copy_from_slice(self.value(b).row_slice(r));
                }
                v
            }
            0 | 1 => {
                return Err(KvdError::shape(
                    "concat",
                    format!(
                        "{}x{} and {}x{} on axis {axis}",
                        sa.0, sa.1, sb.0, sb.1
                    ),
                ))
            }
            _ => return Err(KvdError::InvalidArg(format!("concat axis {axis}"))),
        };
        self.push(Op::Concat { axis }, vec![a, b], value)
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(KvdError::shape(
                "slice",
                format!("rows {rows:?} cols {cols:?} of {r}x{c}"),
            ));
        }
        let mut value = Tensor::zeros(rows.len(), cols.len());
        for (out_r, in_r) in rows.clone().enumerate() {
            let src = self.value(a).row_slice(in_r);
            value.data_mut()[out_r * cols.len()..(out_r + 1) * cols.len()]
                .copy_from_slice(&src[cols.clone()]);
        }
        self.push(Op::Slice { rows, cols }, vec![a], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let value = {
            let x = self.value(a);
            Tensor::new(
                x.rows(),
                x.cols(),
                x.data().iter().map(|&v| (v as f64).ln() as f32).collect(),
            )
        };
        self.push(Op::Log, vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = {
            let x = self.value(a);
            Tensor::new(
                x.rows(),
                x.cols(),
                x.data().iter().map(|&v| (v as f64).exp() as f32).collect(),
            )
        };
        self.push(Op::Exp, vec![a], value)
    }

    /// Sum over all elements (`None`), over rows (`Some(0)` -> 1xC), or over
    /// columns (`Some(1)` -> Rx1). Accumulates in f64.
    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = reduce(self.value(a), axis, false)?;
        self.push(Op::Sum { axis }, vec![a], value)
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = reduce(self.value(a), axis, true)?;
        self.push(Op::Mean { axis }, vec![a], value)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(KvdError::InvalidArg(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf { .. } | Op::Constant) {
                continue; // no parents; leaf grads stay for the caller
            }
            // An op node's gradient is not needed once its parents have
            // received their shares, so take it to cap peak memory.
            let Some(g) = grads[id].take() else { continue };
            check_finite("backward", &g)?;
            self.push_parent_grads(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to named leaves. Leaves that the
    /// loss does not reach get zero gradients of the right shape.
    pub fn gradients(&self, loss: NodeId, params: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let g = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for &name in params {
            let id = self
                .names
                .get(name)
                .copied()
                .ok_or_else(|| KvdError::InvalidArg(format!("unknown leaf `{name}`")))?;
            let t = match g.get(id) {
                Some(t) => t.clone(),
                None => {
                    let (r, c) = self.shape(id);
                    Tensor::zeros(r, c)
                }
            };
            out.insert(name.to_string(), t);
        }
        Ok(out)
    }

    /// Gradients for every trainable leaf, keyed by name.
    pub fn gradients_all(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let g = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.names {
            if !matches!(self.nodes[id.0].op, Op::Leaf { trainable: true }) {
                continue;
            }
            let t = match g.get(id) {
                Some(t) => t.clone(),
                None => {
                    let (r, c) = self.shape(id);
                    Tensor::zeros(r, c)
                }
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn push_parent_grads(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |_grads: &[Option<Tensor>], p: NodeId| self.nodes[p.0].needs_grad;
        let send = |grads: &mut [Option<Tensor>], p: NodeId, t: Tensor| {
            match &mut grads[p.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), t.shape());
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(grads, a) {
                    let da = matmul_nt(g, self.value(b));
                    send(grads, a, da);
                }
                if wants(grads, b) {
                    let db = matmul_tn(self.value(a), g);
                    send(grads, b, db);
                }
            }
            Op::Add => {
                for &p in &node.parents {
                    if wants(grads, p) {
                        send(grads, p, reduce_to_shape(g, self.shape(p)));
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (node.parents[0], node.parents[1]);
                if wants(grads, a) {
                    let t = zip_broadcast(g, self.value(b), |x, y| x * y);
                    send(grads, a, reduce_to_shape(&t, self.shape(a)));
                }
                if wants(grads, b) {
                    let t = zip_broadcast(g, self.value(a), |x, y| x * y);
                    send(grads, b, reduce_to_shape(&t, self.shape(b)));
                }
            }
            Op::Sigmoid => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    send(grads, p, Tensor::new(y.rows(), y.cols(), data));
                }
            }
            Op::Softmax => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let yr = y.row_slice(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv as f64 * gv as f64)
                            .sum();
                        for c in 0..cols {
                            dx.data_mut()[r * cols + c] =
                                (yr[c] as f64 * (gr[c] as f64 - dot)) as f32;
                        }
                    }
                    send(grads, p, dx);
                }
            }
            Op::RmsNorm { inv } => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let x = self.value(p);
                    let (rows, cols) = x.shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let ri = inv[r];
                        let xr = x.row_slice(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = xr
                            .iter()
                            .zip(gr)
                            .map(|(&xv, &gv)| xv as f64 * gv as f64)
                            .sum();
                        let k = ri * ri * ri / cols as f64;
                        for c in 0..cols {
                            dx.data_mut()[r * cols + c] =
                                (ri * gr[c] as f64 - k * dot * xr[c] as f64) as f32;
                        }
                    }
                    send(grads, p, dx);
                }
            }
            Op::Gather { ids } => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let (rows, cols) = self.shape(p);
                    let mut acc = vec![0.0f64; rows * cols];
                    for (r, &i) in ids.iter().enumerate() {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dst = &mut acc[i * cols..(i + 1) * cols];
                        for (d, &gv) in dst.iter_mut().zip(gr) {
                            *d += gv as f64;
                        }
                    }
                    send(
                        grads,
                        p,
                        Tensor::new(rows, cols, acc.into_iter().map(|v| v as f32).collect()),
                    );
                }
            }
            Op::Concat { axis } => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let sa = self.shape(a);
                let (rows, cols) = g.shape();
                if *axis == 0 {
                    if wants(grads, a) {
                        let mut t = Tensor::zeros(sa.0, cols);
                        t.data_mut().copy_from_slice(&g.data()[..sa.0 * cols]);
                        send(grads, a, t);
                    }
                    if wants(grads, b) {
                        let mut t = Tensor::zeros(rows - sa.0, cols);
                        t.data_mut().copy_from_slice(&g.data()[sa.0 * cols..]);
                        send(grads, b, t);
                    }
                } else {
                    if wants(grads, a) {
                        let mut t = Tensor::zeros(rows, sa.1);
                        for r in 0..rows {
                            t.data_mut()[r * sa.1..(r + 1) * sa.1]
                                .copy_from_slice(&g.data()[r * cols..r * cols + sa.1]);
                        }
                        send(grads, a, t);
                    }
                    if wants(grads, b) {
                        let bw = cols - sa.1;
                        let mut t = Tensor::zeros(rows, bw);
                        for r in 0..rows {
                            t.data_mut()[r * bw..(r + 1) * bw]
                                .copy_from_slice(&g.data()[r * cols + sa.1..(r + 1) * cols]);
                        }
                        send(grads, b, t);
                    }
                }
            }
            Op::Slice { rows, cols } => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let (pr, pc) = self.shape(p);
                    let mut t = Tensor::zeros(pr, pc);
                    for (out_r, in_r) in rows.clone().enumerate() {
                        let gr = &g.data()[out_r * cols.len()..(out_r + 1) * cols.len()];
                        t.data_mut()[in_r * pc + cols.start..in_r * pc + cols.end]
                            .copy_from_slice(gr);
                    }
                    send(grads, p, t);
                }
            }
            Op::Transpose => {
                let p = node.parents[0];
                if wants(grads, p) {
                    send(grads, p, g.transpose());
                }
            }
            Op::Log => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let x = self.value(p);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| (gv as f64 / xv as f64) as f32)
                        .collect();
                    send(grads, p, Tensor::new(x.rows(), x.cols(), data));
                }
            }
            Op::Exp => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let y = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| gv * yv)
                        .collect();
                    send(grads, p, Tensor::new(y.rows(), y.cols(), data));
                }
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let p = node.parents[0];
                if wants(grads, p) {
                    let (rows, cols) = self.shape(p);
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / match axis {
                            None => (rows * cols) as f32,
                            Some(0) => rows as f32,
                            _ => cols as f32,
                        }
                    } else {
                        1.0
                    };
                    let mut t = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = match axis {
                                None => g.at(0, 0),
                                Some(0) => g.at(0, c),
                                _ => g.at(r, 0),
                            };
                            t.data_mut()[r * cols + c] = gv * scale;
                        }
                    }
                    send(grads, p, t);
                }
            }
        }
    }
}

fn reduce(x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    let (rows, cols) = x.shape();
    let t = match axis {
        None => {
            let s: f64 = x.data().iter().map(|&v| v as f64).sum();
            let d = if mean { (rows * cols) as f64 } else { 1.0 };
            Tensor::scalar((s / d) as f32)
        }
        Some(0) => {
            let mut acc = vec![0.0f64; cols];
            for r in 0..rows {
                for (a, &v) in acc.iter_mut().zip(x.row_slice(r)) {
                    *a += v as f64;
                }
            }
            let d = if mean { rows as f64 } else { 1.0 };
            Tensor::new(1, cols, acc.into_iter().map(|v| (v / d) as f32).collect())
        }
        Some(1) => {
            let mut acc = Vec::with_capacity(rows);
            let d = if mean { cols as f64 } else { 1.0 };
            for r in 0..rows {
                let s: f64 = x.row_slice(r).iter().map(|&v| v as f64).sum();
                acc.push((s / d) as f32);
            }
            Tensor::new(rows, 1, acc)
        }
        Some(other) => return Err(KvdError::InvalidArg(format!("reduce axis {other}"))),
    };
    Ok(t)
}
