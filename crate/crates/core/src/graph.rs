//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] records every operation as it executes. Nodes are addressed
//! by [`NodeId`] (an index into the tape), so the graph owns all values and
//! gradients and there is no aliasing to fight with. Because operands are
//! always recorded before the ops that consume them, the tape order is a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node exactly once.
//!
//! Storage is f32; reductions (`sum`, `entropy`, `cross_entropy`,
//! `weighted_sum`, `row_dot`, layer-norm statistics) accumulate in f64.
//!
//! A graph is confined to one thread; distinct graphs share nothing and may
//! run in parallel. Parameters enter a graph by value (copied into leaves),
//! so the owning parameter store is never mutated by graph execution.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[m,k] @ b[k,n]`
    Matmul { a: NodeId, b: NodeId },
    /// `a[m,k] @ b[n,k]^T` — avoids materializing transposes.
    MatmulTransB { a: NodeId, b: NodeId },
    /// Elementwise sum of two same-shape tensors.
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast bias: `x[r,c] + bias[c]`.
    AddBias { x: NodeId, bias: NodeId },
    /// Multiply by a compile-time constant.
    Scale { x: NodeId, c: f32 },
    /// `out = sum_i weights[i] * inputs[i]`, gradient flows to both the
    /// weight vector and the inputs.
    WeightedSum { weights: NodeId, inputs: Vec<NodeId> },
    Relu { x: NodeId },
    /// Normalize the trailing axis, then scale/shift by `gain`/`shift`.
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId },
    Softmax { x: NodeId, axis: usize },
    /// Shannon entropy of probability rows, natural log, summed over rows.
    Entropy { p: NodeId },
    /// Full reduction to a scalar.
    Sum { x: NodeId },
    /// Elementwise sum of N same-shape tensors.
    AddN { parts: Vec<NodeId> },
    /// Select rows by index (duplicates allowed; backward scatter-adds).
    Gather { x: NodeId, rows: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Per-row dot product of two `[r,c]` tensors -> `[r]`.
    RowDot { a: NodeId, b: NodeId },
    /// Scale row i of `x[r,c]` by `w[i]`.
    ColScale { x: NodeId, w: NodeId },
    /// Stack R vectors of length r into `[r,R]`.
    StackCols { parts: Vec<NodeId> },
    /// Mean negative log-likelihood of `targets` under softmax(logits).
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    /// Accumulated gradient; allocated on first backward touch.
    grad: Option<Vec<f32>>,
    /// Leaf flagged as a differentiation target.
    requires_grad: bool,
    /// True if any leaf under this node requires grad; backward skips the
    /// rest of the tape entirely.
    needs_grad: bool,
    op: Op,
}

/// The tape. See module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf holding `t`. Only leaves may require grad.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, requires_grad, requires_grad, Op::Leaf)
    }

    /// Leaf that never accumulates gradient (frozen parameters, inputs).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// True for leaves registered as differentiation targets.
    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, needs_grad: bool, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value entering graph");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape.clone(), self.val(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        mat_mul_acc(&self.val(a).data, &self.val(b).data, m, k, n, &mut out);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out), false, ng, Op::Matmul { a, b }))
    }

    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.val(a).shape.clone(), self.val(b).shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_trans_b",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (da, db) = (&self.val(a).data, &self.val(b).data);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let ar = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &db[j * k..(j + 1) * k];
                let mut s = 0.0f32;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                out[i * n + j] = s;
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out),
            false,
            ng,
            Op::MatmulTransB { a, b },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.val(a).shape,
            self.val(b).shape,
            "add: shape mismatch"
        );
        let data: Vec<f32> = self
            .val(a)
            .data
            .iter()
            .zip(&self.val(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.val(a).shape.clone();
        let ng = self.needs(&[a, b]);
        self.push(Tensor::new(shape, data), false, ng, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let c = self.val(x).cols();
        assert_eq!(self.val(bias).numel(), c, "add_bias: bias length mismatch");
        let rows = self.val(x).rows();
        let mut data = self.val(x).data.clone();
        let b = &self.val(bias).data;
        for r in 0..rows {
            for j in 0..c {
                data[r * c + j] += b[j];
            }
        }
        let shape = self.val(x).shape.clone();
        let ng = self.needs(&[x, bias]);
        self.push(Tensor::new(shape, data), false, ng, Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.val(x).data.iter().map(|v| v * c).collect();
        let shape = self.val(x).shape.clone();
        let ng = self.needs(&[x]);
        self.push(Tensor::new(shape, data), false, ng, Op::Scale { x, c })
    }

    /// `out = sum_i weights[i] * inputs[i]`, f64 accumulation per element.
    pub fn weighted_sum(&mut self, weights: NodeId, inputs: &[NodeId]) -> NodeId {
        let r = self.val(weights).numel();
        assert_eq!(r, inputs.len(), "weighted_sum: weight/input count mismatch");
        assert!(!inputs.is_empty(), "weighted_sum: empty input list");
        let shape = self.val(inputs[0]).shape.clone();
        for &i in inputs {
            assert_eq!(self.val(i).shape, shape, "weighted_sum: input shape mismatch");
        }
        let numel: usize = shape.iter().product();
        let mut acc = vec![0.0f64; numel];
        for (i, &inp) in inputs.iter().enumerate() {
            let w = self.val(weights).data[i] as f64;
            for (a, v) in acc.iter_mut().zip(&self.val(inp).data) {
                *a += w * (*v as f64);
            }
        }
        let data: Vec<f32> = acc.iter().map(|v| *v as f32).collect();
        let mut ps = vec![weights];
        ps.extend_from_slice(inputs);
        let ng = self.needs(&ps);
        self.push(
            Tensor::new(shape, data),
            false,
            ng,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.val(x).data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.val(x).shape.clone();
        let ng = self.needs(&[x]);
        self.push(Tensor::new(shape, data), false, ng, Op::Relu { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> NodeId {
        let c = self.val(x).cols();
        assert_eq!(self.val(gain).numel(), c, "layer_norm: gain length mismatch");
        assert_eq!(self.val(shift).numel(), c, "layer_norm: shift length mismatch");
        let rows = self.val(x).numel() / c;
        let mut data = vec![0.0f32; rows * c];
        {
            let xv = &self.val(x).data;
            let g = &self.val(gain).data;
            let s = &self.val(shift).data;
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let (mean, inv_std) = row_norm_stats(row);
                for j in 0..c {
                    let xhat = ((row[j] as f64 - mean) * inv_std) as f32;
                    data[r * c + j] = xhat * g[j] + s[j];
                }
            }
        }
        let shape = self.val(x).shape.clone();
        let ng = self.needs(&[x, gain, shift]);
        self.push(
            Tensor::new(shape, data),
            false,
            ng,
            Op::LayerNorm { x, gain, shift },
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let shape = self.val(x).shape.clone();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let data = softmax_data(&self.val(x).data, &shape, axis);
        let ng = self.needs(&[x]);
        self.push(Tensor::new(shape, data), false, ng, Op::Softmax { x, axis })
    }

    /// `-sum_{rows,cols} p ln p` over probability rows (trailing axis),
    /// with `0 ln 0 = 0`. Rows must sum to 1; deviation beyond 1e-3 is a
    /// contract violation.
    pub fn entropy(&mut self, p: NodeId) -> Result<NodeId> {
        let c = self.val(p).cols();
        let rows = self.val(p).numel() / c;
        let mut h = 0.0f64;
        for r in 0..rows {
            let row = &self.val(p).data[r * c..(r + 1) * c];
            let sum: f64 = row.iter().map(|v| *v as f64).sum();
            if (sum - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "entropy: row {r} sums to {sum:.6}, expected 1 within 1e-3"
                )));
            }
            for &v in row {
                if v > 0.0 {
                    let vf = v as f64;
                    h -= vf * vf.max(1e-300).ln();
                }
            }
        }
        let ng = self.needs(&[p]);
        Ok(self.push(Tensor::scalar(h as f32), false, ng, Op::Entropy { p }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.val(x).data.iter().map(|v| *v as f64).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s as f32), false, ng, Op::Sum { x })
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "add_n: empty list");
        let shape = self.val(parts[0]).shape.clone();
        let numel: usize = shape.iter().product();
        let mut acc = vec![0.0f64; numel];
        for &p in parts {
            assert_eq!(self.val(p).shape, shape, "add_n: shape mismatch");
            for (a, v) in acc.iter_mut().zip(&self.val(p).data) {
                *a += *v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|v| *v as f32).collect();
        let ng = self.needs(parts);
        self.push(
            Tensor::new(shape, data),
            false,
            ng,
            Op::AddN {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn gather(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let c = self.val(x).cols();
        let n = self.val(x).rows();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            assert!(r < n, "gather: row {r} out of range ({n} rows)");
            data.extend_from_slice(self.val(x).row(r));
        }
        let ng = self.needs(&[x]);
        let out = Tensor::new(vec![rows.len(), c], data);
        self.push(out, false, ng, Op::Gather { x, rows })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let c = self.val(x).cols();
        let rows = self.val(x).rows();
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.val(x).row(r)[start..start + len]);
        }
        let ng = self.needs(&[x]);
        self.push(
            Tensor::new(vec![rows, len], data),
            false,
            ng,
            Op::SliceCols { x, start, len },
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty list");
        let rows = self.val(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                assert_eq!(self.val(p).rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(self.val(p).row(r));
            }
        }
        let ng = self.needs(parts);
        self.push(
            Tensor::new(vec![rows, total], data),
            false,
            ng,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.val(a).shape, self.val(b).shape, "row_dot: shape mismatch");
        let c = self.val(a).cols();
        let rows = self.val(a).rows();
        let mut data = vec![0.0f32; rows];
        for r in 0..rows {
            let mut s = 0.0f64;
            for (x, y) in self.val(a).row(r).iter().zip(self.val(b).row(r)) {
                s += (*x as f64) * (*y as f64);
            }
            data[r] = s as f32;
        }
        let _ = c;
        let ng = self.needs(&[a, b]);
        self.push(Tensor::new(vec![rows], data), false, ng, Op::RowDot { a, b })
    }

    pub fn col_scale(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let rows = self.val(x).rows();
        let c = self.val(x).cols();
        assert_eq!(self.val(w).numel(), rows, "col_scale: weight length mismatch");
        let mut data = self.val(x).data.clone();
        for r in 0..rows {
            let wr = self.val(w).data[r];
            for j in 0..c {
                data[r * c + j] *= wr;
            }
        }
        let shape = self.val(x).shape.clone();
        let ng = self.needs(&[x, w]);
        self.push(Tensor::new(shape, data), false, ng, Op::ColScale { x, w })
    }

    pub fn stack_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_cols: empty list");
        let rows = self.val(parts[0]).numel();
        let k = parts.len();
        let mut data = vec![0.0f32; rows * k];
        for (j, &p) in parts.iter().enumerate() {
            assert_eq!(self.val(p).numel(), rows, "stack_cols: length mismatch");
            for r in 0..rows {
                data[r * k + j] = self.val(p).data[r];
            }
        }
        let ng = self.needs(parts);
        self.push(
            Tensor::new(vec![rows, k], data),
            false,
            ng,
            Op::StackCols {
                parts: parts.to_vec(),
            },
        )
    }

    /// Mean token-level cross entropy, computed via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let c = self.val(logits).cols();
        let rows = self.val(logits).rows();
        assert_eq!(rows, targets.len(), "cross_entropy: target count mismatch");
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < c, "cross_entropy: target {t} out of range");
            let row = self.val(logits).row(r);
            let (lse, _max) = log_sum_exp(row);
            loss += lse - row[t] as f64;
        }
        loss /= rows.max(1) as f64;
        let ng = self.needs(&[logits]);
        self.push(
            Tensor::scalar(loss as f32),
            false,
            ng,
            Op::CrossEntropy { logits, targets },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `root`. Gradients land in each reachable
    /// node that participates in differentiation; repeated calls without
    /// `zero_grad` accumulate. The sweep is a plain reverse iteration over
    /// the tape, so it is deterministic for a fixed construction order.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        // Scratch adjoints for this pass only; persistent grads accumulate
        // at the end so repeated backward calls add up instead of mixing.
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut adj);
            // Re-stash: leaf or interior, the adjoint is this node's grad.
            adj[i] = Some(g);
        }

        for i in 0..=root.0 {
            if let Some(g) = adj[i].take() {
                if self.nodes[i].needs_grad {
                    match &mut self.nodes[i].grad {
                        Some(buf) => {
                            for (a, b) in buf.iter_mut().zip(&g) {
                                *a += *b;
                            }
                        }
                        None => self.nodes[i].grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.val(*a).rows(), self.val(*a).cols());
                let n = self.val(*b).cols();
                if self.nodes[a.0].needs_grad {
                    // da += g @ b^T
                    let da = self.adj_buf(adj, *a);
                    let bd = &self.val(*b).data;
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv != 0.0 {
                                for p in 0..k {
                                    da[r * k + p] += gv * bd[p * n + j];
                                }
                            }
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    // db += a^T @ g
                    let db = self.adj_buf(adj, *b);
                    let ad = &self.val(*a).data;
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    db[p * n + j] += av * g[r * n + j];
                                }
                            }
                        }
                    }
                }
            }

            Op::MatmulTransB { a, b } => {
                let (m, k) = (self.val(*a).rows(), self.val(*a).cols());
                let n = self.val(*b).rows();
                if self.nodes[a.0].needs_grad {
                    // da += g @ b
                    let da = self.adj_buf(adj, *a);
                    mat_mul_acc(g, &self.val(*b).data, m, n, k, da);
                }
                if self.nodes[b.0].needs_grad {
                    // db += g^T @ a
                    let db = self.adj_buf(adj, *b);
                    let ad = &self.val(*a).data;
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv != 0.0 {
                                for p in 0..k {
                                    db[j * k + p] += gv * ad[r * k + p];
                                }
                            }
                        }
                    }
                }
            }

            Op::Add { a, b } => {
                for &p in &[*a, *b] {
                    if self.nodes[p.0].needs_grad {
                        let buf = self.adj_buf(adj, p);
                        for (x, y) in buf.iter_mut().zip(g) {
                            *x += *y;
                        }
                    }
                }
            }

            Op::AddBias { x, bias } => {
                let c = self.val(*x).cols();
                if self.nodes[x.0].needs_grad {
                    let buf = self.adj_buf(adj, *x);
                    for (a, b) in buf.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let buf = self.adj_buf(adj, *bias);
                    for (i, gv) in g.iter().enumerate() {
                        buf[i % c] += *gv;
                    }
                }
            }

            Op::Scale { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let buf = self.adj_buf(adj, *x);
                    for (a, b) in buf.iter_mut().zip(g) {
                        *a += *b * c;
                    }
                }
            }

            Op::WeightedSum { weights, inputs } => {
                if self.nodes[weights.0].needs_grad {
                    let mut dw = vec![0.0f64; inputs.len()];
                    for (idx, &inp) in inputs.iter().enumerate() {
                        let mut s = 0.0f64;
                        for (gv, xv) in g.iter().zip(&self.val(inp).data) {
                            s += (*gv as f64) * (*xv as f64);
                        }
                        dw[idx] = s;
                    }
                    let buf = self.adj_buf(adj, *weights);
                    for (a, b) in buf.iter_mut().zip(&dw) {
                        *a += *b as f32;
                    }
                }
                for (idx, &inp) in inputs.iter().enumerate() {
                    if self.nodes[inp.0].needs_grad {
                        let w = self.val(*weights).data[idx];
                        let buf = self.adj_buf(adj, inp);
                        for (a, b) in buf.iter_mut().zip(g) {
                            *a += w * *b;
                        }
                    }
                }
            }

            Op::Relu { x } => {
                if self.nodes[x.0].needs_grad {
                    let xd = &self.val(*x).data;
                    let buf = self.adj_buf(adj, *x);
                    for (i, gv) in g.iter().enumerate() {
                        if xd[i] > 0.0 {
                            buf[i] += *gv;
                        }
                    }
                }
            }

            Op::LayerNorm { x, gain, shift } => {
                let c = self.val(*x).cols();
                let rows = self.val(*x).numel() / c;
                let xd = self.val(*x).data.clone();
                let gd = &self.val(*gain).data;

                if self.nodes[gain.0].needs_grad || self.nodes[shift.0].needs_grad {
                    let mut dgain = vec![0.0f64; c];
                    let mut dshift = vec![0.0f64; c];
                    for r in 0..rows {
                        let row = &xd[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_norm_stats(row);
                        for j in 0..c {
                            let xhat = (row[j] as f64 - mean) * inv_std;
                            let gv = g[r * c + j] as f64;
                            dgain[j] += gv * xhat;
                            dshift[j] += gv;
                        }
                    }
                    if self.nodes[gain.0].needs_grad {
                        let buf = self.adj_buf(adj, *gain);
                        for (a, b) in buf.iter_mut().zip(&dgain) {
                            *a += *b as f32;
                        }
                    }
                    if self.nodes[shift.0].needs_grad {
                        let buf = self.adj_buf(adj, *shift);
                        for (a, b) in buf.iter_mut().zip(&dshift) {
                            *a += *b as f32;
                        }
                    }
                }

                if self.nodes[x.0].needs_grad {
                    let buf = self.adj_buf(adj, *x);
                    let cf = c as f64;
                    for r in 0..rows {
                        let row = &xd[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_norm_stats(row);
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        let mut dxhat = vec![0.0f64; c];
                        let mut xhat = vec![0.0f64; c];
                        for j in 0..c {
                            xhat[j] = (row[j] as f64 - mean) * inv_std;
                            dxhat[j] = g[r * c + j] as f64 * gd[j] as f64;
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        for j in 0..c {
                            let dx = inv_std / cf
                                * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            buf[r * c + j] += dx as f32;
                        }
                    }
                }
            }

            Op::Softmax { x, axis } => {
                if self.nodes[x.0].needs_grad {
                    let shape = &self.val(*x).shape;
                    let s = &self.nodes[i].value.data;
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let buf = self.adj_buf(adj, *x);
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut dot = 0.0f64;
                            for a in 0..len {
                                let f = (o * len + a) * inner + ii;
                                dot += g[f] as f64 * s[f] as f64;
                            }
                            for a in 0..len {
                                let f = (o * len + a) * inner + ii;
                                buf[f] += (s[f] as f64 * (g[f] as f64 - dot)) as f32;
                            }
                        }
                    }
                }
            }

            Op::Entropy { p } => {
                if self.nodes[p.0].needs_grad {
                    // dH/dp = -(ln p + 1); extended by 0 where p <= 0, matching
                    // the 0 ln 0 = 0 convention in the forward pass.
                    let gv = g[0] as f64;
                    let pd = &self.val(*p).data;
                    let buf = self.adj_buf(adj, *p);
                    for (j, &v) in pd.iter().enumerate() {
                        if v > 0.0 {
                            let vf = (v as f64).max(1e-38);
                            buf[j] += (gv * -(vf.ln() + 1.0)) as f32;
                        }
                    }
                }
            }

            Op::Sum { x } => {
                if self.nodes[x.0].needs_grad {
                    let gv = g[0];
                    let buf = self.adj_buf(adj, *x);
                    for a in buf.iter_mut() {
                        *a += gv;
                    }
                }
            }

            Op::AddN { parts } => {
                for &p in parts {
                    if self.nodes[p.0].needs_grad {
                        let buf = self.adj_buf(adj, p);
                        for (a, b) in buf.iter_mut().zip(g) {
                            *a += *b;
                        }
                    }
                }
            }

            Op::Gather { x, rows } => {
                if self.nodes[x.0].needs_grad {
                    let c = self.val(*x).cols();
                    let buf = self.adj_buf(adj, *x);
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[src_r * c + j] += g[out_r * c + j];
                        }
                    }
                }
            }

            Op::SliceCols { x, start, len } => {
                if self.nodes[x.0].needs_grad {
                    let c = self.val(*x).cols();
                    let rows = self.val(*x).rows();
                    let buf = self.adj_buf(adj, *x);
                    for r in 0..rows {
                        for j in 0..*len {
                            buf[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }

            Op::ConcatCols { parts } => {
                let rows = self.val(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let pc = self.val(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let buf = self.adj_buf(adj, p);
                        for r in 0..rows {
                            for j in 0..pc {
                                buf[r * pc + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }

            Op::RowDot { a, b } => {
                let c = self.val(*a).cols();
                let rows = self.val(*a).rows();
                if self.nodes[a.0].needs_grad {
                    let bd = &self.val(*b).data;
                    let buf = self.adj_buf(adj, *a);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] += g[r] * bd[r * c + j];
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.val(*a).data;
                    let buf = self.adj_buf(adj, *b);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] += g[r] * ad[r * c + j];
                        }
                    }
                }
            }

            Op::ColScale { x, w } => {
                let c = self.val(*x).cols();
                let rows = self.val(*x).rows();
                if self.nodes[x.0].needs_grad {
                    let wd = &self.val(*w).data;
                    let buf = self.adj_buf(adj, *x);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] += g[r * c + j] * wd[r];
                        }
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let xd = &self.val(*x).data;
                    let buf = self.adj_buf(adj, *w);
                    for r in 0..rows {
                        let mut s = 0.0f64;
                        for j in 0..c {
                            s += g[r * c + j] as f64 * xd[r * c + j] as f64;
                        }
                        buf[r] += s as f32;
                    }
                }
            }

            Op::StackCols { parts } => {
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        let rows = self.val(p).numel();
                        let buf = self.adj_buf(adj, p);
                        for r in 0..rows {
                            buf[r] += g[r * k + j];
                        }
                    }
                }
            }

            Op::CrossEntropy { logits, targets } => {
                if self.nodes[logits.0].needs_grad {
                    let c = self.val(*logits).cols();
                    let rows = self.val(*logits).rows();
                    let gv = g[0] as f64 / rows.max(1) as f64;
                    let ld = self.val(*logits).data.clone();
                    let buf = self.adj_buf(adj, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &ld[r * c..(r + 1) * c];
                        let (lse, maxv) = log_sum_exp(row);
                        for j in 0..c {
                            let p = ((row[j] as f64 - maxv) - (lse - maxv)).exp();
                            let ind = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += (gv * (p - ind)) as f32;
                        }
                    }
                }
            }
        }
    }

    /// Get-or-init the scratch adjoint buffer for `id` during a backward pass.
    #[allow(clippy::mut_from_ref)]
    fn adj_buf<'a>(&self, adj: &'a mut [Option<Vec<f32>>], id: NodeId) -> &'a mut Vec<f32> {
        let numel = self.nodes[id.0].value.numel();
        adj[id.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

// ── shared numeric kernels ──────────────────────────────────────────

/// `out += a[m,k] @ b[k,n]`, f32 accumulation, ikj loop order.
fn mat_mul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let br = &b[p * n..(p + 1) * n];
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
}

/// Mean and 1/sqrt(var + eps) of a row, f64 accumulation. Shared between
/// the layer-norm forward and backward so statistics agree bit-for-bit.
fn row_norm_stats(row: &[f32]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_data(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + ii;
            let mut maxv = f32::NEG_INFINITY;
            for a in 0..len {
                maxv = maxv.max(x[idx(a)]);
            }
            let mut sum = 0.0f64;
            for a in 0..len {
                let e = ((x[idx(a)] - maxv) as f64).exp();
                out[idx(a)] = e as f32;
                sum += e;
            }
            for a in 0..len {
                out[idx(a)] = ((out[idx(a)] as f64) / sum) as f32;
            }
        }
    }
    out
}

fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|v| ((*v as f64) - maxv).exp()).sum();
    (maxv + s.ln(), maxv)
}
