//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Graph`] is an append-only tape of 2-D `f64` nodes. Operations push a
//! node recording its parents; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients. Tape order is a topological order by
//! construction, so no explicit sort is needed. One graph serves one forward
//! pass (or one batch of passes sharing parameter leaves); graphs are cheap
//! and rebuilt per step.
//!
//! Everything is double precision: the finite-difference oracles in
//! [`fd`] need the headroom, and desk-scale models are small enough that f64
//! costs nothing that matters.
//!
//! Shape or contract violations panic with a message naming the primitive;
//! they are programming errors, not runtime conditions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::collections::HashMap;

pub mod checkpoint;
pub mod fd;
pub mod params;

pub use params::{AdamConfig, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Epsilon inside layer normalization. Small enough that normalized rows have
/// variance 1 to well below 1e-8 for inputs of ordinary scale.
pub const LAYER_NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Matmul { a: TensorRef, b: TensorRef, trans_b: bool },
    Add { a: TensorRef, b: TensorRef, broadcast_row: bool },
    Scale { x: TensorRef, c: f64 },
    Relu { x: TensorRef },
    SoftmaxRows { x: TensorRef, valid: Option<Vec<bool>> },
    LayerNorm { x: TensorRef, gamma: TensorRef, beta: TensorRef, row_stats: Vec<(f64, f64)> },
    EmbeddingLookup { table: TensorRef, ids: Vec<usize> },
    MulMask { x: TensorRef, mask: Vec<f64> },
    ConcatRows { parts: Vec<TensorRef> },
    ConcatCols { parts: Vec<TensorRef> },
    SliceCols { x: TensorRef, start: usize },
    SelectRow { x: TensorRef, row: usize },
    Reshape { x: TensorRef },
    SumAll { x: TensorRef },
    CrossEntropy { logits: TensorRef, target: usize, probs: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    dropout_rng: Option<ChaCha8Rng>,
    bindings: Vec<(String, TensorRef)>,
    binding_index: HashMap<String, usize>,
}

/// `C(m,n) = beta*C + alpha * A_view(m,k) * B_view(k,n)`.
///
/// `a_t == false` means the buffer is the (m,k) matrix row-major; `true` means
/// the buffer holds the transpose, i.e. (k,m) row-major. Same for `b_t` with
/// (k,n) vs (n,k).
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    /// Graph for evaluation: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            dropout_rng: None,
            bindings: Vec::new(),
            binding_index: HashMap::new(),
        }
    }

    /// Graph for training: dropout draws from the supplied stream.
    pub fn train(dropout_rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            train: true,
            dropout_rng: Some(dropout_rng),
            bindings: Vec::new(),
            binding_index: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> TensorRef {
        debug_assert_eq!(value.len(), rows * cols);
        let grad = vec![0.0; rows * cols];
        self.nodes.push(Node { rows, cols, value, grad, op, needs_grad });
        TensorRef(self.nodes.len() - 1)
    }

    fn node(&self, t: TensorRef) -> &Node {
        &self.nodes[t.0]
    }

    pub fn shape(&self, t: TensorRef) -> (usize, usize) {
        let n = self.node(t);
        (n.rows, n.cols)
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.node(t).value
    }

    pub fn grad(&self, t: TensorRef) -> &[f64] {
        &self.node(t).grad
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> TensorRef {
        assert_eq!(value.len(), rows * cols, "leaf: value length {} != {}x{}", value.len(), rows, cols);
        self.push(rows, cols, value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> TensorRef {
        self.leaf(rows, cols, value, false)
    }

    /// Bind a named parameter from `store` as a leaf. Repeated binds of the
    /// same name return the same node, so shared weights accumulate gradient
    /// through a single leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> TensorRef {
        if let Some(&i) = self.binding_index.get(name) {
            return self.bindings[i].1;
        }
        let p = store.get(name).unwrap_or_else(|| panic!("param: unknown parameter '{name}'"));
        let t = self.push(p.shape.0, p.shape.1, p.value.clone(), Op::Leaf, true);
        self.binding_index.insert(name.to_string(), self.bindings.len());
        self.bindings.push((name.to_string(), t));
        t
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bindings
            .iter()
            .map(|(name, t)| (name.clone(), self.node(*t).grad.clone()))
            .collect()
    }

    // ------------------------------------------------------------------
    // Primitives
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul: dimension mismatch ({m},{ka})x({kb},{n})");
        let mut value = vec![0.0; m * n];
        gemm_acc(m, ka, n, 1.0, &self.node(a).value, false, &self.node(b).value, false, 0.0, &mut value);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(m, n, value, Op::Matmul { a, b, trans_b: false }, needs)
    }

    /// `a @ transpose(b)`, with `b` stored untransposed.
    pub fn matmul_nt(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_nt: dimension mismatch ({m},{ka})x({n},{kb})^T");
        let mut value = vec![0.0; m * n];
        gemm_acc(m, ka, n, 1.0, &self.node(a).value, false, &self.node(b).value, true, 0.0, &mut value);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(m, n, value, Op::Matmul { a, b, trans_b: true }, needs)
    }

    /// Elementwise add; `b` may also be a (1, cols) row broadcast over `a`'s rows.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let broadcast = rb == 1 && ra != 1;
        assert!(
            (ra == rb && ca == cb) || (broadcast && ca == cb),
            "add: dimension mismatch ({ra},{ca})+({rb},{cb})"
        );
        let mut value = self.node(a).value.clone();
        let bv = &self.node(b).value;
        if broadcast {
            for r in 0..ra {
                for c in 0..ca {
                    value[r * ca + c] += bv[c];
                }
            }
        } else {
            for (v, s) in value.iter_mut().zip(bv.iter()) {
                *v += s;
            }
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push(ra, ca, value, Op::Add { a, b, broadcast_row: broadcast }, needs)
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let (r, cl) = self.shape(x);
        let value = self.node(x).value.iter().map(|v| v * c).collect();
        let needs = self.node(x).needs_grad;
        self.push(r, cl, value, Op::Scale { x, c }, needs)
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        let (r, c) = self.shape(x);
        let value = self.node(x).value.iter().map(|v| v.max(0.0)).collect();
        let needs = self.node(x).needs_grad;
        self.push(r, c, value, Op::Relu { x }, needs)
    }

    pub fn softmax_rows(&mut self, x: TensorRef) -> TensorRef {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax. When `valid` is given, invalid columns get probability 0
    /// and are excluded from normalization.
    pub fn softmax_rows_masked(&mut self, x: TensorRef, valid: Option<&[bool]>) -> TensorRef {
        let (r, c) = self.shape(x);
        if let Some(v) = valid {
            assert_eq!(v.len(), c, "softmax_rows: mask length {} != cols {c}", v.len());
            assert!(v.iter().any(|&b| b), "softmax_rows: mask excludes every column");
        }
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if valid.map_or(true, |m| m[j]) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for j in 0..c {
                if valid.map_or(true, |m| m[j]) {
                    let e = (row[j] - max).exp();
                    value[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                value[i * c + j] /= sum;
            }
        }
        let needs = self.node(x).needs_grad;
        self.push(r, c, value, Op::SoftmaxRows { x, valid: valid.map(|v| v.to_vec()) }, needs)
    }

    /// Row-wise layer normalization with affine parameters `gamma`, `beta`
    /// (both (1, cols)).
    pub fn layer_norm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef) -> TensorRef {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma shape mismatch");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta shape mismatch");
        let xv = &self.node(x).value;
        let gv = &self.node(gamma).value;
        let bv = &self.node(beta).value;
        let mut value = vec![0.0; r * c];
        let mut row_stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv_sigma = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mu) * inv_sigma;
                value[i * c + j] = gv[j] * xhat + bv[j];
            }
            row_stats.push((mu, inv_sigma));
        }
        let needs =
            self.node(x).needs_grad || self.node(gamma).needs_grad || self.node(beta).needs_grad;
        self.push(r, c, value, Op::LayerNorm { x, gamma, beta, row_stats }, needs)
    }

    /// Gather rows of `table` by token id.
    pub fn embedding_lookup(&mut self, table: TensorRef, ids: &[usize]) -> TensorRef {
        let (v, d) = self.shape(table);
        assert!(!ids.is_empty(), "embedding_lookup: empty id sequence");
        for &id in ids {
            assert!(id < v, "embedding_lookup: id {id} out of vocabulary {v}");
        }
        let tv = &self.node(table).value;
        let mut value = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            value[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.node(table).needs_grad;
        self.push(ids.len(), d, value, Op::EmbeddingLookup { table, ids: ids.to_vec() }, needs)
    }

    /// Elementwise multiply by a fixed mask. Zeroed entries block gradient
    /// exactly; also the body of dropout.
    pub fn mask_mul(&mut self, x: TensorRef, mask: Vec<f64>) -> TensorRef {
        let (r, c) = self.shape(x);
        assert_eq!(mask.len(), r * c, "mask_mul: mask length {} != {}x{}", mask.len(), r, c);
        let value = self.node(x).value.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let needs = self.node(x).needs_grad;
        self.push(r, c, value, Op::MulMask { x, mask }, needs)
    }

    /// Inverted dropout, active only on training graphs.
    pub fn dropout(&mut self, x: TensorRef, p: f64) -> TensorRef {
        assert!((0.0..1.0).contains(&p), "dropout: p={p} outside [0,1)");
        if !self.train || p == 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 - p;
        let rng = self.dropout_rng.as_mut().expect("dropout: training graph without rng");
        let mask: Vec<f64> =
            (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mask_mul(x, mask)
    }

    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut value = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(c, cols, "concat_rows: column mismatch {c} != {cols}");
            rows += r;
            value.extend_from_slice(&self.node(p).value);
            needs |= self.node(p).needs_grad;
        }
        self.push(rows, cols, value, Op::ConcatRows { parts: parts.to_vec() }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.shape(p);
            assert_eq!(r, rows, "concat_cols: row mismatch {r} != {rows}");
            cols += c;
            needs |= self.node(p).needs_grad;
        }
        let mut value = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pv = &self.node(p).value;
            for r in 0..rows {
                value[r * cols + offset..r * cols + offset + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        self.push(rows, cols, value, Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    pub fn slice_cols(&mut self, x: TensorRef, start: usize, len: usize) -> TensorRef {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols: range {start}..{} out of {c} columns", start + len);
        let xv = &self.node(x).value;
        let mut value = vec![0.0; r * len];
        for i in 0..r {
            value[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let needs = self.node(x).needs_grad;
        self.push(r, len, value, Op::SliceCols { x, start }, needs)
    }

    pub fn select_row(&mut self, x: TensorRef, row: usize) -> TensorRef {
        let (r, c) = self.shape(x);
        assert!(row < r, "select_row: row {row} out of {r}");
        let value = self.node(x).value[row * c..(row + 1) * c].to_vec();
        let needs = self.node(x).needs_grad;
        self.push(1, c, value, Op::SelectRow { x, row }, needs)
    }

    pub fn reshape(&mut self, x: TensorRef, rows: usize, cols: usize) -> TensorRef {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape: ({r},{c}) cannot view as ({rows},{cols})");
        let value = self.node(x).value.clone();
        let needs = self.node(x).needs_grad;
        self.push(rows, cols, value, Op::Reshape { x }, needs)
    }

    pub fn sum_all(&mut self, x: TensorRef) -> TensorRef {
        let value = vec![self.node(x).value.iter().sum()];
        let needs = self.node(x).needs_grad;
        self.push(1, 1, value, Op::SumAll { x }, needs)
    }

    /// Cross-entropy of a (1, C) logit row against a target class index.
    /// Numerically stable log-softmax inside; output is (1, 1).
    pub fn cross_entropy(&mut self, logits: TensorRef, target: usize) -> TensorRef {
        let (r, c) = self.shape(logits);
        assert_eq!(r, 1, "cross_entropy: logits must be a (1,C) row, got ({r},{c})");
        assert!(target < c, "cross_entropy: target {target} out of {c} classes");
        let row = &self.node(logits).value;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let loss = lse - row[target];
        let probs: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
        let needs = self.node(logits).needs_grad;
        self.push(1, 1, vec![loss], Op::CrossEntropy { logits, target, probs }, needs)
    }

    /// Add fixed sinusoidal positional encodings to rows
    /// `row_start..row_start+n_rows`, using absolute position indices starting
    /// at `index_start`. Other rows pass through unchanged.
    pub fn positional_encoding_add(
        &mut self,
        x: TensorRef,
        row_start: usize,
        n_rows: usize,
        index_start: usize,
    ) -> TensorRef {
        let (r, c) = self.shape(x);
        assert!(row_start + n_rows <= r, "positional_encoding_add: rows {row_start}..{} out of {r}", row_start + n_rows);
        let mut pe = vec![0.0; r * c];
        for i in 0..n_rows {
            let pos = (index_start + i) as f64;
            let row = row_start + i;
            let mut j = 0;
            while j < c {
                let freq = 1.0 / 10000f64.powf(j as f64 / c as f64);
                pe[row * c + j] = (pos * freq).sin();
                if j + 1 < c {
                    pe[row * c + j + 1] = (pos * freq).cos();
                }
                j += 2;
            }
        }
        let pe_node = self.constant(r, c, pe);
        self.add(x, pe_node)
    }

    /// Multi-head scaled dot-product attention over already-projected q, k, v
    /// (all (L, d)). `key_valid`, when given, masks which key positions may be
    /// attended to (padding exclusion).
    pub fn multi_head_attention(
        &mut self,
        q: TensorRef,
        k: TensorRef,
        v: TensorRef,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> TensorRef {
        let (lq, d) = self.shape(q);
        assert_eq!(self.shape(k), self.shape(v), "multi_head_attention: k/v shape mismatch");
        let (lk, dk) = self.shape(k);
        assert_eq!(d, dk, "multi_head_attention: q width {d} != k width {dk}");
        assert!(heads > 0 && d % heads == 0, "multi_head_attention: width {d} not divisible by {heads} heads");
        if let Some(m) = key_valid {
            assert_eq!(m.len(), lk, "multi_head_attention: key mask length {} != {lk}", m.len());
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh);
            let kh = self.slice_cols(k, h * dh, dh);
            let vh = self.slice_cols(v, h * dh, dh);
            let scores = self.matmul_nt(qh, kh);
            let scaled = self.scale(scores, scale);
            let probs = self.softmax_rows_masked(scaled, key_valid);
            outs.push(self.matmul(probs, vh));
        }
        let _ = lq;
        self.concat_cols(&outs)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Backpropagate from a scalar loss node, accumulating `grad` on every
    /// node that needs it.
    pub fn backward(&mut self, loss: TensorRef) {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            // Taking the op out lets us borrow parent nodes mutably.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op);
            self.nodes[i].op = op;
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (m, n) = (self.nodes[i].rows, self.nodes[i].cols);
                let k = self.node(*a).cols;
                let g = std::mem::take(&mut self.nodes[i].grad);
                if !*trans_b {
                    if self.node(*a).needs_grad {
                        let bv = self.nodes[b.0].value.clone();
                        gemm_acc(m, n, k, 1.0, &g, false, &bv, true, 1.0, &mut self.nodes[a.0].grad);
                    }
                    if self.node(*b).needs_grad {
                        let av = self.nodes[a.0].value.clone();
                        gemm_acc(k, m, n, 1.0, &av, true, &g, false, 1.0, &mut self.nodes[b.0].grad);
                    }
                } else {
                    if self.node(*a).needs_grad {
                        let bv = self.nodes[b.0].value.clone();
                        gemm_acc(m, n, k, 1.0, &g, false, &bv, false, 1.0, &mut self.nodes[a.0].grad);
                    }
                    if self.node(*b).needs_grad {
                        let av = self.nodes[a.0].value.clone();
                        gemm_acc(n, m, k, 1.0, &g, true, &av, false, 1.0, &mut self.nodes[b.0].grad);
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::Add { a, b, broadcast_row } => {
                let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                let g = std::mem::take(&mut self.nodes[i].grad);
                if self.node(*a).needs_grad {
                    for (ga, gi) in self.nodes[a.0].grad.iter_mut().zip(g.iter()) {
                        *ga += gi;
                    }
                }
                if self.node(*b).needs_grad {
                    if *broadcast_row {
                        for row in 0..r {
                            for col in 0..c {
                                self.nodes[b.0].grad[col] += g[row * c + col];
                            }
                        }
                    } else {
                        for (gb, gi) in self.nodes[b.0].grad.iter_mut().zip(g.iter()) {
                            *gb += gi;
                        }
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::Scale { x, c } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                for (gx, gi) in self.nodes[x.0].grad.iter_mut().zip(g.iter()) {
                    *gx += c * gi;
                }
                self.nodes[i].grad = g;
            }
            Op::Relu { x } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                for ((gx, gi), xi) in self.nodes[x.0].grad.iter_mut().zip(g.iter()).zip(xv.iter()) {
                    if *xi > 0.0 {
                        *gx += gi;
                    }
                }
                self.nodes[x.0].value = xv;
                self.nodes[i].grad = g;
            }
            Op::SoftmaxRows { x, valid } => {
                let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                let g = std::mem::take(&mut self.nodes[i].grad);
                let y = std::mem::take(&mut self.nodes[i].value);
                for row in 0..r {
                    let mut dot = 0.0;
                    for col in 0..c {
                        dot += g[row * c + col] * y[row * c + col];
                    }
                    for col in 0..c {
                        if valid.as_ref().map_or(true, |m| m[col]) {
                            self.nodes[x.0].grad[row * c + col] +=
                                y[row * c + col] * (g[row * c + col] - dot);
                        }
                    }
                }
                self.nodes[i].value = y;
                self.nodes[i].grad = g;
            }
            Op::LayerNorm { x, gamma, beta, row_stats } => {
                let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                let g = std::mem::take(&mut self.nodes[i].grad);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let gv = self.nodes[gamma.0].value.clone();
                let x_needs = self.node(*x).needs_grad;
                let gamma_needs = self.node(*gamma).needs_grad;
                let beta_needs = self.node(*beta).needs_grad;
                for row in 0..r {
                    let (mu, inv_sigma) = row_stats[row];
                    // dxhat, then fold means back into dx.
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for col in 0..c {
                        let xhat = (xv[row * c + col] - mu) * inv_sigma;
                        let dxhat = g[row * c + col] * gv[col];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        if gamma_needs {
                            self.nodes[gamma.0].grad[col] += g[row * c + col] * xhat;
                        }
                        if beta_needs {
                            self.nodes[beta.0].grad[col] += g[row * c + col];
                        }
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    if x_needs {
                        for col in 0..c {
                            let xhat = (xv[row * c + col] - mu) * inv_sigma;
                            let dxhat = g[row * c + col] * gv[col];
                            self.nodes[x.0].grad[row * c + col] +=
                                inv_sigma * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                self.nodes[x.0].value = xv;
                self.nodes[i].grad = g;
            }
            Op::EmbeddingLookup { table, ids } => {
                let c = self.nodes[i].cols;
                let g = std::mem::take(&mut self.nodes[i].grad);
                for (row, &id) in ids.iter().enumerate() {
                    for col in 0..c {
                        self.nodes[table.0].grad[id * c + col] += g[row * c + col];
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::MulMask { x, mask } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                for ((gx, gi), m) in self.nodes[x.0].grad.iter_mut().zip(g.iter()).zip(mask.iter()) {
                    *gx += gi * m;
                }
                self.nodes[i].grad = g;
            }
            Op::ConcatRows { parts } => {
                let c = self.nodes[i].cols;
                let g = std::mem::take(&mut self.nodes[i].grad);
                let mut offset = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].rows;
                    if self.node(p).needs_grad {
                        for (gp, gi) in self.nodes[p.0]
                            .grad
                            .iter_mut()
                            .zip(g[offset * c..(offset + pr) * c].iter())
                        {
                            *gp += gi;
                        }
                    }
                    offset += pr;
                }
                self.nodes[i].grad = g;
            }
            Op::ConcatCols { parts } => {
                let (r, c) = (self.nodes[i].rows, self.nodes[i].cols);
                let g = std::mem::take(&mut self.nodes[i].grad);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    if self.node(p).needs_grad {
                        for row in 0..r {
                            for col in 0..pc {
                                self.nodes[p.0].grad[row * pc + col] += g[row * c + offset + col];
                            }
                        }
                    }
                    offset += pc;
                }
                self.nodes[i].grad = g;
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (self.nodes[i].rows, self.nodes[i].cols);
                let xc = self.nodes[x.0].cols;
                let g = std::mem::take(&mut self.nodes[i].grad);
                for row in 0..r {
                    for col in 0..len {
                        self.nodes[x.0].grad[row * xc + start + col] += g[row * len + col];
                    }
                }
                self.nodes[i].grad = g;
            }
            Op::SelectRow { x, row } => {
                let c = self.nodes[i].cols;
                let g = std::mem::take(&mut self.nodes[i].grad);
                for col in 0..c {
                    self.nodes[x.0].grad[row * c + col] += g[col];
                }
                self.nodes[i].grad = g;
            }
            Op::Reshape { x } => {
                let g = std::mem::take(&mut self.nodes[i].grad);
                for (gx, gi) in self.nodes[x.0].grad.iter_mut().zip(g.iter()) {
                    *gx += gi;
                }
                self.nodes[i].grad = g;
            }
            Op::SumAll { x } => {
                let g0 = self.nodes[i].grad[0];
                for gx in self.nodes[x.0].grad.iter_mut() {
                    *gx += g0;
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let g0 = self.nodes[i].grad[0];
                for (col, p) in probs.iter().enumerate() {
                    let one_hot = if col == *target { 1.0 } else { 0.0 };
                    self.nodes[logits.0].grad[col] += g0 * (p - one_hot);
                }
            }
        }
    }

    /// Scan every node's value and gradient for NaN/Inf.
    pub fn assert_all_finite(&self) -> crate::error::Result<()> {
        for (idx, n) in self.nodes.iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(crate::error::Error::Numeric(format!(
                    "non-finite value in graph node {idx} ({}x{})",
                    n.rows, n.cols
                )));
            }
            if n.grad.iter().any(|v| !v.is_finite()) {
                return Err(crate::error::Error::Numeric(format!(
                    "non-finite gradient in graph node {idx} ({}x{})",
                    n.rows, n.cols
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
