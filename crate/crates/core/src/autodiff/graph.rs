use std::collections::{BTreeSet, HashMap};

use super::params::{ParamGroup, ParamId, ParameterStore};
use super::tensor::{strides, Tensor};
use super::AutodiffError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Registered operators. Every non-leaf kind has a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Mul,
    Scale,
    EmbeddingLookup,
    Softmax,
    Sigmoid,
    Relu,
    Tanh,
    Abs,
    Concat,
    Transpose,
    Reshape,
    ReduceSum,
    ReduceMean,
    CosineSimilarity,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Concat => "concat",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::CosineSimilarity => "cosine_similarity",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// Norm below which a cosine similarity is treated as degenerate and
/// contributes zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;
/// Probability floor applied inside the cross-entropy log.
pub const LOG_PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Lookup { table: Var, rows: Vec<Option<usize>> },
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Transpose { input: Var, axes: (usize, usize) },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Cosine(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::BatchMatMul(..) => OpKind::BatchMatMul,
            Op::Add(..) | Op::AddBias(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Lookup { .. } => OpKind::EmbeddingLookup,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Abs(_) => OpKind::Abs,
            Op::Concat { .. } => OpKind::Concat,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::ReduceSum,
            Op::Mean(_) => OpKind::ReduceMean,
            Op::Cosine(..) => OpKind::CosineSimilarity,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so the node vector is always a valid topological order.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
    frozen: BTreeSet<ParamGroup>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: OpKind, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op: op.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and
/// `op(b)` of shape `k × n`. Transposed operands are stored row-major in
/// their untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn transpose_data(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let out_strides = strides(&out_shape);
    // stride in the output of each input axis
    let mut mapped: Vec<usize> = (0..shape.len()).map(|i| out_strides[i]).collect();
    mapped.swap(a, b);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for &v in data {
        out[offset] = v;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            offset += mapped[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= mapped[d] * shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    let sa = a.iter().map(|v| v * v).sum::<f64>();
    let sb = b.iter().map(|v| v * v).sum::<f64>();
    let (na, nb) = (sa.sqrt(), sb.sqrt());
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // one square root of the product keeps parallel vectors at exactly 1
    Some((dot / (sa * sb).sqrt(), na, nb))
}

/// Mean cross-entropy of `labels` under softmax(`logits`) plus the per-row
/// softmax probabilities. Rows whose true-class probability falls below
/// [`LOG_PROB_FLOOR`] are clamped and flagged.
pub(crate) fn cross_entropy_forward(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
) -> (f64, Vec<f64>, Vec<bool>) {
    let mut probs = logits.to_vec();
    let floor = LOG_PROB_FLOOR.ln();
    let mut total = 0.0;
    let mut clamped = Vec::with_capacity(labels.len());
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let logp = row[label] - lse;
        clamped.push(logp < floor);
        total -= logp.max(floor);
    }
    softmax_rows(&mut probs, classes);
    (total / labels.len() as f64, probs, clamped)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_vars: HashMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Parameters of `group` enter this graph as constants.
    pub fn freeze(&mut self, group: ParamGroup) -> &mut Self {
        self.frozen.insert(group);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf holding the current value of a stored parameter. Repeated calls
    /// for the same id return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.group(id));
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        if trainable {
            self.params.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err(OpKind::MatMul, &[sa, sb]));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// `[B, n, k] × [B, k, m] → [B, n, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err(OpKind::BatchMatMul, &[sa, sb]));
        }
        let (batch, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                n,
                k,
                m,
                &da[i * n * k..(i + 1) * n * k],
                false,
                &db[i * k * m..(i + 1) * k * m],
                false,
                &mut out[i * n * m..(i + 1) * n * m],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, n, m], out)?, Op::BatchMatMul(a, b), rg))
    }

    /// Elementwise sum of equal shapes, or `b` (rank 1) broadcast along the
    /// trailing dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let shape = sa.to_vec();
            return Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let bias = self.value(b).data();
            let mut out = self.value(a).data().to_vec();
            for row in out.chunks_mut(bias.len()) {
                for (o, x) in row.iter_mut().zip(bias) {
                    *o += x;
                }
            }
            let shape = sa.to_vec();
            return Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(a, b), rg));
        }
        Err(shape_err(OpKind::Add, &[sa, sb]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(OpKind::Mul, &[sa, sb]));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * s).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Row gather. `None` entries produce zero rows that receive no
    /// gradient.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var, AutodiffError> {
        let st = self.shape(table);
        if st.len() != 2 || rows.is_empty() {
            return Err(shape_err(OpKind::EmbeddingLookup, &[st, &[rows.len()]]));
        }
        let (n_rows, width) = (st[0], st[1]);
        let data = self.value(table).data();
        let mut out = vec![0.0; rows.len() * width];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if r >= n_rows {
                    return Err(AutodiffError::Index {
                        op: OpKind::EmbeddingLookup.name(),
                        index: r,
                        len: n_rows,
                    });
                }
                out[i * width..(i + 1) * width].copy_from_slice(&data[r * width..(r + 1) * width]);
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), width], out)?,
            Op::Lookup {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup; `padding` (if given) maps to the zero vector.
    pub fn embedding_lookup(
        &mut self,
        table: Var,
        ids: &[usize],
        padding: Option<usize>,
    ) -> Result<Var, AutodiffError> {
        let rows: Vec<Option<usize>> = ids
            .iter()
            .map(|&i| if Some(i) == padding { None } else { Some(i) })
            .collect();
        self.gather_rows(table, &rows)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        softmax_rows(&mut out, cols);
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(shape_err(OpKind::Concat, &[])),
        };
        let ok = axis < first.len()
            && inputs.iter().all(|&v| {
                let s = self.shape(v);
                s.len() == first.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i])
            });
        if !ok {
            let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
            return Err(shape_err(OpKind::Concat, &shapes));
        }
        let outer: usize = first[..axis].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, axis_a: usize, axis_b: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(a);
        if axis_a >= s.len() || axis_b >= s.len() {
            return Err(shape_err(OpKind::Transpose, &[s, &[axis_a, axis_b]]));
        }
        let (out, shape) = transpose_data(self.value(a).data(), s, axis_a, axis_b);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Transpose {
                input: a,
                axes: (axis_a, axis_b),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self
            .value(a)
            .clone()
            .reshaped(shape.to_vec())
            .map_err(|_| shape_err(OpKind::Reshape, &[self.shape(a), shape]))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Row-wise cosine similarity over the last axis. Rows where either
    /// norm is below [`COSINE_NORM_FLOOR`] yield 0 with zero gradient.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(OpKind::CosineSimilarity, &[sa, sb]));
        }
        let out_shape = if sa.len() == 1 {
            vec![1]
        } else {
            sa[..sa.len() - 1].to_vec()
        };
        let out: Vec<f64> = self
            .value(a)
            .rows()
            .zip(self.value(b).rows())
            .map(|(x, y)| cosine_parts(x, y).map_or(0.0, |p| p.0))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Cosine(a, b), rg))
    }

    /// Mean softmax cross-entropy of `logits` (`[n, classes]`) against
    /// integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(OpKind::CrossEntropy, &[s, &[labels.len()]]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::Index {
                op: OpKind::CrossEntropy.name(),
                index: bad,
                len: classes,
            });
        }
        let (loss, _, _) = cross_entropy_forward(self.value(logits).data(), classes, labels);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes[..=root.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, vb.data(), true, ga, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm(k, m, n, va.data(), true, g, false, gb, 1.0);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, n, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let m = vb.shape()[2];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..batch {
                        gemm(
                            n,
                            m,
                            k,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &vb.data()[i * k * m..(i + 1) * k * m],
                            true,
                            &mut ga[i * n * k..(i + 1) * n * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..batch {
                        gemm(
                            k,
                            n,
                            m,
                            &va.data()[i * n * k..(i + 1) * n * k],
                            true,
                            &g[i * n * m..(i + 1) * n * m],
                            false,
                            &mut gb[i * k * m..(i + 1) * k * m],
                            1.0,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let width = gb.len();
                    for row in g.chunks(width) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Lookup { table, rows } => {
                let width = self.shape(*table)[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let src = &g[i * width..(i + 1) * width];
                            gt[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = *y.shape().last().unwrap();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((gr, yr), out) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Relu(a) => {
                let xs = self.value(*a).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xs) {
                        if *xi > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let xs = self.value(*a).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((x, gi), xi) in ga.iter_mut().zip(g).zip(xs) {
                        if *xi > 0.0 {
                            *x += gi;
                        } else if *xi < 0.0 {
                            *x -= gi;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let chunks: Vec<usize> = inputs.iter().map(|&v| self.value(v).len() / outer).collect();
                let row: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &chunk) in inputs.iter().zip(&chunks) {
                    if let Some(gv) = slot(nodes, grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + start..o * row + start + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    start += chunk;
                }
            }
            Op::Transpose { input, axes } => {
                if let Some(ga) = slot(nodes, grads, *input) {
                    let (back, _) = transpose_data(g, node.value.shape(), axes.0, axes.1);
                    ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let scale = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += scale);
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let width = *va.shape().last().unwrap();
                let parts: Vec<Option<(f64, f64, f64)>> =
                    va.rows().zip(vb.rows()).map(|(x, y)| cosine_parts(x, y)).collect();
                for (target, this, other, self_norm_idx) in [(*a, va, vb, 1usize), (*b, vb, va, 2usize)] {
                    let Some(gt) = slot(nodes, grads, target) else { continue };
                    for (r, p) in parts.iter().enumerate() {
                        let Some(p) = p else { continue };
                        let (cos, na, nb) = *p;
                        let own = if self_norm_idx == 1 { na } else { nb };
                        let x = this.row(r);
                        let y = other.row(r);
                        let out = &mut gt[r * width..(r + 1) * width];
                        for j in 0..width {
                            out[j] += g[r] * (y[j] / (na * nb) - cos * x[j] / (own * own));
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let vl = self.value(*logits);
                let classes = vl.shape()[1];
                let (_, probs, clamped) = cross_entropy_forward(vl.data(), classes, labels);
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let scale = g[0] / labels.len() as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        if clamped[r] {
                            continue;
                        }
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node; zero if the root does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self
            .shapes
            .get(v.0)
            .cloned()
            .unwrap_or_else(|| vec![1]);
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every trainable parameter leaf of the graph, in the
    /// order the parameters were first used.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn cosine_of_orthogonal_vectors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        let b = g.constant(t(&[2], &[0.0, 1.0]));
        let c = g.cosine_similarity(a, b).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_operator() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn lookup_out_of_range() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embedding_lookup(table, &[1, 4], Some(0)),
            Err(AutodiffError::Index { index: 4, len: 4, .. })
        ));
    }

    #[test]
    fn padding_row_is_zero_and_gets_no_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = g.embedding_lookup(table, &[0, 2, 0, 1], Some(0)).unwrap();
        assert_eq!(&g.value(e).data()[..2], &[0.0, 0.0]);
        let s = g.reduce_sum(e);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(table).data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.reduce_sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn self_cosine_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[0.3, -1.2, 2.0]));
        let c = g.cosine_similarity(a, a).unwrap();
        assert!((g.value(c).item() - 1.0).abs() < 1e-15);
        let grads = g.backward(c).unwrap();
        assert!(grads.wrt(a).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn transpose_swaps_axes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.transpose(a, 0, 1).unwrap();
        assert_eq!(g.shape(b), &[3, 2]);
        assert_eq!(g.value(b).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_along_inner_axis() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 51]));
        let l = g.cross_entropy(z, &[3, 50]).unwrap();
        assert!((g.value(l).item() - 51f64.ln()).abs() < 1e-12);
    }
}
