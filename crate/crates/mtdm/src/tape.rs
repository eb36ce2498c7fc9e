//! Dense-tensor operations recorded on an append-only tape with exact
//! vector-Jacobian products for reverse-mode differentiation.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf { requires_grad: bool },
    Constant,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Affine(Var, S, S),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, S),
    SoftmaxXent(Var, Rc<Vec<usize>>),
    CosineRows(Var, Var),
    Conv1dRows { x: Var, kernels: Var, bias: Var },
    GatherRows(Var, Rc<Vec<usize>>),
    GatherElems(Var, Rc<Vec<usize>>),
    RelAggregate { ent: Var, rel: Var, adj: Rc<SparseAdjacency> },
    RgcnAggregate { feats: Var, w_all: Var, adj: Rc<SparseAdjacency> },
    Sum(Var),
    Clamp(Var, S, S),
    Log(Var),
    Dropout(Var, Rc<Tensor<S>>),
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Matmul(..) => "matmul",
            Op::MatmulBt(..) => "matmul_bt",
            Op::ConcatCols(..) => "concat_cols",
            Op::StackRows(..) => "stack_rows",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::SoftmaxXent(..) => "softmax_cross_entropy",
            Op::CosineRows(..) => "cosine_rows",
            Op::Conv1dRows { .. } => "conv1d_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::RelAggregate { .. } => "rel_aggregate",
            Op::RgcnAggregate { .. } => "rgcn_aggregate",
            Op::Sum(..) => "sum",
            Op::Clamp(..) => "clamp",
            Op::Log(..) => "log",
            Op::Dropout(..) => "dropout",
        }
    }
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Append-only record of a forward pass. One backward sweep per tape.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Result<Var> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, lhs: &Tensor<S>, rhs: &Tensor<S>) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        }
    }

    // ---- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad;
        self.push(Op::Leaf { requires_grad }, t)
            .expect("leaf values must be finite")
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Constant, t).expect("constants must be finite")
    }

    pub fn scalar_const(&mut self, x: S) -> Var {
        self.constant(Tensor::scalar(x))
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        out.requires_grad = false;
        self.push(Op::Add(a, b), out)
    }

    /// Broadcast a length-d bias over the rows of an (n x d) matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("add_bias", ta, tb));
        }
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut data = ta.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += tb.data()[j];
            }
        }
        self.push(Op::AddBias(a, b), Tensor::new(vec![n, d], data)?)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::new(shape, data)?)
    }

    /// y = m * x + c, elementwise with constants.
    pub fn affine(&mut self, a: Var, m: S, c: S) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| m * x + c).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Affine(a, m, c), Tensor::new(shape, data)?)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        self.affine(a, k, S::zero())
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -S::one(), S::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -S::one(), S::zero())?;
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb, false, false);
        self.push(Op::Matmul(a, b), out)
    }

    /// a (n x k) times b-transposed where b is stored (m x k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Self::shape_err("matmul_bt", ta, tb));
        }
        let out = ta.matmul(tb, false, true);
        self.push(Op::MatmulBt(a, b), out)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Self::shape_err("concat_cols", ta, tb));
        }
        let (n, da, db) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        self.push(Op::ConcatCols(a, b), Tensor::new(vec![n, da + db], data)?)
    }

    /// Stack k matrices of shape (n x d) into an (n x k x d) tensor.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.rank() != 2 || tp.shape() != first.as_slice() {
                return Err(Self::shape_err("stack_rows", &self.nodes[parts[0].0].value, tp));
            }
        }
        let (n, d, k) = (first[0], first[1], parts.len());
        let mut data = vec![S::zero(); n * k * d];
        for (i, &p) in parts.iter().enumerate() {
            let tp = &self.nodes[p.0].value;
            for row in 0..n {
                let dst = (row * k + i) * d;
                data[dst..dst + d].copy_from_slice(tp.row(row));
            }
        }
        self.push(Op::StackRows(parts.to_vec()), Tensor::new(vec![n, k, d], data)?)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Invalid(format!(
                "reshape {:?} -> {:?} changes element count",
                ta.shape(),
                shape
            )));
        }
        let t = Tensor::new(shape, ta.data().to_vec())?;
        self.push(Op::Reshape(a), t)
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data()
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Sigmoid(a), Tensor::new(shape, data)?)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Tanh(a), Tensor::new(shape, data)?)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > S::zero() { x } else { slope * x })
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Op::LeakyRelu(a, slope), Tensor::new(shape, data)?)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, S::zero())
    }

    /// Sum over rows of -log softmax(logits)[gold]. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::Invalid(format!(
                "softmax_cross_entropy: logits {:?} vs {} targets",
                tl.shape(),
                targets.len()
            )));
        }
        let (n, c) = (tl.shape()[0], tl.shape()[1]);
        let mut total = S::zero();
        for i in 0..n {
            if targets[i] >= c {
                return Err(Error::IdOutOfRange {
                    what: "target",
                    id: targets[i],
                    max: c,
                });
            }
            let row = tl.row(i);
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
            total += lse - row[targets[i]];
        }
        self.push(
            Op::SoftmaxXent(logits, Rc::new(targets.to_vec())),
            Tensor::scalar(total),
        )
    }

    /// Row-wise cosine similarity of two (n x d) matrices; a zero-norm row
    /// yields 0 with zero gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.rank() != 2 {
            return Err(Self::shape_err("cosine_rows", ta, tb));
        }
        let n = ta.shape()[0];
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (ta.row(i), tb.row(i));
            let na = ra.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<S>().sqrt();
            if na == S::zero() || nb == S::zero() {
                data.push(S::zero());
            } else {
                let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<S>();
                data.push(dot / (na * nb));
            }
        }
        self.push(Op::CosineRows(a, b), Tensor::new(vec![n], data)?)
    }

    /// 1-D convolution along the feature axis with same padding.
    /// x: (q x r x w), kernels: (c x r x k) with odd k, bias: (c) -> (q x c x w).
    pub fn conv1d_rows(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[kernels.0].value,
            &self.nodes[bias.0].value,
        );
        if tx.rank() != 3 || tk.rank() != 3 || tx.shape()[1] != tk.shape()[1] {
            return Err(Self::shape_err("conv1d_rows", tx, tk));
        }
        let (q, r, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (c, _, k) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("conv1d_rows: kernel width {k} must be odd")));
        }
        if tb.rank() != 1 || tb.shape()[0] != c {
            return Err(Self::shape_err("conv1d_rows", tk, tb));
        }
        let pad = k / 2;
        let mut out = vec![S::zero(); q * c * w];
        for qi in 0..q {
            for ci in 0..c {
                let base = (qi * c + ci) * w;
                for wi in 0..w {
                    let mut acc = tb.data()[ci];
                    for ri in 0..r {
                        let xrow = &tx.data()[(qi * r + ri) * w..(qi * r + ri + 1) * w];
                        let krow = &tk.data()[(ci * r + ri) * k..(ci * r + ri + 1) * k];
                        for ki in 0..k {
                            let src = wi + ki;
                            if src >= pad && src - pad < w {
                                acc += xrow[src - pad] * krow[ki];
                            }
                        }
                    }
                    out[base + wi] = acc;
                }
            }
        }
        self.push(
            Op::Conv1dRows { x, kernels, bias },
            Tensor::new(vec![q, c, w], out)?,
        )
    }

    /// Embedding gather: pick rows of an (n x d) matrix by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(Error::Invalid(format!(
                "gather_rows expects a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (n, d) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IdOutOfRange {
                    what: "row",
                    id: i,
                    max: n,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        self.push(
            Op::GatherRows(a, Rc::new(idx.to_vec())),
            Tensor::new(vec![idx.len(), d], data)?,
        )
    }

    /// out[i] = a[i, cols[i]] for an (n x c) matrix.
    pub fn gather_elems(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 || ta.shape()[0] != cols.len() {
            return Err(Error::Invalid(format!(
                "gather_elems: matrix {:?} vs {} columns",
                ta.shape(),
                cols.len()
            )));
        }
        let c = ta.shape()[1];
        let mut data = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::IdOutOfRange {
                    what: "column",
                    id: j,
                    max: c,
                });
            }
            data.push(ta.at2(i, j));
        }
        self.push(
            Op::GatherElems(a, Rc::new(cols.to_vec())),
            Tensor::new(vec![cols.len()], data)?,
        )
    }

    /// Degree-normalized message mean: out[s] = (1/|N_s|) sum over edges
    /// (r, s, o) of ent[o] + rel[r]; rows without edges stay zero.
    pub fn rel_aggregate(&mut self, ent: Var, rel: Var, adj: &Rc<SparseAdjacency>) -> Result<Var> {
        let (te, tr) = (&self.nodes[ent.0].value, &self.nodes[rel.0].value);
        if te.rank() != 2 || tr.rank() != 2 || te.shape()[1] != tr.shape()[1] {
            return Err(Self::shape_err("rel_aggregate", te, tr));
        }
        if te.shape()[0] != adj.num_entities || tr.shape()[0] != adj.num_relations {
            return Err(Error::Invalid(format!(
                "rel_aggregate: features {:?}/{:?} disagree with adjacency ({} entities, {} relations)",
                te.shape(),
                tr.shape(),
                adj.num_entities,
                adj.num_relations
            )));
        }
        let d = te.shape()[1];
        let mut out = vec![S::zero(); adj.num_entities * d];
        for (r, sj, o) in adj.edges() {
            let norm = s::<S>(adj.in_degree[sj] as f64);
            let (re, rr) = (te.row(o), tr.row(r));
            let dst = &mut out[sj * d..(sj + 1) * d];
            for j in 0..d {
                dst[j] += (re[j] + rr[j]) / norm;
            }
        }
        self.push(
            Op::RelAggregate {
                ent,
                rel,
                adj: Rc::clone(adj),
            },
            Tensor::new(vec![adj.num_entities, d], out)?,
        )
    }

    /// Relation-specific aggregation: out[s] = (1/|N_s|) sum over edges
    /// (r, s, o) of W_r feats[o], with W_r the r-th row of w_all viewed d x d.
    pub fn rgcn_aggregate(&mut self, feats: Var, w_all: Var, adj: &Rc<SparseAdjacency>) -> Result<Var> {
        let (tf, tw) = (&self.nodes[feats.0].value, &self.nodes[w_all.0].value);
        if tf.rank() != 2 || tw.rank() != 2 {
            return Err(Self::shape_err("rgcn_aggregate", tf, tw));
        }
        let d = tf.shape()[1];
        if tw.shape()[1] != d * d || tw.shape()[0] != adj.num_relations || tf.shape()[0] != adj.num_entities {
            return Err(Error::Invalid(format!(
                "rgcn_aggregate: features {:?} / weights {:?} disagree with adjacency ({} entities, {} relations)",
                tf.shape(),
                tw.shape(),
                adj.num_entities,
                adj.num_relations
            )));
        }
        let mut out = vec![S::zero(); adj.num_entities * d];
        for (r, sj, o) in adj.edges() {
            let norm = s::<S>(adj.in_degree[sj] as f64);
            let w = tw.row(r);
            let e = tf.row(o);
            let dst = &mut out[sj * d..(sj + 1) * d];
            for i in 0..d {
                let wrow = &w[i * d..(i + 1) * d];
                let mut acc = S::zero();
                for j in 0..d {
                    acc += wrow[j] * e[j];
                }
                dst[i] += acc / norm;
            }
        }
        self.push(
            Op::RgcnAggregate {
                feats,
                w_all,
                adj: Rc::clone(adj),
            },
            Tensor::new(vec![adj.num_entities, d], out)?,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.data().iter().cloned().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let total = self.sum(a)?;
        self.scale(total, S::one() / s::<S>(n as f64))
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Clamp(a, lo, hi), Tensor::new(shape, data)?)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.ln()).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Log(a), Tensor::new(shape, data)?)
    }

    /// Inverted dropout; `mask` entries are 0 or 1/(1-p). Training only.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let keep = 1.0 - p;
        let mask_data: Vec<S> = (0..ta.numel())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    s::<S>(1.0 / keep)
                } else {
                    S::zero()
                }
            })
            .collect();
        let mask = Tensor::new(ta.shape().to_vec(), mask_data)?;
        let data = ta
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Dropout(a, Rc::new(mask)), Tensor::new(shape, data)?)
    }

    // ---- backward -------------------------------------------------------

    /// Populate gradients for everything reachable from the scalar `loss`.
    /// A second call without a fresh tape is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Invalid(
                "backward already ran on this tape; build a new tape to differentiate again".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Invalid(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].clone() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf { .. } | Op::Constant => {}
                Op::Add(a, b) => {
                    self.acc(a, g.clone());
                    self.acc(b, g);
                }
                Op::AddBias(a, b) => {
                    let (n, d) = (g.shape()[0], g.shape()[1]);
                    let mut gb = Tensor::zeros(vec![d]);
                    for i in 0..n {
                        for j in 0..d {
                            gb.data_mut()[j] += g.at2(i, j);
                        }
                    }
                    self.acc(a, g);
                    self.acc(b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = self.ew_mul(&g, &self.nodes[b.0].value.clone());
                    let gb = self.ew_mul(&g, &self.nodes[a.0].value.clone());
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::Affine(a, m, _) => {
                    let mut ga = g;
                    ga.scale_assign(m);
                    self.acc(a, ga);
                }
                Op::Matmul(a, b) => {
                    let ga = g.matmul(&self.nodes[b.0].value, false, true);
                    let gb = self.nodes[a.0].value.matmul(&g, true, false);
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::MatmulBt(a, b) => {
                    // y = a b^T : ga = g b, gb = g^T a
                    let ga = g.matmul(&self.nodes[b.0].value, false, false);
                    let gb = g.matmul(&self.nodes[a.0].value, true, false);
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::ConcatCols(a, b) => {
                    let da = self.nodes[a.0].value.shape()[1];
                    let db = self.nodes[b.0].value.shape()[1];
                    let n = g.shape()[0];
                    let mut ga = Tensor::zeros(vec![n, da]);
                    let mut gb = Tensor::zeros(vec![n, db]);
                    for i in 0..n {
                        let row = g.row(i);
                        ga.data_mut()[i * da..(i + 1) * da].copy_from_slice(&row[..da]);
                        gb.data_mut()[i * db..(i + 1) * db].copy_from_slice(&row[da..]);
                    }
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::StackRows(parts) => {
                    let (n, k, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    for (i, &p) in parts.iter().enumerate() {
                        let mut gp = Tensor::zeros(vec![n, d]);
                        for row in 0..n {
                            let src = (row * k + i) * d;
                            gp.data_mut()[row * d..(row + 1) * d]
                                .copy_from_slice(&g.data()[src..src + d]);
                        }
                        self.acc(p, gp);
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let ga = Tensor::new(shape, g.data().to_vec())?;
                    self.acc(a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[id].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * yi * (S::one() - yi))
                        .collect();
                    self.acc(a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Tanh(a) => {
                    let y = self.nodes[id].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| gi * (S::one() - yi * yi))
                        .collect();
                    self.acc(a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.nodes[a.0].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| if xi > S::zero() { gi } else { gi * slope })
                        .collect();
                    self.acc(a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::SoftmaxXent(a, targets) => {
                    let logits = self.nodes[a.0].value.clone();
                    let (n, c) = (logits.shape()[0], logits.shape()[1]);
                    let gs = g.item();
                    let mut ga = Tensor::zeros(vec![n, c]);
                    for i in 0..n {
                        let row = logits.row(i);
                        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let denom: S = row.iter().map(|&x| (x - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / denom;
                            let onehot = if j == targets[i] { S::one() } else { S::zero() };
                            ga.data_mut()[i * c + j] = gs * (p - onehot);
                        }
                    }
                    self.acc(a, ga);
                }
                Op::CosineRows(a, b) => {
                    let (ta, tb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let (n, d) = (ta.shape()[0], ta.shape()[1]);
                    let mut ga = Tensor::zeros(vec![n, d]);
                    let mut gb = Tensor::zeros(vec![n, d]);
                    for i in 0..n {
                        let (ra, rb) = (ta.row(i), tb.row(i));
                        let na = ra.iter().map(|&x| x * x).sum::<S>().sqrt();
                        let nb = rb.iter().map(|&x| x * x).sum::<S>().sqrt();
                        if na == S::zero() || nb == S::zero() {
                            continue;
                        }
                        let dot = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum::<S>();
                        let cosv = dot / (na * nb);
                        let gi = g.data()[i];
                        for j in 0..d {
                            ga.data_mut()[i * d + j] =
                                gi * (rb[j] / (na * nb) - cosv * ra[j] / (na * na));
                            gb.data_mut()[i * d + j] =
                                gi * (ra[j] / (na * nb) - cosv * rb[j] / (nb * nb));
                        }
                    }
                    self.acc(a, ga);
                    self.acc(b, gb);
                }
                Op::Conv1dRows { x, kernels, bias } => {
                    let tx = self.nodes[x.0].value.clone();
                    let tk = self.nodes[kernels.0].value.clone();
                    let (q, r, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (c, _, k) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
                    let pad = k / 2;
                    let mut gx = Tensor::zeros(vec![q, r, w]);
                    let mut gk = Tensor::zeros(vec![c, r, k]);
                    let mut gb = Tensor::zeros(vec![c]);
                    for qi in 0..q {
                        for ci in 0..c {
                            let gout = &g.data()[(qi * c + ci) * w..(qi * c + ci + 1) * w];
                            gb.data_mut()[ci] += gout.iter().cloned().sum::<S>();
                            for ri in 0..r {
                                let xoff = (qi * r + ri) * w;
                                let koff = (ci * r + ri) * k;
                                for wi in 0..w {
                                    let go = gout[wi];
                                    if go == S::zero() {
                                        continue;
                                    }
                                    for ki in 0..k {
                                        let src = wi + ki;
                                        if src >= pad && src - pad < w {
                                            gx.data_mut()[xoff + src - pad] +=
                                                go * tk.data()[koff + ki];
                                            gk.data_mut()[koff + ki] +=
                                                go * tx.data()[xoff + src - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(x, gx);
                    self.acc(kernels, gk);
                    self.acc(bias, gb);
                }
                Op::GatherRows(a, idx) => {
                    let (n, d) = (
                        self.nodes[a.0].value.shape()[0],
                        self.nodes[a.0].value.shape()[1],
                    );
                    let mut ga = Tensor::zeros(vec![n, d]);
                    for (i, &row) in idx.iter().enumerate() {
                        let src = g.row(i);
                        let dst = &mut ga.data_mut()[row * d..(row + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                    self.acc(a, ga);
                }
                Op::GatherElems(a, cols) => {
                    let (n, c) = (
                        self.nodes[a.0].value.shape()[0],
                        self.nodes[a.0].value.shape()[1],
                    );
                    let mut ga = Tensor::zeros(vec![n, c]);
                    for (i, &j) in cols.iter().enumerate() {
                        ga.data_mut()[i * c + j] += g.data()[i];
                    }
                    self.acc(a, ga);
                }
                Op::RelAggregate { ent, rel, adj } => {
                    let d = g.shape()[1];
                    let mut ge = Tensor::zeros(self.nodes[ent.0].value.shape().to_vec());
                    let mut gr = Tensor::zeros(self.nodes[rel.0].value.shape().to_vec());
                    for (r, sj, o) in adj.edges() {
                        let norm = s::<S>(adj.in_degree[sj] as f64);
                        let gsrow = g.row(sj);
                        for j in 0..d {
                            let v = gsrow[j] / norm;
                            ge.data_mut()[o * d + j] += v;
                            gr.data_mut()[r * d + j] += v;
                        }
                    }
                    self.acc(ent, ge);
                    self.acc(rel, gr);
                }
                Op::RgcnAggregate { feats, w_all, adj } => {
                    let tf = self.nodes[feats.0].value.clone();
                    let tw = self.nodes[w_all.0].value.clone();
                    let d = tf.shape()[1];
                    let mut gf = Tensor::zeros(tf.shape().to_vec());
                    let mut gw = Tensor::zeros(tw.shape().to_vec());
                    for (r, sj, o) in adj.edges() {
                        let norm = s::<S>(adj.in_degree[sj] as f64);
                        let gsrow = g.row(sj);
                        let w = tw.row(r);
                        let e = tf.row(o);
                        for i in 0..d {
                            let gi = gsrow[i] / norm;
                            if gi == S::zero() {
                                continue;
                            }
                            let wrow = &w[i * d..(i + 1) * d];
                            let gwrow = &mut gw.data_mut()[r * d * d + i * d..r * d * d + (i + 1) * d];
                            for j in 0..d {
                                gwrow[j] += gi * e[j];
                            }
                            let gfrow = &mut gf.data_mut()[o * d..(o + 1) * d];
                            for j in 0..d {
                                gfrow[j] += gi * wrow[j];
                            }
                        }
                    }
                    self.acc(feats, gf);
                    self.acc(w_all, gw);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let ga = Tensor::full(shape, g.item());
                    self.acc(a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[a.0].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { S::zero() })
                        .collect();
                    self.acc(a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Log(a) => {
                    let x = self.nodes[a.0].value.clone();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| gi / xi)
                        .collect();
                    self.acc(a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Dropout(a, mask) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&gi, &mi)| gi * mi)
                        .collect();
                    self.acc(a, Tensor::new(g.shape().to_vec(), data)?);
                }
            }
        }
        Ok(())
    }

    fn ew_mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    }

    fn acc(&mut self, v: Var, delta: Tensor<S>) {
        if matches!(self.nodes[v.0].op, Op::Leaf { requires_grad: false }) {
            return;
        }
        match &mut self.grads[v.0] {
            slot @ None => *slot = Some(delta),
            Some(t) => t.add_assign(&delta),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros when the node is unreachable from the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<S> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }
}
