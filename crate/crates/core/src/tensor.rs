//! Dense row-major f64 matrices and a small reverse-mode autodiff tape.
//!
//! Everything trainable in the model is built from the ops in [`Graph`].
//! Each op records its inputs and whatever it needs for its backward pass;
//! [`Graph::backward`] walks the tape in reverse insertion order, which is a
//! valid topological order because inputs always precede their consumers.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        gemm(self, false, other, true, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        gemm(self, true, other, false, &mut out);
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Tensor {
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Tensor::new(range.len(), self.cols, data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::new(rows, cols, data)
    }
}

/// `out = op(a) · op(b)`, where a transpose is expressed through strides.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, out: &mut Tensor) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe in-bounds views of the row-major buffers
    // and `out` is exactly m×n and does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A strided window into a row-major buffer.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    /// Rows `r0..`, columns `c0..` of a buffer with `width` columns.
    fn at(r0: usize, c0: usize, width: usize) -> Self {
        View { offset: r0 * width + c0, rs: width, cs: 1 }
    }

    fn t(self) -> Self {
        View { offset: self.offset, rs: self.cs, cs: self.rs }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[cv] = alpha · a[av] · b[bv] + beta · c[cv]` over an m×k by k×n window.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len() && cv.last(m, n) < c.len());
    // SAFETY: every addressed element is in bounds (checked above) and `c`
    // is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Order of insertion is the canonical order for
/// checksums, serialization and optimizer state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checksum restricted to parameters whose name starts with `prefix`.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: (usize, usize), b: (usize, usize)) -> Bcast {
    if a == b {
        Bcast::Same
    } else if b == (1, 1) {
        Bcast::Scalar
    } else if b.0 == 1 && b.1 == a.1 {
        Bcast::Row
    } else if b.1 == 1 && b.0 == a.0 {
        Bcast::Col
    } else {
        panic!("incompatible broadcast shapes {a:?} and {b:?}");
    }
}

#[inline]
fn bcast_index(kind: Bcast, r: usize, c: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => r * cols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

/// One attention segment: query rows attend to key/value rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    /// Row-major queries×keys table of allowed pairs; `None` allows all.
    /// Every query needs at least one allowed key.
    pub mask: Option<Arc<Vec<bool>>>,
}

impl AttnSegment {
    pub fn new(queries: Range<usize>, keys: Range<usize>) -> Self {
        Self { queries, keys, mask: None }
    }

    pub fn masked(mut self, mask: Arc<Vec<bool>>) -> Self {
        assert_eq!(mask.len(), self.queries.len() * self.keys.len(), "attention mask shape");
        self.mask = Some(mask);
        self
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    MinMaxRows { x: Var, eps: f64, argmin: Vec<usize>, argmax: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape. Build a fresh graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape if nothing reached it.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = graph.value(v).shape();
            Tensor::zeros(r, c)
        })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; the same parameter maps to the same
    /// node for the lifetime of the graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = bcast_kind(ta.shape(), tb.shape());
        let (rows, cols) = ta.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(f(ta.data[r * cols + c], tb.data[bcast_index(kind, r, c, cols)]));
            }
        }
        Tensor::new(rows, cols, out)
    }

    /// Elementwise ops below broadcast `b` when it is 1×1, 1×cols or rows×1.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: rows×cols → 1×cols.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Sum over columns: rows×cols → rows×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::column_vector(out), Op::SumCols(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape element count mismatch");
        let out = Tensor::new(rows, cols, t.data.clone());
        self.push(out, Op::Reshape(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x, inv_std })
    }

    /// Scales every row to unit L2 norm. All-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = out.row_mut(r);
            let n = l2_norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// Per-row `(v − min) / (max − min + eps)`.
    pub fn min_max_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut argmin = Vec::with_capacity(t.rows);
        let mut argmax = Vec::with_capacity(t.rows);
        for r in 0..t.rows {
            let row = out.row_mut(r);
            let (imin, imax) = arg_min_max(row);
            let (mn, mx) = (row[imin], row[imax]);
            let d = mx - mn + eps;
            row.iter_mut().for_each(|v| *v = (*v - mn) / d);
            argmin.push(imin);
            argmax.push(imax);
        }
        self.push(out, Op::MinMaxRows { x, eps, argmin, argmax })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Var {
        let out = self.value(a).slice_rows(range.clone());
        self.push(out, Op::SliceRows(a, range.start))
    }

    /// Multi-head scaled dot-product attention restricted to segments. Every
    /// query row must belong to exactly one segment; a query row attends only
    /// to the key rows of its own segment. Heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
    ) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let m = tq.cols;
        assert_eq!(tk.cols, m, "attention query/key width mismatch");
        assert_eq!(tv.cols, m, "attention value width mismatch");
        assert_eq!(tk.rows, tv.rows, "attention key/value rows mismatch");
        assert!(heads > 0 && m % heads == 0, "width not divisible by heads");
        let dh = m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.rows, m);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            assert!(!seg.keys.is_empty(), "attention segment without keys");
            let (nq, nk) = (seg.queries.len(), seg.keys.len());
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Tensor::zeros(nq, nk);
                let qv = View::at(seg.queries.start, c0, m);
                let kv = View::at(seg.keys.start, c0, m);
                gemm_view((nq, dh, nk), scale, &tq.data, qv, &tk.data, kv.t(), 0.0, &mut p.data, View::at(0, 0, nk));
                if let Some(mask) = &seg.mask {
                    for (v, &ok) in p.data.iter_mut().zip(mask.iter()) {
                        if !ok {
                            *v = f64::NEG_INFINITY;
                        }
                    }
                }
                for r in 0..nq {
                    softmax_in_place(p.row_mut(r));
                }
                gemm_view((nq, nk, dh), 1.0, &p.data, View::at(0, 0, nk), &tv.data, kv, 1.0, &mut out.data, qv);
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
        )
    }

    /// Reverse pass from a 1×1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.matmul(self.value(*b));
                let db = g.t_matmul(self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accumulate(grads, *a, g.clone());
                let db = self.reduce_bcast(g, *a, *b, |gv, _, _| sign * gv);
                accumulate(grads, *b, db);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = bcast_kind(ta.shape(), tb.shape());
                let cols = ta.cols;
                let mut da = g.clone();
                for r in 0..ta.rows {
                    for c in 0..cols {
                        da.data[r * cols + c] *= tb.data[bcast_index(kind, r, c, cols)];
                    }
                }
                let db = self.reduce_bcast(g, *a, *b, |gv, av, _| gv * av);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = bcast_kind(ta.shape(), tb.shape());
                let cols = ta.cols;
                let mut da = g.clone();
                for r in 0..ta.rows {
                    for c in 0..cols {
                        da.data[r * cols + c] /= tb.data[bcast_index(kind, r, c, cols)];
                    }
                }
                let db = self.reduce_bcast(g, *a, *b, |gv, av, bv| -gv * av / (bv * bv));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::new(r, c, g.data.clone()));
            }
            Op::Exp(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv)),
            Op::Ln(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gv, xv| gv / xv)),
            Op::Sqrt(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * 0.5 / yv)),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                zip_map(g, self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Gelu(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |gv, xv| gv * gelu(xv).1))
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for row in 0..r {
                    da.row_mut(row).copy_from_slice(&g.data);
                }
                accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut da = Tensor::zeros(r, c);
                for row in 0..r {
                    da.row_mut(row).iter_mut().for_each(|v| *v = g.data[row]);
                }
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let mut da = g.clone();
                for r in 0..y.rows {
                    let s = dot(g.row(r), y.row(r));
                    for (d, (&gv, &yv)) in da.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *d = yv * (gv - s);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = g.clone();
                for r in 0..y.rows {
                    let s: f64 = g.row(r).iter().sum();
                    for (d, (&gv, &yv)) in da.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *d = gv - yv.exp() * s;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNormRows { x, inv_std } => {
                let mut dx = g.clone();
                for r in 0..y.rows {
                    let n = y.cols as f64;
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = dot(gr, yr) / n;
                    for (d, (&gv, &yv)) in dx.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *d = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let mut dx = g.clone();
                for r in 0..y.rows {
                    if norms[r] == 0.0 {
                        dx.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let s = dot(g.row(r), y.row(r));
                    let yr = y.row(r).to_vec();
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d = (*d - yv * s) / norms[r];
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MinMaxRows {
                x,
                eps,
                argmin,
                argmax,
            } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows, tx.cols);
                for r in 0..tx.rows {
                    let xr = tx.row(r);
                    let (imin, imax) = (argmin[r], argmax[r]);
                    let mn = xr[imin];
                    let d = xr[imax] - mn + eps;
                    let gr = g.row(r);
                    let mut dmin = 0.0;
                    let mut dmax = 0.0;
                    let row = dx.row_mut(r);
                    for j in 0..xr.len() {
                        row[j] += gr[j] / d;
                        let u = (xr[j] - mn) / (d * d);
                        dmin += gr[j] * (-1.0 / d + u);
                        dmax -= gr[j] * u;
                    }
                    row[imin] += dmin;
                    row[imax] += dmax;
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    accumulate(grads, p, g.slice_rows(off..off + rows));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    let mut dp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    accumulate(grads, p, dp);
                    off += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut da = Tensor::zeros(rows, cols);
                da.data[start * cols..start * cols + g.len()].copy_from_slice(&g.data);
                accumulate(grads, *a, da);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let m = tq.cols;
                let dh = m / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(tq.rows, m);
                let mut dk = Tensor::zeros(tk.rows, m);
                let mut dv = Tensor::zeros(tv.rows, m);
                let mut pi = 0;
                for seg in segments {
                    let (nq, nk) = (seg.queries.len(), seg.keys.len());
                    let pv = View::at(0, 0, nk);
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let qv = View::at(seg.queries.start, c0, m);
                        let kv = View::at(seg.keys.start, c0, m);
                        // dP = dO · Vᵀ, then softmax backward into dS.
                        let mut ds = Tensor::zeros(nq, nk);
                        gemm_view((nq, dh, nk), 1.0, &g.data, qv, &tv.data, kv.t(), 0.0, &mut ds.data, pv);
                        for r in 0..nq {
                            let prow = p.row(r);
                            let drow = ds.row_mut(r);
                            let s: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for (d, &w) in drow.iter_mut().zip(prow) {
                                *d = w * (*d - s) * scale;
                            }
                        }
                        gemm_view((nq, nk, dh), 1.0, &ds.data, pv, &tk.data, kv, 1.0, &mut dq.data, qv);
                        gemm_view((nk, nq, dh), 1.0, &ds.data, pv.t(), &tq.data, qv, 1.0, &mut dk.data, kv);
                        gemm_view((nk, nq, dh), 1.0, &p.data, pv.t(), &g.data, qv, 1.0, &mut dv.data, kv);
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
        }
    }

    fn reduce_bcast(
        &self,
        g: &Tensor,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = bcast_kind(ta.shape(), tb.shape());
        let cols = ta.cols;
        let mut db = Tensor::zeros(tb.rows, tb.cols);
        for r in 0..ta.rows {
            for c in 0..cols {
                let bi = bcast_index(kind, r, c, cols);
                db.data[bi] += f(g.data[r * cols + c], ta.data[r * cols + c], tb.data[bi]);
            }
        }
        db
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Returns `(gelu(x), gelu'(x))`.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, grad)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// First index of the minimum and of the maximum.
pub fn arg_min_max(v: &[f64]) -> (usize, usize) {
    let mut imin = 0;
    let mut imax = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[imin] {
            imin = i;
        }
        if x > v[imax] {
            imax = i;
        }
    }
    (imin, imax)
}
