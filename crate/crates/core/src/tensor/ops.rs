//! Op records and their forward/backward implementations.
//!
//! Each constructor validates shapes, computes the forward value, and emits
//! one `Op` record. `backward_op` replays a record in reverse, accumulating
//! into the gradient buffers of inputs that require grad and skipping the
//! rest, so frozen inputs cost nothing in the reverse pass.

use super::linalg::{axpy, dot, mm_nn, mm_nt, mm_tn, norm};
use super::{acc_grad, Shape, Tape, Tensor};
use crate::error::{Error, Result};

/// Norm guard below which similarity ops refuse to divide.
pub const COSINE_EPS: f64 = 1e-12;

pub(crate) enum Op {
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    Matmul { a: usize, b: usize, out: usize },
    MatmulNt { a: usize, b: usize, out: usize },
    MatVec { a: usize, v: usize, out: usize },
    GatherRows { table: usize, ids: Vec<usize>, out: usize },
    SliceRows { a: usize, start: usize, out: usize },
    SliceCols { a: usize, start: usize, out: usize },
    ConcatRows { parts: Vec<usize>, out: usize },
    ConcatCols { parts: Vec<usize>, out: usize },
    SelectRow { a: usize, row: usize, out: usize },
    AddRowVec { a: usize, v: usize, out: usize },
    MeanRows { a: usize, out: usize },
    StackRows { parts: Vec<usize>, out: usize },
    StackScalars { parts: Vec<usize>, out: usize },
    GatherElems { v: usize, idx: Vec<usize>, out: usize },
    Pick { v: usize, index: usize, out: usize },
    Sum { a: usize, out: usize },
    Mean { a: usize, out: usize },
    Ln { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    Softmax { x: usize, temperature: f64, out: usize },
    LogSoftmax { x: usize, out: usize },
    SoftmaxRows { a: usize, temperature: f64, out: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64, out: usize },
    Cosine { u: usize, v: usize, out: usize },
    WeightedSum { w: usize, parts: Vec<usize>, out: usize },
    Nll { logp: usize, target: usize, out: usize },
}

/// exp(x_i / temperature), max-subtracted, normalised to sum 1.
fn softmax_slice(out: &mut [f64], x: &[f64], temperature: f64) {
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        let z = v / temperature;
        if z > hi {
            hi = z;
        }
    }
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v / temperature - hi).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    fn next_id(&self) -> usize {
        self.slot_count()
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_requires_grad(&[a.id, b.id]);
        let out = self.next_id();
        self.emit("add", Op::Add { a: a.id, b: b.id, out }, data, sa, rg)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa} vs {sb}")));
        }
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.any_requires_grad(&[a.id, b.id]);
        let out = self.next_id();
        self.emit("mul", Op::Mul { a: a.id, b: b.id, out }, data, sa, rg)
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::non_finite("scale"));
        }
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let (shape, rg) = (self.shape(a), self.requires_grad(a));
        let out = self.next_id();
        self.emit("scale", Op::Scale { a: a.id, c, out }, data, shape, rg)
    }

    /// C[m,n] = A[m,k] * B[k,n]
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Shape::Matrix(m, k), Shape::Matrix(k2, n)) = (sa, sb) else {
            return Err(Error::shape("matmul", format!("expected matrices, got {sa} and {sb}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa} vs {sb}")));
        }
        let mut data = vec![0.0; m * n];
        mm_nn(&mut data, self.value(a), self.value(b), m, k, n);
        let rg = self.any_requires_grad(&[a.id, b.id]);
        let out = self.next_id();
        self.emit("matmul", Op::Matmul { a: a.id, b: b.id, out }, data, Shape::Matrix(m, n), rg)
    }

    /// C[m,n] = A[m,k] * B[n,k]^T
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (Shape::Matrix(m, k), Shape::Matrix(n, k2)) = (sa, sb) else {
            return Err(Error::shape("matmul_nt", format!("expected matrices, got {sa} and {sb}")));
        };
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("inner dims differ: {sa} vs {sb}")));
        }
        let mut data = vec![0.0; m * n];
        mm_nt(&mut data, self.value(a), self.value(b), m, k, n);
        let rg = self.any_requires_grad(&[a.id, b.id]);
        let out = self.next_id();
        self.emit("matmul_nt", Op::MatmulNt { a: a.id, b: b.id, out }, data, Shape::Matrix(m, n), rg)
    }

    /// y[m] = A[m,k] * v[k]
    pub fn matvec(&mut self, a: Tensor, v: Tensor) -> Result<Tensor> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        let (Shape::Matrix(m, k), Shape::Vector(k2)) = (sa, sv) else {
            return Err(Error::shape("matvec", format!("expected matrix and vector, got {sa} and {sv}")));
        };
        if k != k2 {
            return Err(Error::shape("matvec", format!("inner dims differ: {sa} vs {sv}")));
        }
        let av = self.value(a);
        let vv = self.value(v);
        let data: Vec<f64> = (0..m).map(|i| dot(&av[i * k..(i + 1) * k], vv)).collect();
        let rg = self.any_requires_grad(&[a.id, v.id]);
        let out = self.next_id();
        self.emit("matvec", Op::MatVec { a: a.id, v: v.id, out }, data, Shape::Vector(m), rg)
    }

    /// Rows `ids` of `table`, in order. Duplicate ids are allowed; their
    /// gradients accumulate into the same table row.
    pub fn gather_rows(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let st = self.shape(table);
        let Shape::Matrix(v, d) = st else {
            return Err(Error::shape("gather_rows", format!("expected matrix table, got {st}")));
        };
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather_rows", format!("row id {bad} out of range 0..{v}")));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        let out = self.next_id();
        self.emit(
            "gather_rows",
            Op::GatherRows { table: table.id, ids: ids.to_vec(), out },
            data,
            Shape::Matrix(ids.len(), d),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let sa = self.shape(a);
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("slice_rows", format!("expected matrix, got {sa}")));
        };
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} out of {sa}", start + len)));
        }
        let data = self.value(a)[start * n..(start + len) * n].to_vec();
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("slice_rows", Op::SliceRows { a: a.id, start, out }, data, Shape::Matrix(len, n), rg)
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let sa = self.shape(a);
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("slice_cols", format!("expected matrix, got {sa}")));
        };
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} out of {sa}", start + len)));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("slice_cols", Op::SliceCols { a: a.id, start, out }, data, Shape::Matrix(m, len), rg)
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts"));
        }
        let mut cols = None;
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            let Shape::Matrix(r, c) = sp else {
                return Err(Error::shape("concat_rows", format!("expected matrix part, got {sp}")));
            };
            if *cols.get_or_insert(c) != c {
                return Err(Error::shape("concat_rows", format!("column mismatch: {c} vs {}", cols.unwrap())));
            }
            rows += r;
        }
        let cols = cols.unwrap();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.any_requires_grad(&ids);
        let out = self.next_id();
        self.emit("concat_rows", Op::ConcatRows { parts: ids, out }, data, Shape::Matrix(rows, cols), rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let mut rows = None;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            let Shape::Matrix(r, c) = sp else {
                return Err(Error::shape("concat_cols", format!("expected matrix part, got {sp}")));
            };
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", format!("row mismatch: {r} vs {}", rows.unwrap())));
            }
            cols += c;
        }
        let rows = rows.unwrap();
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let Shape::Matrix(_, c) = self.shape(p) else { unreachable!() };
            let pv = self.value(p);
            for r in 0..rows {
                data[r * cols + off..r * cols + off + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.any_requires_grad(&ids);
        let out = self.next_id();
        self.emit("concat_cols", Op::ConcatCols { parts: ids, out }, data, Shape::Matrix(rows, cols), rg)
    }

    pub fn select_row(&mut self, a: Tensor, row: usize) -> Result<Tensor> {
        let sa = self.shape(a);
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("select_row", format!("expected matrix, got {sa}")));
        };
        if row >= m {
            return Err(Error::shape("select_row", format!("row {row} out of {sa}")));
        }
        let data = self.value(a)[row * n..(row + 1) * n].to_vec();
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("select_row", Op::SelectRow { a: a.id, row, out }, data, Shape::Vector(n), rg)
    }

    /// Adds `v` to every row of `a`.
    pub fn add_row_vec(&mut self, a: Tensor, v: Tensor) -> Result<Tensor> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        let (Shape::Matrix(m, n), Shape::Vector(n2)) = (sa, sv) else {
            return Err(Error::shape("add_row_vec", format!("expected matrix and vector, got {sa} and {sv}")));
        };
        if n != n2 {
            return Err(Error::shape("add_row_vec", format!("width mismatch: {sa} vs {sv}")));
        }
        let vv = self.value(v);
        let av = self.value(a);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(av[r * n + c] + vv[c]);
            }
        }
        let rg = self.any_requires_grad(&[a.id, v.id]);
        let out = self.next_id();
        self.emit("add_row_vec", Op::AddRowVec { a: a.id, v: v.id, out }, data, sa, rg)
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let sa = self.shape(a);
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("mean_rows", format!("expected matrix, got {sa}")));
        };
        let av = self.value(a);
        let mut data = vec![0.0; n];
        for r in 0..m {
            axpy(&mut data, 1.0, &av[r * n..(r + 1) * n]);
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("mean_rows", Op::MeanRows { a: a.id, out }, data, Shape::Vector(n), rg)
    }

    /// Stacks equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("stack_rows", "no parts"));
        }
        let mut width = None;
        for &p in parts {
            let sp = self.shape(p);
            let Shape::Vector(n) = sp else {
                return Err(Error::shape("stack_rows", format!("expected vector part, got {sp}")));
            };
            if *width.get_or_insert(n) != n {
                return Err(Error::shape("stack_rows", format!("length mismatch: {n} vs {}", width.unwrap())));
            }
        }
        let n = width.unwrap();
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.any_requires_grad(&ids);
        let out = self.next_id();
        self.emit("stack_rows", Op::StackRows { parts: ids, out }, data, Shape::Matrix(parts.len(), n), rg)
    }

    /// Collects scalars into a vector.
    pub fn stack_scalars(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("stack_scalars", "no parts"));
        }
        for &p in parts {
            if self.shape(p) != Shape::Scalar {
                return Err(Error::shape("stack_scalars", format!("expected scalar part, got {}", self.shape(p))));
            }
        }
        let data: Vec<f64> = parts.iter().map(|&p| self.value(p)[0]).collect();
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.any_requires_grad(&ids);
        let out = self.next_id();
        self.emit("stack_scalars", Op::StackScalars { parts: ids, out }, data, Shape::Vector(parts.len()), rg)
    }

    /// Elements `idx` of a vector, in order; duplicates accumulate gradient.
    pub fn gather_elems(&mut self, v: Tensor, idx: &[usize]) -> Result<Tensor> {
        let sv = self.shape(v);
        let Shape::Vector(n) = sv else {
            return Err(Error::shape("gather_elems", format!("expected vector, got {sv}")));
        };
        if idx.is_empty() {
            return Err(Error::shape("gather_elems", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_elems", format!("index {bad} out of range 0..{n}")));
        }
        let vv = self.value(v);
        let data: Vec<f64> = idx.iter().map(|&i| vv[i]).collect();
        let rg = self.requires_grad(v);
        let out = self.next_id();
        self.emit("gather_elems", Op::GatherElems { v: v.id, idx: idx.to_vec(), out }, data, Shape::Vector(idx.len()), rg)
    }

    pub fn pick(&mut self, v: Tensor, index: usize) -> Result<Tensor> {
        let sv = self.shape(v);
        let Shape::Vector(n) = sv else {
            return Err(Error::shape("pick", format!("expected vector, got {sv}")));
        };
        if index >= n {
            return Err(Error::shape("pick", format!("index {index} out of range 0..{n}")));
        }
        let data = vec![self.value(v)[index]];
        let rg = self.requires_grad(v);
        let out = self.next_id();
        self.emit("pick", Op::Pick { v: v.id, index, out }, data, Shape::Scalar, rg)
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let data = vec![self.value(a).iter().sum()];
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("sum", Op::Sum { a: a.id, out }, data, Shape::Scalar, rg)
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let data = vec![self.value(a).iter().sum::<f64>() / n as f64];
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("mean", Op::Mean { a: a.id, out }, data, Shape::Scalar, rg)
    }

    /// Elementwise natural log. Non-positive inputs produce NaN, which the
    /// finiteness check turns into a numeric error.
    pub fn ln(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        let (shape, rg) = (self.shape(a), self.requires_grad(a));
        let out = self.next_id();
        self.emit("ln", Op::Ln { a: a.id, out }, data, shape, rg)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let (shape, rg) = (self.shape(a), self.requires_grad(a));
        let out = self.next_id();
        self.emit("tanh", Op::Tanh { a: a.id, out }, data, shape, rg)
    }

    /// softmax(x / temperature) over a vector, computed with max
    /// subtraction. `temperature` must be positive and finite.
    pub fn softmax(&mut self, x: Tensor, temperature: f64) -> Result<Tensor> {
        let sx = self.shape(x);
        let Shape::Vector(n) = sx else {
            return Err(Error::shape("softmax", format!("expected vector, got {sx}")));
        };
        if n == 0 {
            return Err(Error::shape("softmax", "empty vector"));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::contract("softmax", format!("temperature must be positive, got {temperature}")));
        }
        let mut data = vec![0.0; n];
        softmax_slice(&mut data, self.value(x), temperature);
        let rg = self.requires_grad(x);
        let out = self.next_id();
        self.emit("softmax", Op::Softmax { x: x.id, temperature, out }, data, sx, rg)
    }

    pub fn log_softmax(&mut self, x: Tensor) -> Result<Tensor> {
        let sx = self.shape(x);
        let Shape::Vector(n) = sx else {
            return Err(Error::shape("log_softmax", format!("expected vector, got {sx}")));
        };
        if n == 0 {
            return Err(Error::shape("log_softmax", "empty vector"));
        }
        let xv = self.value(x);
        let hi = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = hi + xv.iter().map(|v| (v - hi).exp()).sum::<f64>().ln();
        let data: Vec<f64> = xv.iter().map(|v| v - lse).collect();
        let rg = self.requires_grad(x);
        let out = self.next_id();
        self.emit("log_softmax", Op::LogSoftmax { x: x.id, out }, data, sx, rg)
    }

    /// Row-wise softmax(x / temperature) of a matrix.
    pub fn softmax_rows(&mut self, a: Tensor, temperature: f64) -> Result<Tensor> {
        let sa = self.shape(a);
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("softmax_rows", format!("expected matrix, got {sa}")));
        };
        if n == 0 {
            return Err(Error::shape("softmax_rows", "empty rows"));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::contract("softmax_rows", format!("temperature must be positive, got {temperature}")));
        }
        let av = self.value(a);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            softmax_slice(&mut data[r * n..(r + 1) * n], &av[r * n..(r + 1) * n], temperature);
        }
        let rg = self.requires_grad(a);
        let out = self.next_id();
        self.emit("softmax_rows", Op::SoftmaxRows { a: a.id, temperature, out }, data, sa, rg)
    }

    /// Row-wise layer normalisation with learnable gain and bias.
    pub fn layer_norm(&mut self, a: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let (sa, sg, sb) = (self.shape(a), self.shape(gamma), self.shape(beta));
        let Shape::Matrix(m, n) = sa else {
            return Err(Error::shape("layer_norm", format!("expected matrix input, got {sa}")));
        };
        if sg != Shape::Vector(n) || sb != Shape::Vector(n) {
            return Err(Error::shape("layer_norm", format!("gamma/beta must be [{n}], got {sg} and {sb}")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::contract("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let av = self.value(a);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let sigma = (var + eps).sqrt();
            for c in 0..n {
                data[r * n + c] = gv[c] * (row[c] - mu) / sigma + bv[c];
            }
        }
        let rg = self.any_requires_grad(&[a.id, gamma.id, beta.id]);
        let out = self.next_id();
        self.emit(
            "layer_norm",
            Op::LayerNorm { a: a.id, gamma: gamma.id, beta: beta.id, eps, out },
            data,
            sa,
            rg,
        )
    }

    /// Cosine similarity of two equal-length vectors. Errors when either
    /// norm falls below [`COSINE_EPS`].
    pub fn cosine(&mut self, u: Tensor, v: Tensor) -> Result<Tensor> {
        let (su, sv) = (self.shape(u), self.shape(v));
        let (Shape::Vector(a), Shape::Vector(b)) = (su, sv) else {
            return Err(Error::shape("cosine", format!("expected vectors, got {su} and {sv}")));
        };
        if a != b {
            return Err(Error::shape("cosine", format!("length mismatch: {su} vs {sv}")));
        }
        let (uv, vv) = (self.value(u), self.value(v));
        let nu = norm(uv);
        let nv = norm(vv);
        if nu < COSINE_EPS {
            return Err(Error::Degenerate { op: "cosine", norm: nu });
        }
        if nv < COSINE_EPS {
            return Err(Error::Degenerate { op: "cosine", norm: nv });
        }
        let data = vec![dot(uv, vv) / (nu * nv)];
        let rg = self.any_requires_grad(&[u.id, v.id]);
        let out = self.next_id();
        self.emit("cosine", Op::Cosine { u: u.id, v: v.id, out }, data, Shape::Scalar, rg)
    }

    /// sum_i w_i * parts_i with scalar weights taken from vector `w`.
    /// Differentiable in both the weights and the parts.
    pub fn weighted_sum(&mut self, w: Tensor, parts: &[Tensor]) -> Result<Tensor> {
        let sw = self.shape(w);
        let Shape::Vector(k) = sw else {
            return Err(Error::shape("weighted_sum", format!("expected weight vector, got {sw}")));
        };
        if k != parts.len() || k == 0 {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} parts", k, parts.len()),
            ));
        }
        let shape = self.shape(parts[0]);
        for &p in parts {
            if self.shape(p) != shape {
                return Err(Error::shape("weighted_sum", format!("part shape {} vs {shape}", self.shape(p))));
            }
        }
        let wv = self.value(w).to_vec();
        let mut data = vec![0.0; shape.len()];
        for (i, &p) in parts.iter().enumerate() {
            axpy(&mut data, wv[i], self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.id).collect();
        let rg = self.requires_grad(w) || self.any_requires_grad(&ids);
        let out = self.next_id();
        self.emit("weighted_sum", Op::WeightedSum { w: w.id, parts: ids, out }, data, shape, rg)
    }

    /// Negative log-likelihood of `target` under a log-probability vector.
    pub fn nll(&mut self, logp: Tensor, target: usize) -> Result<Tensor> {
        let sl = self.shape(logp);
        let Shape::Vector(n) = sl else {
            return Err(Error::shape("nll", format!("expected vector, got {sl}")));
        };
        if target >= n {
            return Err(Error::shape("nll", format!("target {target} out of range 0..{n}")));
        }
        let data = vec![-self.value(logp)[target]];
        let rg = self.requires_grad(logp);
        let out = self.next_id();
        self.emit("nll", Op::Nll { logp: logp.id, target, out }, data, Shape::Scalar, rg)
    }
}

/// Applies one op's chain rule. `grads[op.out]` is taken by value: the tape
/// is SSA (each slot is written by exactly one op), so once the producing op
/// is processed its output gradient is never needed again.
pub(crate) fn backward_op(tape: &Tape, op: &Op, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    match op {
        Op::Add { a, b, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            acc_grad(slots, grads, *a, |buf| axpy(buf, 1.0, &g));
            acc_grad(slots, grads, *b, |buf| axpy(buf, 1.0, &g));
        }
        Op::Mul { a, b, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let av = &slots[*a].data;
            let bv = &slots[*b].data;
            acc_grad(slots, grads, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * bv[i];
                }
            });
            acc_grad(slots, grads, *b, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale { a, c, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            acc_grad(tape.slots(), grads, *a, |buf| axpy(buf, *c, &g));
        }
        Op::Matmul { a, b, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let (Shape::Matrix(m, k), Shape::Matrix(_, n)) = (slots[*a].shape, slots[*b].shape)
            else {
                unreachable!()
            };
            let av = &slots[*a].data;
            let bv = &slots[*b].data;
            acc_grad(slots, grads, *a, |buf| mm_nt(buf, &g, bv, m, n, k));
            acc_grad(slots, grads, *b, |buf| mm_tn(buf, av, &g, m, k, n));
        }
        Op::MatmulNt { a, b, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let (Shape::Matrix(m, k), Shape::Matrix(n, _)) = (slots[*a].shape, slots[*b].shape)
            else {
                unreachable!()
            };
            let av = &slots[*a].data;
            let bv = &slots[*b].data;
            acc_grad(slots, grads, *a, |buf| mm_nn(buf, &g, bv, m, n, k));
            acc_grad(slots, grads, *b, |buf| mm_tn(buf, &g, av, m, n, k));
        }
        Op::MatVec { a, v, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, k) = slots[*a].shape else { unreachable!() };
            let av = &slots[*a].data;
            let vv = &slots[*v].data;
            acc_grad(slots, grads, *a, |buf| {
                for i in 0..m {
                    axpy(&mut buf[i * k..(i + 1) * k], g[i], vv);
                }
            });
            acc_grad(slots, grads, *v, |buf| {
                for i in 0..m {
                    axpy(buf, g[i], &av[i * k..(i + 1) * k]);
                }
            });
        }
        Op::GatherRows { table, ids, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(_, d) = slots[*table].shape else { unreachable!() };
            acc_grad(slots, grads, *table, |buf| {
                for (i, &row) in ids.iter().enumerate() {
                    axpy(&mut buf[row * d..(row + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                }
            });
        }
        Op::SliceRows { a, start, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(_, n) = slots[*a].shape else { unreachable!() };
            acc_grad(slots, grads, *a, |buf| {
                axpy(&mut buf[start * n..start * n + g.len()], 1.0, &g);
            });
        }
        Op::SliceCols { a, start, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, n) = slots[*a].shape else { unreachable!() };
            let w = g.len() / m;
            acc_grad(slots, grads, *a, |buf| {
                for r in 0..m {
                    axpy(&mut buf[r * n + start..r * n + start + w], 1.0, &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::ConcatRows { parts, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let mut off = 0;
            for &p in parts {
                let len = slots[p].data.len();
                acc_grad(slots, grads, p, |buf| axpy(buf, 1.0, &g[off..off + len]));
                off += len;
            }
        }
        Op::ConcatCols { parts, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(rows, cols) = slots[*out].shape else { unreachable!() };
            let mut off = 0;
            for &p in parts {
                let Shape::Matrix(_, c) = slots[p].shape else { unreachable!() };
                acc_grad(slots, grads, p, |buf| {
                    for r in 0..rows {
                        axpy(&mut buf[r * c..(r + 1) * c], 1.0, &g[r * cols + off..r * cols + off + c]);
                    }
                });
                off += c;
            }
        }
        Op::SelectRow { a, row, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(_, n) = slots[*a].shape else { unreachable!() };
            acc_grad(slots, grads, *a, |buf| axpy(&mut buf[row * n..(row + 1) * n], 1.0, &g));
        }
        Op::AddRowVec { a, v, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, n) = slots[*a].shape else { unreachable!() };
            acc_grad(slots, grads, *a, |buf| axpy(buf, 1.0, &g));
            acc_grad(slots, grads, *v, |buf| {
                for r in 0..m {
                    axpy(buf, 1.0, &g[r * n..(r + 1) * n]);
                }
            });
        }
        Op::MeanRows { a, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, n) = slots[*a].shape else { unreachable!() };
            let inv = 1.0 / m as f64;
            acc_grad(slots, grads, *a, |buf| {
                for r in 0..m {
                    axpy(&mut buf[r * n..(r + 1) * n], inv, &g);
                }
            });
        }
        Op::StackRows { parts, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(_, n) = slots[*out].shape else { unreachable!() };
            for (r, &p) in parts.iter().enumerate() {
                acc_grad(slots, grads, p, |buf| axpy(buf, 1.0, &g[r * n..(r + 1) * n]));
            }
        }
        Op::StackScalars { parts, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            for (i, &p) in parts.iter().enumerate() {
                acc_grad(slots, grads, p, |buf| buf[0] += g[i]);
            }
        }
        Op::GatherElems { v, idx, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            acc_grad(tape.slots(), grads, *v, |buf| {
                for (j, &i) in idx.iter().enumerate() {
                    buf[i] += g[j];
                }
            });
        }
        Op::Pick { v, index, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            acc_grad(tape.slots(), grads, *v, |buf| buf[*index] += g[0]);
        }
        Op::Sum { a, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            acc_grad(tape.slots(), grads, *a, |buf| {
                for b in buf.iter_mut() {
                    *b += g[0];
                }
            });
        }
        Op::Mean { a, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let inv = 1.0 / slots[*a].data.len() as f64;
            acc_grad(slots, grads, *a, |buf| {
                for b in buf.iter_mut() {
                    *b += g[0] * inv;
                }
            });
        }
        Op::Ln { a, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let av = &slots[*a].data;
            acc_grad(slots, grads, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] / av[i];
                }
            });
        }
        Op::Tanh { a, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let yv = &slots[*out].data;
            acc_grad(slots, grads, *a, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            });
        }
        Op::Softmax { x, temperature, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let p = &slots[*out].data;
            let inner = dot(p, &g);
            acc_grad(slots, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] += p[i] * (g[i] - inner) / temperature;
                }
            });
        }
        Op::LogSoftmax { x, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let y = &slots[*out].data;
            let gsum: f64 = g.iter().sum();
            acc_grad(slots, grads, *x, |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] - y[i].exp() * gsum;
                }
            });
        }
        Op::SoftmaxRows { a, temperature, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, n) = slots[*out].shape else { unreachable!() };
            let p = &slots[*out].data;
            acc_grad(slots, grads, *a, |buf| {
                for r in 0..m {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let inner = dot(pr, gr);
                    let br = &mut buf[r * n..(r + 1) * n];
                    for i in 0..n {
                        br[i] += pr[i] * (gr[i] - inner) / temperature;
                    }
                }
            });
        }
        Op::LayerNorm { a, gamma, beta, eps, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let Shape::Matrix(m, n) = slots[*a].shape else { unreachable!() };
            let av = &slots[*a].data;
            let gv = &slots[*gamma].data;
            // Per-row statistics are recomputed from the stored input; the
            // forward already guaranteed they are finite.
            let mut xhat = vec![0.0; m * n];
            let mut sigma = vec![0.0; m];
            for r in 0..m {
                let row = &av[r * n..(r + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
                let s = (var + eps).sqrt();
                sigma[r] = s;
                for c in 0..n {
                    xhat[r * n + c] = (row[c] - mu) / s;
                }
            }
            acc_grad(slots, grads, *a, |buf| {
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    let mut h = vec![0.0; n];
                    for c in 0..n {
                        h[c] = gr[c] * gv[c];
                        m1 += h[c];
                        m2 += h[c] * xr[c];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    let br = &mut buf[r * n..(r + 1) * n];
                    for c in 0..n {
                        br[c] += (h[c] - m1 - xr[c] * m2) / sigma[r];
                    }
                }
            });
            acc_grad(slots, grads, *gamma, |buf| {
                for r in 0..m {
                    for c in 0..n {
                        buf[c] += g[r * n + c] * xhat[r * n + c];
                    }
                }
            });
            acc_grad(slots, grads, *beta, |buf| {
                for r in 0..m {
                    axpy(buf, 1.0, &g[r * n..(r + 1) * n]);
                }
            });
        }
        Op::Cosine { u, v, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let uv = &slots[*u].data;
            let vv = &slots[*v].data;
            let nu = norm(uv);
            let nv = norm(vv);
            let c = dot(uv, vv) / (nu * nv);
            let gs = g[0];
            acc_grad(slots, grads, *u, |buf| {
                for i in 0..buf.len() {
                    buf[i] += gs * (vv[i] / (nu * nv) - c * uv[i] / (nu * nu));
                }
            });
            acc_grad(slots, grads, *v, |buf| {
                for i in 0..buf.len() {
                    buf[i] += gs * (uv[i] / (nu * nv) - c * vv[i] / (nv * nv));
                }
            });
        }
        Op::WeightedSum { w, parts, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            let slots = tape.slots();
            let wv = &slots[*w].data;
            for (i, &p) in parts.iter().enumerate() {
                let pv = &slots[p].data;
                acc_grad(slots, grads, *w, |buf| buf[i] += dot(&g, pv));
                acc_grad(slots, grads, p, |buf| axpy(buf, wv[i], &g));
            }
        }
        Op::Nll { logp, target, out } => {
            let Some(g) = grads[*out].take() else { return Ok(()) };
            acc_grad(tape.slots(), grads, *logp, |buf| buf[*target] -= g[0]);
        }
    }
    Ok(())
}
