//! Tape-based reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are stored in creation order, so the reverse sweep in [`Graph::backward`]
//! is a single pass over the tape from the loss down to the leaves.
//!
//! Primitive set:
//! - elementwise: add, sub, mul, scale, add-scalar, relu, exp, log, abs,
//!   sqrt, clamp; row/column broadcasts (`add_row`, `mul_rows`)
//! - matrix multiply (optionally against a transposed right operand),
//!   batched transpose, reshape, column concatenation
//! - 2D convolution (1×1 and 3×3, any stride), 3×3×3 voxel convolution
//! - bilinear 2D sampling, nearest-neighbour 3D upsampling
//! - softmax / log-softmax along any axis, row normalization
//! - gather / scatter-add of rows, per-row column pick
//! - reductions: sum over everything, sum along one axis

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{domain_err, shape_err, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
}

/// Bilinear interpolation taps for one sample point: lattice row index and
/// weight for each of the four neighbours.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow { a: Var, row: Var, cols: usize },
    MulRows { a: Var, col: Var, cols: usize },
    Unary(Var, Unary),
    Clamp { a: Var, lo: f64, hi: f64 },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Reshape(Var),
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { a: Var, outer: usize, n: usize, inner: usize },
    NormalizeRows { a: Var, cols: usize, norms: Vec<f64> },
    SumAll(Var),
    SumAxis { a: Var, outer: usize, n: usize, inner: usize },
    GatherRows { a: Var, idx: Vec<usize>, cols: usize },
    ScatterAddRows { base: Var, src: Var, idx: Vec<usize>, cols: usize },
    PickCols { a: Var, idx: Vec<usize>, cols: usize },
    Conv2d(Box<Conv2dSpec>),
    Conv3d(Box<Conv3dSpec>),
    Bilinear { a: Var, cols: usize, taps: Vec<Option<Taps>> },
    Upsample3d { a: Var, dims: [usize; 3], cols: usize, factor: usize },
}

#[derive(Clone, Debug)]
struct Conv2dSpec {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Clone, Debug)]
struct Conv3dSpec {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    dims: [usize; 3],
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of a reverse sweep: one gradient buffer per node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a parameter; `None` when it did not reach the loss.
    pub fn wrt_param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Accumulates every parameter gradient into the store's tensors.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                store.get_mut(*id).tensor_mut().accumulate_grad(g);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn as_matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(shape_err!("expected a matrix, got shape {shape:?}")),
    }
}

/// Callback handing a mutable gradient buffer of one input to `f`.
type GradSink<'a> = dyn FnMut(Var, &mut dyn FnMut(&mut [f64])) + 'a;

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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || n == 0 {
            return Err(shape_err!("shape {shape:?} does not fit {} values", data.len()));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    /// Leaf that takes part in differentiation without being a parameter.
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let v = self.constant_vec(shape, data)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Registers a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = store.get(id).tensor();
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, self.shape(a).to_vec(), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::AddScalar(a), ng)
    }

    /// `a[i, :] + row` for a matrix `a` and a vector `row` of matching width.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = as_matrix(self.shape(a))?;
        if self.value(row).len() != cols {
            return Err(shape_err!("row of {} values cannot broadcast over {cols} columns", self.value(row).len()));
        }
        let r = self.value(row).to_vec();
        let v = self
            .value(a)
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(v, self.shape(a).to_vec(), Op::AddRow { a, row, cols }, ng))
    }

    /// `a[i, :] * col[i]`.
    pub fn mul_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a))?;
        if self.value(col).len() != rows {
            return Err(shape_err!("column of {} values cannot scale {rows} rows", self.value(col).len()));
        }
        let c = self.value(col).to_vec();
        let v = self
            .value(a)
            .chunks(cols)
            .zip(&c)
            .flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(v, self.shape(a).to_vec(), Op::MulRows { a, col, cols }, ng))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
        };
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::Unary(a, kind), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(domain_err!("log of non-positive value {x}"));
        }
        Ok(self.unary(a, Unary::Log))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(domain_err!("sqrt of non-positive value {x}"));
        }
        Ok(self.unary(a, Unary::Sqrt))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let ng = self.ng(a);
        self.push(v, self.shape(a).to_vec(), Op::Clamp { a, lo, hi }, ng)
    }

    /// `a · b` (or `a · bᵀ` with `trans_b`) for matrices.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a))?;
        let (br, bc) = as_matrix(self.shape(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        if trans_b {
            for i in 0..m {
                let ar = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &bv[j * k..(j + 1) * k];
                    out[i * n + j] = dot(ar, br);
                }
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        axpy(orow, x, &bv[p * n..(p + 1) * n]);
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (batch, rows, cols) = match *self.shape(a) {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            ref s => return Err(shape_err!("transpose needs rank 2 or 3, got {s:?}")),
        };
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = av[off + r * cols + c];
                }
            }
        }
        let shape = if batch == 1 && self.shape(a).len() == 2 {
            vec![cols, rows]
        } else {
            vec![batch, cols, rows]
        };
        let ng = self.ng(a);
        Ok(self.push(out, shape, Op::Transpose { a, batch, rows, cols }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape(a)));
        }
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(v, shape.to_vec(), Op::Reshape(a), ng))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (rows, _) = as_matrix(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix(self.shape(p))?;
            if r != rows {
                return Err(shape_err!("concat row counts differ: {rows} vs {r}"));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, vec![rows, total], Op::ConcatCols { parts: widths, rows }, ng))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !x.is_finite()) {
            return Err(domain_err!("softmax of non-finite value {x}"));
        }
        let (outer, n, inner) = split_axis(self.shape(a), axis)?;
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mx = (0..n).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (out[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Softmax { a, outer, n, inner }, ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !x.is_finite()) {
            return Err(domain_err!("log-softmax of non-finite value {x}"));
        }
        let (outer, n, inner) = split_axis(self.shape(a), axis)?;
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mx = (0..n).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..n).map(|j| (out[base + j * inner] - mx).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[base + j * inner] -= lse;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, self.shape(a).to_vec(), Op::LogSoftmax { a, outer, n, inner }, ng))
    }

    /// Scales every row to unit Euclidean norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = as_matrix(self.shape(a))?;
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let nrm = dot(row, row).sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                row.iter_mut().for_each(|x| *x /= nrm);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, self.shape(a).to_vec(), Op::NormalizeRows { a, cols, norms }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], vec![1], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out one axis; the result drops that axis (a rank-1 input yields `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &av[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut new_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(a);
        Ok(self.push(out, new_shape, Op::SumAxis { a, outer, n, inner }, ng))
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a))?;
        if idx.is_empty() {
            return Err(shape_err!("gather of zero rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("gather index {bad} out of range for {rows} rows"));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![idx.len(), cols], Op::GatherRows { a, idx: idx.to_vec(), cols }, ng))
    }

    /// `base` with `src[r, :]` added onto row `idx[r]`; other rows are copied untouched.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(base))?;
        let (sr, sc) = as_matrix(self.shape(src))?;
        if sc != cols || sr != idx.len() {
            return Err(shape_err!(
                "scatter source {:?} does not match {} indices into {cols} columns",
                self.shape(src),
                idx.len()
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("scatter index {bad} out of range for {rows} rows"));
        }
        let mut out = self.value(base).to_vec();
        let sv = self.value(src);
        for (r, &i) in idx.iter().enumerate() {
            axpy(&mut out[i * cols..(i + 1) * cols], 1.0, &sv[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(base) || self.ng(src);
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::ScatterAddRows { base, src, idx: idx.to_vec(), cols },
            ng,
        ))
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a))?;
        if idx.len() != rows {
            return Err(shape_err!("pick needs {rows} indices, got {}", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(shape_err!("pick column {bad} out of range for {cols} columns"));
        }
        let av = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &c)| av[r * cols + c]).collect();
        let ng = self.ng(a);
        Ok(self.push(out, vec![rows], Op::PickCols { a, idx: idx.to_vec(), cols }, ng))
    }

    /// Zero-padded 2D convolution of a `[Cin, H, W]` map with a
    /// `[Cout, Cin, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err!("conv2d input must be [C,H,W], got {s:?}")),
        };
        let (cout, k) = match *self.shape(weight) {
            [co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            ref s => return Err(shape_err!("conv2d weight {s:?} incompatible with {cin} input channels")),
        };
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err!("conv2d bias must have {cout} entries"));
            }
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("conv2d geometry invalid"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let x = self.value(input);
        let wt = self.value(weight);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
            if let Some(b) = bias {
                o.fill(self.nodes[b.0].value[co]);
            }
            for ci in 0..cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut o[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *ov += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        let spec = Conv2dSpec { input, weight, bias, cin, h, w, cout, k, stride, pad, oh, ow };
        Ok(self.push(out, vec![cout, oh, ow], Op::Conv2d(Box::new(spec)), ng))
    }

    /// 3×3×3 zero-padded convolution over a voxel-major `[H·W·Z, Cin]`
    /// feature matrix with kernel `[27, Cin, Cout]` (tap order: dx, dy, dz
    /// each in -1..=1, dz fastest).
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: [usize; 3],
    ) -> Result<Var> {
        let (nv, cin) = as_matrix(self.shape(input))?;
        if nv != dims.iter().product::<usize>() {
            return Err(shape_err!("conv3d input has {nv} rows but grid {dims:?}"));
        }
        let cout = match *self.shape(weight) {
            [27, ci, co] if ci == cin => co,
            ref s => return Err(shape_err!("conv3d weight {s:?} incompatible with {cin} input channels")),
        };
        if let Some(b) = bias {
            if self.value(b).len() != cout {
                return Err(shape_err!("conv3d bias must have {cout} entries"));
            }
        }
        let x = self.value(input);
        let wt = self.value(weight);
        let mut out = vec![0.0; nv * cout];
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            out.chunks_mut(cout).for_each(|r| r.copy_from_slice(bv));
        }
        for_each_tap(dims, |tap, v, nb| {
            let xr = &x[nb * cin..(nb + 1) * cin];
            let orow = &mut out[v * cout..(v + 1) * cout];
            let wtap = &wt[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    axpy(orow, xv, &wtap[ci * cout..(ci + 1) * cout]);
                }
            }
        });
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        let spec = Conv3dSpec { input, weight, bias, dims, cin, cout };
        Ok(self.push(out, vec![nv, cout], Op::Conv3d(Box::new(spec)), ng))
    }

    /// Bilinear sampling of a lattice stored as a `[lat_h·lat_w, C]` matrix at
    /// continuous lattice coordinates `(x, y)`. `None` samples yield zero rows.
    /// Coordinates outside the lattice are clamped to its border.
    pub fn bilinear_sample(
        &mut self,
        a: Var,
        lat_h: usize,
        lat_w: usize,
        points: &[Option<(f64, f64)>],
    ) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a))?;
        if rows != lat_h * lat_w {
            return Err(shape_err!("lattice {lat_h}x{lat_w} does not match {rows} rows"));
        }
        if points.is_empty() {
            return Err(shape_err!("bilinear sample of zero points"));
        }
        let taps: Vec<Option<Taps>> = points
            .iter()
            .map(|p| p.map(|(x, y)| bilinear_taps(x, y, lat_h, lat_w)))
            .collect();
        let av = self.value(a);
        let mut out = vec![0.0; points.len() * cols];
        for (n, t) in taps.iter().enumerate() {
            if let Some(t) = t {
                let orow = &mut out[n * cols..(n + 1) * cols];
                for q in 0..4 {
                    if t.w[q] != 0.0 {
                        axpy(orow, t.w[q], &av[t.idx[q] * cols..(t.idx[q] + 1) * cols]);
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![points.len(), cols], Op::Bilinear { a, cols, taps }, ng))
    }

    /// Nearest-neighbour upsampling of a voxel-major `[H·W·Z, C]` matrix.
    pub fn upsample3d(&mut self, a: Var, dims: [usize; 3], factor: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a))?;
        if rows != dims.iter().product::<usize>() || factor == 0 {
            return Err(shape_err!("upsample input {rows} rows vs grid {dims:?}, factor {factor}"));
        }
        let [h, w, z] = dims;
        let (uh, uw, uz) = (h * factor, w * factor, z * factor);
        let av = self.value(a);
        let mut out = Vec::with_capacity(uh * uw * uz * cols);
        for i in 0..uh {
            for j in 0..uw {
                for k in 0..uz {
                    let src = ((i / factor) * w + j / factor) * z + k / factor;
                    out.extend_from_slice(&av[src * cols..(src + 1) * cols]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, vec![uh * uw * uz, cols], Op::Upsample3d { a, dims, cols, factor }, ng))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(p, v)| (*p, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*b, &mut |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| axpy(ga, *s, g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| axpy(ga, 1.0, g)),
            Op::AddRow { a, row, cols } => {
                acc(*a, &mut |ga| axpy(ga, 1.0, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(*cols) {
                        axpy(gr, 1.0, chunk);
                    }
                });
            }
            Op::MulRows { a, col, cols } => {
                let (av, cv) = (self.value(*a), self.value(*col));
                acc(*a, &mut |ga| {
                    for (r, s) in cv.iter().enumerate() {
                        axpy(&mut ga[r * cols..(r + 1) * cols], *s, &g[r * cols..(r + 1) * cols]);
                    }
                });
                acc(*col, &mut |gc| {
                    for (r, gcr) in gc.iter_mut().enumerate() {
                        *gcr += dot(&g[r * cols..(r + 1) * cols], &av[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sqrt => 0.5 / y[i],
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G · B'ᵀ where B' is the effective right operand [k, n].
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let gar = &mut ga[i * k..(i + 1) * k];
                        if *trans_b {
                            // B stored [n, k]
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv != 0.0 {
                                    axpy(gar, gv, &bv[j * k..(j + 1) * k]);
                                }
                            }
                        } else {
                            for (p, gap) in gar.iter_mut().enumerate() {
                                *gap += dot(gr, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let ar = &av[i * k..(i + 1) * k];
                        if *trans_b {
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv != 0.0 {
                                    axpy(&mut gb[j * k..(j + 1) * k], gv, ar);
                                }
                            }
                        } else {
                            for (p, &x) in ar.iter().enumerate() {
                                if x != 0.0 {
                                    axpy(&mut gb[p * n..(p + 1) * n], x, gr);
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, batch, rows, cols } => {
                acc(*a, &mut |ga| {
                    for b in 0..*batch {
                        let off = b * rows * cols;
                        for r in 0..*rows {
                            for c in 0..*cols {
                                ga[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, c) in parts {
                    acc(p, &mut |gp| {
                        for r in 0..*rows {
                            axpy(&mut gp[r * c..(r + 1) * c], 1.0, &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Softmax { a, outer, n, inner } => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * n * inner + i;
                            let s: f64 = (0..*n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..*n {
                                let q = base + j * inner;
                                ga[q] += y[q] * (g[q] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { a, outer, n, inner } => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * n * inner + i;
                            let s: f64 = (0..*n).map(|j| g[base + j * inner]).sum();
                            for j in 0..*n {
                                let q = base + j * inner;
                                ga[q] += g[q] - y[q].exp() * s;
                            }
                        }
                    }
                });
            }
            Op::NormalizeRows { a, cols, norms } => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj = dot(gr, yr);
                        let gar = &mut ga[r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            gar[c] += (gr[c] - yr[c] * proj) / nrm;
                        }
                    }
                });
            }
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumAxis { a, outer, n, inner } => {
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        for j in 0..*n {
                            let dst = &mut ga[(o * n + j) * inner..(o * n + j + 1) * inner];
                            axpy(dst, 1.0, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::GatherRows { a, idx, cols } => {
                acc(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut ga[i * cols..(i + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ScatterAddRows { base, src, idx, cols } => {
                acc(*base, &mut |gb| axpy(gb, 1.0, g));
                acc(*src, &mut |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut gs[r * cols..(r + 1) * cols], 1.0, &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::PickCols { a, idx, cols } => {
                acc(*a, &mut |ga| {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                });
            }
            Op::Conv2d(s) => self.conv2d_backward(s, g, &mut acc),
            Op::Conv3d(s) => self.conv3d_backward(s, g, &mut acc),
            Op::Bilinear { a, cols, taps } => {
                acc(*a, &mut |ga| {
                    for (n, t) in taps.iter().enumerate() {
                        if let Some(t) = t {
                            let gr = &g[n * cols..(n + 1) * cols];
                            for q in 0..4 {
                                if t.w[q] != 0.0 {
                                    axpy(&mut ga[t.idx[q] * cols..(t.idx[q] + 1) * cols], t.w[q], gr);
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample3d { a, dims, cols, factor } => {
                let [h, w, z] = *dims;
                let f = *factor;
                acc(*a, &mut |ga| {
                    let mut r = 0;
                    for i in 0..h * f {
                        for j in 0..w * f {
                            for k in 0..z * f {
                                let src = ((i / f) * w + j / f) * z + k / f;
                                axpy(&mut ga[src * cols..(src + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                                r += 1;
                            }
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(&self, s: &Conv2dSpec, g: &[f64], acc: &mut GradSink) {
        let Conv2dSpec { input, weight, bias, cin, h, w, cout, k, stride, pad, oh, ow } = *s;
        let x = self.value(input);
        let wt = self.value(weight);
        let tap_iter = |oy: usize, ky: usize| -> Option<usize> {
            let iy = (oy * stride + ky) as isize - pad as isize;
            (iy >= 0 && iy < h as isize).then_some(iy as usize)
        };
        let col = |ox: usize, kx: usize| -> Option<usize> {
            let ix = (ox * stride + kx) as isize - pad as isize;
            (ix >= 0 && ix < w as isize).then_some(ix as usize)
        };
        if let Some(b) = bias {
            acc(b, &mut |gb| {
                for co in 0..cout {
                    gb[co] += g[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
                }
            });
        }
        acc(weight, &mut |gw| {
            for co in 0..cout {
                let go = &g[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let xc = &x[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut sacc = 0.0;
                            for oy in 0..oh {
                                let Some(iy) = tap_iter(oy, ky) else { continue };
                                for ox in 0..ow {
                                    if let Some(ix) = col(ox, kx) {
                                        sacc += go[oy * ow + ox] * xc[iy * w + ix];
                                    }
                                }
                            }
                            gw[((co * cin + ci) * k + ky) * k + kx] += sacc;
                        }
                    }
                }
            }
        });
        acc(input, &mut |gx| {
            for co in 0..cout {
                let go = &g[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..cin {
                    let gxc = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[((co * cin + ci) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let Some(iy) = tap_iter(oy, ky) else { continue };
                                for ox in 0..ow {
                                    if let Some(ix) = col(ox, kx) {
                                        gxc[iy * w + ix] += wv * go[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    fn conv3d_backward(&self, s: &Conv3dSpec, g: &[f64], acc: &mut GradSink) {
        let Conv3dSpec { input, weight, bias, dims, cin, cout } = *s;
        let x = self.value(input);
        let wt = self.value(weight);
        if let Some(b) = bias {
            acc(b, &mut |gb| {
                for row in g.chunks(cout) {
                    axpy(gb, 1.0, row);
                }
            });
        }
        acc(weight, &mut |gw| {
            for_each_tap(dims, |tap, v, nb| {
                let xr = &x[nb * cin..(nb + 1) * cin];
                let gr = &g[v * cout..(v + 1) * cout];
                let gtap = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                for (ci, &xv) in xr.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(&mut gtap[ci * cout..(ci + 1) * cout], xv, gr);
                    }
                }
            });
        });
        acc(input, &mut |gx| {
            for_each_tap(dims, |tap, v, nb| {
                let gr = &g[v * cout..(v + 1) * cout];
                let wtap = &wt[tap * cin * cout..(tap + 1) * cin * cout];
                let gxr = &mut gx[nb * cin..(nb + 1) * cin];
                for (ci, gxv) in gxr.iter_mut().enumerate() {
                    *gxv += dot(gr, &wtap[ci * cout..(ci + 1) * cout]);
                }
            });
        });
    }
}

/// Visits every (tap, output voxel, in-range neighbour voxel) triple of a
/// 3×3×3 stencil on an `[H, W, Z]` grid with Z fastest.
fn for_each_tap(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [h, w, z] = dims;
    let mut tap = 0;
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                for i in 0..h {
                    let ni = i as isize + dx;
                    if ni < 0 || ni >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let nj = j as isize + dy;
                        if nj < 0 || nj >= w as isize {
                            continue;
                        }
                        let row = (i * w + j) * z;
                        let nrow = (ni as usize * w + nj as usize) * z;
                        let k0 = if dz < 0 { 1 } else { 0 };
                        let k1 = if dz > 0 { z.saturating_sub(1) } else { z };
                        for k in k0..k1 {
                            let nk = (k as isize + dz) as usize;
                            f(tap, row + k, nrow + nk);
                        }
                    }
                }
                tap += 1;
            }
        }
    }
}

fn bilinear_taps(x: f64, y: f64, lat_h: usize, lat_w: usize) -> Taps {
    let x = x.clamp(0.0, (lat_w - 1) as f64);
    let y = y.clamp(0.0, (lat_h - 1) as f64);
    let x0 = (x.floor() as usize).min(lat_w - 1);
    let y0 = (y.floor() as usize).min(lat_h - 1);
    let x1 = (x0 + 1).min(lat_w - 1);
    let y1 = (y0 + 1).min(lat_h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Taps {
        idx: [y0 * lat_w + x0, y0 * lat_w + x1, y1 * lat_w + x0, y1 * lat_w + x1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}
