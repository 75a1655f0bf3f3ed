//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every op applied during a forward pass. Values are
//! immutable once recorded; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every leaf that asked for one.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    MulConst(usize, Arc<Vec<T>>),
    Swish(usize),
    Sigmoid(usize),
    Glu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    DepthwiseConv1d {
        x: usize,
        w: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    PadRows(usize),
    Reshape(usize),
    Pick(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    Custom(usize, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
///
/// Parameters are pulled lazily from the attached [`ParamStore`]; each name is
/// bound to a single leaf no matter how often it is used.
pub struct Graph<'p, T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Option<&'p ParamStore<T>>,
    bound: RefCell<HashMap<String, Var>>,
    no_grad: bool,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: None,
            bound: RefCell::new(HashMap::new()),
            no_grad: false,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Inference graph: nothing requires a gradient.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            no_grad: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dims2()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && !self.no_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&i| nodes[i].needs_grad)
    }

    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Bind a named parameter. Gradients are tracked iff it is trainable.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let store = self
            .params
            .ok_or_else(|| Error::Input(format!("graph has no parameter store for {name}")))?;
        let p = store
            .param(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.is_some_and(|p| p.contains(name))
    }

    fn val(&self, v: Var) -> Tensor<T> {
        self.value(v)
    }

    // ---- linear algebra ----

    /// a[m,k] · b[k,n]
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = av.dims2();
        let (k2, n) = bv.dims2();
        if k != k2 || bv.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            self.needs(&[a.0, b.0]),
        ))
    }

    /// a[m,k] · b[n,k]ᵀ
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a.0, b.0),
            self.needs(&[a.0, b.0]),
        ))
    }

    /// x · Wᵀ + b for a weight stored as [out, in].
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.val(a), self.val(b));
        self.same_shape(op, &av, &bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    /// Broadcast-add a length-n vector to every row of an [m,n] matrix.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::AddRow(a.0, bias.0),
            self.needs(&[a.0, bias.0]),
        ))
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let av = self.val(a);
        let data = av.data().iter().map(|&x| x * s).collect();
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), data),
            Op::Scale(a.0, s),
            self.needs(&[a.0]),
        ))
    }

    /// Elementwise product with a constant buffer (dropout masks, fixed weights).
    pub fn mul_const(&self, a: Var, c: Arc<Vec<T>>) -> Result<Var> {
        let av = self.val(a);
        if av.len() != c.len() {
            return Err(Error::shape("mul_const", format!("{} vs {}", av.len(), c.len())));
        }
        let data = av.data().iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), data),
            Op::MulConst(a.0, c),
            self.needs(&[a.0]),
        ))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let av = self.val(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        self.push(
            Tensor::from_parts(av.shape().to_vec(), data),
            op,
            self.needs(&[a.0]),
        )
    }

    pub fn swish(&self, a: Var) -> Result<Var> {
        Ok(self.unary(a, kernels::swish, Op::Swish(a.0)))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        Ok(self.unary(a, sigmoid, Op::Sigmoid(a.0)))
    }

    /// Gated linear unit over the last dimension: left half ⊙ σ(right half).
    pub fn glu(&self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let (m, n2) = av.dims2();
        if n2 % 2 != 0 {
            return Err(Error::shape("glu", format!("odd width {n2}")));
        }
        let n = n2 / 2;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row(i);
            for j in 0..n {
                out.push(row[j] * sigmoid(row[n + j]));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Glu(a.0),
            self.needs(&[a.0]),
        ))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.val(x), self.val(gamma), self.val(beta));
        let (m, n) = xv.dims2();
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}", xv.shape(), gv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let mut mean = Vec::with_capacity(m);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let (mu, rs) = kernels::layer_norm_row(
                xv.row(i),
                gv.data(),
                bv.data(),
                &mut out[i * n..(i + 1) * n],
                T::of(LN_EPS),
            );
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                rstd,
            },
            self.needs(&[x.0, gamma.0, beta.0]),
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::Softmax(a.0),
            self.needs(&[a.0]),
        ))
    }

    /// Row-wise softmax restricted to entries where `keep` is true; the rest
    /// come out as exact zeros. A row with nothing kept is all zeros.
    pub fn masked_softmax(&self, a: Var, keep: &[bool]) -> Result<Var> {
        let av = self.val(a);
        if keep.len() != av.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {} for {:?}", keep.len(), av.shape()),
            ));
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for (row, mrow) in out.chunks_mut(n.max(1)).zip(keep.chunks(n.max(1))) {
            let mx = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (x, &k) in row.iter_mut().zip(mrow) {
                *x = if k { (*x - mx).exp() } else { T::zero() };
                s += *x;
            }
            if s > T::zero() {
                let inv = T::one() / s;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        // Masked outputs are zero, so the plain softmax backward applies.
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::Softmax(a.0),
            self.needs(&[a.0]),
        ))
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let av = self.val(a);
        let n = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            kernels::log_softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::LogSoftmax(a.0),
            self.needs(&[a.0]),
        ))
    }

    // ---- indexing & layout ----

    /// Gather rows of a [V,d] table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.val(table);
        let (v, d) = tv.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("id {id} >= vocab {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            self.needs(&[table.0]),
        ))
    }

    /// 1-D convolution over time. x: [T, c_in], w: [c_out, c_in, k] → [T_out, c_out]
    /// with T_out = (T + 2·pad − k) / stride + 1.
    pub fn conv1d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let (t, cin) = xv.dims2();
        let ws = wv.shape();
        if ws.len() != 3 || ws[1] != cin || stride == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} weight {:?}", xv.shape(), ws),
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if t + 2 * pad < k {
            return Err(Error::shape("conv1d", format!("{t} frames < kernel {k}")));
        }
        let tout = (t + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let mut cols = vec![T::zero(); tout * ck];
        for o in 0..tout {
            for kk in 0..k {
                let src = (o * stride + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xr = xv.row(src as usize);
                for c in 0..cin {
                    cols[o * ck + c * k + kk] = xr[c];
                }
            }
        }
        let mut out = vec![T::zero(); tout * cout];
        gemm_nt(&cols, wv.data(), &mut out, tout, ck, cout);
        Ok(self.push(
            Tensor::from_parts(vec![tout, cout], out),
            Op::Conv1d {
                x: x.0,
                w: w.0,
                stride,
                pad,
                cols,
            },
            self.needs(&[x.0, w.0]),
        ))
    }

    /// Depthwise 'same' convolution. x: [T, c], w: [c, k] with odd k.
    pub fn depthwise_conv1d(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.val(x), self.val(w));
        let (t, c) = xv.dims2();
        let (wc, k) = wv.dims2();
        if wc != c || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("input {:?} weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let pad = k / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); t * c];
        for o in 0..t {
            for kk in 0..k {
                let src = (o + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    out[o * c + ch] += wd[ch * k + kk] * xd[s * c + ch];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t, c], out),
            Op::DepthwiseConv1d { x: x.0, w: w.0 },
            self.needs(&[x.0, w.0]),
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let cols = vals.first().map(|v| v.cols()).unwrap_or(0);
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &vals {
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {} columns", v.cols(), cols)));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(ids), needs))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.val(p)).collect();
        let rows = vals.first().map(|v| v.rows()).unwrap_or(0);
        if vals.iter().any(|v| v.rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatCols(ids), needs))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        let (m, n) = av.dims2();
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = av.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows(a.0, start),
            self.needs(&[a.0]),
        ))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        let (m, n) = av.dims2();
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols(a.0, start),
            self.needs(&[a.0]),
        ))
    }

    /// Append zero rows until the matrix has `rows` rows.
    pub fn pad_rows(&self, a: Var, rows: usize) -> Result<Var> {
        let av = self.val(a);
        let (m, n) = av.dims2();
        if rows < m {
            return Err(Error::shape("pad_rows", format!("{rows} < {m}")));
        }
        let mut out = av.data().to_vec();
        out.resize(rows * n, T::zero());
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], out),
            Op::PadRows(a.0),
            self.needs(&[a.0]),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), self.needs(&[a.0])))
    }

    /// Gather single elements by flat index into a vector.
    pub fn pick(&self, a: Var, flat: &[usize]) -> Result<Var> {
        let av = self.val(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat {
            out.push(
                *av.data()
                    .get(i)
                    .ok_or_else(|| Error::shape("pick", format!("index {i} of {}", av.len())))?,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![flat.len()], out),
            Op::Pick(a.0, flat.to_vec()),
            self.needs(&[a.0]),
        ))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), self.needs(&[a.0])))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let av = self.val(a);
        if av.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: T = av.data().iter().copied().sum();
        Ok(self.push(
            Tensor::scalar(s / T::of(av.len() as f64)),
            Op::Mean(a.0),
            self.needs(&[a.0]),
        ))
    }

    /// Record a scalar-valued function of `a` whose gradient w.r.t. `a` was
    /// computed by the caller (fused losses such as CTC).
    pub fn custom_scalar(&self, a: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let n = self.val(a).len();
        if grad.len() != n {
            return Err(Error::shape("custom_scalar", format!("grad {} vs {}", grad.len(), n)));
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom(a.0, grad), self.needs(&[a.0])))
    }

    // ---- backward ----

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, v) in self.bound.borrow().iter() {
            if grads[v.0].is_some() {
                params.insert(name.clone(), v.0);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads::from_parts(grads, shapes, params))
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].needs_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2();
            let n = bv.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                gemm_nt(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                gemm_tn(av.data(), g, db, m, k, n);
            }
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2();
            let n = bv.rows();
            if let Some(da) = acc(grads, nodes, *a) {
                gemm_nn(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = acc(grads, nodes, *b) {
                gemm_tn(g, av.data(), db, m, n, k);
            }
        }
        Op::Add(a, b) => {
            for (idx, sign) in [(*a, T::one()), (*b, T::one())] {
                if let Some(d) = acc(grads, nodes, idx) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            for (idx, sign) in [(*a, T::one()), (*b, -T::one())] {
                if let Some(d) = acc(grads, nodes, idx) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += sign * g);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, &g), &o) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * o;
                }
            }
            if let Some(db) = acc(grads, nodes, *b) {
                for ((d, &g), &o) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += g * o;
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(da) = acc(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            let n = nodes[*b].value.len();
            if let Some(db) = acc(grads, nodes, *b) {
                for row in g.chunks(n.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = acc(grads, nodes, *a) {
                da.iter_mut().zip(g).for_each(|(d, &g)| *d += *s * g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, &g), &c) in da.iter_mut().zip(g).zip(c.iter()) {
                    *d += g * c;
                }
            }
        }
        Op::Swish(a) => {
            let x = nodes[*a].value.clone();
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, &g), &x) in da.iter_mut().zip(g).zip(x.data()) {
                    let s = sigmoid(x);
                    *d += g * s * (T::one() + x * (T::one() - s));
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for ((d, &g), &y) in da.iter_mut().zip(g).zip(y) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Glu(a) => {
            let x = nodes[*a].value.clone();
            let (m, n2) = x.dims2();
            let n = n2 / 2;
            if let Some(da) = acc(grads, nodes, *a) {
                for i in 0..m {
                    let xr = x.row(i);
                    for j in 0..n {
                        let s = sigmoid(xr[n + j]);
                        let gij = g[i * n + j];
                        da[i * n2 + j] += gij * s;
                        da[i * n2 + n + j] += gij * xr[j] * s * (T::one() - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = nodes[*x].value.clone();
            let gv = nodes[*gamma].value.clone();
            let (m, n) = xv.dims2();
            let nf = T::of(n as f64);
            let xhat = |i: usize, j: usize| (xv.data()[i * n + j] - mean[i]) * rstd[i];
            if let Some(db) = acc(grads, nodes, *beta) {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            }
            if let Some(dg) = acc(grads, nodes, *gamma) {
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += g[i * n + j] * xhat(i, j);
                    }
                }
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                for i in 0..m {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        let dxh = g[i * n + j] * gv.data()[j];
                        s1 += dxh;
                        s2 += dxh * xhat(i, j);
                    }
                    let (s1, s2) = (s1 / nf, s2 / nf);
                    for j in 0..n {
                        let dxh = g[i * n + j] * gv.data()[j];
                        dx[i * n + j] += rstd[i] * (dxh - s1 - xhat(i, j) * s2);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let n = node.value.cols().max(1);
            if let Some(da) = acc(grads, nodes, *a) {
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dotp: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dotp);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = node.value.cols().max(1);
            if let Some(da) = acc(grads, nodes, *a) {
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let gs: T = grow.iter().copied().sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += g - y.exp() * gs;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            if let Some(dt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            stride,
            pad,
            cols,
        } => {
            let (t, cin) = nodes[*x].value.dims2();
            let wv = nodes[*w].value.clone();
            let (cout, k) = (wv.shape()[0], wv.shape()[2]);
            let tout = node.value.rows();
            let ck = cin * k;
            if let Some(dw) = acc(grads, nodes, *w) {
                gemm_tn(g, cols, dw, tout, cout, ck);
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                let mut dcols = vec![T::zero(); tout * ck];
                gemm_nn(g, wv.data(), &mut dcols, tout, cout, ck);
                for o in 0..tout {
                    for kk in 0..k {
                        let src = (o * stride + kk) as isize - *pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..cin {
                            dx[s * cin + c] += dcols[o * ck + c * k + kk];
                        }
                    }
                }
            }
        }
        Op::DepthwiseConv1d { x, w } => {
            let xv = nodes[*x].value.clone();
            let wv = nodes[*w].value.clone();
            let (t, c) = xv.dims2();
            let k = wv.cols();
            let pad = k / 2;
            if let Some(dw) = acc(grads, nodes, *w) {
                for o in 0..t {
                    for kk in 0..k {
                        let src = (o + kk) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            dw[ch * k + kk] += g[o * c + ch] * xv.data()[s * c + ch];
                        }
                    }
                }
            }
            if let Some(dx) = acc(grads, nodes, *x) {
                for o in 0..t {
                    for kk in 0..k {
                        let src = (o + kk) as isize - pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            dx[s * c + ch] += g[o * c + ch] * wv.data()[ch * k + kk];
                        }
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(dp) = acc(grads, nodes, p) {
                    dp.iter_mut().zip(&g[off..off + len]).for_each(|(d, &g)| *d += g);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let (m, n) = nodes[p].value.dims2();
                if let Some(dp) = acc(grads, nodes, p) {
                    for r in 0..m {
                        for j in 0..n {
                            dp[r * n + j] += g[r * total + off + j];
                        }
                    }
                }
                off += n;
            }
        }
        Op::SliceRows(a, start) => {
            let n = node.value.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                da[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &g)| *d += g);
            }
        }
        Op::SliceCols(a, start) => {
            let (m, len) = node.value.dims2();
            let n = nodes[*a].value.cols();
            if let Some(da) = acc(grads, nodes, *a) {
                for r in 0..m {
                    for j in 0..len {
                        da[r * n + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::PadRows(a) | Op::Reshape(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                let len = da.len();
                da.iter_mut().zip(&g[..len]).for_each(|(d, &g)| *d += g);
            }
        }
        Op::Pick(a, idx) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for (&i, &g) in idx.iter().zip(g) {
                    da[i] += g;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = acc(grads, nodes, *a) {
                let s = g[0] / T::of(da.len() as f64);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Custom(a, local) => {
            if let Some(da) = acc(grads, nodes, *a) {
                for (d, &l) in da.iter_mut().zip(local) {
                    *d += g[0] * l;
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T = f32> {
    by_node: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, usize>,
}

impl<T: Real> Grads<T> {
    fn from_parts(by_node: Vec<Option<Vec<T>>>, shapes: Vec<Vec<usize>>, params: BTreeMap<String, usize>) -> Self {
        Grads {
            by_node,
            shapes,
            params,
        }
    }

    /// Gradient with respect to a recorded value, zeros if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.by_node[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&i| self.wrt(Var(i)))
    }

    /// Gradients of every trainable parameter the graph touched, by name.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, i) in std::mem::take(&mut self.params) {
            if let Some(g) = self.by_node[i].take() {
                out.insert(name, Tensor::from_parts(self.shapes[i].clone(), g));
            }
        }
        out
    }
}
