use std::collections::HashMap;

use super::{Param, Real, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + self.pad_left + self.pad_right;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Per-channel statistics of one batch-norm forward in train mode.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

enum Op<F> {
    Leaf,
    Add { a: Var, b: Var, rep_a: usize, rep_b: usize },
    Sub { a: Var, b: Var, rep_a: usize, rep_b: usize },
    Mul { a: Var, b: Var, rep_a: usize, rep_b: usize },
    Relu(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Tanh(Var),
    Scale(Var, F),
    Shift(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Sum(Var),
    Mean(Var),
    ReduceAxis { x: Var, outer: usize, n: usize, inner: usize, scale: F },
    Reshape(Var),
    SwapLast { x: Var, outer: usize, rows: usize, cols: usize },
    Softmax { x: Var, k: usize },
    LogSoftmax { x: Var, k: usize },
    Gather { x: Var, idx: Vec<usize>, k: usize },
    Conv1d(Box<ConvSaved<F>>),
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm(Box<BnSaved<F>>),
    Rnn(Box<RnnSaved>),
}

struct ConvSaved<F> {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    lout: usize,
    cols: Vec<F>,
}

struct BnSaved<F> {
    x: Var,
    gamma: Var,
    beta: Var,
    batch: usize,
    channels: usize,
    len: usize,
    train: bool,
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

struct RnnSaved {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b: Var,
    batch: usize,
    steps: usize,
    input: usize,
    hidden: usize,
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Tanh(_) => "tanh",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ReduceAxis { .. } => "reduce_axis",
            Op::Reshape(_) => "reshape",
            Op::SwapLast { .. } => "swap_last",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Conv1d(_) => "conv1d",
            Op::MaxPool { .. } => "max_pool",
            Op::BatchNorm(_) => "batch_norm",
            Op::Rnn(_) => "rnn",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Relu(x)
            | Op::Square(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Tanh(x)
            | Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::ReduceAxis { x, .. }
            | Op::SwapLast { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Gather { x, .. }
            | Op::MaxPool { x, .. } => vec![*x],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Conv1d(s) => {
                let mut v = vec![s.x, s.w];
                v.extend(s.b);
                v
            }
            Op::BatchNorm(s) => vec![s.x, s.gamma, s.beta],
            Op::Rnn(s) => vec![s.x, s.w_ih, s.w_hh, s.b],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    /// Accumulated gradient; only maintained for leaves.
    grad: Option<Tensor<F>>,
}

/// Operation record for one forward pass.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward simply walks the node list in reverse.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    checked: bool,
    bound: HashMap<u64, (Var, bool)>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Repetition factor when `small` broadcasts against `big` along trailing
/// singleton dimensions.
fn trailing_rep(small: &[usize], big: &[usize]) -> Option<usize> {
    if small.is_empty() {
        return Some(big.iter().product());
    }
    if small.len() != big.len() {
        return None;
    }
    let split = small
        .iter()
        .zip(big)
        .position(|(s, b)| s != b)
        .unwrap_or(small.len());
    if small[split..].iter().all(|&d| d == 1) {
        Some(big[split..].iter().product())
    } else {
        None
    }
}

fn zeros_like<F: Real>(n: usize) -> Vec<F> {
    vec![F::zero(); n]
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
            bound: HashMap::new(),
        }
    }

    /// A graph that rejects any non-finite intermediate value.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::new()
        }
    }

    pub fn with_checked(checked: bool) -> Self {
        if checked {
            Self::checked()
        } else {
            Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NumericHealth(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// A free leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Places a parameter on the graph. Binding the same parameter twice
    /// returns the same node, so gradients from every use accumulate there.
    pub fn bind(&mut self, p: &Param<F>, trainable: bool) -> Result<Var> {
        if let Some(&(v, t)) = self.bound.get(&p.key()) {
            if t != trainable {
                return Err(contract_err!(
                    "parameter {} bound both as trainable and frozen",
                    p.name()
                ));
            }
            return Ok(v);
        }
        let v = self.push_leaf(p.value.clone(), trainable);
        self.bound.insert(p.key(), (v, trainable));
        Ok(v)
    }

    pub(crate) fn param_grad(&self, p: &Param<F>) -> Option<&Tensor<F>> {
        match self.bound.get(&p.key()) {
            Some(&(v, true)) => self.nodes[v.0].grad.as_ref(),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Value-identical copy severed from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_leaf(value, false)
    }

    // ---- elementwise -------------------------------------------------------

    fn broadcast(&self, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), 1, 1));
        }
        if let Some(rep) = trailing_rep(sb, sa) {
            return Ok((sa.to_vec(), 1, rep));
        }
        if let Some(rep) = trailing_rep(sa, sb) {
            return Ok((sb.to_vec(), rep, 1));
        }
        Err(dim_err!("shapes {sa:?} and {sb:?} are not broadcast-compatible"))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, usize, usize)> {
        let (shape, ra, rb) = self.broadcast(a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i / ra], db[i / rb])).collect();
        Ok((Tensor::from_parts(shape, data), ra, rb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rep_a, rep_b) = self.binary(a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a, b, rep_a, rep_b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rep_a, rep_b) = self.binary(a, b, |x, y| x - y)?;
        self.push(t, Op::Sub { a, b, rep_a, rep_b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rep_a, rep_b) = self.binary(a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a, b, rep_a, rep_b })
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: F) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = zeros_like(m * n);
        F::gemm(
            false,
            false,
            m,
            n,
            k,
            F::one(),
            self.value(a).data(),
            self.value(b).data(),
            F::zero(),
            &mut out,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, m, k, n })
    }

    /// `x · wᵀ + b` for `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(dim_err!("linear input {sx:?} against weight {sw:?}"));
        }
        let (rows, inp, out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(dim_err!("linear bias {:?}, expected [{out}]", self.shape(b)));
            }
        }
        let mut y = zeros_like(rows * out);
        F::gemm(
            false,
            true,
            rows,
            out,
            inp,
            F::one(),
            self.value(x).data(),
            self.value(w).data(),
            F::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, out], y),
            Op::Linear { x, w, b, rows, inp, out },
        )
    }

    // ---- reductions and reshaping -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum();
        let n = F::of(t.numel() as f64);
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, average: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if average { F::one() / F::of(n as f64) } else { F::one() };
        let d = self.value(x).data();
        let mut out = zeros_like(outer * inner);
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if average {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::ReduceAxis { x, outer, n, inner, scale },
        )
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Averages out one axis.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// Swaps the last two axes.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(dim_err!("swap_last needs rank >= 2, got {shape:?}"));
        }
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let outer: usize = shape[..r - 2].iter().product();
        let d = self.value(x).data();
        let mut out = zeros_like(d.len());
        for o in 0..outer {
            let base = o * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = d[base + i * cols + j];
                }
            }
        }
        let mut oshape = shape;
        oshape.swap(r - 2, r - 1);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::SwapLast { x, outer, rows, cols },
        )
    }

    // ---- classification helpers -------------------------------------------

    fn last_dim(&self, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&k) => Ok(k),
            None => Err(dim_err!("row-wise op on a scalar")),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, k })
    }

    /// Log-softmax along the last axis, stabilised by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x, k })
    }

    /// Picks `x[i, idx[i]]` from a `[rows, k]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(dim_err!("gather of {} indices from {s:?}", idx.len()));
        }
        let k = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(contract_err!("index {bad} out of range for {k} columns"));
        }
        let d = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| d[r * k + c]).collect();
        self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Gather { x, idx: idx.to_vec(), k },
        )
    }

    // ---- network layers ---------------------------------------------------

    /// Cross-correlation of `x: [B, C_in, L]` with `w: [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return Err(dim_err!("conv1d expects rank-3 input and weight, got {sx:?}, {sw:?}"));
        }
        let (batch, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if sw[1] != cin {
            return Err(dim_err!("conv1d input has {cin} channels, weight expects {}", sw[1]));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!("conv1d bias {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let lout = geom
            .output_len(len, k)
            .ok_or_else(|| dim_err!("conv1d output length < 1 for L={len}, kernel={k}"))?;
        let ck = cin * k;
        let xd = self.value(x).data();
        let mut cols = zeros_like(batch * ck * lout);
        for bi in 0..batch {
            let xb = &xd[bi * cin * len..(bi + 1) * cin * len];
            let cb = &mut cols[bi * ck * lout..(bi + 1) * ck * lout];
            for c in 0..cin {
                for kk in 0..k {
                    let row = &mut cb[(c * k + kk) * lout..(c * k + kk + 1) * lout];
                    for (o, slot) in row.iter_mut().enumerate() {
                        let pos = (o * geom.stride + kk) as isize - geom.pad_left as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *slot = xb[c * len + pos as usize];
                        }
                    }
                }
            }
        }
        let wd = self.value(w).data();
        let mut out = zeros_like(batch * cout * lout);
        for bi in 0..batch {
            F::gemm(
                false,
                false,
                cout,
                lout,
                ck,
                F::one(),
                wd,
                &cols[bi * ck * lout..(bi + 1) * ck * lout],
                F::zero(),
                &mut out[bi * cout * lout..(bi + 1) * cout * lout],
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for ob in out.chunks_mut(cout * lout) {
                for (co, row) in ob.chunks_mut(lout).enumerate() {
                    row.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let saved = ConvSaved {
            x,
            w,
            b,
            geom,
            batch,
            cin,
            len,
            cout,
            k,
            lout,
            cols,
        };
        self.push(
            Tensor::from_parts(vec![batch, cout, lout], out),
            Op::Conv1d(Box::new(saved)),
        )
    }

    /// Non-overlapping max pooling over the last axis of `[B, C, L]`; the
    /// output length is `floor(L / window)`.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || window == 0 || s[2] < window {
            return Err(dim_err!("max_pool1d window {window} on {s:?}"));
        }
        let (rows, len) = (s[0] * s[1], s[2]);
        let lout = len / window;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for o in 0..lout {
                let start = r * len + o * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        self.push(
            Tensor::from_parts(vec![s[0], s[1], lout], out),
            Op::MaxPool { x, argmax },
        )
    }

    /// Batch normalisation of `[B, C, L]` (or `[B, C]`) using batch
    /// statistics. Returns the output and the statistics it used.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchStats<F>)> {
        let (batch, channels, len) = self.bn_dims(x, gamma, beta)?;
        let d = self.value(x).data();
        let count = batch * len;
        let nf = F::of(count as f64);
        let mut mean: Vec<F> = zeros_like(channels);
        let mut var: Vec<F> = zeros_like(channels);
        for b in 0..batch {
            for c in 0..channels {
                let row = &d[(b * channels + c) * len..(b * channels + c + 1) * len];
                mean[c] += row.iter().copied().sum::<F>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for b in 0..batch {
            for c in 0..channels {
                let row = &d[(b * channels + c) * len..(b * channels + c + 1) * len];
                var[c] += row.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<F>();
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var, count };
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true, (batch, channels, len))?;
        Ok((v, stats))
    }

    /// Batch normalisation with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(dim_err!("running statistics do not match {} channels", dims.1));
        }
        let inv_std = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false, dims)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let (batch, channels, len) = match *s {
            [b, c] => (b, c, 1),
            [b, c, l] => (b, c, l),
            _ => return Err(dim_err!("batch norm expects [B, C] or [B, C, L], got {s:?}")),
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err!("batch norm affine parameters must have shape [{channels}]"));
        }
        Ok((batch, channels, len))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        inv_std: Vec<F>,
        train: bool,
        (batch, channels, len): (usize, usize, usize),
    ) -> Result<Var> {
        let d = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = zeros_like(d.len());
        let mut out = zeros_like(d.len());
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * len;
                for i in off..off + len {
                    xhat[i] = (d[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + be[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let saved = BnSaved {
            x,
            gamma,
            beta,
            batch,
            channels,
            len,
            train,
            xhat,
            inv_std,
        };
        self.push(Tensor::from_parts(shape, out), Op::BatchNorm(Box::new(saved)))
    }

    /// Single-layer tanh recurrence over `x: [B, T, D]` with `h₀ = 0`,
    /// returning every hidden state as `[B, T, H]`.
    pub fn rnn_tanh(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (si, sh) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec());
        if sx.len() != 3 || si.len() != 2 || sx[2] != si[1] {
            return Err(dim_err!("rnn input {sx:?} against input weight {si:?}"));
        }
        let (batch, steps, input) = (sx[0], sx[1], sx[2]);
        let hidden = si[0];
        if sh != [hidden, hidden] || self.shape(b) != [hidden] {
            return Err(dim_err!("rnn recurrent weight {sh:?} or bias inconsistent with hidden={hidden}"));
        }
        let mut pre = zeros_like(batch * steps * hidden);
        F::gemm(
            false,
            true,
            batch * steps,
            hidden,
            input,
            F::one(),
            self.value(x).data(),
            self.value(w_ih).data(),
            F::zero(),
            &mut pre,
        );
        let bd = self.value(b).data();
        let whh = self.value(w_hh).data();
        let mut out = zeros_like(batch * steps * hidden);
        let mut hprev = zeros_like(batch * hidden);
        let mut rec = zeros_like(batch * hidden);
        for t in 0..steps {
            if t > 0 {
                F::gemm(false, true, batch, hidden, hidden, F::one(), &hprev, whh, F::zero(), &mut rec);
            }
            for bi in 0..batch {
                let row = (bi * steps + t) * hidden;
                for h in 0..hidden {
                    let r = if t > 0 { rec[bi * hidden + h] } else { F::zero() };
                    let v = (pre[row + h] + bd[h] + r).tanh();
                    out[row + h] = v;
                    hprev[bi * hidden + h] = v;
                }
            }
        }
        let saved = RnnSaved {
            x,
            w_ih,
            w_hh,
            b,
            batch,
            steps,
            input,
            hidden,
        };
        self.push(
            Tensor::from_parts(vec![batch, steps, hidden], out),
            Op::Rnn(Box::new(saved)),
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable trainable leaf.
    /// Repeated calls add to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let contrib = adj.get_mut(i).and_then(Option::take);
            match (&mut node.grad, contrib) {
                (Some(acc), Some(g)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                (slot @ None, Some(g)) => {
                    *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                (slot @ None, None) => *slot = Some(Tensor::zeros(node.value.shape())),
                (Some(_), None) => {}
            }
        }
        Ok(())
    }

    /// Gradient slot for `v`, or `None` when `v` does not need a gradient.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(adj[v.0].get_or_insert_with(|| zeros_like(node.value.numel())))
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add { a, b, rep_a, rep_b } | &Op::Sub { a, b, rep_a, rep_b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -F::one() } else { F::one() };
                if let Some(ga) = self.slot(adj, a) {
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j / rep_a] += gj;
                    }
                }
                if let Some(gb) = self.slot(adj, b) {
                    for (j, &gj) in g.iter().enumerate() {
                        gb[j / rep_b] += sign * gj;
                    }
                }
            }
            &Op::Mul { a, b, rep_a, rep_b } => {
                let (da, db) = (val(a), val(b));
                if let Some(ga) = self.slot(adj, a) {
                    for (j, &gj) in g.iter().enumerate() {
                        ga[j / rep_a] += gj * db[j / rep_b];
                    }
                }
                if let Some(gb) = self.slot(adj, b) {
                    for (j, &gj) in g.iter().enumerate() {
                        gb[j / rep_b] += gj * da[j / rep_a];
                    }
                }
            }
            &Op::Relu(x) => {
                let dx = val(x);
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        if dx[j] > F::zero() {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Square(x) => {
                let dx = val(x);
                let two = F::of(2.0);
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += two * dx[j] * g[j];
                    }
                }
            }
            &Op::Log(x) => {
                let dx = val(x);
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] / dx[j];
                    }
                }
            }
            &Op::Exp(x) => {
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * (F::one() - y[j] * y[j]);
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j] * c;
                    }
                }
            }
            &Op::Shift(x) | &Op::Reshape(x) => {
                if let Some(gx) = self.slot(adj, x) {
                    for j in 0..g.len() {
                        gx[j] += g[j];
                    }
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                let (da, db) = (val(a), val(b));
                if let Some(ga) = self.slot(adj, a) {
                    F::gemm(false, true, m, k, n, F::one(), g, db, F::one(), ga);
                }
                if let Some(gb) = self.slot(adj, b) {
                    F::gemm(true, false, k, n, m, F::one(), da, g, F::one(), gb);
                }
            }
            &Op::Linear { x, w, b, rows, inp, out } => {
                let (dx, dw) = (val(x), val(w));
                if let Some(gx) = self.slot(adj, x) {
                    F::gemm(false, false, rows, inp, out, F::one(), g, dw, F::one(), gx);
                }
                if let Some(gw) = self.slot(adj, w) {
                    F::gemm(true, false, out, inp, rows, F::one(), g, dx, F::one(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(adj, b) {
                        for row in g.chunks(out) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(adj, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = F::of(val(x).len() as f64);
                if let Some(gx) = self.slot(adj, x) {
                    let share = g[0] / n;
                    gx.iter_mut().for_each(|v| *v += share);
                }
            }
            &Op::ReduceAxis { x, outer, n, inner, scale } => {
                if let Some(gx) = self.slot(adj, x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            &Op::SwapLast { x, outer, rows, cols } => {
                if let Some(gx) = self.slot(adj, x) {
                    for o in 0..outer {
                        let base = o * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                gx[base + r * cols + c] += g[base + c * rows + r];
                            }
                        }
                    }
                }
            }
            &Op::Softmax { x, k } => {
                if let Some(gx) = self.slot(adj, x) {
                    for ((gr, yr), xr) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, k } => {
                if let Some(gx) = self.slot(adj, x) {
                    for ((gr, yr), xr) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                        let total: F = gr.iter().copied().sum();
                        for j in 0..k {
                            xr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            Op::Gather { x, idx, k } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * k + c] += g[r];
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.slot(adj, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
            Op::Conv1d(s) => self.conv_backward(s, g, adj),
            Op::BatchNorm(s) => self.bn_backward(s, g, adj),
            Op::Rnn(s) => self.rnn_backward(s, y, g, adj),
        }
    }

    fn conv_backward(&self, s: &ConvSaved<F>, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let ck = s.cin * s.k;
        let per_out = s.cout * s.lout;
        let per_col = ck * s.lout;
        if let Some(gw) = self.slot(adj, s.w) {
            for bi in 0..s.batch {
                F::gemm(
                    false,
                    true,
                    s.cout,
                    ck,
                    s.lout,
                    F::one(),
                    &g[bi * per_out..(bi + 1) * per_out],
                    &s.cols[bi * per_col..(bi + 1) * per_col],
                    F::one(),
                    gw,
                );
            }
        }
        if let Some(b) = s.b {
            if let Some(gb) = self.slot(adj, b) {
                for gb_out in g.chunks(per_out) {
                    for (co, row) in gb_out.chunks(s.lout).enumerate() {
                        gb[co] += row.iter().copied().sum::<F>();
                    }
                }
            }
        }
        let wd = self.nodes[s.w.0].value.data();
        if let Some(gx) = self.slot(adj, s.x) {
            let mut dcols = zeros_like(per_col);
            for bi in 0..s.batch {
                F::gemm(
                    true,
                    false,
                    ck,
                    s.lout,
                    s.cout,
                    F::one(),
                    wd,
                    &g[bi * per_out..(bi + 1) * per_out],
                    F::zero(),
                    &mut dcols,
                );
                let gxb = &mut gx[bi * s.cin * s.len..(bi + 1) * s.cin * s.len];
                for c in 0..s.cin {
                    for kk in 0..s.k {
                        let row = &dcols[(c * s.k + kk) * s.lout..(c * s.k + kk + 1) * s.lout];
                        for (o, &v) in row.iter().enumerate() {
                            let pos = (o * s.geom.stride + kk) as isize - s.geom.pad_left as isize;
                            if pos >= 0 && (pos as usize) < s.len {
                                gxb[c * s.len + pos as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn bn_backward(&self, s: &BnSaved<F>, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let (batch, ch, len) = (s.batch, s.channels, s.len);
        let mut sum_g = zeros_like(ch);
        let mut sum_gx = zeros_like(ch);
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for i in off..off + len {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * s.xhat[i];
                }
            }
        }
        if let Some(gg) = self.slot(adj, s.gamma) {
            for c in 0..ch {
                gg[c] += sum_gx[c];
            }
        }
        if let Some(gb) = self.slot(adj, s.beta) {
            for c in 0..ch {
                gb[c] += sum_g[c];
            }
        }
        let gamma = self.nodes[s.gamma.0].value.data();
        if let Some(gx) = self.slot(adj, s.x) {
            let nf = F::of((batch * len) as f64);
            for b in 0..batch {
                for c in 0..ch {
                    let off = (b * ch + c) * len;
                    let scale = gamma[c] * s.inv_std[c];
                    for i in off..off + len {
                        gx[i] += if s.train {
                            scale * (g[i] - sum_g[c] / nf - s.xhat[i] * sum_gx[c] / nf)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
        }
    }

    fn rnn_backward(&self, s: &RnnSaved, hs: &[F], g: &[F], adj: &mut [Option<Vec<F>>]) {
        let (batch, steps, hidden, input) = (s.batch, s.steps, s.hidden, s.input);
        let whh = self.nodes[s.w_hh.0].value.data();
        let mut dpre_all = zeros_like(batch * steps * hidden);
        let mut dh_next = zeros_like(batch * hidden);
        let mut dpre = zeros_like(batch * hidden);
        let mut hprev = zeros_like(batch * hidden);
        let mut dwhh = zeros_like(hidden * hidden);
        for t in (0..steps).rev() {
            for bi in 0..batch {
                let row = (bi * steps + t) * hidden;
                for h in 0..hidden {
                    let y = hs[row + h];
                    let d = (g[row + h] + dh_next[bi * hidden + h]) * (F::one() - y * y);
                    dpre[bi * hidden + h] = d;
                    dpre_all[row + h] = d;
                }
            }
            if t > 0 {
                for bi in 0..batch {
                    let row = (bi * steps + t - 1) * hidden;
                    hprev[bi * hidden..(bi + 1) * hidden].copy_from_slice(&hs[row..row + hidden]);
                }
                F::gemm(true, false, hidden, hidden, batch, F::one(), &dpre, &hprev, F::one(), &mut dwhh);
                F::gemm(false, false, batch, hidden, hidden, F::one(), &dpre, whh, F::zero(), &mut dh_next);
            }
        }
        if let Some(gw) = self.slot(adj, s.w_hh) {
            for (a, b) in gw.iter_mut().zip(&dwhh) {
                *a += *b;
            }
        }
        if let Some(gb) = self.slot(adj, s.b) {
            for row in dpre_all.chunks(hidden) {
                for (a, &b) in gb.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let xd = self.nodes[s.x.0].value.data();
        if let Some(gw) = self.slot(adj, s.w_ih) {
            F::gemm(true, false, hidden, input, batch * steps, F::one(), &dpre_all, xd, F::one(), gw);
        }
        let wih = self.nodes[s.w_ih.0].value.data();
        if let Some(gx) = self.slot(adj, s.x) {
            F::gemm(false, false, batch * steps, input, hidden, F::one(), &dpre_all, wih, F::one(), gx);
        }
    }
}
