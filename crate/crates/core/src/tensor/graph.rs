use super::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of a custom operation: maps the output gradient to
/// one gradient buffer per input (same order as the inputs).
pub type VjpFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Concat(Vec<Var>),
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    AddN(Vec<Var>),
    SoftmaxRows(Var),
    Conv2d { input: Var, kernels: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        inner: usize,
        batch_stats: bool,
    },
    Mask { input: Var, mask: Vec<f64> },
    Custom { inputs: Vec<Var>, vjp: VjpFn },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a graph node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            grad: None,
        }
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Input leaf that records its gradient (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    pub(crate) fn param_leaf(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Param(id), trainable)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut data = self.value(a).to_vec();
        for i in 0..m {
            for (d, rv) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *d += rv;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(vec![m, n], data, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), data, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(Error::dim("concat", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], data, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![m, len], data, Op::SliceCols { input: a, start }, ng))
    }

    /// Leading-axis entries `start..start + len` of a tensor of any rank.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::dim("slice_rows", &shape, &[start, len]));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let ng = self.ng(a);
        Ok(self.push(out_shape, data, Op::SliceRows { input: a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n, m], data, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        let mut data = vec![0.0; self.value(parts[0]).len()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(Error::dim("add_n", &shape, self.shape(p)));
            }
            for (d, v) in data.iter_mut().zip(self.value(p)) {
                *d += v;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, data, Op::AddN(parts.to_vec()), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let mut data = self.value(a).to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![m, n], data, Op::SoftmaxRows(a), ng))
    }

    /// 3x3 cross-correlation with zero padding 1. Input `[N, C_in, H, W]`,
    /// kernels `[C_out, C_in, 3, 3]`, bias `[C_out]`; output `[N, C_out, H, W]`.
    pub fn conv2d_3x3(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (n, ci, h, w) = match self.shape(input) {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::dim("conv2d_3x3", s, self.shape(kernels))),
        };
        let co = match self.shape(kernels) {
            &[o, c, 3, 3] if c == ci => o,
            s => return Err(Error::dim("conv2d_3x3", self.shape(input), s)),
        };
        if self.value(bias).len() != co {
            return Err(Error::dim("conv2d_3x3", self.shape(kernels), self.shape(bias)));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("conv2d_3x3", self.shape(input), &[1, 1]));
        }
        let x = self.value(input);
        let k = self.value(kernels);
        let b = self.value(bias);
        let mut out = vec![0.0; n * co * h * w];
        for img in 0..n {
            for o in 0..co {
                let dst = &mut out[(img * co + o) * h * w..(img * co + o + 1) * h * w];
                dst.iter_mut().for_each(|v| *v = b[o]);
                for c in 0..ci {
                    let src = &x[(img * ci + c) * h * w..(img * ci + c + 1) * h * w];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let kv = k[((o * ci + c) * 3 + di) * 3 + dj];
                            if kv == 0.0 {
                                continue;
                            }
                            // output (i, j) reads input (i + di - 1, j + dj - 1)
                            let i_lo = if di == 0 { 1 } else { 0 };
                            let i_hi = if di == 2 { h - 1 } else { h };
                            let j_lo = if dj == 0 { 1 } else { 0 };
                            let j_hi = if dj == 2 { w - 1 } else { w };
                            for i in i_lo..i_hi {
                                let si = i + di - 1;
                                let drow = &mut dst[i * w..(i + 1) * w];
                                let srow = &src[si * w..(si + 1) * w];
                                for j in j_lo..j_hi {
                                    drow[j] += kv * srow[j + dj - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(input) || self.ng(kernels) || self.ng(bias);
        Ok(self.push(
            vec![n, co, h, w],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            ng,
        ))
    }

    /// 2x2 max-pooling with stride 2. Odd trailing rows/columns are pooled as
    /// if padded with -inf. Ties resolve to the first element in row-major order.
    pub fn maxpool_2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(input) {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::dim("maxpool_2x2", s, &[0, 0, 0, 0])),
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(input);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (si, sj) = (2 * i + di, 2 * j + dj);
                            if si >= h || sj >= w {
                                continue;
                            }
                            let idx = base + si * w + sj;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * oh + i) * ow + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let ng = self.ng(input);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool { input, argmax }, ng))
    }

    /// Batch normalisation over axis 1 of a `[N, C, ...]` tensor.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// returned; otherwise the given `(mean, var)` are applied as constants.
    pub(crate) fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batchnorm", &shape, &[0, 0]));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm", &shape, self.shape(gamma)));
        }
        let x = self.value(input);
        let m = (n * inner) as f64;
        let (mean, var) = match stats {
            Some((mu, v)) => (mu.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for img in 0..n {
                    for ch in 0..c {
                        let s = &x[(img * c + ch) * inner..(img * c + ch + 1) * inner];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for img in 0..n {
                    for ch in 0..c {
                        let s = &x[(img * c + ch) * inner..(img * c + ch + 1) * inner];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * inner;
                for s in 0..inner {
                    let xh = (x[off + s] - mean[ch]) * inv_std[ch];
                    xhat[off + s] = xh;
                    out[off + s] = g[ch] * xh + b[ch];
                }
            }
        }
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                inner,
                batch_stats: stats.is_none(),
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// Elementwise product with a constant mask.
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(input).len() {
            return Err(Error::dim("mask", self.shape(input), &[mask.len()]));
        }
        let data = self.value(input).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let ng = self.ng(input);
        Ok(self.push(self.shape(input).to_vec(), data, Op::Mask { input, mask }, ng))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], shape: Vec<usize>, data: Vec<f64>, vjp: VjpFn) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(
            shape,
            data,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            ng,
        )
    }

    /// Reverse sweep from a single-element `loss` node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Gradients {
        let mut nodes = self.nodes;
        let count = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..count).map(|_| None).collect();
        assert_eq!(nodes[loss.0].data.len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !nodes[idx].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut nodes[idx].op, Op::Leaf);
            {
                let node = &nodes[idx];
                let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                    if !nodes[v.0].needs_grad {
                        return;
                    }
                    let len = nodes[v.0].data.len();
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    f(buf);
                };
                match &op {
                    Op::Leaf => {}
                    Op::Param(id) => params.push((*id, g.clone())),
                    Op::MatMul(a, b) => {
                        let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                        let n = nodes[b.0].shape[1];
                        let av = &nodes[a.0].data;
                        let bv = &nodes[b.0].data;
                        acc(*a, &mut |ga| {
                            // ga[m,k] += g[m,n] * b^T
                            for i in 0..m {
                                for p in 0..k {
                                    let mut s = 0.0;
                                    let brow = &bv[p * n..(p + 1) * n];
                                    let grow = &g[i * n..(i + 1) * n];
                                    for (x, y) in grow.iter().zip(brow) {
                                        s += x * y;
                                    }
                                    ga[i * k + p] += s;
                                }
                            }
                        });
                        acc(*b, &mut |gb| {
                            // gb[k,n] += a^T * g
                            for i in 0..m {
                                let grow = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let aval = av[i * k + p];
                                    if aval == 0.0 {
                                        continue;
                                    }
                                    for (d, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                        *d += aval * x;
                                    }
                                }
                            }
                        });
                    }
                    Op::Add(a, b) => {
                        acc(*a, &mut |ga| add_into(ga, &g));
                        acc(*b, &mut |gb| add_into(gb, &g));
                    }
                    Op::Sub(a, b) => {
                        acc(*a, &mut |ga| add_into(ga, &g));
                        acc(*b, &mut |gb| {
                            for (d, x) in gb.iter_mut().zip(&g) {
                                *d -= x;
                            }
                        });
                    }
                    Op::Mul(a, b) => {
                        let av = &nodes[a.0].data;
                        let bv = &nodes[b.0].data;
                        acc(*a, &mut |ga| {
                            for ((d, x), y) in ga.iter_mut().zip(&g).zip(bv) {
                                *d += x * y;
                            }
                        });
                        acc(*b, &mut |gb| {
                            for ((d, x), y) in gb.iter_mut().zip(&g).zip(av) {
                                *d += x * y;
                            }
                        });
                    }
                    Op::AddRow(a, r) => {
                        let n = node.shape[1];
                        acc(*a, &mut |ga| add_into(ga, &g));
                        acc(*r, &mut |gr| {
                            for row in g.chunks(n) {
                                add_into(gr, row);
                            }
                        });
                    }
                    Op::Scale(a, c) => acc(*a, &mut |ga| {
                        for (d, x) in ga.iter_mut().zip(&g) {
                            *d += c * x;
                        }
                    }),
                    Op::Tanh(a) => {
                        let y = &node.data;
                        acc(*a, &mut |ga| {
                            for ((d, x), yv) in ga.iter_mut().zip(&g).zip(y) {
                                *d += x * (1.0 - yv * yv);
                            }
                        })
                    }
                    Op::Sigmoid(a) => {
                        let y = &node.data;
                        acc(*a, &mut |ga| {
                            for ((d, x), yv) in ga.iter_mut().zip(&g).zip(y) {
                                *d += x * yv * (1.0 - yv);
                            }
                        })
                    }
                    Op::Relu(a) => {
                        let xin = &nodes[a.0].data;
                        acc(*a, &mut |ga| {
                            for ((d, x), xv) in ga.iter_mut().zip(&g).zip(xin) {
                                if *xv > 0.0 {
                                    *d += x;
                                }
                            }
                        })
                    }
                    Op::Elu(a) => {
                        let xin = &nodes[a.0].data;
                        let y = &node.data;
                        acc(*a, &mut |ga| {
                            for (((d, x), xv), yv) in ga.iter_mut().zip(&g).zip(xin).zip(y) {
                                *d += if *xv > 0.0 { *x } else { x * (yv + 1.0) };
                            }
                        })
                    }
                    Op::Exp(a) => {
                        let y = &node.data;
                        acc(*a, &mut |ga| {
                            for ((d, x), yv) in ga.iter_mut().zip(&g).zip(y) {
                                *d += x * yv;
                            }
                        })
                    }
                    Op::Ln(a) => {
                        let xin = &nodes[a.0].data;
                        acc(*a, &mut |ga| {
                            for ((d, x), xv) in ga.iter_mut().zip(&g).zip(xin) {
                                *d += x / xv;
                            }
                        })
                    }
                    Op::Concat(parts) => {
                        let rows = node.shape[0];
                        let total = node.shape[1];
                        let mut off = 0;
                        for p in parts {
                            let w = nodes[p.0].shape[1];
                            acc(*p, &mut |gp| {
                                for i in 0..rows {
                                    add_into(
                                        &mut gp[i * w..(i + 1) * w],
                                        &g[i * total + off..i * total + off + w],
                                    );
                                }
                            });
                            off += w;
                        }
                    }
                    Op::SliceCols { input, start } => {
                        let n = nodes[input.0].shape[1];
                        let len = node.shape[1];
                        let rows = node.shape[0];
                        acc(*input, &mut |gi| {
                            for i in 0..rows {
                                add_into(
                                    &mut gi[i * n + start..i * n + start + len],
                                    &g[i * len..(i + 1) * len],
                                );
                            }
                        });
                    }
                    Op::SliceRows { input, start } => {
                        let inner: usize = node.shape[1..].iter().product();
                        acc(*input, &mut |gi| {
                            add_into(&mut gi[start * inner..start * inner + g.len()], &g);
                        });
                    }
                    Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, &g)),
                    Op::Transpose(a) => {
                        let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                        acc(*a, &mut |ga| {
                            for i in 0..m {
                                for j in 0..n {
                                    ga[i * n + j] += g[j * m + i];
                                }
                            }
                        });
                    }
                    Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
                    Op::AddN(parts) => {
                        for p in parts {
                            acc(*p, &mut |gp| add_into(gp, &g));
                        }
                    }
                    Op::SoftmaxRows(a) => {
                        let n = node.shape[1];
                        let y = &node.data;
                        acc(*a, &mut |ga| {
                            for ((grow, yrow), drow) in
                                g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n))
                            {
                                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                                for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                    *d += yv * (gv - dot);
                                }
                            }
                        });
                    }
                    Op::Conv2d {
                        input,
                        kernels,
                        bias,
                    } => conv_backward(&nodes, &mut acc, *input, *kernels, *bias, &g),
                    Op::MaxPool { input, argmax } => acc(*input, &mut |gi| {
                        for (o, &src) in argmax.iter().enumerate() {
                            gi[src] += g[o];
                        }
                    }),
                    Op::BatchNorm {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                        inner,
                        batch_stats,
                    } => {
                        let (n, c) = (node.shape[0], node.shape[1]);
                        let inner = *inner;
                        let m = (n * inner) as f64;
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gx = vec![0.0; c];
                        for img in 0..n {
                            for ch in 0..c {
                                let off = (img * c + ch) * inner;
                                for s in 0..inner {
                                    sum_g[ch] += g[off + s];
                                    sum_gx[ch] += g[off + s] * xhat[off + s];
                                }
                            }
                        }
                        acc(*beta, &mut |gb| add_into(gb, &sum_g));
                        acc(*gamma, &mut |gg| add_into(gg, &sum_gx));
                        let gam = &nodes[gamma.0].data;
                        acc(*input, &mut |gi| {
                            for img in 0..n {
                                for ch in 0..c {
                                    let off = (img * c + ch) * inner;
                                    let k = gam[ch] * inv_std[ch];
                                    for s in 0..inner {
                                        let i = off + s;
                                        gi[i] += if *batch_stats {
                                            k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                        } else {
                                            k * g[i]
                                        };
                                    }
                                }
                            }
                        });
                    }
                    Op::Mask { input, mask } => acc(*input, &mut |gi| {
                        for ((d, x), m) in gi.iter_mut().zip(&g).zip(mask) {
                            *d += x * m;
                        }
                    }),
                    Op::Custom { inputs, vjp } => {
                        let parts = vjp(&g);
                        for (v, gp) in inputs.iter().zip(parts) {
                            acc(*v, &mut |gi| add_into(gi, &gp));
                        }
                    }
                }
            }
            drop(op);
            // consumers all have higher indices, so the activation is dead now
            nodes[idx].data = Vec::new();
            grads[idx] = Some(g);
        }
        Gradients {
            node_grads: grads,
            params,
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_backward(
    nodes: &[Node],
    acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    input: Var,
    kernels: Var,
    bias: Var,
    g: &[f64],
) {
    let (n, ci, h, w) = {
        let s = &nodes[input.0].shape;
        (s[0], s[1], s[2], s[3])
    };
    let co = nodes[kernels.0].shape[0];
    let x = &nodes[input.0].data;
    let k = &nodes[kernels.0].data;
    acc(bias, &mut |gb| {
        for img in 0..n {
            for o in 0..co {
                let plane = &g[(img * co + o) * h * w..(img * co + o + 1) * h * w];
                gb[o] += plane.iter().sum::<f64>();
            }
        }
    });
    let ranges = |d: usize, len: usize| -> (usize, usize) {
        (if d == 0 { 1 } else { 0 }, if d == 2 { len - 1 } else { len })
    };
    acc(kernels, &mut |gk| {
        for img in 0..n {
            for o in 0..co {
                let gp = &g[(img * co + o) * h * w..(img * co + o + 1) * h * w];
                for c in 0..ci {
                    let src = &x[(img * ci + c) * h * w..(img * ci + c + 1) * h * w];
                    for di in 0..3 {
                        let (ilo, ihi) = ranges(di, h);
                        for dj in 0..3 {
                            let (jlo, jhi) = ranges(dj, w);
                            let mut s = 0.0;
                            for i in ilo..ihi {
                                let si = i + di - 1;
                                let grow = &gp[i * w..(i + 1) * w];
                                let srow = &src[si * w..(si + 1) * w];
                                for j in jlo..jhi {
                                    s += grow[j] * srow[j + dj - 1];
                                }
                            }
                            gk[((o * ci + c) * 3 + di) * 3 + dj] += s;
                        }
                    }
                }
            }
        }
    });
    acc(input, &mut |gi| {
        for img in 0..n {
            for o in 0..co {
                let gp = &g[(img * co + o) * h * w..(img * co + o + 1) * h * w];
                for c in 0..ci {
                    let dst = &mut gi[(img * ci + c) * h * w..(img * ci + c + 1) * h * w];
                    for di in 0..3 {
                        let (ilo, ihi) = ranges(di, h);
                        for dj in 0..3 {
                            let (jlo, jhi) = ranges(dj, w);
                            let kv = k[((o * ci + c) * 3 + di) * 3 + dj];
                            if kv == 0.0 {
                                continue;
                            }
                            for i in ilo..ihi {
                                let si = i + di - 1;
                                let grow = &gp[i * w..(i + 1) * w];
                                let drow = &mut dst[si * w..(si + 1) * w];
                                for j in jlo..jhi {
                                    drow[j + dj - 1] += kv * grow[j];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}
