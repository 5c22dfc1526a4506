use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<Option<usize>>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Tensor),
    Floor,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::ConcatRows(..) => "concat_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Floor => "floor",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

// ---- raw kernels -----------------------------------------------------------

/// `c[m,n] += a[m,k] @ b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] @ b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T @ g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(Error::shape("matmul", a, b));
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (true, true) => vec![],
        (false, true) => ab.to_vec(),
        (true, false) => bb.to_vec(),
        (false, false) if ab == bb => ab.to_vec(),
        _ => return Err(Error::shape("matmul", a, b)),
    };
    let mut out_shape = batch_shape.clone();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatMulDims {
        batch: batch_shape.iter().product(),
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        m: am[0],
        k: am[1],
        n: bm[1],
        out_shape,
    })
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- primitives --------------------------------------------------------

    /// Batched matrix product over the trailing two axes. Leading batch axes
    /// must be identical, or absent on one side (shared operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; d.batch.max(1) * d.m * d.n];
        for bi in 0..d.batch.max(1) {
            let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
            let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
            gemm_nn(
                &av[ao..ao + d.m * d.k],
                &bv[bo..bo + d.k * d.n],
                &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        let t = Tensor::new(d.out_shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., n] + bias[n]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x @ w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        Ok(self.push(t, Op::Gelu(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(t, Op::Relu(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        Ok(self.push(t, Op::Sigmoid(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::ln);
        Ok(self.push(t, Op::Log(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        Ok(self.push(t, Op::Abs(x), &[x]))
    }

    /// Not differentiable; backward through it fails with `UnsupportedOp`.
    pub fn floor(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::floor);
        Ok(self.push(t, Op::Floor, &[x]))
    }

    /// Softmax over the trailing axis, with max subtraction. Entries equal to
    /// `-inf` receive exactly zero weight.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let n = src.last_dim();
        let mut t = src.clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::Numeric("softmax row fully masked".into()));
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::Numeric("non-finite input to log_softmax".into()));
        }
        let n = src.last_dim();
        let mut t = src.clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// Layer normalization over the trailing axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.numel() / n;
        let mut xhat = vec![0.0; src.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.numel()];
        for r in 0..rows {
            let row = &src.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Row gather along axis 0. `None` produces a zero row (padding).
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let src = self.value(x);
        let rows = src.shape()[0];
        let width = src.numel() / rows;
        if index.is_empty() {
            return Err(Error::Contract("gather with empty index".into()));
        }
        let mut out = vec![0.0; index.len() * width];
        for (o, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(Error::Contract(format!("gather index {i} out of {rows} rows")));
                }
                out[o * width..(o + 1) * width].copy_from_slice(&src.data()[i * width..(i + 1) * width]);
            }
        }
        let mut shape = src.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather(x, index), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        Ok(self.push(t, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swap the trailing two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Concatenate along axis 0; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        Ok(self.push(t, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        Ok(self.push(t, Op::Mean(x), &[x]))
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let x = self.value(logits);
        let data = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::BceWithLogits(logits, targets), &[logits]))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        // keep only leaves that asked for gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let d = matmul_dims(self.shape(*a), self.shape(*b))?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let gd = g.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..d.batch.max(1) {
                    let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                    let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                    let go = bi * d.m * d.n;
                    let gs = &gd[go..go + d.m * d.n];
                    if self.nodes[a.0].requires_grad {
                        gemm_nt(gs, &bv[bo..bo + d.k * d.n], &mut ga[ao..ao + d.m * d.k], d.m, d.k, d.n);
                    }
                    if self.nodes[b.0].requires_grad {
                        gemm_tn(&av[ao..ao + d.m * d.k], gs, &mut gb[bo..bo + d.k * d.n], d.m, d.k, d.n);
                    }
                }
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, like(*a, ga));
                self.accumulate(grads, *b, like(*b, gb));
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *bias, like(*bias, gb));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = g.data().iter().zip(xv).map(|(gv, &v)| gv * gelu_parts(v).1).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx = g.data().iter().zip(xv).map(|(gv, v)| gv / v).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let gx = g.data().iter().zip(xv).map(|(gv, v)| gv * v.signum() * (*v != 0.0) as u8 as f64).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Softmax(x) => {
                let n = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::LogSoftmax(x) => {
                let n = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        gx[r * n + j] = is * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
                self.accumulate(grads, *gain, like(*gain, gg));
                self.accumulate(grads, *bias, like(*bias, gbias));
            }
            Op::Gather(x, index) => {
                let src = self.value(*x);
                let width = src.numel() / src.shape()[0];
                let mut gx = vec![0.0; src.numel()];
                for (o, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        let go = &g.data()[o * width..(o + 1) * width];
                        for (acc, v) in gx[i * width..(i + 1) * width].iter_mut().zip(go) {
                            *acc += v;
                        }
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, like(*x, g.data().to_vec())),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, like(p, g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, like(*x, vec![g.item(); n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, like(*x, vec![g.item() / n as f64; n]));
            }
            Op::BceWithLogits(x, targets) => {
                let xv = self.value(*x).data();
                let gx = g
                    .data()
                    .iter()
                    .zip(xv)
                    .zip(targets.data())
                    .map(|((gv, &z), &t)| gv * (sigmoid(z) - t))
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Floor => return Err(Error::UnsupportedOp(node.op.name())),
        }
        Ok(())
    }
}
