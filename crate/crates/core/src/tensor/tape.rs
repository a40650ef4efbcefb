use super::kernels;
use super::{consts, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, Scalar),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<Scalar> },
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Resample { x: Var, taps: Vec<[(usize, Scalar); 4]> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::SumRows(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, .. } | Op::Gather { x, .. } | Op::Resample { x, .. } => vec![*x],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records executed ops so that [`Tape::backward`] can replay them in reverse.
///
/// Nodes are appended in execution order, so reverse insertion order is a
/// reverse topological order of the graph. Every op checks its output for
/// NaN/Inf and fails with the op's name instead of propagating it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    #[cfg(test)]
    pub(crate) visit_log: Vec<usize>,
}

const GELU_C: Scalar = 0.044_715;

fn gelu_inner(x: Scalar) -> Scalar {
    (2.0 / consts::PI).sqrt() * (x + GELU_C * x * x * x)
}

/// Tanh-approximated GELU, shared by the tape op and eager callers.
pub fn gelu_scalar(x: Scalar) -> Scalar {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

fn gelu_grad(x: Scalar) -> Scalar {
    let t = gelu_inner(x).tanh();
    let du = (2.0 / consts::PI).sqrt() * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: Scalar) -> Scalar {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[Scalar], n: usize, out: &mut [Scalar]) {
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let mut s = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
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

    /// Gradient of the last `backward` call with respect to a leaf.
    /// `None` for leaves that do not require grad or were not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Whether `out` was computed (directly or transitively) from `input`.
    pub fn depends_on(&self, out: Var, input: Var) -> bool {
        if input.0 > out.0 {
            return false;
        }
        let mut reach = vec![false; out.0 + 1];
        reach[out.0] = true;
        for i in (input.0..=out.0).rev() {
            if reach[i] {
                if i == input.0 {
                    return true;
                }
                for v in self.nodes[i].op.inputs() {
                    reach[v.0] = true;
                }
            }
        }
        false
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(Scalar) -> Scalar) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    /// `a[..×k] · b[k×n] → [..×n]`; `a` is treated as a stack of rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (k, n) = match tb.shape() {
            &[k, n] => (k, n),
            _ => return Err(Error::shape("matmul", ta.shape(), tb.shape())),
        };
        if ta.ndim() < 2 || ta.last_dim() != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let m = ta.rows();
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a[..×k] · b[n×k]ᵀ → [..×n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = match tb.shape() {
            &[n, k] => (n, k),
            _ => return Err(Error::shape("matmul_nt", ta.shape(), tb.shape())),
        };
        if ta.ndim() < 2 || ta.last_dim() != k {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let m = ta.rows();
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        self.push("matmul_nt", value, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a `[n]` vector to every row of `x[..×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.last_dim();
        if tb.len() != n || tb.ndim() != 1 {
            return Err(Error::shape("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        self.push("add_row", value, Op::AddRow(x, b), &[x, b])
    }

    /// Multiplies every row of `x[..×n]` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = tx.last_dim();
        if ts.len() != n || ts.ndim() != 1 {
            return Err(Error::shape("mul_row", tx.shape(), ts.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &sv) in row.iter_mut().zip(ts.data()) {
                *o *= sv;
            }
        }
        let value = Tensor::new(tx.shape(), data)?;
        self.push("mul_row", value, Op::MulRow(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: Scalar) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid_scalar)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, Op::Gelu(x), gelu_scalar)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if n == 0 {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let mut out = vec![0.0; tx.len()];
        softmax_rows(tx.data(), n, &mut out);
        let value = Tensor::new(tx.shape(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if n == 0 {
            return Err(Error::InvalidArgument("log_softmax over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(n) {
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<Scalar>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(x), &[x])
    }

    /// Standardizes each last-axis row to zero mean and unit variance
    /// (biased variance, `eps` added inside the square root). No affine.
    pub fn layer_norm(&mut self, x: Var, eps: Scalar) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let n = tx.last_dim();
        if n == 0 {
            return Err(Error::InvalidArgument("layer_norm over an empty axis".into()));
        }
        let mut out = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        for row in tx.data().chunks(n) {
            let mean = row.iter().sum::<Scalar>() / n as Scalar;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / n as Scalar;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Sum of all elements, as a scalar (compensated).
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as Scalar)
    }

    /// Sums `x[..×n]` over all leading axes, giving `[n]` (compensated).
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let value = Tensor::new(&[n], kernels::column_sums(tx.data(), n))?;
        self.push("sum_rows", value, Op::SumRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.len()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                tx.len()
            )));
        }
        let data = index.iter().map(|&i| tx.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Columns `[start, start+len)` of a `[..×n]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if start + len > n {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let rows = tx.rows();
        let index = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * n + c))
            .collect();
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.gather(x, index, &shape)
    }

    /// Rows `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", tx.shape(), &[start, len]));
        }
        let index = (start * n..(start + len) * n).collect();
        self.gather(x, index, &[len, n])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("transpose")?;
        let index = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.gather(x, index, &[n, m])
    }

    /// Concatenates `[..×n_i]` tensors with equal leading shape along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let lead = self.value(first).shape()[..self.value(first).ndim() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_cols", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let n = t.last_dim();
                data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Concatenates 2-D tensors with equal column count along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, n) = self.value(first).dims2("concat_rows")?;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            match t.shape() {
                &[mi, ni] if ni == n => {
                    m += mi;
                    data.extend_from_slice(t.data());
                }
                s => return Err(Error::shape("concat_rows", self.shape(first), s)),
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Bilinear resampling of a `[h×w×c]` grid to `[out_h×out_w×c]`
    /// using half-pixel centres (edge-clamped).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (h, w, c) = match tx.shape() {
            &[h, w, c] if h > 0 && w > 0 => (h, w, c),
            s => return Err(Error::shape("bilinear_resize", s, &[0, 0, 0])),
        };
        let axis = |o: usize, out: usize, inp: usize| -> (usize, usize, Scalar) {
            let src = ((o as Scalar + 0.5) * inp as Scalar / out as Scalar - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, src - i0 as Scalar)
        };
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let (y0, y1, fy) = axis(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = axis(ox, out_w, w);
                taps.push([
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ]);
            }
        }
        let mut out = vec![0.0; out_h * out_w * c];
        for (o, tap) in out.chunks_mut(c).zip(&taps) {
            for &(pix, wt) in tap {
                let src = &tx.data()[pix * c..(pix + 1) * c];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov += wt * sv;
                }
            }
        }
        let value = Tensor::new(&[out_h, out_w, c], out)?;
        self.push("bilinear_resize", value, Op::Resample { x, taps }, &[x])
    }

    /// Back-propagates from a scalar `loss`, filling [`Tape::grad`] for every
    /// leaf that requires grad and is an ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<Scalar>>> = vec![None; n];
        self.grads = vec![None; n];
        #[cfg(test)]
        self.visit_log.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            #[cfg(test)]
            self.visit_log.push(i);
            let nodes = &self.nodes;
            let node = &nodes[i];
            let out = node.value.data();
            // Accumulates into the gradient buffer of `v` if it needs one.
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Scalar])| {
                let src = &nodes[v.0];
                if src.requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; src.value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    self.grads[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (k, nn) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.rows();
                    acc(*a, &mut |buf| {
                        let mut tmp = vec![0.0; m * k];
                        kernels::matmul_nt(&g, tb.data(), &mut tmp, m, nn, k);
                        add_into(buf, &tmp);
                    });
                    acc(*b, &mut |buf| {
                        let mut tmp = vec![0.0; k * nn];
                        kernels::matmul_tn(ta.data(), &g, &mut tmp, m, k, nn);
                        add_into(buf, &tmp);
                    });
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (nn, k) = (tb.shape()[0], tb.shape()[1]);
                    let m = ta.rows();
                    acc(*a, &mut |buf| {
                        let mut tmp = vec![0.0; m * k];
                        kernels::matmul_nn(&g, tb.data(), &mut tmp, m, nn, k);
                        add_into(buf, &tmp);
                    });
                    acc(*b, &mut |buf| {
                        let mut tmp = vec![0.0; nn * k];
                        kernels::matmul_tn(&g, ta.data(), &mut tmp, m, nn, k);
                        add_into(buf, &tmp);
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| add_into(buf, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o -= gv;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(*a, &mut |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(&g).zip(tb) {
                            *o += gv * bv;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(&g).zip(ta) {
                            *o += gv * av;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let tb = nodes[b.0].value.data();
                    acc(*a, &mut |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(&g).zip(tb) {
                            *o += gv / bv;
                        }
                    });
                    acc(*b, &mut |buf| {
                        for (((o, &gv), &bv), &yv) in buf.iter_mut().zip(&g).zip(tb).zip(out) {
                            *o -= gv * yv / bv;
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    let nc = nodes[b.0].value.len();
                    acc(*x, &mut |buf| add_into(buf, &g));
                    acc(*b, &mut |buf| {
                        for row in g.chunks(nc) {
                            add_into(buf, row);
                        }
                    });
                }
                Op::MulRow(x, s) => {
                    let (tx, ts) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                    let nc = ts.len();
                    acc(*x, &mut |buf| {
                        for (brow, grow) in buf.chunks_mut(nc).zip(g.chunks(nc)) {
                            for ((o, &gv), &sv) in brow.iter_mut().zip(grow).zip(ts) {
                                *o += gv * sv;
                            }
                        }
                    });
                    acc(*s, &mut |buf| {
                        for (grow, xrow) in g.chunks(nc).zip(tx.chunks(nc)) {
                            for ((o, &gv), &xv) in buf.iter_mut().zip(grow).zip(xrow) {
                                *o += gv * xv;
                            }
                        }
                    });
                }
                Op::Scale(x, c) => {
                    acc(*x, &mut |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o += c * gv;
                        }
                    });
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    acc(*x, &mut |buf| add_into(buf, &g));
                }
                Op::Relu(x) => {
                    let tx = nodes[x.0].value.data();
                    acc(*x, &mut |buf| {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(&g).zip(tx) {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    acc(*x, &mut |buf| {
                        for ((o, &gv), &yv) in buf.iter_mut().zip(&g).zip(out) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let tx = nodes[x.0].value.data();
                    acc(*x, &mut |buf| {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(&g).zip(tx) {
                            *o += gv * gelu_grad(xv);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let nc = node.value.last_dim();
                    acc(*x, &mut |buf| {
                        for ((brow, grow), yrow) in buf.chunks_mut(nc).zip(g.chunks(nc)).zip(out.chunks(nc)) {
                            let dot: Scalar = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((o, &gv), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                                *o += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(x) => {
                    let nc = node.value.last_dim();
                    acc(*x, &mut |buf| {
                        for ((brow, grow), yrow) in buf.chunks_mut(nc).zip(g.chunks(nc)).zip(out.chunks(nc)) {
                            let gsum: Scalar = grow.iter().sum();
                            for ((o, &gv), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                                *o += gv - yv.exp() * gsum;
                            }
                        }
                    });
                }
                Op::LayerNorm { x, inv_std } => {
                    let nc = node.value.last_dim();
                    let nf = nc as Scalar;
                    acc(*x, &mut |buf| {
                        for (((brow, grow), yrow), &inv) in buf
                            .chunks_mut(nc)
                            .zip(g.chunks(nc))
                            .zip(out.chunks(nc))
                            .zip(inv_std)
                        {
                            let gmean = grow.iter().sum::<Scalar>() / nf;
                            let gymean = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<Scalar>() / nf;
                            for ((o, &gv), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                                *o += inv * (gv - gmean - yv * gymean);
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    acc(*x, &mut |buf| {
                        for o in buf.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::SumRows(x) => {
                    let nc = g.len();
                    acc(*x, &mut |buf| {
                        for brow in buf.chunks_mut(nc) {
                            add_into(brow, &g);
                        }
                    });
                }
                Op::Gather { x, index } => {
                    acc(*x, &mut |buf| {
                        for (&ix, &gv) in index.iter().zip(&g) {
                            buf[ix] += gv;
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.last_dim();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let np = nodes[p.0].value.last_dim();
                        acc(*p, &mut |buf| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + np];
                                add_into(&mut buf[r * np..(r + 1) * np], src);
                            }
                        });
                        offset += np;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Op::Resample { x, taps } => {
                    let c = node.value.last_dim();
                    acc(*x, &mut |buf| {
                        for (grow, tap) in g.chunks(c).zip(taps) {
                            for &(pix, wt) in tap {
                                for (o, &gv) in buf[pix * c..(pix + 1) * c].iter_mut().zip(grow) {
                                    *o += wt * gv;
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
