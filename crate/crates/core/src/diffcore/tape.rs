use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    /// Raw natural log. Errors on non-positive input; callers clamp.
    Log,
    Sigmoid,
    LogSigmoid,
    Gelu,
    Tanh,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// How the two operands of a binary op index into the output.
#[derive(Debug)]
enum Bcast {
    Same,
    /// `b` repeats over the leading dims of `a`.
    RepeatB,
    /// `a` repeats over the leading dims of `b`.
    RepeatA,
    General { ia: Vec<usize>, ib: Vec<usize> },
}

impl Bcast {
    /// Visit `(out_index, a_index, b_index)` for every output element.
    #[inline]
    fn for_each(&self, n: usize, na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Bcast::Same => (0..n).for_each(|i| f(i, i, i)),
            Bcast::RepeatB => {
                for c in 0..n / nb {
                    let base = c * nb;
                    (0..nb).for_each(|j| f(base + j, base + j, j));
                }
            }
            Bcast::RepeatA => {
                for c in 0..n / na {
                    let base = c * na;
                    (0..na).for_each(|j| f(base + j, j, base + j));
                }
            }
            Bcast::General { ia, ib } => (0..n).for_each(|i| f(i, ia[i], ib[i])),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather {
        a: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Reduce {
        a: Var,
        kind: ReduceOp,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedMean {
        a: Var,
        mask: Vec<f64>,
        denom: Vec<f64>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        a: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        a: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp used by masked means so an all-zero mask yields 0 rather than NaN.
pub const MASK_EPS: f64 = 1e-9;

/// Define-by-run record of tensor operations, replayed in reverse by
/// [`Tape::backward`]. Nodes are appended in execution order, so every
/// node's parents precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copy of `v`'s value as a constant: gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Every leaf that currently holds a gradient.
    pub fn leaves_with_grad(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.leaf_grads[i].is_some())
            .map(Var)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        if kind == UnaryOp::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let y = x.map(|v| kernels::unary_forward(kind, v));
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::Unary(kind, a), rg))
    }

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (shape, bc) = broadcast(ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.numel(), tb.numel());
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; n];
        macro_rules! fill {
            ($f:expr) => {
                bc.for_each(n, na, nb, |i, ia, ib| out[i] = $f(da[ia], db[ib]))
            };
        }
        match kind {
            BinaryOp::Add => fill!(|x, y| x + y),
            BinaryOp::Sub => fill!(|x, y| x - y),
            BinaryOp::Mul => fill!(|x, y| x * y),
            BinaryOp::Div => fill!(|x: f64, y| x / y),
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("infallible")
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("infallible")
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("infallible")
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::LogSigmoid, a).expect("infallible")
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a).expect("infallible")
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("infallible")
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a).expect("infallible")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(y, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(y, Op::AddScalar(a), rg)
    }

    // ── linear algebra & layout ─────────────────────────────────────

    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`
    /// with identical leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(Error::Shape(format!("matmul batch dims differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                kernels::gemm(batch * m, k, n, da, k, 1, db, n, 1, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &da[i * m * k..],
                        k,
                        1,
                        &db[i * k * n..],
                        n,
                        1,
                        &mut out[i * m * n..],
                        0.0,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, src: Vec<usize>) -> Result<Var> {
        let data = {
            let d = self.value(a).data();
            src.iter().map(|&i| d[i]).collect()
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Gather { a, src }, rg))
    }

    /// Reorder dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = shape.iter().product();
        let mut src = Vec::with_capacity(n);
        if rank == 0 {
            src.push(0);
        } else if n > 0 {
            let (inner, inner_stride) = (out_shape[rank - 1], strides[rank - 1]);
            let mut idx = vec![0usize; rank - 1];
            let mut base = 0usize;
            'outer: loop {
                src.extend((0..inner).map(|j| base + j * inner_stride));
                for d in (0..rank - 1).rev() {
                    idx[d] += 1;
                    base += strides[d];
                    if idx[d] < out_shape[d] {
                        continue 'outer;
                    }
                    base -= strides[d] * idx[d];
                    idx[d] = 0;
                }
                break;
            }
        }
        self.gather(a, out_shape, src)
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::Reshape(a), rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, dim, inner) = split3(&shape, axis);
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                src.extend((0..inner).map(|i| (o * dim + l) * inner + i));
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(a, out_shape, src)
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != *tail {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with trailing {tail:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split3(&shape, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..][..inner];
                for (acc, x) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if kind == ReduceOp::Mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Reduce {
                a,
                kind,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// Mean over `axis` of the positions where `mask` is 1. `mask` has the
    /// shape of `a` truncated after `axis`; the denominator is clamped at
    /// [`MASK_EPS`]. Masked-out values never enter the sum.
    pub fn masked_mean(&mut self, a: Var, mask: &Tensor, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        if mask.shape() != &shape[..=axis] {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match {:?}",
                mask.shape(),
                &shape[..=axis]
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("mask must be 0/1-valued".into()));
        }
        let (outer, len, inner) = split3(&shape, axis);
        let md = mask.data();
        let denom: Vec<f64> = (0..outer)
            .map(|o| md[o * len..][..len].iter().sum::<f64>().max(MASK_EPS))
            .collect();
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                if md[o * len + l] == 0.0 {
                    continue;
                }
                let row = &d[(o * len + l) * inner..][..inner];
                for (acc, x) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
            out[o * inner..][..inner]
                .iter_mut()
                .for_each(|x| *x /= denom[o]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MaskedMean {
                a,
                mask: md.to_vec(),
                denom,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    // ── row-wise normalizations (last axis) ─────────────────────────

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = last_dim(x)?;
        let mut y = x.data().to_vec();
        y.chunks_mut(cols).for_each(kernels::softmax_row);
        let y = Tensor::new(x.shape(), y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::Softmax(a), rg))
    }

    /// Numerically stable log-softmax (row max subtracted first).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = last_dim(x)?;
        let mut y = x.data().to_vec();
        y.chunks_mut(cols).for_each(kernels::log_softmax_row);
        let y = Tensor::new(x.shape(), y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::LogSoftmax(a), rg))
    }

    /// Normalize each row to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let cols = last_dim(x)?;
        let rows = x.numel() / cols;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in x.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            xhat.extend(row.iter().map(|v| (v - mean) * r));
            rstd.push(r);
        }
        let y = Tensor::new(x.shape(), xhat.clone())?;
        let rg = self.rg(&[a]);
        Ok(self.push(y, Op::LayerNorm { a, xhat, rstd }, rg))
    }

    // ── indexing ────────────────────────────────────────────────────

    /// Rows of `table` (`[V, d]`) selected by `ids`; output `[ids_shape.., d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape("embedding table must be rank 2".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape("ids length does not match ids_shape".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("token id {id} >= vocab size {v}")));
            }
            out.extend_from_slice(&t.data()[id * d..][..d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// For `a` of shape `[.., V]`, pick entry `ids[r]` from row `r`.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = last_dim(t)?;
        let rows = t.numel() / cols;
        if ids.len() != rows {
            return Err(Error::Shape(format!("pick: {} ids for {rows} rows", ids.len())));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(Error::Shape(format!("pick index {id} >= {cols}")));
            }
            out.push(t.data()[r * cols + id]);
        }
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Pick {
                a,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Accumulate d(loss)/d(leaf) into every trainable leaf reachable from
    /// `loss`. Repeated calls add to existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&self.nodes, node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
            }
        }
        Ok(())
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::Shape(format!("row op needs a non-empty last dim, got {:?}", t.shape()))),
    }
}

/// Numpy-style broadcasting on trailing dimensions.
fn broadcast(sa: &[usize], sb: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if sa == sb {
        return Ok((sa.to_vec(), Bcast::Same));
    }
    let na: usize = sa.iter().product();
    let nb: usize = sb.iter().product();
    if sb.len() <= sa.len() && sa.ends_with(sb) && nb > 0 {
        return Ok((sa.to_vec(), Bcast::RepeatB));
    }
    if sa.len() <= sb.len() && sb.ends_with(sa) && na > 0 {
        return Ok((sb.to_vec(), Bcast::RepeatA));
    }
    let rank = sa.len().max(sb.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(sa), pad(sb));
    let mut shape = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        shape.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return Err(Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}"))),
        });
    }
    let strides = |p: &[usize]| {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if p[d] == 1 { 0 } else { acc };
            acc *= p[d];
        }
        st
    };
    let (sta, stb) = (strides(&pa), strides(&pb));
    let n: usize = shape.iter().product();
    let (mut ia, mut ib) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        ia.push(idx.iter().zip(&sta).map(|(i, s)| i * s).sum());
        ib.push(idx.iter().zip(&stb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((shape, Bcast::General { ia, ib }))
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` is not
/// differentiable.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = nodes[a.0].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::unary_derivative(*kind, x[i], y[i]);
                }
            }
        }
        Op::Binary(kind, a, b, bc) => {
            let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let (na, nb, n) = (xa.len(), xb.len(), g.len());
            if let Some(ga) = slot(nodes, grads, *a) {
                match kind {
                    BinaryOp::Add | BinaryOp::Sub => bc.for_each(n, na, nb, |i, ia, _| ga[ia] += g[i]),
                    BinaryOp::Mul => bc.for_each(n, na, nb, |i, ia, ib| ga[ia] += g[i] * xb[ib]),
                    BinaryOp::Div => bc.for_each(n, na, nb, |i, ia, ib| ga[ia] += g[i] / xb[ib]),
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                match kind {
                    BinaryOp::Add => bc.for_each(n, na, nb, |i, _, ib| gb[ib] += g[i]),
                    BinaryOp::Sub => bc.for_each(n, na, nb, |i, _, ib| gb[ib] -= g[i]),
                    BinaryOp::Mul => bc.for_each(n, na, nb, |i, ia, ib| gb[ib] += g[i] * xa[ia]),
                    BinaryOp::Div => bc.for_each(n, na, nb, |i, ia, ib| gb[ib] += -g[i] * xa[ia] / (xb[ib] * xb[ib])),
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
        }
        Op::MatMul {
            a,
            b,
            shared_b,
            batch,
            m,
            k,
            n,
        } => {
            let (m, k, n, batch) = (*m, *k, *n, *batch);
            let xa = nodes[a.0].value.data();
            let xb = nodes[b.0].value.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = G · Bᵀ
                if *shared_b {
                    kernels::gemm(batch * m, n, k, g, n, 1, xb, 1, n, ga, 1.0);
                } else {
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            n,
                            1,
                            &xb[i * k * n..],
                            1,
                            n,
                            &mut ga[i * m * k..],
                            1.0,
                        );
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Aᵀ · G
                if *shared_b {
                    kernels::gemm(k, batch * m, n, xa, 1, k, g, n, 1, gb, 1.0);
                } else {
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &xa[i * m * k..],
                            1,
                            k,
                            &g[i * m * n..],
                            n,
                            1,
                            &mut gb[i * k * n..],
                            1.0,
                        );
                    }
                }
            }
        }
        Op::Gather { a, src } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (gi, &s) in g.iter().zip(src) {
                    ga[s] += gi;
                }
            }
        }
        Op::Reduce {
            a,
            kind,
            outer,
            len,
            inner,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let f = if *kind == ReduceOp::Mean { 1.0 / len as f64 } else { 1.0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let go = &g[o * inner..][..inner];
                    for l in 0..len {
                        let row = &mut ga[(o * len + l) * inner..][..inner];
                        row.iter_mut().zip(go).for_each(|(x, gi)| *x += f * gi);
                    }
                }
            }
        }
        Op::MaskedMean {
            a,
            mask,
            denom,
            outer,
            len,
            inner,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let go = &g[o * inner..][..inner];
                    for l in 0..len {
                        let w = mask[o * len + l] / denom[o];
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut ga[(o * len + l) * inner..][..inner];
                        row.iter_mut().zip(go).for_each(|(x, gi)| *x += w * gi);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let f = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += f);
            }
        }
        Op::Softmax(a) => {
            let cols = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let cols = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { a, xhat, rstd } => {
            let cols = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, ((gr, xr), out)) in g
                    .chunks(cols)
                    .zip(xhat.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        out[j] += rstd[r] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..][..d];
                    dst.iter_mut().zip(&g[r * d..][..d]).for_each(|(x, gi)| *x += gi);
                }
            }
        }
        Op::Pick { a, ids } => {
            let cols = *nodes[a.0].value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &id) in ids.iter().enumerate() {
                    ga[r * cols + id] += g[r];
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, gi)| *x += gi);
                }
                off += len;
            }
        }
    }
}
