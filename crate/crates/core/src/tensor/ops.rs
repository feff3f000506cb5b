use super::tape::{Op, Tape, Var};
use super::{gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Exp,
    Tanh,
    Silu,
    Relu,
    Log,
    LogSigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Silu => "silu",
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::LogSigmoid => "log_sigmoid",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Log => x.ln(),
            Unary::LogSigmoid => log_sigmoid(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::LogSigmoid => sigmoid(-x),
        }
    }

    pub(crate) fn backward(self, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
        let d = x
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&x, &y), &g)| g * self.derivative(x, y))
            .collect();
        Tensor {
            shape: x.shape().to_vec(),
            data: d,
        }
    }
}

/// Number of times `small` repeats inside `big` when `small` is a suffix of
/// `big`'s shape (scalars are the empty suffix).
fn broadcast_reps(big: &[usize], small: &[usize]) -> Option<usize> {
    if big.ends_with(small) {
        let n: usize = small.iter().product();
        let m: usize = big.iter().product();
        Some(m.checked_div(n).unwrap_or(0))
    } else {
        None
    }
}

/// Sum `g` over its leading axes down to `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n > 0 {
        for chunk in g.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

pub(crate) fn mul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let n = b.numel();
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; n];
    if n > 0 {
        for ((da, ga), aa) in da
            .chunks_mut(n)
            .zip(g.data().chunks(n))
            .zip(a.data().chunks(n))
        {
            for j in 0..n {
                da[j] = ga[j] * b.data()[j];
                db[j] += ga[j] * aa[j];
            }
        }
    }
    (
        Tensor {
            shape: a.shape().to_vec(),
            data: da,
        },
        Tensor {
            shape: b.shape().to_vec(),
            data: db,
        },
    )
}

enum MatmulKind {
    /// `(…, m, k) @ (k, n)`: the right operand is shared across leading axes.
    Shared { rows: usize, k: usize, n: usize },
    /// `(g, m, k) @ (g, k, n)`.
    Batched {
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatmulKind> {
    match (a.len(), b.len()) {
        (ra, 2) if ra >= 2 && a[ra - 1] == b[0] => Ok(MatmulKind::Shared {
            rows: a[..ra - 1].iter().product(),
            k: b[0],
            n: b[1],
        }),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok(MatmulKind::Batched {
            groups: a[0],
            m: a[1],
            k: a[2],
            n: b[2],
        }),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let mut da = vec![0.0; a.numel()];
    let mut db = vec![0.0; b.numel()];
    match matmul_kind(a.shape(), b.shape()).expect("validated in forward") {
        MatmulKind::Shared { rows, k, n } => {
            // dA = G Bᵀ, dB = Aᵀ G
            gemm(
                rows,
                n,
                k,
                g.data(),
                Layout::row_major(n),
                b.data(),
                Layout::transposed(n),
                0.0,
                &mut da,
            );
            gemm(
                k,
                rows,
                n,
                a.data(),
                Layout::transposed(k),
                g.data(),
                Layout::row_major(n),
                0.0,
                &mut db,
            );
        }
        MatmulKind::Batched { groups, m, k, n } => {
            for i in 0..groups {
                let ga = &g.data()[i * m * n..(i + 1) * m * n];
                let aa = &a.data()[i * m * k..(i + 1) * m * k];
                let bb = &b.data()[i * k * n..(i + 1) * k * n];
                gemm(
                    m,
                    n,
                    k,
                    ga,
                    Layout::row_major(n),
                    bb,
                    Layout::transposed(n),
                    0.0,
                    &mut da[i * m * k..(i + 1) * m * k],
                );
                gemm(
                    k,
                    m,
                    n,
                    aa,
                    Layout::transposed(k),
                    ga,
                    Layout::row_major(n),
                    0.0,
                    &mut db[i * k * n..(i + 1) * k * n],
                );
            }
        }
    }
    (
        Tensor {
            shape: a.shape().to_vec(),
            data: da,
        },
        Tensor {
            shape: b.shape().to_vec(),
            data: db,
        },
    )
}

pub(crate) fn invert(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute_data(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    if n > 0 {
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            out.push(x.data()[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn split_data(g: &Tensor, axis: usize, sizes: &[usize]) -> Vec<Tensor> {
    let (outer, inner) = outer_inner(g.shape(), axis);
    let total: usize = sizes.iter().sum();
    let mut outs: Vec<Vec<f64>> = sizes
        .iter()
        .map(|s| Vec::with_capacity(outer * s * inner))
        .collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (buf, &s) in outs.iter_mut().zip(sizes) {
            buf.extend_from_slice(&g.data()[off..off + s * inner]);
            off += s * inner;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(data, &s)| {
            let mut shape = g.shape().to_vec();
            shape[axis] = s;
            Tensor { shape, data }
        })
        .collect()
}

pub(crate) fn unslice(g: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, inner) = outer_inner(full, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(full);
    for o in 0..outer {
        let dst = (o * full[axis] + start) * inner;
        let src = o * len * inner;
        out.data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    out
}

pub(crate) fn flip_data(x: &Tensor, axis: usize) -> Tensor {
    let (outer, inner) = outer_inner(x.shape(), axis);
    let n = x.shape()[axis];
    let mut out = Vec::with_capacity(x.numel());
    for o in 0..outer {
        for i in (0..n).rev() {
            let s = (o * n + i) * inner;
            out.extend_from_slice(&x.data()[s..s + inner]);
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub(crate) fn layernorm_backward(
    gamma: &Tensor,
    xhat: &[f64],
    rstd: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gamma.numel();
    let mut dx = vec![0.0; g.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (row, ((gr, xr), dxr)) in g
        .data()
        .chunks(d)
        .zip(xhat.chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = gr[j] * gamma.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[j];
            dgamma[j] += gr[j] * xr[j];
            dbeta[j] += gr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = gr[j] * gamma.data()[j];
            dxr[j] = rstd[row] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor {
            shape: g.shape().to_vec(),
            data: dx,
        },
        Tensor {
            shape: gamma.shape().to_vec(),
            data: dgamma,
        },
        Tensor {
            shape: gamma.shape().to_vec(),
            data: dbeta,
        },
    )
}

impl Tape {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.numel();
        broadcast_reps(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(op, ta.shape(), tb.shape()))?;
        let mut out = Vec::with_capacity(ta.numel());
        if n > 0 {
            for chunk in ta.data().chunks(n) {
                out.extend(chunk.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(ta.shape(), out)
    }

    /// Elementwise `a + b`; `b` may broadcast over leading axes of `a` or be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `(…, m, k) @ (k, n)` or batched `(g, m, k) @ (g, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = matmul_kind(ta.shape(), tb.shape())?;
        let (shape, data) = match kind {
            MatmulKind::Shared { rows, k, n } => {
                let mut out = vec![0.0; rows * n];
                gemm(
                    rows,
                    k,
                    n,
                    ta.data(),
                    Layout::row_major(k),
                    tb.data(),
                    Layout::row_major(n),
                    0.0,
                    &mut out,
                );
                let mut shape = ta.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                (shape, out)
            }
            MatmulKind::Batched { groups, m, k, n } => {
                let mut out = vec![0.0; groups * m * n];
                for i in 0..groups {
                    gemm(
                        m,
                        k,
                        n,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        Layout::row_major(k),
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        Layout::row_major(n),
                        0.0,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                (vec![groups, m, n], out)
            }
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// Reorder axes; `axes[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&x| x >= rank || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::arg(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let v = permute_data(self.value(a), axes);
        Ok(self.push(v, Op::Permute(a, axes.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.value(a).shape(), shape))?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *inputs
                    .first()
                    .ok_or_else(|| Error::arg("concat", "no inputs"))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(inputs.to_vec(), axis)))
    }

    /// Copy of `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::InvalidAxis {
                op: "slice",
                axis,
                rank: t.rank(),
            });
        }
        if start > end || end > t.shape()[axis] {
            return Err(Error::arg(
                "slice",
                format!(
                    "range {start}..{end} out of bounds for extent {}",
                    t.shape()[axis]
                ),
            ));
        }
        let (outer, inner) = outer_inner(t.shape(), axis);
        let full = t.shape()[axis];
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[s..s + (end - start) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Slice { x: a, axis, start }))
    }

    pub fn flip_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).flip(axis)?;
        Ok(self.push(v, Op::Flip(a, axis)))
    }

    pub fn apply(&mut self, f: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if f == Unary::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    msg: format!("non-positive input {bad}"),
                });
            }
        }
        let v = x.map(|v| f.eval(v));
        Ok(self.push(v, Op::Unary(a, f)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.apply(Unary::Sigmoid, a).expect("total function")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.apply(Unary::Silu, a).expect("total function")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.apply(Unary::Relu, a).expect("total function")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push(v, Op::Mean(a))
    }

    /// Normalise over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::arg(
                "layernorm",
                format!("eps must be positive, got {eps}"),
            ));
        }
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::arg("layernorm", "rank-0 input"))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("layernorm", t.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel().checked_div(d).unwrap_or(0);
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d.max(1)).take(rows) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-softmax over pixels whose label differs from
    /// `ignore`. `logits` is `(batch, classes, h, w)` and `labels` holds
    /// `batch·h·w` entries. All-ignored input yields a zero loss.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let t = self.value(logits);
        let &[b, k, h, w] = t.shape() else {
            return Err(Error::arg(
                "softmax_cross_entropy",
                format!("logits must be rank 4, got {:?}", t.shape()),
            ));
        };
        if labels.len() != b * h * w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                t.shape(),
                &[labels.len()],
            ));
        }
        let hw = h * w;
        let x = t.data();
        let mut dl = vec![0.0; x.len()];
        let mut total = 0.0;
        // Neumaier compensation; keeps the loss reproducible to about an ulp
        // under tiny parameter changes, which finite differences rely on
        let mut carry = 0.0;
        let mut count = 0usize;
        let mut p = vec![0.0; k];
        for bi in 0..b {
            for s in 0..hw {
                let lab = labels[bi * hw + s];
                if lab == ignore {
                    continue;
                }
                let lab = lab as usize;
                if lab >= k {
                    return Err(Error::arg(
                        "softmax_cross_entropy",
                        format!("label {lab} out of range for {k} classes"),
                    ));
                }
                let base = bi * k * hw + s;
                let mx = (0..k)
                    .map(|c| x[base + c * hw])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    p[c] = (x[base + c * hw] - mx).exp();
                    z += p[c];
                }
                let term = z.ln() + mx - x[base + lab * hw];
                let next = total + term;
                carry += if total.abs() >= term.abs() {
                    (total - next) + term
                } else {
                    (term - next) + total
                };
                total = next;
                for c in 0..k {
                    dl[base + c * hw] = p[c] / z;
                }
                dl[base + lab * hw] -= 1.0;
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            (total + carry) / count as f64
        };
        if count > 0 {
            let inv = 1.0 / count as f64;
            dl.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                dlogits: dl,
            },
        ))
    }
}
