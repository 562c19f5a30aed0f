//! Recording tape and reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value together with
//! whatever the backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse and returns the gradients of the leaves.

use std::borrow::Cow;

use crate::error::{config_err, dim_err, Result, TensorError};
use crate::kernels::{self, gemm_acc, gemm_nt_acc, gemm_tn_acc, sum_rows_acc};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct ConvDims {
    batch: usize,
    // conv1d: (frames, tokens); conv2d: (height, width)
    outer: usize,
    inner: usize,
    cin: usize,
    cout: usize,
    ksize: usize,
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        offsets: Vec<(usize, usize)>,
    },
    MatMulNt {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    MulScalar {
        a: Var,
        s: Var,
    },
    Recip {
        a: Var,
    },
    Exp {
        a: Var,
    },
    ClampMin {
        a: Var,
        min: f64,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    Normalize {
        a: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    TemporalDiff {
        a: Var,
        outer: usize,
        steps: usize,
        inner: usize,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Slice {
        a: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    IndexSelect {
        a: Var,
        idx: Vec<usize>,
        row: usize,
    },
    MeanAxis {
        a: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    DotConst {
        a: Var,
        w: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations. Parameters are borrowed from a
/// [`ParamStore`] for the lifetime `'p`.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a leaf variable, if it was reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf that received one, in tape order.
    /// A parameter loaded more than once appears once per load.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.leaves[node].as_deref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the matching trainable parameter.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // Copy contiguous runs when the innermost axis stays in place.
    let run = if axes[rank - 1] == rank - 1 {
        shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    while out.len() < total {
        if run > 1 {
            out.extend_from_slice(&data[off..off + run]);
        } else {
            out.push(data[off]);
        }
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return None;
        }
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total = numel(&out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        offsets.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, offsets))
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- leaves -------------------------------------------------------

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, false, Op::Leaf { param: None })
    }

    /// A leaf whose gradient is tracked, independent of any parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, true, Op::Leaf { param: None })
    }

    /// A leaf borrowing a tensor; tracks gradients when the tensor asks for them.
    pub fn borrowed(&mut self, t: &'p Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf { param: None },
        )
    }

    /// Loads a parameter. Frozen parameters enter as constants so no
    /// gradient work is spent on them.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(
            Cow::Borrowed(p.tensor.data()),
            p.tensor.shape().to_vec(),
            p.trainable,
            Op::Leaf { param: Some(id) },
        )
    }

    // ----- linear algebra -----------------------------------------------

    /// `x[..., k] · w[k, n] (+ b[n])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(dim_err("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err("linear bias", self.shape(b), &[n]));
            }
        }
        let rows = numel(&xs) / k;
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bias = self.value(b);
            for r in out.chunks_exact_mut(n) {
                r.copy_from_slice(bias);
            }
        }
        gemm_acc(rows, k, n, self.value(x), self.value(w), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Linear { x, w, b }))
    }

    /// Batched matrix product `a[..., m, k] · b[..., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(dim_err("matmul", &sa, &sb));
        }
        if sb.len() == 2 {
            return self.linear(a, b, None);
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch, offsets) = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| dim_err("matmul", &sa, &sb))?;
        let mut out = vec![0.0; offsets.len() * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                gemm_acc(
                    m,
                    k,
                    n,
                    &av[oa * m * k..(oa + 1) * m * k],
                    &bv[ob * k * n..(ob + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                offsets,
            },
        ))
    }

    /// `a[..., m, k] · b[..., n, k]ᵀ` with identical batch dimensions.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        if ra < 2
            || sb.len() != ra
            || sa[..ra - 2] != sb[..ra - 2]
            || sa[ra - 1] != sb[ra - 1]
        {
            return Err(dim_err("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[ra - 2]);
        let batch = numel(&sa[..ra - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                gemm_nt_acc(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[bi * n * k..(bi + 1) * n * k],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::MatMulNt {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    // ----- elementwise --------------------------------------------------

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("add", &sa, sb));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), sa, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(dim_err("sub", &sa, self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), sa, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(dim_err("mul", &sa, self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Cow::Owned(out), sa, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), shape, rg, Op::Scale { a, c })
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, s]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::MulScalar { a, s }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(out), shape, rg, op)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// `max(a, min)`; the gradient is blocked where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, |x| x.max(min), Op::ClampMin { a, min })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu { a })
    }

    // ----- normalization ------------------------------------------------

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| dim_err("layer_norm", &xs, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("layer_norm", &xs, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(config_err("layer_norm", "eps must be positive"));
        }
        let rows = numel(&xs) / d;
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Cow::Owned(out),
            xs,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| dim_err("softmax", &shape, &[]))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Softmax { a }))
    }

    /// Softmax over the last axis of square `[..., n, n]` blocks where row
    /// `i` only sees columns `j <= i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(dim_err("causal_softmax", &shape, &[]));
        }
        let n = shape[r - 1];
        let mut out = self.value(a).to_vec();
        for (ri, row) in out.chunks_exact_mut(n).enumerate() {
            let i = ri % n;
            let (live, masked) = row.split_at_mut(i + 1);
            let max = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in live.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in live.iter_mut() {
                *v /= sum;
            }
            masked.iter_mut().for_each(|v| *v = 0.0);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Softmax { a }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| dim_err("log_softmax", &shape, &[]))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::LogSoftmax { a }))
    }

    /// Scales each last-axis row to unit length; rows shorter than `eps`
    /// are divided by `eps` instead.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("normalize", &shape, &[]))?;
        if eps <= 0.0 {
            return Err(config_err("normalize", "eps must be positive"));
        }
        let mut out = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            let denom = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Normalize { a, eps, norms }))
    }

    // ----- convolutions -------------------------------------------------

    /// Zero-padded, unit-stride convolution along the frame axis of
    /// `x[..., T, L, c_in]` with `kernel[k, c_in, c_out]`. Each of the `L`
    /// positions is filtered independently.
    pub fn conv1d_temporal(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let r = xs.len();
        if r < 3 || ks.len() != 3 || ks[1] != xs[r - 1] {
            return Err(dim_err("conv1d_temporal", &xs, &ks));
        }
        if ks[0].is_multiple_of(2) {
            return Err(config_err("conv1d_temporal", format!("kernel size {} is even", ks[0])));
        }
        if self.shape(bias) != [ks[2]] {
            return Err(dim_err("conv1d_temporal bias", self.shape(bias), &[ks[2]]));
        }
        let dims = ConvDims {
            batch: numel(&xs[..r - 3]),
            outer: xs[r - 3],
            inner: xs[r - 2],
            cin: ks[1],
            cout: ks[2],
            ksize: ks[0],
        };
        let out = conv1d_forward(&dims, self.value(x), self.value(kernel), self.value(bias));
        let mut shape = xs;
        shape[r - 1] = dims.cout;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::Conv1d {
                x,
                kernel,
                bias,
                dims,
            },
        ))
    }

    /// Zero-padded, unit-stride 2D convolution of `x[..., h, w, c_in]` with
    /// `kernel[k, k, c_in, c_out]`, applied independently per leading index.
    pub fn conv2d_spatial(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        let r = xs.len();
        if r < 3 || ks.len() != 4 || ks[0] != ks[1] || ks[2] != xs[r - 1] {
            return Err(dim_err("conv2d_spatial", &xs, &ks));
        }
        if ks[0].is_multiple_of(2) {
            return Err(config_err("conv2d_spatial", format!("kernel size {} is even", ks[0])));
        }
        if self.shape(bias) != [ks[3]] {
            return Err(dim_err("conv2d_spatial bias", self.shape(bias), &[ks[3]]));
        }
        let dims = ConvDims {
            batch: numel(&xs[..r - 3]),
            outer: xs[r - 3],
            inner: xs[r - 2],
            cin: ks[2],
            cout: ks[3],
            ksize: ks[0],
        };
        let out = conv2d_forward(&dims, self.value(x), self.value(kernel), self.value(bias));
        let mut shape = xs;
        shape[r - 1] = dims.cout;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            },
        ))
    }

    /// Differences along `axis`: `out[t] = a[t] - a[t-1]` for `t >= 1` and
    /// `out[0] = 0`.
    pub fn temporal_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("temporal_diff", &shape, &[axis]));
        }
        let (outer, steps, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            let base = o * steps * inner;
            for t in 1..steps {
                let cur = base + t * inner;
                let prev = cur - inner;
                for j in 0..inner {
                    out[cur + j] = av[cur + j] - av[prev + j];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::TemporalDiff {
                a,
                outer,
                steps,
                inner,
            },
        ))
    }

    // ----- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() || shape.contains(&0) {
            return Err(dim_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(out), shape, rg, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&x| x < shape.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(dim_err("permute", &shape, axes));
        }
        let (out, out_shape) = permute_data(self.value(a), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Cow::Owned(out),
            out_shape,
            rg,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
        ))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err("slice", &shape, &[axis, start, len]));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&av[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Cow::Owned(out),
            oshape,
            rg,
            Op::Slice {
                a,
                outer,
                len_in,
                start,
                inner,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
            lens.push((p, s[axis]));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &lens {
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            rg,
            Op::Concat {
                parts: lens,
                outer,
                inner,
            },
        ))
    }

    /// Gathers entries of the leading axis: `a[n, ...]` to `a[idx.len(), ...]`.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(dim_err("index_select", &shape, idx));
        }
        let row = numel(&shape[1..]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&av[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Cow::Owned(out),
            oshape,
            rg,
            Op::IndexSelect {
                a,
                idx: idx.to_vec(),
                row,
            },
        ))
    }

    // ----- reductions ---------------------------------------------------

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("mean_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let av = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for t in 0..n {
                let src = &av[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= n as f64);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Cow::Owned(out),
            oshape,
            rg,
            Op::MeanAxis { a, outer, n, inner },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(vec![s]), Vec::new(), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(vec![s]), Vec::new(), rg, Op::Mean { a })
    }

    /// `Σ w_i · a_i` against fixed weights.
    pub fn dot_const(&mut self, a: Var, w: Vec<f64>) -> Result<Var> {
        if w.len() != self.value(a).len() {
            return Err(dim_err("dot_const", self.shape(a), &[w.len()]));
        }
        let s = self.value(a).iter().zip(&w).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Cow::Owned(vec![s]), Vec::new(), rg, Op::DotConst { a, w }))
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Linear { x, w, b } => {
                let ws = &self.nodes[w.0].shape;
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n;
                if rg(*x) {
                    let dx = acc(grads, *x, len(*x));
                    gemm_nt_acc(rows, n, k, g, val(*w), dx);
                }
                if rg(*w) {
                    let dw = acc(grads, *w, k * n);
                    gemm_tn_acc(rows, k, n, val(*x), g, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let db = acc(grads, *b, n);
                        sum_rows_acc(rows, n, g, db);
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                offsets,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let bv = val(*b);
                    let da = acc(grads, *a, len(*a));
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm_nt_acc(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[ob * k * n..(ob + 1) * k * n],
                            &mut da[oa * m * k..(oa + 1) * m * k],
                        );
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let db = acc(grads, *b, len(*b));
                    for (bi, &(oa, ob)) in offsets.iter().enumerate() {
                        gemm_tn_acc(
                            m,
                            k,
                            n,
                            &av[oa * m * k..(oa + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[ob * k * n..(ob + 1) * k * n],
                        );
                    }
                }
            }
            Op::MatMulNt {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let bv = val(*b);
                    let da = acc(grads, *a, len(*a));
                    for bi in 0..*batch {
                        gemm_acc(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[bi * n * k..(bi + 1) * n * k],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let db = acc(grads, *b, len(*b));
                    for bi in 0..*batch {
                        gemm_tn_acc(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &av[bi * m * k..(bi + 1) * m * k],
                            &mut db[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if rg(*b) {
                    let nb = len(*b);
                    let db = acc(grads, *b, nb);
                    sum_rows_acc(g.len() / nb, nb, g, db);
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if rg(*b) {
                    let db = acc(grads, *b, g.len());
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = val(*b);
                    let da = acc(grads, *a, g.len());
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let db = acc(grads, *b, g.len());
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::Scale { a, c } => {
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x * c);
                }
            }
            Op::MulScalar { a, s } => {
                let sv = val(*s)[0];
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x * sv);
                }
                if rg(*s) {
                    let dot: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                    acc(grads, *s, 1)[0] += dot;
                }
            }
            Op::Recip { a } => {
                let y = &node.value;
                let da = acc(grads, *a, g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d -= x * y * y;
                }
            }
            Op::Exp { a } => {
                let y = &node.value;
                let da = acc(grads, *a, g.len());
                for ((d, x), y) in da.iter_mut().zip(g).zip(y.iter()) {
                    *d += x * y;
                }
            }
            Op::ClampMin { a, min } => {
                let av = val(*a);
                let da = acc(grads, *a, g.len());
                for ((d, x), v) in da.iter_mut().zip(g).zip(av) {
                    if *v > *min {
                        *d += x;
                    }
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                let da = acc(grads, *a, g.len());
                for ((d, x), v) in da.iter_mut().zip(g).zip(av) {
                    *d += x * kernels::gelu_grad(*v);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = len(*gamma);
                let rows = g.len() / d;
                let gv = val(*gamma);
                if rg(*x) {
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if rg(*gamma) {
                    let dg = acc(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if rg(*beta) {
                    let db = acc(grads, *beta, d);
                    sum_rows_acc(rows, d, g, db);
                }
            }
            Op::Softmax { a } => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let da = acc(grads, *a, g.len());
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let n = *node.shape.last().unwrap();
                let y = &node.value;
                let da = acc(grads, *a, g.len());
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Normalize { a, eps, norms } => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                let da = acc(grads, *a, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let dr = &mut da[r * d..(r + 1) * d];
                    if norm > *eps {
                        let yr = &y[r * d..(r + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..d {
                            dr[j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dr[j] += gr[j] / eps;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dims,
            } => {
                let mut dx = rg(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len(*x)]));
                let mut dk = rg(*kernel)
                    .then(|| grads[kernel.0].take().unwrap_or_else(|| vec![0.0; len(*kernel)]));
                conv1d_backward(
                    dims,
                    g,
                    val(*x),
                    val(*kernel),
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[kernel.0] = Some(dk);
                }
                if rg(*bias) {
                    let db = acc(grads, *bias, dims.cout);
                    sum_rows_acc(g.len() / dims.cout, dims.cout, g, db);
                }
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                dims,
            } => {
                let mut dx = rg(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len(*x)]));
                let mut dk = rg(*kernel)
                    .then(|| grads[kernel.0].take().unwrap_or_else(|| vec![0.0; len(*kernel)]));
                conv2d_backward(
                    dims,
                    g,
                    val(*x),
                    val(*kernel),
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dk) = dk {
                    grads[kernel.0] = Some(dk);
                }
                if rg(*bias) {
                    let db = acc(grads, *bias, dims.cout);
                    sum_rows_acc(g.len() / dims.cout, dims.cout, g, db);
                }
            }
            Op::TemporalDiff {
                a,
                outer,
                steps,
                inner,
            } => {
                let da = acc(grads, *a, g.len());
                for o in 0..*outer {
                    let base = o * steps * inner;
                    for t in 1..*steps {
                        let cur = base + t * inner;
                        let prev = cur - inner;
                        for j in 0..*inner {
                            da[cur + j] += g[cur + j];
                            da[prev + j] -= g[cur + j];
                        }
                    }
                }
            }
            Op::Permute { a, axes } => {
                let inv = inverse_axes(axes);
                let (back, _) = permute_data(g, &node.shape, &inv);
                let da = acc(grads, *a, g.len());
                da.iter_mut().zip(&back).for_each(|(d, x)| *d += x);
            }
            Op::Reshape { a } => {
                let da = acc(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Slice {
                a,
                outer,
                len_in,
                start,
                inner,
            } => {
                let da = acc(grads, *a, outer * len_in * inner);
                let chunk = g.len() / outer;
                for o in 0..*outer {
                    let base = (o * len_in + start) * inner;
                    let src = &g[o * chunk..(o + 1) * chunk];
                    da[base..base + chunk]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, plen) in parts {
                    if rg(p) {
                        let dp = acc(grads, p, outer * plen * inner);
                        for o in 0..*outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            dp[dst..dst + plen * inner]
                                .iter_mut()
                                .zip(&g[src..src + plen * inner])
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += plen;
                }
            }
            Op::IndexSelect { a, idx, row } => {
                let da = acc(grads, *a, len(*a));
                for (k, &i) in idx.iter().enumerate() {
                    da[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::MeanAxis { a, outer, n, inner } => {
                let da = acc(grads, *a, outer * n * inner);
                let scale = 1.0 / *n as f64;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for t in 0..*n {
                        let dst = &mut da[(o * n + t) * inner..(o * n + t + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, x)| *d += x * scale);
                    }
                }
            }
            Op::Sum { a } => {
                let da = acc(grads, *a, len(*a));
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let n = len(*a);
                let da = acc(grads, *a, n);
                let v = g[0] / n as f64;
                da.iter_mut().for_each(|d| *d += v);
            }
            Op::DotConst { a, w } => {
                let da = acc(grads, *a, w.len());
                da.iter_mut().zip(w).for_each(|(d, x)| *d += g[0] * x);
            }
        }
    }
}

fn conv1d_forward(d: &ConvDims, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (steps, tokens, cin, cout, ks) = (d.outer, d.inner, d.cin, d.cout, d.ksize);
    let pad = ks / 2;
    let xslab = tokens * cin;
    let oslab = tokens * cout;
    let mut out = vec![0.0; d.batch * steps * oslab];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    for b in 0..d.batch {
        for t in 0..steps {
            let o = &mut out[(b * steps + t) * oslab..(b * steps + t + 1) * oslab];
            for j in 0..ks {
                let Some(ts) = (t + j).checked_sub(pad).filter(|&ts| ts < steps) else {
                    continue;
                };
                let xs = &x[(b * steps + ts) * xslab..(b * steps + ts + 1) * xslab];
                gemm_acc(tokens, cin, cout, xs, &k[j * cin * cout..(j + 1) * cin * cout], o);
            }
        }
    }
    out
}

fn conv1d_backward(
    d: &ConvDims,
    g: &[f64],
    x: &[f64],
    k: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (steps, tokens, cin, cout, ks) = (d.outer, d.inner, d.cin, d.cout, d.ksize);
    let pad = ks / 2;
    let xslab = tokens * cin;
    let oslab = tokens * cout;
    let tap = cin * cout;
    // Transposed taps, for dx = g · Kᵀ.
    let kt: Vec<Vec<f64>> = (0..ks)
        .map(|j| kernels::transpose(cin, cout, &k[j * tap..(j + 1) * tap]))
        .collect();
    for b in 0..d.batch {
        for t in 0..steps {
            let go = &g[(b * steps + t) * oslab..(b * steps + t + 1) * oslab];
            for j in 0..ks {
                let Some(ts) = (t + j).checked_sub(pad).filter(|&ts| ts < steps) else {
                    continue;
                };
                let xr = (b * steps + ts) * xslab..(b * steps + ts + 1) * xslab;
                if let Some(dx) = dx.as_deref_mut() {
                    gemm_acc(tokens, cout, cin, go, &kt[j], &mut dx[xr.clone()]);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    gemm_tn_acc(tokens, cin, cout, &x[xr], go, &mut dk[j * tap..(j + 1) * tap]);
                }
            }
        }
    }
}

fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w, cin, cout, ks) = (d.outer, d.inner, d.cin, d.cout, d.ksize);
    let pad = ks / 2;
    let tap = cin * cout;
    let mut out = vec![0.0; d.batch * h * w * cout];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    for b in 0..d.batch {
        for y in 0..h {
            for dy in 0..ks {
                let Some(ys) = (y + dy).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for dxo in 0..ks {
                    // Output columns whose source column x + dxo - pad lies inside.
                    let start = pad.saturating_sub(dxo);
                    let end = (w + pad).saturating_sub(dxo).min(w);
                    if start >= end {
                        continue;
                    }
                    let run = end - start;
                    let src_col = start + dxo - pad;
                    let xs = ((b * h + ys) * w + src_col) * cin;
                    let os = ((b * h + y) * w + start) * cout;
                    let kk = (dy * ks + dxo) * tap;
                    gemm_acc(
                        run,
                        cin,
                        cout,
                        &x[xs..xs + run * cin],
                        &k[kk..kk + tap],
                        &mut out[os..os + run * cout],
                    );
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    d: &ConvDims,
    g: &[f64],
    x: &[f64],
    k: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (h, w, cin, cout, ks) = (d.outer, d.inner, d.cin, d.cout, d.ksize);
    let pad = ks / 2;
    let tap = cin * cout;
    let kt: Vec<Vec<f64>> = (0..ks * ks)
        .map(|j| kernels::transpose(cin, cout, &k[j * tap..(j + 1) * tap]))
        .collect();
    for b in 0..d.batch {
        for y in 0..h {
            for dy in 0..ks {
                let Some(ys) = (y + dy).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for dxo in 0..ks {
                    let start = pad.saturating_sub(dxo);
                    let end = (w + pad).saturating_sub(dxo).min(w);
                    if start >= end {
                        continue;
                    }
                    let run = end - start;
                    let src_col = start + dxo - pad;
                    let xs = ((b * h + ys) * w + src_col) * cin;
                    let os = ((b * h + y) * w + start) * cout;
                    let j = dy * ks + dxo;
                    let go = &g[os..os + run * cout];
                    if let Some(dx) = dx.as_deref_mut() {
                        gemm_acc(run, cout, cin, go, &kt[j], &mut dx[xs..xs + run * cin]);
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        gemm_tn_acc(
                            run,
                            cin,
                            cout,
                            &x[xs..xs + run * cin],
                            go,
                            &mut dk[j * tap..(j + 1) * tap],
                        );
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_leading_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([3, 2, 2], |i| (i % 5) as f64));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2, 2]);
        // block (1, 2): a[1] · b[2]
        let a1 = [4.0, 5.0, 6.0, 7.0];
        let b2 = [3.0, 4.0, 0.0, 1.0];
        let want = [
            a1[0] * b2[0] + a1[1] * b2[2],
            a1[0] * b2[1] + a1[1] * b2[3],
            a1[2] * b2[0] + a1[3] * b2[2],
            a1[2] * b2[1] + a1[3] * b2[3],
        ];
        let v = tape.value(c);
        assert_eq!(&v[(3 + 2) * 4..(3 + 2) * 4 + 4], &want);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let p = tape.variable(t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(p).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn permute_roundtrip_and_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        let got = tape.tensor(p);
        assert_eq!(got.at(&[3, 1, 2]), (12 + 2 * 4 + 3) as f64);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn softmax_reference_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(y).unwrap();
        assert!((tape.value(s)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(s)[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_exactly() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 3], |i| i as f64 * 0.3));
        let s = tape.causal_softmax(x).unwrap();
        let v = tape.value(s);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 3.0));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_keeps_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y), &[1.0, -1.0]);
    }

    #[test]
    fn conv_even_kernel_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([4, 2, 3]));
        let k = tape.constant(Tensor::zeros([2, 3, 3]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            tape.conv1d_temporal(x, k, b),
            Err(TensorError::Config { .. })
        ));
        let x2 = tape.constant(Tensor::zeros([1, 3, 3, 2]));
        let k2 = tape.constant(Tensor::zeros([2, 2, 2, 2]));
        let b2 = tape.constant(Tensor::zeros([2]));
        assert!(matches!(
            tape.conv2d_spatial(x2, k2, b2),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let (k, c) = (3, 2);
        let mut kernel = Tensor::zeros([k, c, c]);
        for i in 0..c {
            kernel.data_mut()[(k / 2) * c * c + i * c + i] = 1.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([4, 5, c], |i| (i as f64).sin()));
        let kv = tape.constant(kernel);
        let b = tape.constant(Tensor::zeros([c]));
        let y = tape.conv1d_temporal(x, kv, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv1d_averaging_kernel_keeps_constant_interior() {
        let (k, c) = (3, 2);
        let mut kernel = Tensor::zeros([k, c, c]);
        for j in 0..k {
            for i in 0..c {
                kernel.data_mut()[j * c * c + i * c + i] = 1.0 / 3.0;
            }
        }
        let mut tape = Tape::new();
        // constant over time, varying over tokens and channels
        let x = tape.constant(Tensor::from_fn([5, 2, c], |i| (i % (2 * c)) as f64 + 1.0));
        let kv = tape.constant(kernel);
        let b = tape.constant(Tensor::zeros([c]));
        let yv = tape.conv1d_temporal(x, kv, b).unwrap();
        let y = tape.tensor(yv);
        let xt = tape.tensor(x);
        for tt in 1..4 {
            for l in 0..2 {
                for ch in 0..c {
                    let (a, b) = (y.at(&[tt, l, ch]), xt.at(&[tt, l, ch]));
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_unit_kernel_identity_and_zero_input() {
        let c = 2;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 3, c], |i| i as f64 * 0.1));
        let mut kernel = Tensor::zeros([1, 1, c, c]);
        kernel.data_mut()[0] = 1.0;
        kernel.data_mut()[3] = 1.0;
        let k = tape.constant(kernel);
        let b = tape.constant(Tensor::zeros([c]));
        let y = tape.conv2d_spatial(x, k, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let z = tape.constant(Tensor::zeros([2, 3, 3, c]));
        let k3 = tape.constant(Tensor::from_fn([3, 3, c, c], |i| i as f64));
        let y = tape.conv2d_spatial(z, k3, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn temporal_diff_zeroes_first_step() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 4.0, 4.0, 3.0, 7.0]));
        let d = tape.temporal_diff(x, 0).unwrap();
        assert_eq!(tape.value(d), &[0.0, 0.0, 3.0, 2.0, -1.0, 3.0]);
    }

    #[test]
    fn slice_concat_inverse() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 5, 3], |i| i as f64));
        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 4).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }

    #[test]
    fn frozen_param_leaves_are_constants() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", Tensor::full([2], 1.0), false)
            .unwrap();
        let v = store
            .insert("v", Tensor::full([2], 2.0), true)
            .unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let vv = tape.param(&store, v);
        let prod = tape.mul(wv, vv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(wv).is_none());
        assert_eq!(grads.wrt(vv).unwrap(), &[1.0, 1.0]);
        let ids: Vec<_> = grads.param_grads().map(|(id, _)| id).collect();
        assert_eq!(ids, vec![v]);
    }
}
