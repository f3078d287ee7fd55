//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations in execution order; since every
//! node's parents precede it, a single reverse sweep over the record is a
//! reverse-topological traversal that visits each node exactly once.
//! Parameters enter as leaves bound to a [`ParamStore`] slot and collect
//! their gradients additively (zeroing between optimizer steps is explicit).

use crate::error::{Error, Result};
use crate::kan::{self, KanMeta, KanSaved};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{fl, silu, silu_deriv, sigmoid, Scalar};
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU32, Ordering};

static TAPE_COUNTER: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Debug, Clone, Copy)]
enum AddKind {
    Same,
    Row,
    Scalar,
}

/// Flattened leading-batch matmul plan: per output batch slice, which input
/// batch slices feed it.
#[derive(Debug, Clone)]
struct MatmulSpec {
    m: usize,
    k: usize,
    n: usize,
    a_sel: Vec<usize>,
    b_sel: Vec<usize>,
}

enum Op<F: Scalar> {
    Leaf,
    Add { a: usize, b: usize, kind: AddKind },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    Matmul { a: usize, b: usize, spec: MatmulSpec },
    Transpose { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<F>, rstd: Vec<F> },
    Silu { a: usize },
    Relu { a: usize },
    SumAll { a: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    Kan { x: usize, coeffs: usize, w_base: usize, w_spline: usize, meta: KanMeta, saved: KanSaved<F> },
    CrossEntropyMean { logits: usize, targets: Vec<u32>, pad: u32, count: usize },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
}

/// Ordered record of primitive operations with enough context to run
/// reverse accumulation.
pub struct Tape<F: Scalar> {
    id: u32,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    guard_nonfinite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            guard_nonfinite: false,
        }
    }

    /// Enable the NaN/Inf guard: every op output is checked as it is
    /// recorded. Off by default.
    pub fn with_guard(mut self, on: bool) -> Self {
        self.guard_nonfinite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<F> {
        debug_assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx as usize]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, param: Option<ParamId>) -> Result<Var> {
        if self.guard_nonfinite && !value.all_finite() {
            return Err(Error::NonFinite {
                site: format!("tape node {}", self.nodes.len()),
                detail: format!("op output shape {:?}", value.shape()),
            });
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, param });
        Ok(Var { tape: self.id, idx })
    }

    /// Record a constant (no gradient is propagated past it into anything).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var { tape: self.id, idx }
    }

    /// Record a leaf bound to a parameter slot; `accumulate_param_grads`
    /// adds this leaf's gradient back into the store.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        Var { tape: self.id, idx }
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    /// `a + b`; `b` may be a matching-shape tensor, a last-dim row vector,
    /// or a scalar. Broadcasting is limited to those forms.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let kind = if sa == sb {
            AddKind::Same
        } else if sb.len() == 1 && !sa.is_empty() && *sa.last().unwrap() == sb[0] {
            AddKind::Row
        } else if sb.iter().product::<usize>() == 1 {
            AddKind::Scalar
        } else {
            return Err(Error::dim("add", &sa, &sb));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let data = match kind {
            AddKind::Same => av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x + y)
                .collect(),
            AddKind::Row => {
                let d = sb[0];
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + bv.data()[i % d])
                    .collect()
            }
            AddKind::Scalar => {
                let y = bv.data()[0];
                av.data().iter().map(|&x| x + y).collect()
            }
        };
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Add { a: a.idx as usize, b: b.idx as usize, kind }, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dim("sub", &sa, &sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Sub { a: a.idx as usize, b: b.idx as usize }, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::dim("mul", &sa, &sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Mul { a: a.idx as usize, b: b.idx as usize }, None)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a: a.idx as usize, c }, None)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(silu);
        self.push(value, Op::Silu { a: a.idx as usize }, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.fmax(F::ZERO));
        self.push(value, Op::Relu { a: a.idx as usize }, None)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.idx as usize }, None)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Contract("mean over empty tensor".into()));
        }
        let s = self.sum_all(a)?;
        self.scale(s, F::ONE / fl(n as f64))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let av = self.value(a);
        let mut data = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        self.push(value, Op::Transpose { a: a.idx as usize }, None)
    }

    // ── Matmul with leading-batch broadcast ─────────────────────────────

    /// Matrix product over the trailing two dims; leading batch dims
    /// broadcast against each other (equal, 1, or absent). No other
    /// implicit rank promotion.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ab = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ab.len().max(bb.len());
        let mut out_batch = vec![0usize; rank];
        for i in 0..rank {
            let da = if i + ab.len() >= rank { ab[i + ab.len() - rank] } else { 1 };
            let db = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
            if da != db && da != 1 && db != 1 {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            out_batch[i] = da.max(db);
        }
        let nbatch: usize = out_batch.iter().product::<usize>().max(1);
        // Per output batch slice, the flat slice index of each operand.
        let flat_sel = |dims: &[usize]| -> Vec<usize> {
            (0..nbatch)
                .map(|fi| {
                    let mut rem = fi;
                    let mut coords = vec![0usize; rank];
                    for d in (0..rank).rev() {
                        coords[d] = rem % out_batch[d];
                        rem /= out_batch[d];
                    }
                    let mut off = 0usize;
                    let mut stride = 1usize;
                    for d in (0..dims.len()).rev() {
                        let od = d + rank - dims.len();
                        let c = if dims[d] == 1 { 0 } else { coords[od] };
                        off += c * stride;
                        stride *= dims[d];
                    }
                    off
                })
                .collect()
        };
        let spec = MatmulSpec {
            m,
            k: ka,
            n,
            a_sel: flat_sel(ab),
            b_sel: flat_sel(bb),
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![F::ZERO; nbatch * m * n];
        for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
            let ad = &av.data()[spec.a_sel[bi] * m * ka..(spec.a_sel[bi] + 1) * m * ka];
            let bd = &bv.data()[spec.b_sel[bi] * ka * n..(spec.b_sel[bi] + 1) * ka * n];
            matmul_kernel(ad, bd, chunk, m, ka, n);
        }
        let mut shape = out_batch;
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Matmul { a: a.idx as usize, b: b.idx as usize, spec }, None)
    }

    // ── Fused neural ops ────────────────────────────────────────────────

    /// Softmax over the last dimension, max-subtracted for stability.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::Contract("softmax requires at least one dimension".into())
        })?;
        if d == 0 {
            return Err(Error::dim("softmax_lastdim", &shape, &[0]));
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().fold(row[0], |m, &v| m.fmax(v));
            let mut sum = F::ZERO;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Softmax { a: a.idx as usize }, None)
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Contract("layer_norm requires at least one dimension".into()))?;
        let sg = self.shape(gain).to_vec();
        let sb = self.shape(bias).to_vec();
        if sg != [d] {
            return Err(Error::dim("layer_norm gain", &shape, &sg));
        }
        if sb != [d] {
            return Err(Error::dim("layer_norm bias", &shape, &sb));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / d;
        let mut out = vec![F::ZERO; xs.len()];
        let mut means = vec![F::ZERO; rows];
        let mut rstds = vec![F::ZERO; rows];
        let inv_d = F::ONE / fl(d as f64);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean: F = row.iter().copied().sum::<F>() * inv_d;
            let mut var = F::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = F::ONE / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x: x.idx as usize,
                gain: gain.idx as usize,
                bias: bias.idx as usize,
                mean: means,
                rstd: rstds,
            },
            None,
        )
    }

    /// Row gather from a rank-2 tensor; also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        for &i in idx {
            if i >= r {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {r} rows"
                )));
            }
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        self.push(value, Op::GatherRows { a: a.idx as usize, idx: idx.to_vec() }, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows over no parts".into()));
        }
        let (_, c0) = self.value(parts[0]).dims2()?;
        let mut rows = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != c0 {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c0], data)?;
        self.push(
            value,
            Op::ConcatRows { parts: parts.iter().map(|v| v.idx as usize).collect() },
            None,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols over no parts".into()));
        }
        let (r0, _) = self.value(parts[0]).dims2()?;
        let mut cols = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != r0 {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            cols += c;
        }
        let mut data = vec![F::ZERO; r0 * cols];
        let mut at = 0usize;
        for &p in parts {
            let (_, c) = self.value(p).dims2()?;
            let pd = self.value(p).data();
            for r in 0..r0 {
                data[r * cols + at..r * cols + at + c].copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            at += c;
        }
        let value = Tensor::new(vec![r0, cols], data)?;
        self.push(
            value,
            Op::ConcatCols { parts: parts.iter().map(|v| v.idx as usize).collect() },
            None,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let av = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push(value, Op::SliceCols { a: a.idx as usize, start, len }, None)
    }

    /// Fused KAN layer application; see [`crate::kan`] for the math.
    pub fn kan(
        &mut self,
        x: Var,
        coeffs: Var,
        w_base: Var,
        w_spline: Var,
        meta: KanMeta,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if *sx.last().unwrap_or(&0) != meta.n_in {
            return Err(Error::dim_ctx(
                "kan_forward",
                &sx,
                &[meta.n_in],
                "last dimension must equal the layer input width".into(),
            ));
        }
        let (value, saved) = kan::op_forward(
            self.value(x),
            self.value(coeffs).data(),
            self.value(w_base).data(),
            self.value(w_spline).data(),
            &meta,
        )?;
        self.push(
            value,
            Op::Kan {
                x: x.idx as usize,
                coeffs: coeffs.idx as usize,
                w_base: w_base.idx as usize,
                w_spline: w_spline.idx as usize,
                meta,
                saved,
            },
            None,
        )
    }

    /// Mean token NLL over non-pad positions: `-log softmax(logits)[target]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[u32], pad: u32) -> Result<Var> {
        let (t, v) = self.value(logits).dims2()?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy_mean", &[t, v], &[targets.len()]));
        }
        let mut count = 0usize;
        for &id in targets {
            if id == pad {
                continue;
            }
            if id as usize >= v {
                return Err(Error::Contract(format!(
                    "target id {id} out of range for vocabulary of {v}"
                )));
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(
                "cross_entropy_mean over an all-pad target".into(),
            ));
        }
        let lv = self.value(logits).data();
        let mut total = F::ZERO;
        for (r, &id) in targets.iter().enumerate() {
            if id == pad {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().fold(row[0], |m, &x| m.fmax(x));
            let mut sum = F::ZERO;
            for &x in row {
                sum += (x - mx).exp();
            }
            let lse = sum.ln() + mx;
            total += lse - row[id as usize];
        }
        let loss = total / fl(count as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean {
                logits: logits.idx as usize,
                targets: targets.to_vec(),
                pad,
                count,
            },
            None,
        )
    }

    // ── Reverse accumulation ────────────────────────────────────────────

    /// Run reverse accumulation from a scalar loss. Gradients of all
    /// ancestors become available via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        debug_assert_eq!(loss.tape, self.id, "loss from another tape");
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.idx as usize] = Some(vec![F::ONE]);
        for i in (0..=loss.idx as usize).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<F> {
        if self.grads[idx].is_none() {
            let numel = self.nodes[idx].value.numel();
            self.grads[idx] = Some(vec![F::ZERO; numel]);
        }
        self.grads[idx].as_mut().unwrap()
    }

    fn propagate(&mut self, i: usize, g: &[F]) -> Result<()> {
        // Ops only reference earlier nodes, so split borrows via indices.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b, kind } => {
                {
                    let ga = self.grad_buf(*a);
                    for (dst, &src) in ga.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                let gb = self.grad_buf(*b);
                match kind {
                    AddKind::Same => {
                        for (dst, &src) in gb.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                    AddKind::Row => {
                        let d = gb.len();
                        for (j, &src) in g.iter().enumerate() {
                            gb[j % d] += src;
                        }
                    }
                    AddKind::Scalar => {
                        let s: F = g.iter().copied().sum();
                        gb[0] += s;
                    }
                }
            }
            Op::Sub { a, b } => {
                {
                    let ga = self.grad_buf(*a);
                    for (dst, &src) in ga.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                let gb = self.grad_buf(*b);
                for (dst, &src) in gb.iter_mut().zip(g) {
                    *dst -= src;
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data().to_vec();
                let bv = self.nodes[*b].value.data().to_vec();
                {
                    let ga = self.grad_buf(*a);
                    for ((dst, &src), &y) in ga.iter_mut().zip(g).zip(&bv) {
                        *dst += src * y;
                    }
                }
                let gb = self.grad_buf(*b);
                for ((dst, &src), &x) in gb.iter_mut().zip(g).zip(&av) {
                    *dst += src * x;
                }
            }
            Op::Scale { a, c } => {
                let ga = self.grad_buf(*a);
                for (dst, &src) in ga.iter_mut().zip(g) {
                    *dst += src * *c;
                }
            }
            Op::Matmul { a, b, spec } => {
                let (m, k, n) = (spec.m, spec.k, spec.n);
                let av = self.nodes[*a].value.data().to_vec();
                let bv = self.nodes[*b].value.data().to_vec();
                {
                    let ga = self.grad_buf(*a);
                    for (bi, gc) in g.chunks(m * n).enumerate() {
                        let bd = &bv[spec.b_sel[bi] * k * n..(spec.b_sel[bi] + 1) * k * n];
                        let gslice = &mut ga[spec.a_sel[bi] * m * k..(spec.a_sel[bi] + 1) * m * k];
                        // dA += g . B^T
                        for i2 in 0..m {
                            for p in 0..k {
                                let mut s = F::ZERO;
                                for j in 0..n {
                                    s += gc[i2 * n + j] * bd[p * n + j];
                                }
                                gslice[i2 * k + p] += s;
                            }
                        }
                    }
                }
                let gb = self.grad_buf(*b);
                for (bi, gc) in g.chunks(m * n).enumerate() {
                    let ad = &av[spec.a_sel[bi] * m * k..(spec.a_sel[bi] + 1) * m * k];
                    let gslice = &mut gb[spec.b_sel[bi] * k * n..(spec.b_sel[bi] + 1) * k * n];
                    // dB += A^T . g
                    for i2 in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i2 * k + p];
                            if a_ip == F::ZERO {
                                continue;
                            }
                            let grow = &gc[i2 * n..(i2 + 1) * n];
                            let brow = &mut gslice[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += a_ip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (c, r) = self.nodes[i].value.dims2()?;
                let ga = self.grad_buf(*a);
                for j in 0..c {
                    for i2 in 0..r {
                        ga[i2 * c + j] += g[j * r + i2];
                    }
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().unwrap();
                let ga = self.grad_buf(*a);
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = F::ZERO;
                    for j in 0..d {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..d {
                        ga[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = self.nodes[*x].value.data().to_vec();
                let gv = self.nodes[*gain].value.data().to_vec();
                let d = gv.len();
                let rows = xv.len() / d;
                let inv_d = F::ONE / fl(d as f64);
                {
                    let gx = self.grad_buf(*x);
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = F::ZERO;
                        let mut sum_dxhat_xhat = F::ZERO;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * gv[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * gv[j];
                            gx[r * d + j] += rs * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
                {
                    let gg = self.grad_buf(*gain);
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg[j] += gr[j] * (xr[j] - mean[r]) * rstd[r];
                        }
                    }
                }
                let gb = self.grad_buf(*bias);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            Op::Silu { a } => {
                let xv = self.nodes[*a].value.data().to_vec();
                let ga = self.grad_buf(*a);
                for (j, &src) in g.iter().enumerate() {
                    ga[j] += src * silu_deriv(xv[j]);
                }
            }
            Op::Relu { a } => {
                let xv = self.nodes[*a].value.data().to_vec();
                let ga = self.grad_buf(*a);
                for (j, &src) in g.iter().enumerate() {
                    if xv[j] > F::ZERO {
                        ga[j] += src;
                    }
                }
            }
            Op::SumAll { a } => {
                let s = g[0];
                let ga = self.grad_buf(*a);
                for dst in ga.iter_mut() {
                    *dst += s;
                }
            }
            Op::GatherRows { a, idx } => {
                let c = self.nodes[i].value.shape()[1];
                let ga = self.grad_buf(*a);
                for (r, &src_row) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src_row * c + j] += g[r * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut at = 0usize;
                for &p in parts {
                    let numel = self.nodes[p].value.numel();
                    let gp = self.grad_buf(p);
                    for j in 0..numel {
                        gp[j] += g[at + j];
                    }
                    at += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let cols = self.nodes[i].value.shape()[1];
                let rows = self.nodes[i].value.shape()[0];
                let mut at = 0usize;
                for &p in parts {
                    let c = self.nodes[p].value.shape()[1];
                    let gp = self.grad_buf(p);
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * cols + at + j];
                        }
                    }
                    at += c;
                }
            }
            Op::SliceCols { a, start, len } => {
                let c = self.nodes[*a].value.shape()[1];
                let rows = self.nodes[i].value.shape()[0];
                let ga = self.grad_buf(*a);
                for r in 0..rows {
                    for j in 0..*len {
                        ga[r * c + start + j] += g[r * len + j];
                    }
                }
            }
            Op::Kan { x, coeffs, w_base, w_spline, meta, saved } => {
                let xv = self.nodes[*x].value.data().to_vec();
                let cv = self.nodes[*coeffs].value.data().to_vec();
                let wbv = self.nodes[*w_base].value.data().to_vec();
                let wsv = self.nodes[*w_spline].value.data().to_vec();
                let mut gx = vec![F::ZERO; xv.len()];
                let mut gc = vec![F::ZERO; cv.len()];
                let mut gwb = vec![F::ZERO; wbv.len()];
                let mut gws = vec![F::ZERO; wsv.len()];
                kan::op_backward(
                    &xv, &cv, &wbv, &wsv, meta, saved, g, &mut gx, &mut gc, &mut gwb, &mut gws,
                );
                for (dst, src) in self.grad_buf(*x).iter_mut().zip(gx) {
                    *dst += src;
                }
                for (dst, src) in self.grad_buf(*coeffs).iter_mut().zip(gc) {
                    *dst += src;
                }
                for (dst, src) in self.grad_buf(*w_base).iter_mut().zip(gwb) {
                    *dst += src;
                }
                for (dst, src) in self.grad_buf(*w_spline).iter_mut().zip(gws) {
                    *dst += src;
                }
            }
            Op::CrossEntropyMean { logits, targets, pad, count } => {
                let lv = self.nodes[*logits].value.data().to_vec();
                let v = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / fl(*count as f64);
                let gl = self.grad_buf(*logits);
                for (r, &id) in targets.iter().enumerate() {
                    if id == *pad {
                        continue;
                    }
                    let row = &lv[r * v..(r + 1) * v];
                    let mx = row.iter().fold(row[0], |m, &x| m.fmax(x));
                    let mut sum = F::ZERO;
                    for &x in row {
                        sum += (x - mx).exp();
                    }
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / sum;
                        let indicator = if j == id as usize { F::ONE } else { F::ZERO };
                        gl[r * v + j] += scale * (p - indicator);
                    }
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }

    /// Gradient of the last `backward` call w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Result<Tensor<F>> {
        debug_assert_eq!(v.tape, self.id);
        let shape = self.nodes[v.idx as usize].value.shape().to_vec();
        match &self.grads.get(v.idx as usize) {
            Some(Some(g)) => Tensor::new(shape, g.clone()),
            _ => Ok(Tensor::zeros(&shape)),
        }
    }

    /// Add every parameter leaf's gradient into the store (gradients
    /// accumulate across calls; zero them explicitly between steps).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            if let Some(Some(g)) = self.grads.get(i) {
                let dst = store.grad_mut(id);
                for (d, &s) in dst.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// Numerically stable row softmax of a plain value (no recording).
    pub fn softmax_value(row: &[F]) -> Vec<F> {
        let mx = row.iter().fold(row[0], |m, &v| m.fmax(v));
        let mut out: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
        let sum: F = out.iter().copied().sum();
        for v in out.iter_mut() {
            *v = *v / sum;
        }
        out
    }
}

/// Row-major `C[m,n] += A[m,k] . B[k,n]` (C assumed zeroed).
fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in arow.iter().enumerate() {
            if a_ip == F::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
}

// Convenience for sigmoid import used in tests below.
#[allow(unused_imports)]
use crate::scalar::sigmoid as _sigmoid_used;

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::new();
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(t2(&[&[1., 0.], &[0., 1.]]));
        let a = t.constant(t2(&[&[1., 2.], &[3., 4.]]));
        let y = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(t2(&[&[1., 2.], &[3., 4.]]));
        let b = t.constant(t2(&[&[1.], &[1.]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 3]));
        let e = t.matmul(a, b).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_batch_dims() {
        let mut t = Tape::<f64>::new();
        // a: [2, 2, 3], b: [3, 2] broadcast over the leading dim.
        let a = t.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = t.constant(Tensor::from_fn(&[3, 2], |i| (i as f64) * 0.5));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        // First batch, first row: [0,1,2] . columns of b.
        let b0c0 = 0.0 * 0.0 + 1.0 * 1.0 + 2.0 * 2.0;
        assert!((t.value(y).data()[0] - b0c0).abs() < 1e-12);
        // Gradients flow through both operands.
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().numel(), 12);
        assert_eq!(t.grad(b).unwrap().numel(), 6);
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![0., 0., 0.]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x2 = t.constant(Tensor::new(vec![1, 2], vec![0., 2.0f64.ln()]).unwrap());
        let y2 = t.softmax_lastdim(x2).unwrap();
        assert!((t.value(y2).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((t.value(y2).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![1000., 1000.]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        assert!((t.value(y).data()[0] - 0.5).abs() < 1e-12);
        assert!((t.value(y).data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_lastdim() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[3, 0]));
        assert!(t.softmax_lastdim(x).is_err());
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut t = Tape::<f64>::new();
        let gain = t.constant(Tensor::full(&[2], 1.0));
        let bias = t.constant(Tensor::zeros(&[2]));
        // Constant vector maps to zero under eps regularization.
        let c = t.constant(Tensor::new(vec![1, 2], vec![5., 5.]).unwrap());
        let y = t.layer_norm(c, gain, bias, 1e-5).unwrap();
        for &v in t.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
        // [1, 3] standardizes to [-1, 1] as eps -> 0.
        let x = t.constant(Tensor::new(vec![1, 2], vec![1., 3.]).unwrap());
        let y2 = t.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((t.value(y2).data()[0] + 1.0).abs() < 1e-5);
        assert!((t.value(y2).data()[1] - 1.0).abs() < 1e-5);
        // gain = 0 makes the output the bias.
        let g0 = t.constant(Tensor::zeros(&[2]));
        let b7 = t.constant(Tensor::full(&[2], 7.0));
        let y3 = t.layer_norm(x, g0, b7, 1e-5).unwrap();
        assert_eq!(t.value(y3).data(), &[7.0, 7.0]);
    }

    #[test]
    fn layer_norm_rejects_lastdim_mismatch() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 4]));
        let gain = t.constant(Tensor::full(&[3], 1.0));
        let bias = t.constant(Tensor::zeros(&[3]));
        assert!(t.layer_norm(x, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        let y = t.scale(x, 2.0).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.7]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        for &g in t.grad(x).unwrap().data() {
            assert!(g.abs() < 1e-12, "softmax sum is constant 1");
        }
    }

    #[test]
    fn diamond_graph_sums_path_gradients() {
        // z = x*x + 3x uses x along two paths; dz/dx = 2x + 3.
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::scalar(1.7));
        let sq = t.mul(x, x).unwrap();
        let tripled = t.scale(x, 3.0).unwrap();
        let z = t.add(sq, tripled).unwrap();
        t.backward(z).unwrap();
        assert!((t.grad(x).unwrap().data()[0] - (2.0 * 1.7 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t2(&[&[1., 2.], &[3., 4.], &[5., 6.]]));
        let g = t.gather_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = t.sum_all(g).unwrap();
        t.backward(s).unwrap();
        // Row 2 was used twice, row 1 never.
        assert_eq!(t.grad(x).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn concat_and_slice_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(t2(&[&[1., 2.]]));
        let b = t.constant(t2(&[&[3., 4.], &[5., 6.]]));
        let rows = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(rows), &[3, 2]);
        let cols = t.concat_cols(&[b, b]).unwrap();
        assert_eq!(t.shape(cols), &[2, 4]);
        let sl = t.slice_cols(cols, 1, 2).unwrap();
        assert_eq!(t.value(sl).data(), &[4., 3., 6., 5.]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        // Uniform zero logits over V classes: loss = ln V.
        let mut t = Tape::<f64>::new();
        let v = 931usize;
        let logits = t.constant(Tensor::zeros(&[1, v]));
        let loss = t.cross_entropy_mean(logits, &[5], 0).unwrap();
        assert!((t.value(loss).data()[0] - (v as f64).ln()).abs() < 1e-9);

        // A +30 peak at the target drives the loss to ~0.
        let mut peaked = Tensor::zeros(&[1, 8]);
        peaked.data_mut()[3] = 30.0;
        let lp = t.constant(peaked);
        let l2 = t.cross_entropy_mean(lp, &[3], 0).unwrap();
        assert!(t.value(l2).data()[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_contract_errors() {
        let mut t = Tape::<f64>::new();
        let logits = t.constant(Tensor::zeros(&[2, 4]));
        // All-pad target.
        assert!(t.cross_entropy_mean(logits, &[0, 0], 0).is_err());
        // Out-of-range id.
        assert!(t.cross_entropy_mean(logits, &[1, 9], 0).is_err());
    }

    #[test]
    fn guard_mode_flags_nonfinite() {
        let mut t = Tape::<f64>::new().with_guard(true);
        let x = t.constant(Tensor::scalar(1e308));
        let doubled = t.scale(x, 1e308).unwrap_err();
        match doubled {
            Error::NonFinite { .. } => {}
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn add_broadcast_forms() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(t2(&[&[1., 2.], &[3., 4.]]));
        let row = t.constant(Tensor::new(vec![2], vec![10., 20.]).unwrap());
        let y = t.add(a, row).unwrap();
        assert_eq!(t.value(y).data(), &[11., 22., 13., 24.]);
        let sc = t.constant(Tensor::scalar(1.0));
        let z = t.add(a, sc).unwrap();
        assert_eq!(t.value(z).data(), &[2., 3., 4., 5.]);
        let s = t.sum_all(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(row).unwrap().data(), &[2., 2.]);
    }
}
